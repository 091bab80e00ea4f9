"""Window-to-text rendering, vocabulary, and pair encoding.

Rendering is deliberately plain: one clause per event in time order,
joined by " . ". Lab clauses carry the quantile band and a within-window
trend word so band motion is visible in the token stream. The vocabulary
is closed over the training split; anything else maps to ``[UNK]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cohort import (
    DIAGNOSIS_STAGE,
    LAB_OBSERVATION,
    MEDICATION_START,
    MEDICATION_STOP,
)
from .errors import ConfigError, CorpusError
from .ontology import Ontology, lab_band
from .supervision import Window

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
PAD_ID, UNK_ID, CLS_ID, SEP_ID = 0, 1, 2, 3
_SPECIALS = (PAD, UNK, CLS, SEP)

SEGMENT_SPECIAL, SEGMENT_EARLIER, SEGMENT_LATER = 0, 1, 2


def render_window(w: Window, ont: Ontology) -> str:
    """Render one window as clause text, events in time order."""
    clauses = []
    last_band: dict[str, int] = {}
    for e in w.events:
        if e.kind == DIAGNOSIS_STAGE:
            clauses.append(f"diagnosis {ont.stage(e.stage).display_phrase}")
        elif e.kind == LAB_OBSERVATION:
            lab_id, value = e.lab
            band = lab_band(ont.lab(lab_id), value)
            prev = last_band.get(lab_id)
            if prev is None or band == prev:
                trend = "steady"
            elif band > prev:
                trend = "rising"
            else:
                trend = "falling"
            last_band[lab_id] = band
            clauses.append(f"lab {lab_id} band {band} {trend}")
        elif e.kind == MEDICATION_START:
            clauses.append(f"medication {e.medication} start")
        elif e.kind == MEDICATION_STOP:
            clauses.append(f"medication {e.medication} stop")
        else:
            raise CorpusError(f"unknown event kind {e.kind!r}")
    return " . ".join(clauses)


def tokenize(text: str) -> list[str]:
    return text.split()


@dataclass(frozen=True)
class Vocab:
    """Whitespace-token vocabulary with four fixed specials at ids 0..3."""

    tokens: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if self.tokens[:4] != _SPECIALS:
            raise ConfigError(f"vocab must start with specials {_SPECIALS}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("vocab contains duplicate tokens")
        object.__setattr__(
            self, "_index", {tok: i for i, tok in enumerate(self.tokens)}
        )

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise ConfigError(f"token id {idx} out of range for vocab of {len(self)}")
        return self.tokens[idx]

    @classmethod
    def build(cls, texts: list[str]) -> "Vocab":
        """Closed vocabulary: specials plus sorted unique corpus tokens."""
        seen = set()
        for text in texts:
            seen.update(tokenize(text))
        seen.difference_update(_SPECIALS)
        return cls(tokens=_SPECIALS + tuple(sorted(seen)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise CorpusError(f"{path}: empty vocab file")
        return cls(tokens=tuple(lines))


@dataclass(frozen=True)
class TokenSequence:
    """One encoded pair: ``[CLS] earlier [SEP] later`` plus segment marks.

    ``segment_marks`` distinguishes special positions (0) from tokens of
    the earlier (1) and later (2) windows; the model pools each window's
    representation over its own marks. ``gap_days`` rides along for
    time-aware position modes.
    """

    ids: np.ndarray
    segment_marks: np.ndarray
    gap_days: float

    def __post_init__(self) -> None:
        if self.ids.shape != self.segment_marks.shape or self.ids.ndim != 1:
            raise CorpusError("ids and segment_marks must be 1-d and congruent")

    def __len__(self) -> int:
        return len(self.ids)


def _truncate_budget(n_a: int, n_b: int, budget: int) -> tuple[int, int]:
    """Split a token budget over two windows proportionally, keeping the
    head of each; any window with content keeps at least one token."""
    if n_a + n_b <= budget:
        return n_a, n_b
    if n_a == 0:
        return 0, min(n_b, budget)
    if n_b == 0:
        return min(n_a, budget), 0
    keep_a = max(1, min(n_a, round(budget * n_a / (n_a + n_b))))
    keep_b = budget - keep_a
    if keep_b < 1:
        keep_b = 1
        keep_a = budget - 1
    if keep_a > n_a:
        keep_b = min(n_b, keep_b + (keep_a - n_a))
        keep_a = n_a
    elif keep_b > n_b:
        keep_a = min(n_a, keep_a + (keep_b - n_b))
        keep_b = n_b
    return keep_a, keep_b


def encode_pair(
    earlier_text: str,
    later_text: str,
    gap_days: float,
    vocab: Vocab,
    max_len: int,
) -> TokenSequence:
    """Encode two rendered windows into one sequence of at most ``max_len``
    ids. Truncation drops tail tokens proportionally from both windows."""
    if max_len < 3:
        raise ConfigError("max_len must be at least 3 for [CLS] a [SEP] b")
    toks_a = tokenize(earlier_text)
    toks_b = tokenize(later_text)
    keep_a, keep_b = _truncate_budget(len(toks_a), len(toks_b), max_len - 2)
    toks_a = toks_a[:keep_a]
    toks_b = toks_b[:keep_b]

    ids = [CLS_ID]
    marks = [SEGMENT_SPECIAL]
    ids.extend(vocab.id_of(t) for t in toks_a)
    marks.extend([SEGMENT_EARLIER] * len(toks_a))
    ids.append(SEP_ID)
    marks.append(SEGMENT_SPECIAL)
    ids.extend(vocab.id_of(t) for t in toks_b)
    marks.extend([SEGMENT_LATER] * len(toks_b))
    return TokenSequence(
        ids=np.asarray(ids, dtype=np.int64),
        segment_marks=np.asarray(marks, dtype=np.int64),
        gap_days=float(gap_days),
    )


def decode(seq: TokenSequence, vocab: Vocab) -> str:
    return " ".join(vocab.token_of(int(i)) for i in seq.ids)


def pad_batch(seqs: list[TokenSequence], max_len: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack sequences into (ids, marks, gaps) arrays padded with PAD_ID.

    Padding positions get segment mark 0 so they never enter a pooled
    mean.
    """
    if not seqs:
        raise CorpusError("cannot pad an empty batch")
    width = max(len(s) for s in seqs)
    if width > max_len:
        raise CorpusError(f"sequence of {width} tokens exceeds max_len {max_len}")
    ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    marks = np.full((len(seqs), width), SEGMENT_SPECIAL, dtype=np.int64)
    gaps = np.zeros(len(seqs), dtype=np.float64)
    for r, s in enumerate(seqs):
        ids[r, : len(s)] = s.ids
        marks[r, : len(s)] = s.segment_marks
        gaps[r] = s.gap_days
    return ids, marks, gaps
