"""Weak entailment labeling and gap-bounded pair sampling.

Windows are consecutive fixed-length slices of a timeline. An ordered pair
of windows from the same patient gets one of three labels from a fixed
rule cascade (first match wins):

* R1 ``contradict`` -- a same-condition stage reversal, a lab band
  returning to its normal band, or a medication stopped after an earlier
  start alongside a resolution stage;
* R2 ``entail``     -- a same-condition stage progression, or a lab band
  moving toward the sick end while the condition was present earlier;
* R3 ``neutral``    -- the two windows touch disjoint organ-system sets;
* R4 ``neutral``    -- fallback when nothing above fired.

Every rule that fired is kept in the pair's ``rule_trace`` so training
sets can be filtered after the fact (e.g. dropping all R1 pairs) without
relabeling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

from .cohort import (
    DIAGNOSIS_STAGE,
    LAB_OBSERVATION,
    MEDICATION_START,
    MEDICATION_STOP,
    ClinicalEvent,
    PatientTimeline,
)
from .errors import ConfigError, CorpusError
from .ontology import Ontology, lab_band, stage_delta
from .seeding import child_rng


class EntailmentLabel(IntEnum):
    """Three-way label; the integer values are fixed in files and logits."""

    ENTAIL = 0
    CONTRADICT = 1
    NEUTRAL = 2


N_CLASSES = 3


@dataclass(frozen=True)
class Window:
    """A half-open slice [t_start, t_end) of one patient's timeline.

    ``anchor_time`` is the window end: pair gaps measure elapsed time
    between the latest information in each window.
    """

    patient_id: str
    t_start: float
    t_end: float
    events: tuple[ClinicalEvent, ...]

    def __post_init__(self) -> None:
        if not self.t_start < self.t_end:
            raise CorpusError("window needs t_start < t_end")
        if not self.events:
            raise CorpusError("window must contain at least one event")
        for e in self.events:
            if not self.t_start <= e.time < self.t_end:
                raise CorpusError(
                    f"event at {e.time} outside window [{self.t_start}, {self.t_end})"
                )

    @property
    def anchor_time(self) -> float:
        return self.t_end


@dataclass(frozen=True)
class EntailmentPair:
    earlier: Window
    later: Window
    label: EntailmentLabel
    rule_trace: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.gap_days > 0:
            raise CorpusError("pair gap must be positive (earlier before later)")

    @property
    def gap_days(self) -> float:
        return self.later.anchor_time - self.earlier.anchor_time


@dataclass(frozen=True)
class PairConfig:
    delta_min: float = 1.0
    delta_max: float = 30.0
    window_len: float = 7.0
    pairs_per_patient: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.delta_min < self.delta_max:
            raise ConfigError("need 0 < delta_min < delta_max")
        if self.window_len <= 0:
            raise ConfigError("window_len must be positive")
        if self.pairs_per_patient < 1:
            raise ConfigError("pairs_per_patient must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "PairConfig":
        return cls(
            delta_min=float(d.get("delta_min", 1.0)),
            delta_max=float(d.get("delta_max", 30.0)),
            window_len=float(d.get("window_len", 7.0)),
            pairs_per_patient=int(d.get("pairs_per_patient", 10)),
            seed=int(d.get("seed", 0)),
        )

    def to_dict(self) -> dict:
        return {
            "delta_min": self.delta_min,
            "delta_max": self.delta_max,
            "window_len": self.window_len,
            "pairs_per_patient": self.pairs_per_patient,
            "seed": self.seed,
        }


def segment_timeline(tl: PatientTimeline, window_len: float) -> list[Window]:
    """Cut a timeline into consecutive half-open windows of ``window_len``
    days starting at the first event; empty windows are dropped."""
    if not tl.events:
        raise CorpusError(f"patient {tl.patient_id!r}: cannot segment empty timeline")
    if window_len <= 0:
        raise ConfigError("window_len must be positive")
    t0 = tl.events[0].time
    buckets: dict[int, list[ClinicalEvent]] = {}
    for e in tl.events:
        k = int((e.time - t0) // window_len)
        buckets.setdefault(k, []).append(e)
    windows = []
    for k in sorted(buckets):
        windows.append(
            Window(
                patient_id=tl.patient_id,
                t_start=t0 + k * window_len,
                t_end=t0 + (k + 1) * window_len,
                events=tuple(buckets[k]),
            )
        )
    return windows


# ---------------------------------------------------------------------------
# Labeling


def _last_lab_bands(w: Window, ont: Ontology) -> dict[str, int]:
    """Final observed band per lab in the window (its closing lab state)."""
    bands: dict[str, int] = {}
    for e in w.events:
        if e.kind == LAB_OBSERVATION:
            lab = ont.lab(e.lab[0])
            bands[lab.id] = lab_band(lab, e.lab[1])
    return bands


def _stage_ids(w: Window) -> list[str]:
    return [e.stage for e in w.events if e.kind == DIAGNOSIS_STAGE]


def _conditions_present(w: Window, ont: Ontology) -> set[str]:
    return {ont.stage(s).condition for s in _stage_ids(w)}


def _organ_systems(w: Window, ont: Ontology) -> set[str]:
    """Organ systems touched by stage and lab events. Medication events
    carry no organ system."""
    systems = {ont.system_of_stage(s) for s in _stage_ids(w)}
    for e in w.events:
        if e.kind == LAB_OBSERVATION:
            systems.add(ont.system_of_lab(e.lab[0]))
    return systems


def label_pair(
    earlier: Window, later: Window, ont: Ontology
) -> tuple[EntailmentLabel, tuple[str, ...]]:
    """Apply the rule cascade to an ordered window pair.

    Returns the winning label plus the trace of every rule that fired,
    most severe first. Unknown stage or lab ids raise ``OntologyError``.
    """
    if not earlier.anchor_time < later.anchor_time:
        raise CorpusError("label_pair requires earlier.anchor_time < later.anchor_time")
    fired: list[str] = []

    stages_a = _stage_ids(earlier)
    stages_b = _stage_ids(later)
    all_deltas = (stage_delta(sa, sb, ont) for sa in stages_a for sb in stages_b)
    deltas = [d for d in all_deltas if d is not None]
    bands_a = _last_lab_bands(earlier, ont)
    bands_b = _last_lab_bands(later, ont)
    conditions_a = _conditions_present(earlier, ont)

    # R1: reversals.
    if any(d < 0 for d in deltas):
        fired.append("R1.stage-reversal")
    for lab_id, band_b in bands_b.items():
        lab = ont.lab(lab_id)
        band_a = bands_a.get(lab_id)
        if band_a is not None and band_a != lab.normal_band and band_b == lab.normal_band:
            fired.append("R1.lab-normalization")
            break
    started = {e.medication for e in earlier.events if e.kind == MEDICATION_START}
    stopped = {e.medication for e in later.events if e.kind == MEDICATION_STOP}
    has_resolution = any(ont.stage(s).resolves for s in stages_b)
    if started & stopped and has_resolution:
        fired.append("R1.med-resolution")

    # R2: progressions.
    if any(d > 0 for d in deltas):
        fired.append("R2.stage-progression")
    for lab_id, band_b in bands_b.items():
        lab = ont.lab(lab_id)
        band_a = bands_a.get(lab_id)
        if band_a is None or lab.condition not in conditions_a:
            continue
        step = lab.sicker_band_step()
        if (band_b - band_a) * step >= 1:
            fired.append("R2.lab-worsening")
            break

    # R3: orthogonal organ systems.
    if _organ_systems(earlier, ont).isdisjoint(_organ_systems(later, ont)):
        fired.append("R3.orthogonal-systems")

    if any(r.startswith("R1") for r in fired):
        label = EntailmentLabel.CONTRADICT
    elif any(r.startswith("R2") for r in fired):
        label = EntailmentLabel.ENTAIL
    elif fired:
        label = EntailmentLabel.NEUTRAL
    else:
        label = EntailmentLabel.NEUTRAL
        fired.append("R4.fallback")
    return label, tuple(fired)


# ---------------------------------------------------------------------------
# Pair sampling


def _eligible_window_pairs(
    windows: list[Window], cfg: PairConfig
) -> list[tuple[Window, Window]]:
    out = []
    for i in range(len(windows)):
        for j in range(i + 1, len(windows)):
            gap = windows[j].anchor_time - windows[i].anchor_time
            if cfg.delta_min < gap < cfg.delta_max:
                out.append((windows[i], windows[j]))
    return out


def sample_pairs(
    tl: PatientTimeline, cfg: PairConfig, ont: Ontology
) -> list[EntailmentPair]:
    """Label all gap-eligible window pairs and subsample.

    Up to ``pairs_per_patient`` pairs are drawn uniformly without
    replacement from the non-fallback pool; R4 fallback neutrals are only
    drawn afterwards, to top the neutral count up toward the largest other
    class without exceeding the per-patient quota.
    """
    windows = segment_timeline(tl, cfg.window_len)
    labeled: list[EntailmentPair] = []
    fallback: list[EntailmentPair] = []
    for earlier, later in _eligible_window_pairs(windows, cfg):
        label, trace = label_pair(earlier, later, ont)
        pair = EntailmentPair(earlier=earlier, later=later, label=label, rule_trace=trace)
        if trace == ("R4.fallback",):
            fallback.append(pair)
        else:
            labeled.append(pair)

    rng = child_rng(cfg.seed, "pairs", tl.patient_id)
    quota = cfg.pairs_per_patient
    take = min(quota, len(labeled))
    chosen: list[EntailmentPair] = []
    if take:
        idx = sorted(rng.choice(len(labeled), size=take, replace=False))
        chosen = [labeled[i] for i in idx]

    n_entail = sum(1 for p in chosen if p.label == EntailmentLabel.ENTAIL)
    n_contra = sum(1 for p in chosen if p.label == EntailmentLabel.CONTRADICT)
    n_neutral = sum(1 for p in chosen if p.label == EntailmentLabel.NEUTRAL)
    want_neutral = max(n_entail, n_contra)
    n_fill = min(
        max(want_neutral - n_neutral, 0), quota - len(chosen), len(fallback)
    )
    if n_fill > 0:
        idx = sorted(rng.choice(len(fallback), size=n_fill, replace=False))
        chosen.extend(fallback[i] for i in idx)
    return chosen


# ---------------------------------------------------------------------------
# Dataset build: patient-level splits, rendered pair files, manifest.


@dataclass(frozen=True)
class PairRecord:
    """One serialized training unit: both windows rendered to text."""

    patient_id: str
    earlier_text: str
    later_text: str
    label: EntailmentLabel
    gap_days: float
    rule_trace: tuple[str, ...]

    def to_json(self) -> str:
        return json.dumps(
            {
                "patient_id": self.patient_id,
                "earlier": self.earlier_text,
                "later": self.later_text,
                "label": int(self.label),
                "gap_days": self.gap_days,
                "rule_trace": list(self.rule_trace),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "PairRecord":
        d = json.loads(line)
        return cls(
            patient_id=d["patient_id"],
            earlier_text=d["earlier"],
            later_text=d["later"],
            label=EntailmentLabel(int(d["label"])),
            gap_days=float(d["gap_days"]),
            rule_trace=tuple(d["rule_trace"]),
        )


def to_record(pair: EntailmentPair, ont: Ontology) -> PairRecord:
    from .textizer import render_window

    return PairRecord(
        patient_id=pair.earlier.patient_id,
        earlier_text=render_window(pair.earlier, ont),
        later_text=render_window(pair.later, ont),
        label=pair.label,
        gap_days=pair.gap_days,
        rule_trace=pair.rule_trace,
    )


def write_pair_file(records: list[PairRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json())
            fh.write("\n")


def read_pair_file(path: str | Path) -> list[PairRecord]:
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(PairRecord.from_json(line))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise CorpusError(f"{path}:{lineno}: malformed pair record: {exc}") from None
    return records


SPLIT_NAMES = ("train", "valid", "test")


def _split_sizes(n: int, proportions: dict[str, float]) -> dict[str, int]:
    """Largest-remainder apportionment of n patients over the splits."""
    raw = {name: n * proportions.get(name, 0.0) for name in SPLIT_NAMES}
    sizes = {name: int(raw[name]) for name in SPLIT_NAMES}
    leftover = n - sum(sizes.values())
    order = sorted(SPLIT_NAMES, key=lambda s: raw[s] - sizes[s], reverse=True)
    for name in order[:leftover]:
        sizes[name] += 1
    return sizes


def build_dataset(
    corpus: list[PatientTimeline],
    cfg: PairConfig,
    ont: Ontology,
    split_proportions: dict[str, float],
    out_dir: str | Path,
) -> dict:
    """Sample pairs for every patient, split by patient id, and write
    ``train/valid/test.pairs.jsonl`` plus ``dataset_manifest.json``.

    Returns the manifest dict. Splits are disjoint at patient level.
    """
    if abs(sum(split_proportions.values()) - 1.0) > 1e-9:
        raise ConfigError("split proportions must sum to 1")
    if set(split_proportions) - set(SPLIT_NAMES):
        raise ConfigError(f"split names must be among {SPLIT_NAMES}")

    sizes = _split_sizes(len(corpus), split_proportions)
    for name in SPLIT_NAMES:
        if split_proportions.get(name, 0.0) > 0 and sizes[name] == 0:
            raise ConfigError(
                f"corpus of {len(corpus)} patients too small to populate split {name!r}"
            )

    rng = child_rng(cfg.seed, "split")
    order = rng.permutation(len(corpus))
    assignment: dict[str, str] = {}
    cursor = 0
    for name in SPLIT_NAMES:
        for k in order[cursor : cursor + sizes[name]]:
            assignment[corpus[int(k)].patient_id] = name
        cursor += sizes[name]

    records: dict[str, list[PairRecord]] = {name: [] for name in SPLIT_NAMES}
    for tl in corpus:
        split = assignment[tl.patient_id]
        for pair in sample_pairs(tl, cfg, ont):
            records[split].append(to_record(pair, ont))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    split_stats = {}
    for name in SPLIT_NAMES:
        write_pair_file(records[name], out_dir / f"{name}.pairs.jsonl")
        recs = records[name]
        histogram = {label.name.lower(): 0 for label in EntailmentLabel}
        for rec in recs:
            histogram[rec.label.name.lower()] += 1
        split_stats[name] = {
            "n_patients": sizes[name],
            "n_pairs": len(recs),
            "class_histogram": histogram,
            "mean_gap_days": (
                sum(r.gap_days for r in recs) / len(recs) if recs else None
            ),
        }

    manifest = {
        "pair_config": cfg.to_dict(),
        "split_proportions": dict(split_proportions),
        "ontology_version": ont.version,
        "n_patients": len(corpus),
        "splits": split_stats,
    }
    (out_dir / "dataset_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return manifest
