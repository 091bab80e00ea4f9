"""Evaluation: classification metrics, calibration, and geometry probes.

Calibration uses equal-width confidence bins (confidence = max softmax
probability; a value sitting exactly on a bin edge goes to the upper
bin) and is also reported stratified by time gap with fixed day-bucket
edges 1, 3, 7, 14, 30. Geometry probes inspect the pooled window
vectors: strict order violations among entail pairs and cosine spread
among neutral pairs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorpusError
from .model import Encoder, ModelConfig
from .objective import TrainConfig, train
from .supervision import (
    N_CLASSES,
    EntailmentLabel,
    PairConfig,
    PairRecord,
    build_dataset,
    read_pair_file,
)
from .textizer import TokenSequence, Vocab, encode_pair, pad_batch

GAP_BUCKET_EDGES = (1.0, 3.0, 7.0, 14.0, 30.0)


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray) -> np.ndarray:
    """3x3 counts, rows = true class, columns = predicted class."""
    cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def classification_metrics(y_true: np.ndarray, y_pred: np.ndarray) -> dict:
    """Accuracy, per-class precision/recall/F1, macro-F1, and multiclass
    MCC in covariance form. Zero denominators yield zero, and a fully
    degenerate MCC (all one class either axis) is defined as zero.
    """
    if len(y_true) == 0:
        raise CorpusError("no pairs to score")
    cm = confusion_matrix(y_true, y_pred)
    s = cm.sum()
    correct = np.trace(cm)
    true_counts = cm.sum(axis=1)
    pred_counts = cm.sum(axis=0)

    per_class = {}
    f1s = []
    for c in range(N_CLASSES):
        tp = cm[c, c]
        precision = tp / pred_counts[c] if pred_counts[c] else 0.0
        recall = tp / true_counts[c] if true_counts[c] else 0.0
        f1 = (
            2 * precision * recall / (precision + recall)
            if precision + recall
            else 0.0
        )
        f1s.append(f1)
        per_class[EntailmentLabel(c).name.lower()] = {
            "precision": float(precision),
            "recall": float(recall),
            "f1": float(f1),
            "support": int(true_counts[c]),
        }

    cov_num = correct * s - int(true_counts @ pred_counts)
    cov_den = np.sqrt(float(s * s - pred_counts @ pred_counts)) * np.sqrt(
        float(s * s - true_counts @ true_counts)
    )
    mcc = float(cov_num / cov_den) if cov_den else 0.0
    return {
        "accuracy": float(correct / s),
        "macro_f1": float(np.mean(f1s)),
        "mcc": mcc,
        "per_class": per_class,
        "confusion": cm.tolist(),
    }


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def expected_calibration_error(
    confidences: np.ndarray, correct: np.ndarray, n_bins: int = 10
) -> float:
    """Equal-width-bin ECE; a confidence on a bin edge counts in the
    upper bin."""
    if n_bins < 1:
        raise ConfigError("n_bins must be >= 1")
    if len(confidences) == 0:
        raise CorpusError("no predictions to calibrate")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, confidences, side="right") - 1, 0, n_bins - 1)
    ece = 0.0
    n = len(confidences)
    for b in range(n_bins):
        hit = idx == b
        nb = int(hit.sum())
        if nb == 0:
            continue
        ece += (nb / n) * abs(correct[hit].mean() - confidences[hit].mean())
    return float(ece)


def _gap_bucket_label(k: int) -> str:
    edges = GAP_BUCKET_EDGES
    if k == 0:
        return f"<{edges[0]:g}"
    if k == len(edges):
        return f">={edges[-1]:g}"
    return f"[{edges[k - 1]:g},{edges[k]:g})"


def ece_by_gap(
    confidences: np.ndarray,
    correct: np.ndarray,
    gaps: np.ndarray,
    n_bins: int = 10,
) -> dict[str, dict]:
    """Per-gap-bucket ECE over the fixed day edges; empty buckets are
    omitted."""
    idx = np.searchsorted(GAP_BUCKET_EDGES, gaps, side="right")
    out: dict[str, dict] = {}
    for k in range(len(GAP_BUCKET_EDGES) + 1):
        hit = idx == k
        nb = int(hit.sum())
        if nb == 0:
            continue
        out[_gap_bucket_label(k)] = {
            "n": nb,
            "ece": expected_calibration_error(confidences[hit], correct[hit], n_bins),
            "accuracy": float(correct[hit].mean()),
            "mean_confidence": float(confidences[hit].mean()),
        }
    return out


def order_violation_rate(
    u_earlier: np.ndarray, u_later: np.ndarray, labels: np.ndarray
) -> float:
    """Fraction of entail pairs with a strict violation in any coordinate.

    Raises rather than returning zero when the set holds no entail pair,
    so an undefined rate can never pass for a perfect one.
    """
    entail = labels == int(EntailmentLabel.ENTAIL)
    n = int(entail.sum())
    if n == 0:
        raise CorpusError("order violation rate undefined: no entail pairs")
    diff = u_earlier[entail] - u_later[entail]
    return float((diff > 0).any(axis=1).sum() / n)


def neutral_cosine_stats(
    u_earlier: np.ndarray, u_later: np.ndarray, labels: np.ndarray
) -> dict:
    """Cosine similarity between window vectors of neutral pairs.

    Pairs where either vector is all-zero are skipped but counted.
    """
    neutral = labels == int(EntailmentLabel.NEUTRAL)
    ue, ul = u_earlier[neutral], u_later[neutral]
    ne = np.linalg.norm(ue, axis=1)
    nl = np.linalg.norm(ul, axis=1)
    ok = (ne > 0) & (nl > 0)
    n_degenerate = int((~ok).sum())
    if not ok.any():
        return {"n": 0, "n_degenerate": n_degenerate, "mean": None, "std": None}
    cos = (ue[ok] * ul[ok]).sum(axis=1) / (ne[ok] * nl[ok])
    return {
        "n": int(ok.sum()),
        "n_degenerate": n_degenerate,
        "mean": float(cos.mean()),
        "std": float(cos.std()),
    }


@dataclass
class EvalReport:
    n_pairs: int
    metrics: dict
    ece: float
    ece_by_gap: dict[str, dict]
    violation_rate: float | None
    neutral_cosine: dict
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_pairs": self.n_pairs,
            "metrics": self.metrics,
            "ece": self.ece,
            "ece_by_gap": self.ece_by_gap,
            "violation_rate": self.violation_rate,
            "neutral_cosine": self.neutral_cosine,
            "meta": self.meta,
        }

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )

    def flat_rows(self) -> list[tuple[str, float]]:
        rows = [
            ("n_pairs", float(self.n_pairs)),
            ("accuracy", self.metrics["accuracy"]),
            ("macro_f1", self.metrics["macro_f1"]),
            ("mcc", self.metrics["mcc"]),
            ("ece", self.ece),
        ]
        if self.violation_rate is not None:
            rows.append(("violation_rate", self.violation_rate))
        if self.neutral_cosine.get("mean") is not None:
            rows.append(("neutral_cosine_mean", self.neutral_cosine["mean"]))
        for bucket, stats in self.ece_by_gap.items():
            rows.append((f"ece_gap_{bucket}", stats["ece"]))
        return rows

    def save_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for name, value in self.flat_rows():
                w.writerow([name, f"{value:.6f}"])


def evaluate(
    encoder: Encoder,
    seqs: list[TokenSequence],
    labels: np.ndarray,
    batch_size: int = 64,
    meta: dict | None = None,
) -> EvalReport:
    """Score a pair set end to end: forward passes, hard predictions,
    calibration, and the window-geometry probes."""
    if not seqs:
        raise CorpusError("no pairs to evaluate")
    logits = np.zeros((len(seqs), N_CLASSES))
    u_e = np.zeros((len(seqs), encoder.cfg.d_model))
    u_l = np.zeros((len(seqs), encoder.cfg.d_model))
    for lo in range(0, len(seqs), batch_size):
        chunk = seqs[lo : lo + batch_size]
        ids, marks, gaps = pad_batch(chunk, encoder.cfg.max_len)
        out = encoder.forward(ids, marks, gaps)
        logits[lo : lo + len(chunk)] = out.logits
        u_e[lo : lo + len(chunk)] = out.u_earlier
        u_l[lo : lo + len(chunk)] = out.u_later

    probs = softmax_probs(logits)
    y_pred = probs.argmax(axis=1)
    conf = probs.max(axis=1)
    right = (y_pred == labels).astype(np.float64)
    gap_arr = np.array([s.gap_days for s in seqs])

    try:
        violation = order_violation_rate(u_e, u_l, labels)
    except CorpusError:
        violation = None
    return EvalReport(
        n_pairs=len(seqs),
        metrics=classification_metrics(labels, y_pred),
        ece=expected_calibration_error(conf, right),
        ece_by_gap=ece_by_gap(conf, right, gap_arr),
        violation_rate=violation,
        neutral_cosine=neutral_cosine_stats(u_e, u_l, labels),
        meta=meta or {},
    )


# ---------------------------------------------------------------------------
# Ablations


def encode_records(
    records: list[PairRecord], vocab: Vocab, max_len: int
) -> tuple[list[TokenSequence], np.ndarray]:
    seqs = [
        encode_pair(r.earlier_text, r.later_text, r.gap_days, vocab, max_len)
        for r in records
    ]
    labels = np.array([int(r.label) for r in records], dtype=np.int64)
    return seqs, labels


def drop_contradiction_rules(records: list[PairRecord]) -> list[PairRecord]:
    """Relabel as if the contradiction rules never existed.

    The stored trace lists every rule that fired, so the counterfactual
    label is recomputable: entail when a progression rule fired, neutral
    otherwise.
    """
    out = []
    for r in records:
        non_r1 = tuple(t for t in r.rule_trace if not t.startswith("R1"))
        if not any(t.startswith("R1") for t in r.rule_trace):
            out.append(r)
            continue
        if any(t.startswith("R2") for t in non_r1):
            label = EntailmentLabel.ENTAIL
        else:
            label = EntailmentLabel.NEUTRAL
            if not non_r1:
                non_r1 = ("R4.fallback",)
        out.append(
            PairRecord(
                patient_id=r.patient_id,
                earlier_text=r.earlier_text,
                later_text=r.later_text,
                label=label,
                gap_days=r.gap_days,
                rule_trace=non_r1,
            )
        )
    return out


def _train_arm(
    name: str,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_records: list[PairRecord],
    valid_records: list[PairRecord],
    test_records: list[PairRecord],
    vocab: Vocab,
    out_dir: Path,
    score_valid_records: list[PairRecord] | None = None,
) -> EvalReport:
    """Train one arm and score it on the shared test pairs.

    score_valid_records, when given, is a fixed validation set scored
    after training so arms that trained against different validation
    pools still report one comparable validation accuracy (in meta).
    """
    if not train_records or not valid_records or not test_records:
        raise CorpusError(
            f"arm {name}: every split needs pairs to compare arms; "
            "enlarge the corpus or relax the gap bounds"
        )
    arm_dir = out_dir / name
    arm_dir.mkdir(parents=True, exist_ok=True)
    tr_seqs, tr_labels = encode_records(train_records, vocab, model_cfg.max_len)
    va_seqs, va_labels = encode_records(valid_records, vocab, model_cfg.max_len)
    te_seqs, te_labels = encode_records(test_records, vocab, model_cfg.max_len)
    encoder = Encoder.init(model_cfg, seed=train_cfg.seed)
    result = train(
        encoder, tr_seqs, tr_labels, va_seqs, va_labels, train_cfg, arm_dir
    )
    meta = {"arm": name, "n_train_pairs": len(train_records)}
    score_valid = (
        valid_records if score_valid_records is None else score_valid_records
    )
    sv_seqs, sv_labels = encode_records(score_valid, vocab, model_cfg.max_len)
    valid_report = evaluate(result.encoder, sv_seqs, sv_labels)
    meta["valid_accuracy"] = valid_report.metrics["accuracy"]
    report = evaluate(result.encoder, te_seqs, te_labels, meta=meta)
    report.save_json(arm_dir / "eval_report.json")
    return report


ABLATION_FACTORS = ("rope", "contradiction-rules", "pair-density")


def run_ablation(
    corpus,
    ont,
    pair_cfg: PairConfig,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    split_proportions: dict[str, float],
    out_dir: str | Path,
    factors: tuple[str, ...] = ABLATION_FACTORS,
    densities: tuple[int, ...] = (1, 5, 10),
) -> dict[str, EvalReport]:
    """Train and score the base configuration plus one arm per ablated
    factor, holding seeds and the test set fixed across arms.

    Density arms retrain on sparser resamples of the same patients and
    are still scored on the base test pairs, so only the quantity of
    training supervision moves.
    """
    unknown = set(factors) - set(ABLATION_FACTORS)
    if unknown:
        raise ConfigError(f"unknown ablation factors: {sorted(unknown)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    base_dir = out_dir / "data_base"
    build_dataset(corpus, pair_cfg, ont, split_proportions, base_dir)
    splits = {
        name: read_pair_file(base_dir / f"{name}.pairs.jsonl")
        for name in ("train", "valid", "test")
    }
    vocab = Vocab.build([r.earlier_text for r in splits["train"]]
                        + [r.later_text for r in splits["train"]])
    vocab.save(out_dir / "vocab.txt")
    model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "vocab_size": len(vocab)})

    reports: dict[str, EvalReport] = {}
    reports["base"] = _train_arm(
        "base", model_cfg, train_cfg,
        splits["train"], splits["valid"], splits["test"], vocab, out_dir,
    )

    if "rope" in factors:
        no_rope = ModelConfig.from_dict({**model_cfg.to_dict(), "use_rope": False})
        reports["no-rope"] = _train_arm(
            "no-rope", no_rope, train_cfg,
            splits["train"], splits["valid"], splits["test"], vocab, out_dir,
        )

    if "contradiction-rules" in factors:
        filtered = drop_contradiction_rules(splits["train"])
        reports["no-contradiction-rules"] = _train_arm(
            "no-contradiction-rules", model_cfg, train_cfg,
            filtered, splits["valid"], splits["test"], vocab, out_dir,
        )

    if "pair-density" in factors:
        for k in densities:
            if k == pair_cfg.pairs_per_patient:
                reports[f"density-{k}"] = reports["base"]
                continue
            sparse_cfg = PairConfig.from_dict({**pair_cfg.to_dict(), "pairs_per_patient": k})
            sparse_dir = out_dir / f"data_density_{k}"
            build_dataset(corpus, sparse_cfg, ont, split_proportions, sparse_dir)
            sparse_train = read_pair_file(sparse_dir / "train.pairs.jsonl")
            sparse_valid = read_pair_file(sparse_dir / "valid.pairs.jsonl")
            reports[f"density-{k}"] = _train_arm(
                f"density-{k}", model_cfg, train_cfg,
                sparse_train, sparse_valid, splits["test"], vocab, out_dir,
                score_valid_records=splits["valid"],
            )

    _write_ablation_summary(reports, out_dir / "ablation_summary.csv")
    return reports


def _write_ablation_summary(reports: dict[str, EvalReport], path: Path) -> None:
    base = reports["base"]
    cols = ("accuracy", "macro_f1", "mcc", "ece")
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", *cols, "violation_rate", *[f"delta_{c}" for c in cols]])
        for name, rep in reports.items():
            row = [name]
            for c in cols:
                row.append(f"{_metric(rep, c):.6f}")
            row.append("" if rep.violation_rate is None else f"{rep.violation_rate:.6f}")
            for c in cols:
                row.append(f"{_metric(rep, c) - _metric(base, c):+.6f}")
            w.writerow(row)


def _metric(rep: EvalReport, name: str) -> float:
    if name == "ece":
        return rep.ece
    return rep.metrics[name]
