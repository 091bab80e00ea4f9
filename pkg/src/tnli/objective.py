"""Training objective, optimizer, schedule, and the training loop.

The objective is a smoothed cross-entropy over three classes plus a
coordinate-wise order penalty applied to pairs labeled entail: the
earlier window's pooled vector must sit below the later one in every
coordinate, and any excess is charged linearly. Both terms are averaged
over the batch; the order term enters with weight ``order_weight``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, NumericalError
from .model import Encoder, ModelConfig, save_checkpoint
from .seeding import child_rng
from .supervision import EntailmentLabel
from .textizer import TokenSequence, pad_batch


@dataclass(frozen=True)
class TrainConfig:
    label_smoothing: float = 0.1
    order_weight: float = 0.1
    peak_lr: float = 3e-3
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_size: int = 32
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 0.0  # global-norm clip; 0 disables
    seed: int = 0
    log_every: int = 10
    eval_every: int = 200
    checkpoint_every: int = 500

    def __post_init__(self) -> None:
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.order_weight < 0:
            raise ConfigError("order_weight must be non-negative")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")
        if not 1 <= self.warmup_steps <= self.total_steps:
            raise ConfigError("need 1 <= warmup_steps <= total_steps")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.adam_eps <= 0 or self.weight_decay < 0:
            raise ConfigError("adam_eps must be positive, weight_decay non-negative")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be non-negative (0 disables)")
        if min(self.log_every, self.eval_every, self.checkpoint_every) < 1:
            raise ConfigError("logging cadences must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f: d[f] for f in cls.__dataclass_fields__ if f in d}
        return cls(**known)

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


# ---------------------------------------------------------------------------
# Loss terms


def smoothed_cross_entropy(
    logits: np.ndarray, labels: np.ndarray, smoothing: float
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy against smoothed targets, plus d/dlogits.

    Targets are (1 - eps) on the true class and eps/3 on each class; the
    gradient is (softmax - target) / B.
    """
    B, C = logits.shape
    shifted = logits - logits.max(axis=1, keepdims=True)
    logZ = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logZ
    targets = np.full_like(logits, smoothing / C)
    targets[np.arange(B), labels] += 1.0 - smoothing
    loss = float(-(targets * logp).sum() / B)
    dlogits = (np.exp(logp) - targets) / B
    return loss, dlogits


def order_violation(
    u_earlier: np.ndarray, u_later: np.ndarray, entail_mask: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray, float | None]:
    """Order penalty for entail pairs, averaged over the whole batch.

    Per pair the penalty is sum_i max(0, u_earlier_i - u_later_i); pairs
    not labeled entail contribute zero. Also returns the strict violation
    rate among entail pairs (any coordinate above), or None when the
    batch holds no entail pair.
    """
    B = u_earlier.shape[0]
    gate = entail_mask.astype(bool)[:, None]
    diff = u_earlier - u_later
    excess = np.where(gate, np.maximum(diff, 0.0), 0.0)
    loss = float(excess.sum() / B)
    ind = ((diff > 0) & gate).astype(u_earlier.dtype)
    du_earlier = ind / B
    du_later = -du_earlier
    n_entail = int(gate.sum())
    if n_entail == 0:
        return loss, du_earlier, du_later, None
    violated = ((diff > 0).any(axis=1) & gate[:, 0]).sum()
    return loss, du_earlier, du_later, float(violated / n_entail)


@dataclass
class BatchResult:
    ce_loss: float
    order_loss: float
    total_loss: float
    violation_rate: float | None
    grads: dict[str, np.ndarray] | None


def batch_loss(
    encoder: Encoder,
    ids: np.ndarray,
    marks: np.ndarray,
    gaps: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    train_rng: np.random.Generator | None = None,
    want_grads: bool = True,
) -> BatchResult:
    """Forward + loss, with composed parameter gradients when requested."""
    out = encoder.forward(ids, marks, gaps, train_rng=train_rng, keep_trace=want_grads)
    ce, dlogits = smoothed_cross_entropy(out.logits, labels, cfg.label_smoothing)
    entail = labels == int(EntailmentLabel.ENTAIL)
    order, du_e, du_l, rate = order_violation(out.u_earlier, out.u_later, entail)
    total = ce + cfg.order_weight * order
    grads = None
    if want_grads:
        lam = cfg.order_weight
        grads = encoder.backward(out.trace, dlogits, lam * du_e, lam * du_l)
    return BatchResult(ce, order, total, rate, grads)


# ---------------------------------------------------------------------------
# Optimizer and schedule


def lr_at(step: int, peak: float, warmup: int, total: int) -> float:
    """Linear warmup to ``peak`` over ``warmup`` steps, then cosine decay
    to zero at ``total``."""
    if not 0 <= step <= total:
        raise ConfigError(f"step {step} outside schedule [0, {total}]")
    if step < warmup:
        return peak * step / warmup
    if total == warmup:
        return peak
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / (total - warmup)))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm. A ``max_norm`` of 0 leaves them untouched.
    """
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


class AdamW:
    """Decoupled weight decay Adam; decay applies uniformly to every tensor."""

    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        c = self.cfg
        self.step_count += 1
        bc1 = 1.0 - c.beta1**self.step_count
        bc2 = 1.0 - c.beta2**self.step_count
        for name, w in params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            w -= lr * (mhat / (np.sqrt(vhat) + c.adam_eps) + c.weight_decay * w)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"opt.step": np.array(self.step_count, dtype=np.float32)}
        for k, t in self.m.items():
            out[f"opt.m.{k}"] = t
        for k, t in self.v.items():
            out[f"opt.v.{k}"] = t
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        self.step_count = int(tensors["opt.step"])
        for k in self.m:
            self.m[k] = tensors[f"opt.m.{k}"].astype(self.m[k].dtype)
            self.v[k] = tensors[f"opt.v.{k}"].astype(self.v[k].dtype)


# ---------------------------------------------------------------------------
# Training loop


def _batches(
    n: int, batch_size: int, seed: int, epoch: int
) -> Iterator[np.ndarray]:
    perm = child_rng(seed, "shuffle", epoch).permutation(n)
    for lo in range(0, n, batch_size):
        yield perm[lo : lo + batch_size]


def _valid_metrics(
    encoder: Encoder,
    seqs: list[TokenSequence],
    labels: np.ndarray,
    cfg: TrainConfig,
) -> dict:
    total_ce = 0.0
    n_correct = 0
    n_entail = 0
    n_violated = 0
    for lo in range(0, len(seqs), cfg.batch_size):
        chunk = seqs[lo : lo + cfg.batch_size]
        ids, marks, gaps = pad_batch(chunk, encoder.cfg.max_len)
        lab = labels[lo : lo + len(chunk)]
        out = encoder.forward(ids, marks, gaps)
        ce, _ = smoothed_cross_entropy(out.logits, lab, cfg.label_smoothing)
        total_ce += ce * len(chunk)
        n_correct += int((out.logits.argmax(axis=1) == lab).sum())
        entail = lab == int(EntailmentLabel.ENTAIL)
        n_entail += int(entail.sum())
        diff = out.u_earlier - out.u_later
        n_violated += int(((diff > 0).any(axis=1) & entail).sum())
    return {
        "ce_loss": total_ce / len(seqs),
        "accuracy": n_correct / len(seqs),
        "violation_rate": (n_violated / n_entail) if n_entail else None,
    }


@dataclass
class TrainResult:
    encoder: Encoder
    final_step: int
    final_valid: dict
    log_path: Path
    checkpoint_path: Path


def train(
    encoder: Encoder,
    train_seqs: list[TokenSequence],
    train_labels: np.ndarray,
    valid_seqs: list[TokenSequence],
    valid_labels: np.ndarray,
    cfg: TrainConfig,
    out_dir: str | Path,
    opt: AdamW | None = None,
    start_step: int = 0,
    quiet: bool = True,
) -> TrainResult:
    """Run (or resume) the optimization loop.

    Writes a JSONL log of train and valid records to ``train_log.jsonl``,
    periodic checkpoints, and ``checkpoint_last.bin`` after every save so
    an interrupted run can resume with ``opt``/``start_step`` restored
    from it. Aborts with ``NumericalError`` if the loss stops being
    finite.
    """
    if not train_seqs:
        raise ConfigError("training split is empty")
    if len(train_seqs) != len(train_labels):
        raise ConfigError("train sequences and labels disagree in length")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    last_path = out_dir / "checkpoint_last.bin"
    if opt is None:
        opt = AdamW(encoder.params, cfg)
    n = len(train_seqs)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    # rewind to the epoch boundary; the skip guard below replays forward so
    # a mid-epoch resume sees the same batch order as the original run
    step = start_step - (start_step % steps_per_epoch)
    mode = "a" if start_step > 0 and log_path.exists() else "w"

    def dump(fh, rec: dict) -> None:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")

    with log_path.open(mode, encoding="utf-8") as fh:
        epoch = start_step // steps_per_epoch
        while step < cfg.total_steps:
            rng = child_rng(cfg.seed, "dropout", epoch)
            for batch_idx in _batches(n, cfg.batch_size, cfg.seed, epoch):
                if step >= cfg.total_steps:
                    break
                step += 1
                if step <= start_step:
                    continue  # replaying an earlier epoch during resume
                chunk = [train_seqs[i] for i in batch_idx]
                ids, marks, gaps = pad_batch(chunk, encoder.cfg.max_len)
                lab = train_labels[batch_idx]
                res = batch_loss(
                    encoder, ids, marks, gaps, lab, cfg,
                    train_rng=rng if encoder.cfg.dropout > 0 else None,
                )
                if not math.isfinite(res.total_loss) or res.total_loss > 1e4:
                    raise NumericalError(f"training diverged at step {step}")
                clip_gradients(res.grads, cfg.grad_clip)
                lr = lr_at(step, cfg.peak_lr, cfg.warmup_steps, cfg.total_steps)
                opt.step(encoder.params, res.grads, lr)

                if step == 1 or step % cfg.log_every == 0 or step == cfg.total_steps:
                    dump(fh, {
                        "split": "train",
                        "step": step,
                        "lr": lr,
                        "ce_loss": res.ce_loss,
                        "order_loss": res.order_loss,
                        "total_loss": res.total_loss,
                        "violation_rate": res.violation_rate,
                    })
                if valid_seqs and (step % cfg.eval_every == 0 or step == cfg.total_steps):
                    vm = _valid_metrics(encoder, valid_seqs, valid_labels, cfg)
                    dump(fh, {"split": "valid", "step": step, **vm})
                    if not quiet:
                        print(
                            f"step {step}: valid acc {vm['accuracy']:.3f} "
                            f"ce {vm['ce_loss']:.4f}"
                        )
                if step % cfg.checkpoint_every == 0 or step == cfg.total_steps:
                    extra = opt.state_tensors()
                    extra["train_step"] = np.array(step, dtype=np.float32)
                    save_checkpoint(last_path, encoder.cfg, encoder.params, extra)
            epoch += 1

    final_path = out_dir / "checkpoint_final.bin"
    extra = opt.state_tensors()
    extra["train_step"] = np.array(step, dtype=np.float32)
    save_checkpoint(final_path, encoder.cfg, encoder.params, extra)
    final_valid = (
        _valid_metrics(encoder, valid_seqs, valid_labels, cfg) if valid_seqs else {}
    )
    return TrainResult(
        encoder=encoder,
        final_step=step,
        final_valid=final_valid,
        log_path=log_path,
        checkpoint_path=final_path,
    )


# ---------------------------------------------------------------------------
# Finite-difference gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict[str, float]
    n_coordinates: int
    threshold: float
    order_loss_active: bool

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.threshold and self.order_loss_active


def _gradcheck_inputs(seed: int, siamese: bool = False, cfg: ModelConfig | None = None):
    """A small float64 model plus a 5-pair synthetic batch with padding,
    the time-bucket position machinery active, and at least one entail
    pair."""
    from .textizer import CLS_ID, PAD_ID, SEP_ID

    if cfg is None:
        cfg = ModelConfig(
            vocab_size=16, n_layers=2, d_model=32, n_heads=2, d_ffn=64,
            max_len=32, time_mode="time-bucket", dropout=0.0,
            siamese_order=siamese,
        )
    rng = child_rng(seed, "gradcheck")
    B, T = 5, 12
    ids = np.full((B, T), PAD_ID, dtype=np.int64)
    marks = np.zeros((B, T), dtype=np.int64)
    for b in range(B):
        n_a = int(rng.integers(2, 5))
        n_b = int(rng.integers(2, 5))
        row = [CLS_ID] + list(rng.integers(4, 16, size=n_a)) + [SEP_ID]
        row += list(rng.integers(4, 16, size=n_b))
        ids[b, : len(row)] = row
        marks[b, 1 : 1 + n_a] = 1
        marks[b, 2 + n_a : 2 + n_a + n_b] = 2
    gaps = rng.uniform(1.0, 20.0, size=B)
    labels = np.array([0, 0, 1, 2, 1], dtype=np.int64)
    encoder = Encoder.init(cfg, seed=seed, dtype=np.float64)
    return encoder, ids, marks, gaps, labels


def gradient_check(
    seed: int = 0,
    h: float = 1e-5,
    threshold: float = 1e-4,
    siamese: bool = False,
    cfg_override: ModelConfig | None = None,
    _corrupt_tensor: str | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of the full objective against central
    finite differences, coordinate by coordinate, in float64.

    Relative error uses the floor max(|analytic|, |numeric|, 1e-6) so
    near-zero coordinates compare on absolute terms. The report also
    records whether the order term was active (a positive violation on
    an entail pair) at the checked point; the check is only meaningful
    when it was. ``_corrupt_tensor`` deliberately perturbs one analytic
    gradient so tests can confirm the harness catches a wrong gradient.
    """
    encoder, ids, marks, gaps, labels = _gradcheck_inputs(
        seed, siamese=siamese, cfg=cfg_override
    )
    cfg = TrainConfig(label_smoothing=0.1, order_weight=0.1)

    res = batch_loss(encoder, ids, marks, gaps, labels, cfg)
    analytic = res.grads
    order_active = res.order_loss > 0.0
    if _corrupt_tensor is not None:
        analytic[_corrupt_tensor] = analytic[_corrupt_tensor] + 1.0

    def loss_value() -> float:
        r = batch_loss(encoder, ids, marks, gaps, labels, cfg, want_grads=False)
        return r.total_loss

    per_tensor: dict[str, float] = {}
    n_coords = 0
    for name, w in encoder.params.items():
        flat = w.reshape(-1)
        ga = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_value()
            flat[i] = orig - h
            down = loss_value()
            flat[i] = orig
            gf = (up - down) / (2.0 * h)
            rel = abs(ga[i] - gf) / max(abs(ga[i]), abs(gf), 1e-6)
            worst = max(worst, rel)
            n_coords += 1
        per_tensor[name] = worst
    return GradCheckReport(
        max_rel_error=max(per_tensor.values()),
        per_tensor=per_tensor,
        n_coordinates=n_coords,
        threshold=threshold,
        order_loss_active=order_active,
    )
