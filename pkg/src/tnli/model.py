"""Bi-sequence transformer encoder in plain numpy.

One stream carries ``[CLS] earlier [SEP] later``. Pre-norm blocks, rotary
position rotations on queries and keys, exact GeLU, and a linear head on
the final [CLS] state. The ``backward`` pass is written by hand and is
exact for the forward graph (verified against central finite differences
in the test suite).

Two position modes:

* ``token-position``  -- positions are token indices;
* ``time-bucket``     -- tokens of the later window additionally shift by
  ``floor(gap_days)``, so attention geometry sees elapsed time.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy.special import erf

from .errors import CheckpointError, ConfigError, NumericalError
from .seeding import child_rng
from .textizer import PAD_ID, SEGMENT_EARLIER, SEGMENT_LATER

N_CLASSES = 3
TIME_MODES = ("token-position", "time-bucket")

_LN_EPS = 1e-5
_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 128
    max_len: int = 256
    rope_base: float = 10000.0
    use_rope: bool = True
    time_mode: str = "token-position"
    dropout: float = 0.0
    siamese_order: bool = False

    def __post_init__(self) -> None:
        if self.vocab_size < 5:
            raise ConfigError("vocab_size must cover the four specials plus content")
        if self.n_layers < 1 or self.d_model < 2 or self.d_ffn < 1:
            raise ConfigError("model dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ConfigError("head dimension must be even for rotary pairs")
        if self.max_len < 3:
            raise ConfigError("max_len must be at least 3")
        if self.rope_base <= 1.0:
            raise ConfigError("rope_base must exceed 1")
        if self.time_mode not in TIME_MODES:
            raise ConfigError(f"time_mode must be one of {TIME_MODES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f: d[f] for f in cls.__dataclass_fields__ if f in d}
        if "vocab_size" not in known:
            raise ConfigError("model config needs vocab_size")
        return cls(**known)

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


def _glorot(rng: np.random.Generator, shape: tuple[int, int], dtype) -> np.ndarray:
    # uniform on +-sqrt(6 / (fan_in + fan_out))
    bound = np.sqrt(6.0 / sum(shape))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_parameters(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Fresh parameter tensors, keyed by dotted names."""
    p: dict[str, np.ndarray] = {}

    def mat(name: str, shape: tuple[int, int]) -> None:
        p[name] = _glorot(child_rng(seed, "init", name), shape, dtype)

    d, f = cfg.d_model, cfg.d_ffn
    mat("tok_emb", (cfg.vocab_size, d))
    for l in range(cfg.n_layers):
        for w in ("wq", "wk", "wv", "wo"):
            mat(f"layer{l}.attn.{w}", (d, d))
        mat(f"layer{l}.ffn.w1", (d, f))
        mat(f"layer{l}.ffn.w2", (f, d))
        for ln in ("ln1", "ln2"):
            p[f"layer{l}.{ln}.scale"] = np.ones(d, dtype=dtype)
            p[f"layer{l}.{ln}.bias"] = np.zeros(d, dtype=dtype)
    p["final_ln.scale"] = np.ones(d, dtype=dtype)
    p["final_ln.bias"] = np.zeros(d, dtype=dtype)
    mat("head.w", (d, N_CLASSES))
    p["head.b"] = np.zeros(N_CLASSES, dtype=dtype)
    return p


# ---------------------------------------------------------------------------
# Primitive forward/backward pieces


def gelu(z: np.ndarray) -> np.ndarray:
    return 0.5 * z * (1.0 + erf(z * _INV_SQRT2))


def gelu_grad(z: np.ndarray) -> np.ndarray:
    phi = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    return 0.5 * (1.0 + erf(z * _INV_SQRT2)) + z * phi


def rope_angles(positions: np.ndarray, head_dim: int, base: float) -> np.ndarray:
    """Rotation angles per position and pair: theta[p, i] = p * base^(-2i/dh)."""
    i = np.arange(head_dim // 2, dtype=positions.dtype)
    inv_freq = base ** (-2.0 * i / head_dim)
    return positions[..., None] * inv_freq  # [..., T, dh/2]


def rope_rotate(x: np.ndarray, angles: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Rotate adjacent feature pairs (2i, 2i+1) of x by the given angles.

    x: [B, H, T, dh]; angles: [B, T, dh/2] (broadcast over heads). The
    rotation is an isometry; the inverse rotation runs the exact adjoint,
    which is what the backward pass uses.
    """
    cos = np.cos(angles)[:, None, :, :]
    sin = np.sin(angles)[:, None, :, :]
    if inverse:
        sin = -sin
    shape = x.shape
    pairs = x.reshape(*shape[:-1], shape[-1] // 2, 2)
    x0, x1 = pairs[..., 0], pairs[..., 1]
    out = np.empty_like(pairs)
    out[..., 0] = x0 * cos - x1 * sin
    out[..., 1] = x0 * sin + x1 * cos
    return out.reshape(shape)


def _layer_norm(x: np.ndarray, scale: np.ndarray, bias: np.ndarray):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mean) * inv_std
    return xhat * scale + bias, xhat, inv_std


def _layer_norm_backward(dout, xhat, inv_std, scale):
    dxhat = dout * scale
    dscale = (dout * xhat).sum(axis=tuple(range(dout.ndim - 1)))
    dbias = dout.sum(axis=tuple(range(dout.ndim - 1)))
    m = dxhat.mean(axis=-1, keepdims=True)
    mx = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv_std * (dxhat - m - xhat * mx)
    return dx, dscale, dbias


def _softmax_last(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ForwardResult:
    logits: np.ndarray      # [B, 3]
    u_earlier: np.ndarray   # [B, d]
    u_later: np.ndarray     # [B, d]
    h_cls: np.ndarray       # [B, d]
    trace: dict[str, Any] | None = None


class Encoder:
    """Parameter container plus forward/backward passes."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        missing = set(init_parameters(cfg, 0)) - set(params)
        if missing:
            raise ConfigError(f"parameters missing tensors: {sorted(missing)}")
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int, dtype=np.float32) -> "Encoder":
        return cls(cfg, init_parameters(cfg, seed, dtype=dtype))

    # -- forward ----------------------------------------------------------

    def positions(self, ids: np.ndarray, marks: np.ndarray, gaps: np.ndarray) -> np.ndarray:
        dtype = self.params["tok_emb"].dtype
        B, T = ids.shape
        pos = np.broadcast_to(np.arange(T, dtype=dtype), (B, T)).copy()
        if self.cfg.time_mode == "time-bucket":
            shift = np.floor(gaps).astype(dtype)
            pos = pos + shift[:, None] * (marks == SEGMENT_LATER)
        return pos

    def _encode(
        self,
        ids: np.ndarray,
        marks: np.ndarray,
        gaps: np.ndarray,
        train_rng: np.random.Generator | None = None,
        keep_trace: bool = False,
    ) -> tuple[np.ndarray, dict[str, Any] | None]:
        """The transformer stack itself: token ids to final states y."""
        cfg = self.cfg
        p = self.params
        B, T = ids.shape
        if T > cfg.max_len:
            raise ConfigError(f"sequence length {T} exceeds max_len {cfg.max_len}")
        if ids.max() >= cfg.vocab_size:
            raise ConfigError("token id out of vocabulary range")

        H, dh = cfg.n_heads, cfg.head_dim
        scale = 1.0 / np.sqrt(dh)
        key_pad = ids == PAD_ID  # [B, T]

        pos = self.positions(ids, marks, gaps)
        angles = rope_angles(pos, dh, cfg.rope_base) if cfg.use_rope else None

        x = p["tok_emb"][ids]  # [B, T, d]
        layers = []
        for l in range(cfg.n_layers):
            c: dict[str, Any] = {"x_in": x}
            h1, xhat1, inv1 = _layer_norm(
                x, p[f"layer{l}.ln1.scale"], p[f"layer{l}.ln1.bias"]
            )
            c.update(h1=h1, xhat1=xhat1, inv1=inv1)

            def split(y: np.ndarray) -> np.ndarray:
                return y.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

            q = split(h1 @ p[f"layer{l}.attn.wq"])
            k = split(h1 @ p[f"layer{l}.attn.wk"])
            v = split(h1 @ p[f"layer{l}.attn.wv"])
            if angles is not None:
                q = rope_rotate(q, angles)
                k = rope_rotate(k, angles)
            scores = np.einsum("bhqd,bhkd->bhqk", q, k) * scale
            scores = np.where(key_pad[:, None, None, :], -np.inf, scores)
            attn = _softmax_last(scores)
            ctx = np.einsum("bhqk,bhkd->bhqd", attn, v)
            merged = ctx.transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
            attn_out = merged @ p[f"layer{l}.attn.wo"]
            attn_out, mask_a = self._dropout(attn_out, train_rng)
            x = x + attn_out
            c.update(q=q, k=k, v=v, attn=attn, merged=merged, drop_attn=mask_a, x_mid=x)

            h2, xhat2, inv2 = _layer_norm(
                x, p[f"layer{l}.ln2.scale"], p[f"layer{l}.ln2.bias"]
            )
            z1 = h2 @ p[f"layer{l}.ffn.w1"]
            g = gelu(z1)
            ffn_out = g @ p[f"layer{l}.ffn.w2"]
            ffn_out, mask_f = self._dropout(ffn_out, train_rng)
            x = x + ffn_out
            c.update(h2=h2, xhat2=xhat2, inv2=inv2, z1=z1, g=g, drop_ffn=mask_f)
            layers.append(c)

        y, xhatf, invf = _layer_norm(x, p["final_ln.scale"], p["final_ln.bias"])
        trace = None
        if keep_trace:
            trace = {
                "ids": ids,
                "marks": marks,
                "angles": angles,
                "layers": layers,
                "xhatf": xhatf,
                "invf": invf,
                "y": y,
            }
        return y, trace

    def forward(
        self,
        ids: np.ndarray,
        marks: np.ndarray,
        gaps: np.ndarray,
        train_rng: np.random.Generator | None = None,
        keep_trace: bool = False,
    ) -> ForwardResult:
        """Joint pass over [CLS] earlier [SEP] later.

        The order-loss vectors u come from segment mean-pooling of the
        joint pass by default; with ``siamese_order`` each window is
        re-encoded alone (positions from zero, no time shift) and pooled
        there instead.
        """
        p = self.params
        y, core = self._encode(ids, marks, gaps, train_rng, keep_trace)
        h_cls = y[:, 0]
        logits = h_cls @ p["head.w"] + p["head.b"]
        trace: dict[str, Any] | None = None

        if not self.cfg.siamese_order:
            u_earlier, cnt_e = _pool(y, marks == SEGMENT_EARLIER)
            u_later, cnt_l = _pool(y, marks == SEGMENT_LATER)
            if keep_trace:
                trace = {
                    "mode": "joint",
                    "core": core,
                    "h_cls": h_cls,
                    "marks": marks,
                    "cnt_e": cnt_e,
                    "cnt_l": cnt_l,
                }
        else:
            subs = {}
            pooled = {}
            zero_gap = np.zeros(ids.shape[0], dtype=gaps.dtype)
            for name, segment in (("earlier", SEGMENT_EARLIER), ("later", SEGMENT_LATER)):
                s_ids, s_marks = _solo_inputs(ids, marks, segment)
                s_y, s_core = self._encode(
                    s_ids, s_marks, zero_gap, train_rng, keep_trace
                )
                u, cnt = _pool(s_y, s_marks == segment)
                pooled[name] = u
                subs[name] = {"core": s_core, "marks": s_marks, "cnt": cnt, "segment": segment}
            u_earlier, u_later = pooled["earlier"], pooled["later"]
            if keep_trace:
                trace = {
                    "mode": "siamese",
                    "core": core,
                    "h_cls": h_cls,
                    "subs": subs,
                }

        if not (
            np.isfinite(logits).all()
            and np.isfinite(u_earlier).all()
            and np.isfinite(u_later).all()
        ):
            raise NumericalError("non-finite values in forward pass")
        return ForwardResult(
            logits=logits,
            u_earlier=u_earlier,
            u_later=u_later,
            h_cls=h_cls,
            trace=trace,
        )

    def _dropout(self, x: np.ndarray, rng: np.random.Generator | None):
        rate = self.cfg.dropout
        if rng is None or rate == 0.0:
            return x, None
        keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
        return x * keep, keep

    # -- backward ---------------------------------------------------------

    def backward(
        self,
        trace: dict[str, Any],
        dlogits: np.ndarray,
        du_earlier: np.ndarray | None = None,
        du_later: np.ndarray | None = None,
    ) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss w.r.t. every parameter tensor, given
        the loss gradients at the three model outputs."""
        p = self.params
        core = trace["core"]
        grads = {name: np.zeros_like(t) for name, t in p.items()}

        h_cls = trace["h_cls"]
        grads["head.w"] += h_cls.T @ dlogits
        grads["head.b"] += dlogits.sum(axis=0)
        dy = np.zeros_like(core["y"])
        dy[:, 0] += dlogits @ p["head.w"].T
        if trace["mode"] == "joint":
            marks = trace["marks"]
            if du_earlier is not None:
                _pool_backward(dy, du_earlier, marks == SEGMENT_EARLIER, trace["cnt_e"])
            if du_later is not None:
                _pool_backward(dy, du_later, marks == SEGMENT_LATER, trace["cnt_l"])
        self._core_backward(core, dy, grads)

        if trace["mode"] == "siamese":
            for du, name in ((du_earlier, "earlier"), (du_later, "later")):
                if du is None:
                    continue
                sub = trace["subs"][name]
                s_dy = np.zeros_like(sub["core"]["y"])
                _pool_backward(
                    s_dy, du, sub["marks"] == sub["segment"], sub["cnt"]
                )
                self._core_backward(sub["core"], s_dy, grads)
        return grads

    def _core_backward(
        self,
        trace: dict[str, Any],
        dy: np.ndarray,
        grads: dict[str, np.ndarray],
    ) -> None:
        """Accumulate stack gradients for one encoded sequence into grads."""
        cfg = self.cfg
        p = self.params
        ids = trace["ids"]
        angles = trace["angles"]
        B, T = ids.shape
        H, dh = cfg.n_heads, cfg.head_dim
        scale = 1.0 / np.sqrt(dh)

        dx, dscale, dbias = _layer_norm_backward(
            dy, trace["xhatf"], trace["invf"], p["final_ln.scale"]
        )
        grads["final_ln.scale"] += dscale
        grads["final_ln.bias"] += dbias

        for l in reversed(range(cfg.n_layers)):
            c = self.layer_trace(trace, l)
            # FFN sublayer
            dffn_out = dx if c["drop_ffn"] is None else dx * c["drop_ffn"]
            grads[f"layer{l}.ffn.w2"] += np.einsum("btf,btd->fd", c["g"], dffn_out)
            dg = dffn_out @ p[f"layer{l}.ffn.w2"].T
            dz1 = dg * gelu_grad(c["z1"])
            grads[f"layer{l}.ffn.w1"] += np.einsum("btd,btf->df", c["h2"], dz1)
            dh2 = dz1 @ p[f"layer{l}.ffn.w1"].T
            dx_mid_ln, dscale2, dbias2 = _layer_norm_backward(
                dh2, c["xhat2"], c["inv2"], p[f"layer{l}.ln2.scale"]
            )
            grads[f"layer{l}.ln2.scale"] += dscale2
            grads[f"layer{l}.ln2.bias"] += dbias2
            dx_mid = dx + dx_mid_ln

            # attention sublayer
            dattn_out = dx_mid if c["drop_attn"] is None else dx_mid * c["drop_attn"]
            grads[f"layer{l}.attn.wo"] += np.einsum(
                "btd,bte->de", c["merged"], dattn_out
            )
            dmerged = dattn_out @ p[f"layer{l}.attn.wo"].T
            dctx = dmerged.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            da = np.einsum("bhqd,bhkd->bhqk", dctx, c["v"])
            dv = np.einsum("bhqk,bhqd->bhkd", c["attn"], dctx)
            inner = (da * c["attn"]).sum(axis=-1, keepdims=True)
            dscores = c["attn"] * (da - inner)
            dq = np.einsum("bhqk,bhkd->bhqd", dscores, c["k"]) * scale
            dk = np.einsum("bhqk,bhqd->bhkd", dscores, c["q"]) * scale
            if angles is not None:
                dq = rope_rotate(dq, angles, inverse=True)
                dk = rope_rotate(dk, angles, inverse=True)

            def merge(g4: np.ndarray) -> np.ndarray:
                return g4.transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)

            dh1 = np.zeros_like(c["h1"])
            for name, gten in (("wq", dq), ("wk", dk), ("wv", dv)):
                flat = merge(gten)
                grads[f"layer{l}.attn.{name}"] += np.einsum(
                    "btd,bte->de", c["h1"], flat
                )
                dh1 += flat @ p[f"layer{l}.attn.{name}"].T
            dx_in_ln, dscale1, dbias1 = _layer_norm_backward(
                dh1, c["xhat1"], c["inv1"], p[f"layer{l}.ln1.scale"]
            )
            grads[f"layer{l}.ln1.scale"] += dscale1
            grads[f"layer{l}.ln1.bias"] += dbias1
            dx = dx_mid + dx_in_ln

        np.add.at(grads["tok_emb"], ids, dx)

    @staticmethod
    def layer_trace(trace: dict[str, Any], l: int) -> dict[str, Any]:
        return trace["layers"][l]


def _solo_inputs(
    ids: np.ndarray, marks: np.ndarray, segment: int
) -> tuple[np.ndarray, np.ndarray]:
    """Re-pack one window's tokens as standalone [CLS]-prefixed rows."""
    from .textizer import CLS_ID

    B = ids.shape[0]
    rows = [ids[b][marks[b] == segment] for b in range(B)]
    width = 1 + max((len(r) for r in rows), default=0)
    out_ids = np.full((B, max(width, 2)), PAD_ID, dtype=ids.dtype)
    out_marks = np.zeros_like(out_ids)
    out_ids[:, 0] = CLS_ID
    for b, r in enumerate(rows):
        out_ids[b, 1 : 1 + len(r)] = r
        out_marks[b, 1 : 1 + len(r)] = segment
    return out_ids, out_marks


def _pool(y: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean over masked positions per row; rows with no hits give zeros."""
    counts = mask.sum(axis=1)
    safe = np.maximum(counts, 1)
    pooled = (y * mask[:, :, None]).sum(axis=1) / safe[:, None]
    pooled[counts == 0] = 0.0
    return pooled, counts


def _pool_backward(dy: np.ndarray, du: np.ndarray, mask: np.ndarray, counts: np.ndarray) -> None:
    safe = np.maximum(counts, 1)
    contrib = du / safe[:, None]
    contrib = contrib * (counts > 0)[:, None]
    dy += mask[:, :, None] * contrib[:, None, :]


# ---------------------------------------------------------------------------
# Checkpoints: magic + version + config JSON + named float32 tensors, all
# little-endian, tensor names sorted so identical state means identical bytes.

_CKPT_MAGIC = b"TNLICKPT"
_CKPT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    cfg: ModelConfig,
    params: dict[str, np.ndarray],
    extra: dict[str, np.ndarray] | None = None,
) -> None:
    """Write model (and optionally optimizer) state. ``extra`` tensors are
    stored under an ``extra.`` prefix and returned separately on load."""
    tensors = dict(params)
    for name, t in (extra or {}).items():
        tensors[f"extra.{name}"] = np.asarray(t)
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
            data = np.asarray(tensors[name], dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(
    path: str | Path,
) -> tuple[ModelConfig, dict[str, np.ndarray], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = view[off : off + n]
        off += n
        return chunk

    if bytes(take(len(_CKPT_MAGIC))) != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack("<I", take(4))
    try:
        cfg = ModelConfig.from_dict(json.loads(bytes(take(blob_len)).decode("utf-8")))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed config block: {exc}") from None
    (n_tensors,) = struct.unpack("<I", take(4))
    params: dict[str, np.ndarray] = {}
    extra: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).copy()
        if name.startswith("extra."):
            extra[name[len("extra.") :]] = data
        else:
            params[name] = data
    if off != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    return cfg, params, extra
