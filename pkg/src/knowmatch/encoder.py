"""A small transformer encoder classifier with visibility-masked attention.

Runs on plain numpy in 64-bit floats by default. Positions are looked up
from the soft-position vector, attention logits are masked with -1e9 where
the visibility matrix is 0, and the [CLS] hidden state feeds a two-way
classification head. Backpropagation is written out analytically so it can
be checked against finite differences.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DomainError, FormatError, NumericalError

MASK_VALUE = -1e9
LN_EPS = 1e-5
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    max_position: int = 128
    dropout_rate: float = 0.0
    seed: int = 0
    use_segments: bool = True
    dtype: str = "float64"

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise DomainError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.dtype not in ("float64", "float32"):
            raise DomainError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def param_names(config: EncoderConfig) -> list[str]:
    """Declared parameter order (used by checkpoints and the optimizer)."""
    names = ["tok_emb", "pos_emb", "seg_emb", "emb_ln_g", "emb_ln_b"]
    for i in range(config.n_layers):
        for suffix in (
            "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
            "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b",
        ):
            names.append(f"l{i}.{suffix}")
    names += ["cls_w", "cls_b"]
    return names


def init_params(config: EncoderConfig) -> dict[str, np.ndarray]:
    """Seeded init: Glorot-scaled projection/FFN weights, 0.02-std embedding
    tables (the embedding layer-norm rescales them anyway), layer-norm gains
    1, biases 0."""
    rng = np.random.default_rng(config.seed)
    d, ff = config.d_model, config.d_ff
    dt = config.np_dtype

    def emb(*shape):
        return rng.normal(0.0, 0.02, size=shape).astype(dt)

    def glorot(n_in, n_out):
        std = math.sqrt(2.0 / (n_in + n_out))
        return rng.normal(0.0, std, size=(n_in, n_out)).astype(dt)

    params: dict[str, np.ndarray] = {
        "tok_emb": emb(config.vocab_size, d),
        "pos_emb": emb(config.max_position, d),
        "seg_emb": emb(2, d),
        "emb_ln_g": np.ones(d, dtype=dt),
        "emb_ln_b": np.zeros(d, dtype=dt),
    }
    for i in range(config.n_layers):
        params[f"l{i}.wq"] = glorot(d, d)
        params[f"l{i}.bq"] = np.zeros(d, dtype=dt)
        params[f"l{i}.wk"] = glorot(d, d)
        params[f"l{i}.bk"] = np.zeros(d, dtype=dt)
        params[f"l{i}.wv"] = glorot(d, d)
        params[f"l{i}.bv"] = np.zeros(d, dtype=dt)
        params[f"l{i}.wo"] = glorot(d, d)
        params[f"l{i}.bo"] = np.zeros(d, dtype=dt)
        params[f"l{i}.ln1_g"] = np.ones(d, dtype=dt)
        params[f"l{i}.ln1_b"] = np.zeros(d, dtype=dt)
        params[f"l{i}.w1"] = glorot(d, ff)
        params[f"l{i}.b1"] = np.zeros(ff, dtype=dt)
        params[f"l{i}.w2"] = glorot(ff, d)
        params[f"l{i}.b2"] = np.zeros(d, dtype=dt)
        params[f"l{i}.ln2_g"] = np.ones(d, dtype=dt)
        params[f"l{i}.ln2_b"] = np.zeros(d, dtype=dt)
    params["cls_w"] = glorot(d, 2)
    params["cls_b"] = np.zeros(2, dtype=dt)
    return params


@dataclass(frozen=True, eq=False)
class Batch:
    """Padded model input. [PAD] rows and columns of ``visible`` are zero."""

    token_ids: np.ndarray      # (B, L) int64
    soft_positions: np.ndarray  # (B, L) int64
    segments: np.ndarray       # (B, L) int64
    visible: np.ndarray        # (B, L, L) model dtype, binary
    labels: np.ndarray | None  # (B,) int64

    @classmethod
    def from_sequences(
        cls,
        seqs: Sequence[tuple],
        pad_id: int,
        dtype=np.float64,
    ) -> "Batch":
        """Pad (tokens, soft_positions, segments, visible-or-None, label)
        tuples into one batch. ``visible=None`` means fully visible."""
        b = len(seqs)
        max_len = max(len(s[0]) for s in seqs)
        ids = np.full((b, max_len), pad_id, dtype=np.int64)
        soft = np.zeros((b, max_len), dtype=np.int64)
        seg = np.zeros((b, max_len), dtype=np.int64)
        vis = np.zeros((b, max_len, max_len), dtype=dtype)
        labels = np.zeros(b, dtype=np.int64)
        has_labels = True
        for i, (tokens, soft_pos, segments, visible, label) in enumerate(seqs):
            n = len(tokens)
            ids[i, :n] = tokens
            soft[i, :n] = soft_pos if soft_pos is not None else np.arange(n)
            seg[i, :n] = segments
            if visible is None:
                vis[i, :n, :n] = 1.0
            else:
                vis[i, :n, :n] = np.asarray(visible, dtype=dtype)
            if label is None:
                has_labels = False
            else:
                labels[i] = label
        return cls(ids, soft, seg, vis, labels if has_labels else None)

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]


def _layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return gain * xhat + bias, (xhat, inv)


def _layer_norm_backward(dy, cache, gain):
    xhat, inv = cache
    axes = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=axes)
    dbias = dy.sum(axis=axes)
    dxhat = dy * gain
    dmean = dxhat.mean(axis=-1, keepdims=True)
    dproj = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - dmean - xhat * dproj)
    return dx, dgain, dbias


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _gelu(x):
    u = _GELU_C * (x + _GELU_A * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(u))


def _gelu_grad(x):
    u = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(u)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)


def _softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x, n_heads):
    b, l, d = x.shape
    return x.reshape(b, l, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, l, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * dh)


def embed(batch: Batch, params: dict, config: EncoderConfig) -> np.ndarray:
    """Token + soft-position + segment embedding, layer-normed. (B, L, d)."""
    out, _ = _embed_cache(batch, params, config)
    return out


def _embed_cache(batch, params, config):
    if int(batch.soft_positions.max(initial=0)) >= config.max_position:
        raise DomainError(
            f"soft position {int(batch.soft_positions.max())} >= "
            f"max_position {config.max_position}"
        )
    total = params["tok_emb"][batch.token_ids] + params["pos_emb"][batch.soft_positions]
    if config.use_segments:
        total = total + params["seg_emb"][batch.segments]
    normed, ln_cache = _layer_norm(total, params["emb_ln_g"], params["emb_ln_b"])
    return normed, ln_cache


def _attention_block(x, visible, params, prefix, config, attn_dropout_mask=None):
    """One attention sub-block: projections, masked softmax, residual, LN."""
    h = config.n_heads
    scale = 1.0 / math.sqrt(config.head_dim)
    q = x @ params[f"{prefix}.wq"] + params[f"{prefix}.bq"]
    k = x @ params[f"{prefix}.wk"] + params[f"{prefix}.bk"]
    v = x @ params[f"{prefix}.wv"] + params[f"{prefix}.bv"]
    qh, kh, vh = _split_heads(q, h), _split_heads(k, h), _split_heads(v, h)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    scores = scores + ((1.0 - visible) * MASK_VALUE)[:, None, :, :]
    weights = _softmax(scores)
    used = weights if attn_dropout_mask is None else weights * attn_dropout_mask
    ctx = _merge_heads(used @ vh)
    attn = ctx @ params[f"{prefix}.wo"] + params[f"{prefix}.bo"]
    out, ln_cache = _layer_norm(x + attn, params[f"{prefix}.ln1_g"], params[f"{prefix}.ln1_b"])
    cache = {
        "x": x, "qh": qh, "kh": kh, "vh": vh, "weights": weights, "used": used,
        "ctx": ctx, "ln": ln_cache, "dropout": attn_dropout_mask,
    }
    return out, cache


def masked_attention(
    hidden: np.ndarray,
    visible: np.ndarray,
    params: dict,
    config: EncoderConfig,
    layer: int = 0,
) -> np.ndarray:
    """Apply one layer's masked attention block to hidden states."""
    out, _ = _attention_block(hidden, visible, params, f"l{layer}", config)
    return out


def attention_weights(
    hidden: np.ndarray,
    visible: np.ndarray,
    params: dict,
    config: EncoderConfig,
    layer: int = 0,
) -> np.ndarray:
    """Post-softmax attention weights (B, H, L, L) of one layer, for inspection."""
    _, cache = _attention_block(hidden, visible, params, f"l{layer}", config)
    return cache["weights"]


def _ffn_block(x, params, prefix):
    h1 = x @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"]
    a = _gelu(h1)
    f = a @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]
    out, ln_cache = _layer_norm(x + f, params[f"{prefix}.ln2_g"], params[f"{prefix}.ln2_b"])
    return out, {"x": x, "h1": h1, "a": a, "ln": ln_cache}


def _forward_cache(batch, params, config, training=False, dropout_rng=None):
    rate = config.dropout_rate if training else 0.0
    if rate > 0.0 and dropout_rng is None:
        raise DomainError("training with dropout requires a dropout rng")
    keep = 1.0 - rate

    x, emb_ln_cache = _embed_cache(batch, params, config)
    emb_mask = None
    if rate > 0.0:
        emb_mask = (dropout_rng.random(x.shape) < keep).astype(x.dtype) / keep
        x = x * emb_mask

    layer_caches = []
    for i in range(config.n_layers):
        attn_mask = None
        if rate > 0.0:
            b, l = batch.token_ids.shape
            attn_mask = (
                dropout_rng.random((b, config.n_heads, l, l)) < keep
            ).astype(x.dtype) / keep
        x, attn_cache = _attention_block(
            x, batch.visible, params, f"l{i}", config, attn_dropout_mask=attn_mask
        )
        x, ffn_cache = _ffn_block(x, params, f"l{i}")
        layer_caches.append((attn_cache, ffn_cache))

    h_cls = x[:, 0, :]
    logits = h_cls @ params["cls_w"] + params["cls_b"]
    probs = _softmax(logits)
    if not np.isfinite(probs).all():
        raise NumericalError("non-finite activations in forward pass")
    cache = {
        "emb_ln": emb_ln_cache, "emb_mask": emb_mask, "layers": layer_caches,
        "h_cls": h_cls, "probs": probs,
    }
    return probs, cache


def forward(batch: Batch, params: dict, config: EncoderConfig) -> np.ndarray:
    """Class probabilities (B, 2); rows sum to 1. Evaluation mode."""
    probs, _ = _forward_cache(batch, params, config, training=False)
    return probs


def loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood of the true labels (natural log)."""
    picked = probs[np.arange(len(labels)), labels]
    if (picked < 1e-12).any():
        warnings.warn("probability clamped at 1e-12 in loss", RuntimeWarning)
        picked = np.maximum(picked, 1e-12)
    return float(-np.log(picked).mean())


def loss_and_gradients(
    batch: Batch,
    params: dict,
    config: EncoderConfig,
    training: bool = False,
    dropout_rng=None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss plus exact analytic gradients for every parameter."""
    if batch.labels is None:
        raise DomainError("gradients require a labeled batch")
    probs, cache = _forward_cache(batch, params, config, training, dropout_rng)
    loss_value = loss(probs, batch.labels)

    b = batch.size
    grads = {name: np.zeros_like(arr) for name, arr in params.items()}

    dlogits = probs.copy()
    dlogits[np.arange(b), batch.labels] -= 1.0
    dlogits /= b

    grads["cls_w"] = cache["h_cls"].T @ dlogits
    grads["cls_b"] = dlogits.sum(axis=0)
    b_, l_ = batch.token_ids.shape
    dx = np.zeros((b_, l_, config.d_model), dtype=params["cls_w"].dtype)
    dx[:, 0, :] = dlogits @ params["cls_w"].T

    scale = 1.0 / math.sqrt(config.head_dim)
    for i in reversed(range(config.n_layers)):
        prefix = f"l{i}"
        attn_cache, ffn_cache = cache["layers"][i]

        # FFN block: out = LN2(x1 + w2·gelu(w1·x1 + b1) + b2)
        dz, dg, dbv = _layer_norm_backward(dx, ffn_cache["ln"], params[f"{prefix}.ln2_g"])
        grads[f"{prefix}.ln2_g"] += dg
        grads[f"{prefix}.ln2_b"] += dbv
        x1, h1, a = ffn_cache["x"], ffn_cache["h1"], ffn_cache["a"]
        df = dz
        grads[f"{prefix}.w2"] += a.reshape(-1, a.shape[-1]).T @ df.reshape(-1, df.shape[-1])
        grads[f"{prefix}.b2"] += df.sum(axis=(0, 1))
        da = df @ params[f"{prefix}.w2"].T
        dh1 = da * _gelu_grad(h1)
        grads[f"{prefix}.w1"] += x1.reshape(-1, x1.shape[-1]).T @ dh1.reshape(-1, dh1.shape[-1])
        grads[f"{prefix}.b1"] += dh1.sum(axis=(0, 1))
        dx1 = dz + dh1 @ params[f"{prefix}.w1"].T

        # Attention block: x1 = LN1(x + attn(x))
        dz, dg, dbv = _layer_norm_backward(dx1, attn_cache["ln"], params[f"{prefix}.ln1_g"])
        grads[f"{prefix}.ln1_g"] += dg
        grads[f"{prefix}.ln1_b"] += dbv
        x = attn_cache["x"]
        dattn = dz
        ctx = attn_cache["ctx"]
        grads[f"{prefix}.wo"] += ctx.reshape(-1, ctx.shape[-1]).T @ dattn.reshape(-1, dattn.shape[-1])
        grads[f"{prefix}.bo"] += dattn.sum(axis=(0, 1))
        dctx = _split_heads(dattn @ params[f"{prefix}.wo"].T, config.n_heads)

        used, weights, vh = attn_cache["used"], attn_cache["weights"], attn_cache["vh"]
        dused = dctx @ vh.transpose(0, 1, 3, 2)
        dvh = used.transpose(0, 1, 3, 2) @ dctx
        dweights = dused if attn_cache["dropout"] is None else dused * attn_cache["dropout"]
        dscores = weights * (dweights - (dweights * weights).sum(axis=-1, keepdims=True))
        dqh = (dscores @ attn_cache["kh"]) * scale
        dkh = (dscores.transpose(0, 1, 3, 2) @ attn_cache["qh"]) * scale

        dq, dk, dv = _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)
        x_flat = x.reshape(-1, x.shape[-1])
        grads[f"{prefix}.wq"] += x_flat.T @ dq.reshape(-1, dq.shape[-1])
        grads[f"{prefix}.bq"] += dq.sum(axis=(0, 1))
        grads[f"{prefix}.wk"] += x_flat.T @ dk.reshape(-1, dk.shape[-1])
        grads[f"{prefix}.bk"] += dk.sum(axis=(0, 1))
        grads[f"{prefix}.wv"] += x_flat.T @ dv.reshape(-1, dv.shape[-1])
        grads[f"{prefix}.bv"] += dv.sum(axis=(0, 1))
        dx = (
            dz
            + dq @ params[f"{prefix}.wq"].T
            + dk @ params[f"{prefix}.wk"].T
            + dv @ params[f"{prefix}.wv"].T
        )

    if cache["emb_mask"] is not None:
        dx = dx * cache["emb_mask"]
    dsum, dg, dbv = _layer_norm_backward(dx, cache["emb_ln"], params["emb_ln_g"])
    grads["emb_ln_g"] += dg
    grads["emb_ln_b"] += dbv
    np.add.at(grads["tok_emb"], batch.token_ids, dsum)
    np.add.at(grads["pos_emb"], batch.soft_positions, dsum)
    if config.use_segments:
        np.add.at(grads["seg_emb"], batch.segments, dsum)

    return loss_value, grads


def gradients(batch: Batch, params: dict, config: EncoderConfig) -> dict[str, np.ndarray]:
    """Analytic gradients of the mean classification loss."""
    _, grads = loss_and_gradients(batch, params, config)
    return grads


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def init(cls, params: dict) -> "AdamState":
        return cls(
            step=0,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def train_step(
    batch: Batch,
    params: dict,
    state: AdamState,
    lr: float,
    config: EncoderConfig,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    dropout_seed: int | None = None,
) -> tuple[dict[str, np.ndarray], AdamState, float]:
    """One Adam update. Aborts (params untouched) on non-finite gradients."""
    rng = None
    if config.dropout_rate > 0.0:
        rng = np.random.default_rng(dropout_seed if dropout_seed is not None else 0)
    loss_value, grads = loss_and_gradients(
        batch, params, config, training=True, dropout_rng=rng
    )
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient in {name}, step aborted")

    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_params[name] = p - update
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(step=t, m=new_m, v=new_v), loss_value


def save_checkpoint(
    path: str | Path,
    params: dict,
    config: EncoderConfig,
    seed: int,
    vocab_hash: str | None = None,
) -> None:
    """Write a self-describing checkpoint: JSON header line + raw arrays."""
    order = param_names(config)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "seed": seed,
        "vocab_hash": vocab_hash,
        "params": [{"name": n, "shape": list(params[n].shape)} for n in order],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for name in order:
            fh.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict, EncoderConfig, int, dict]:
    """Read a checkpoint back: (params, config, seed, header)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: bad checkpoint header") from exc
        if header.get("version") != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version")
        config = EncoderConfig.from_dict(header["config"])
        params = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise FormatError(f"{path}: truncated checkpoint")
            arr = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(config.np_dtype)
            params[entry["name"]] = arr
    return params, config, int(header["seed"]), header
