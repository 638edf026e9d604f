"""Network blocks: bidirectional LSTM acoustic encoder, token softmax
head, recurrent sentiment summarizer, and the conv + multi-head-attention
emotion regressor, all built on the autodiff substrate.

Parameters live in a ParameterStore keyed by hierarchical names
(``encoder.layer0.fwd.w_x`` etc).  Freezing a prefix removes those
parameters from gradient flow entirely.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray
from .frontend import FeatureMatrix
from .tokens import VOCAB_SIZE

CKPT_MAGIC = b"SA2S"
CKPT_VERSION = 1

NEG_INF = -1e30

MIN_REGRESSOR_FRAMES = 12  # two valid conv stages need at least this many


@dataclass
class EncoderConfig:
    layers: int = 5
    hidden: int = 192
    input_dim: int = 120

    def __post_init__(self):
        if self.layers < 1 or self.hidden < 1 or self.input_dim < 1:
            raise ValueError(f"invalid encoder config: {self}")

    @property
    def output_dim(self) -> int:
        return 2 * self.hidden


@dataclass
class SentimentHeadConfig:
    summarizer_hidden: int = 192
    classes: int = 3

    def __post_init__(self):
        if self.classes != 3:
            raise ValueError("sentiment head is defined for exactly 3 classes")
        if self.summarizer_hidden < 1:
            raise ValueError("summarizer_hidden must be positive")


@dataclass
class RegressorConfig:
    conv_filters: tuple[int, int] = (6, 3)
    conv_strides: tuple[int, int] = (3, 2)
    conv_channels: int = 64
    attn_heads: int = 4
    attn_dim: int = 64
    leaky_alpha: float = 0.3
    output_dim: int = 3

    def __post_init__(self):
        for filt, stride in zip(self.conv_filters, self.conv_strides):
            if filt < stride:
                raise ValueError(f"conv filter {filt} smaller than stride {stride}")
        if self.attn_dim % self.attn_heads != 0:
            raise ValueError(
                f"attn_dim {self.attn_dim} not divisible by {self.attn_heads} heads"
            )

    @property
    def head_dim(self) -> int:
        return self.attn_dim // self.attn_heads


class ParameterStore:
    """Named, shaped trainable arrays with per-name frozen flags."""

    def __init__(self):
        self._params: dict[str, DiffArray] = {}
        self._frozen: set[str] = set()

    def add(self, name: str, values: np.ndarray) -> DiffArray:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        p = ad.leaf(values, requires_grad=True)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> DiffArray:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def trainable_items(self):
        return [(n, p) for n, p in self.items() if n not in self._frozen]

    def freeze(self, prefix: str) -> None:
        for name, p in self._params.items():
            if name.startswith(prefix):
                self._frozen.add(name)
                p.requires_grad = False
                p.grad = None

    def unfreeze(self, prefix: str) -> None:
        for name, p in self._params.items():
            if name.startswith(prefix) and name in self._frozen:
                self._frozen.discard(name)
                p.requires_grad = True

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def frozen_names(self) -> list[str]:
        return sorted(self._frozen)

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None

    def checksum(self, prefix: str = "") -> str:
        digest = hashlib.sha256()
        for name in self.names():
            if name.startswith(prefix):
                digest.update(name.encode())
                digest.update(self._params[name].values.tobytes())
        return digest.hexdigest()


# ---------------------------------------------------------------------------
# initialization


def _glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _lstm_recurrent(rng: np.random.Generator, hidden: int) -> np.ndarray:
    # one orthogonal block per gate, concatenated to (H, 4H)
    return np.concatenate([_orthogonal(rng, hidden) for _ in range(4)], axis=1)


def _lstm_bias(hidden: int) -> np.ndarray:
    b = np.zeros(4 * hidden)
    b[hidden : 2 * hidden] = 1.0  # forget gate
    return b


def _add_lstm(store, rng, prefix: str, in_dim: int, hidden: int) -> None:
    store.add(f"{prefix}.w_x", _glorot_uniform(rng, in_dim, 4 * hidden))
    store.add(f"{prefix}.w_h", _lstm_recurrent(rng, hidden))
    store.add(f"{prefix}.b", _lstm_bias(hidden))


def init_parameters(
    seed: int,
    enc: EncoderConfig,
    sent: SentimentHeadConfig,
    reg: RegressorConfig,
) -> ParameterStore:
    """Build all trainable arrays: Glorot-uniform linear/conv weights,
    orthogonal recurrent blocks, zero biases except forget gates at 1.
    """
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    for layer in range(enc.layers):
        in_dim = enc.input_dim if layer == 0 else enc.output_dim
        _add_lstm(store, rng, f"encoder.layer{layer}.fwd", in_dim, enc.hidden)
        _add_lstm(store, rng, f"encoder.layer{layer}.bwd", in_dim, enc.hidden)

    store.add("token.w", _glorot_uniform(rng, enc.output_dim, VOCAB_SIZE))
    store.add("token.b", np.zeros(VOCAB_SIZE))

    _add_lstm(store, rng, "sentiment.lstm", enc.output_dim, sent.summarizer_hidden)
    store.add("sentiment.out.w", _glorot_uniform(rng, sent.summarizer_hidden, sent.classes))
    store.add("sentiment.out.b", np.zeros(sent.classes))

    k = reg.conv_channels
    store.add("regressor.conv1.w", _glorot_uniform(rng, reg.conv_filters[0] * enc.output_dim, k))
    store.add("regressor.conv1.b", np.zeros(k))
    store.add("regressor.conv2.w", _glorot_uniform(rng, reg.conv_filters[1] * k, k))
    store.add("regressor.conv2.b", np.zeros(k))
    store.add("regressor.proj.w", _glorot_uniform(rng, k, reg.attn_dim))
    store.add("regressor.proj.b", np.zeros(reg.attn_dim))
    for h in range(reg.attn_heads):
        for kind in ("wq", "wk", "wv"):
            store.add(f"regressor.attn.h{h}.{kind}", _glorot_uniform(rng, reg.attn_dim, reg.head_dim))
        for kind in ("bq", "bk", "bv"):
            store.add(f"regressor.attn.h{h}.{kind}", np.zeros(reg.head_dim))
    store.add("regressor.attn.out.w", _glorot_uniform(rng, reg.attn_dim, reg.attn_dim))
    store.add("regressor.attn.out.b", np.zeros(reg.attn_dim))
    store.add("regressor.out.w", _glorot_uniform(rng, 2 * reg.attn_dim, reg.output_dim))
    store.add("regressor.out.b", np.zeros(reg.output_dim))
    return store


# ---------------------------------------------------------------------------
# recurrent core


def _lstm_sequence(
    x: DiffArray, params: ParameterStore, prefix: str, hidden: int, reverse: bool
) -> list[DiffArray]:
    """Run one LSTM direction over the rows of x; returns per-step hidden
    states in original time order.  Initial state is zero.
    """
    w_x, w_h, b = params[f"{prefix}.w_x"], params[f"{prefix}.w_h"], params[f"{prefix}.b"]
    if x.shape[1] != w_x.shape[0]:
        raise ValueError(
            f"{prefix}: input dim {x.shape[1]} does not match weights {w_x.shape}"
        )
    steps = x.shape[0]
    gates_in = ad.add_rowvec(ad.matmul(x, w_x), b)  # T x 4H
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    outputs: list[DiffArray | None] = [None] * steps
    h = c = None
    for t in order:
        z = gates_in[t]
        if h is not None:
            z = ad.add(z, ad.matmul(h, w_h))
        i = ad.sigmoid(z[0:hidden])
        f = ad.sigmoid(z[hidden : 2 * hidden])
        g = ad.tanh(z[2 * hidden : 3 * hidden])
        o = ad.sigmoid(z[3 * hidden : 4 * hidden])
        write = ad.mul(i, g)
        c = write if c is None else ad.add(ad.mul(f, c), write)
        h = ad.mul(o, ad.tanh(c))
        outputs[t] = h
    return outputs  # type: ignore[return-value]


def _scatter_valid(rows: list[DiffArray], mask: np.ndarray, width: int) -> DiffArray:
    """Stack per-valid-frame rows back into a full-length matrix with zero
    rows at padding positions.
    """
    if mask.all():
        return ad.stack_rows(rows)
    zero = ad.constant(np.zeros(width))
    full: list[DiffArray] = []
    it = iter(rows)
    for valid in mask:
        full.append(next(it) if valid else zero)
    return ad.stack_rows(full)


def encoder_forward(
    feats: FeatureMatrix, params: ParameterStore, cfg: EncoderConfig
) -> tuple[DiffArray, np.ndarray]:
    """Stacked Bi-LSTM over valid frames; padding rows come out as zeros.

    Returns a T x (2 * hidden) encoding plus the (copied) validity mask.
    """
    if feats.num_channels != cfg.input_dim:
        raise ValueError(
            f"encoder expects {cfg.input_dim} input channels, got {feats.num_channels}"
        )
    mask = feats.mask.copy()
    x = ad.constant(feats.frames[mask])
    for layer in range(cfg.layers):
        prefix = f"encoder.layer{layer}"
        fwd = _lstm_sequence(x, params, f"{prefix}.fwd", cfg.hidden, reverse=False)
        bwd = _lstm_sequence(x, params, f"{prefix}.bwd", cfg.hidden, reverse=True)
        x = ad.stack_rows([ad.concat([f, b], axis=0) for f, b in zip(fwd, bwd)])
    rows = [x[t] for t in range(x.shape[0])]
    return _scatter_valid(rows, mask, cfg.output_dim), mask


def token_head_forward(encoding: DiffArray, params: ParameterStore) -> DiffArray:
    """Per-frame log-probabilities over the 29 token classes."""
    logits = ad.add_rowvec(ad.matmul(encoding, params["token.w"]), params["token.b"])
    return ad.log_softmax(logits, axis=1)


def sentiment_head_forward(
    encoding: DiffArray,
    mask: np.ndarray,
    params: ParameterStore,
    cfg: SentimentHeadConfig,
) -> DiffArray:
    """Summarize valid frames with a unidirectional LSTM; classify the
    final state into 3-way sentiment log-probabilities.
    """
    mask = np.asarray(mask, dtype=bool)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("empty sequence: sentiment head needs at least one valid frame")
    x = ad.take(encoding, idx, axis=0) if idx.size != encoding.shape[0] else encoding
    states = _lstm_sequence(x, params, "sentiment.lstm", cfg.summarizer_hidden, reverse=False)
    logits = ad.add(
        ad.matmul(states[-1], params["sentiment.out.w"]), params["sentiment.out.b"]
    )
    return ad.log_softmax(logits, axis=0)


# ---------------------------------------------------------------------------
# emotion regressor


def _conv_stage(
    x: DiffArray,
    params: ParameterStore,
    prefix: str,
    filt: int,
    stride: int,
    alpha: float,
) -> DiffArray:
    """Valid 1-d convolution over time followed by per-example channel
    normalization and LeakyReLU.
    """
    length, channels = x.shape
    out_len = (length - filt) // stride + 1
    windows = [
        ad.reshape(x[t * stride : t * stride + filt], (filt * channels,))
        for t in range(out_len)
    ]
    y = ad.add_rowvec(
        ad.matmul(ad.stack_rows(windows), params[f"{prefix}.w"]), params[f"{prefix}.b"]
    )
    mean = ad.reduce_mean(y, axis=0)
    var = ad.reduce_var(y, axis=0)
    centered = ad.add_rowvec(y, ad.neg(mean))
    inv_std = ad.power(ad.add(var, ad.constant(1e-8)), -0.5)
    return ad.leaky_relu(ad.mul_rowvec(centered, inv_std), alpha)


def multi_head_attention(
    x: DiffArray,
    mask: np.ndarray,
    params: ParameterStore,
    cfg: RegressorConfig,
    return_weights: bool = False,
):
    """Scaled dot-product self-attention.  Masked positions neither attend
    nor are attended: they get zero attention mass and zero output rows.
    """
    mask = np.asarray(mask, dtype=bool)
    length = x.shape[0]
    if mask.shape != (length,):
        raise ValueError(f"attention mask shape {mask.shape} vs input {x.shape}")
    all_valid = bool(mask.all())
    key_bias = None if all_valid else ad.constant(
        np.broadcast_to(np.where(mask, 0.0, NEG_INF), (length, length)).copy()
    )
    scale = ad.constant(1.0 / np.sqrt(cfg.head_dim))
    heads = []
    weights = []
    for h in range(cfg.attn_heads):
        p = f"regressor.attn.h{h}"
        q = ad.add_rowvec(ad.matmul(x, params[f"{p}.wq"]), params[f"{p}.bq"])
        k = ad.add_rowvec(ad.matmul(x, params[f"{p}.wk"]), params[f"{p}.bk"])
        v = ad.add_rowvec(ad.matmul(x, params[f"{p}.wv"]), params[f"{p}.bv"])
        scores = ad.mul(ad.matmul(q, ad.transpose(k)), scale)
        if key_bias is not None:
            scores = ad.add(scores, key_bias)
        attn = ad.softmax(scores, axis=1)
        weights.append(attn)
        heads.append(ad.matmul(attn, v))
    out = ad.add_rowvec(
        ad.matmul(ad.concat(heads, axis=1), params["regressor.attn.out.w"]),
        params["regressor.attn.out.b"],
    )
    if not all_valid:
        out = ad.mul(out, ad.constant(np.repeat(mask[:, None], cfg.attn_dim, axis=1).astype(float)))
    return (out, weights) if return_weights else out


def mean_var_pool(x: DiffArray) -> DiffArray:
    """Concatenate time-axis mean and population variance per channel."""
    return ad.concat([ad.reduce_mean(x, axis=0), ad.reduce_var(x, axis=0)], axis=0)


def regressor_forward(
    encoding: DiffArray,
    mask: np.ndarray,
    params: ParameterStore,
    cfg: RegressorConfig,
) -> DiffArray:
    """Two strided masked convolutions, multi-head self-attention, mean
    and variance pooling, and a linear projection to the AVD triple.

    Padding is removed up front, so downstream stages see only valid
    frames; this is what the mask-aware formulation computes.
    """
    mask = np.asarray(mask, dtype=bool)
    valid = int(mask.sum())
    if valid < MIN_REGRESSOR_FRAMES:
        raise ValueError(
            f"sequence too short for regressor: {valid} valid frames < {MIN_REGRESSOR_FRAMES}"
        )
    idx = np.flatnonzero(mask)
    x = ad.take(encoding, idx, axis=0) if valid != encoding.shape[0] else encoding
    x = _conv_stage(x, params, "regressor.conv1", cfg.conv_filters[0], cfg.conv_strides[0], cfg.leaky_alpha)
    x = _conv_stage(x, params, "regressor.conv2", cfg.conv_filters[1], cfg.conv_strides[1], cfg.leaky_alpha)
    x = ad.add_rowvec(ad.matmul(x, params["regressor.proj.w"]), params["regressor.proj.b"])
    x = multi_head_attention(x, np.ones(x.shape[0], dtype=bool), params, cfg)
    pooled = mean_var_pool(x)
    return ad.add(ad.matmul(pooled, params["regressor.out.w"]), params["regressor.out.b"])


def conv_output_length(length: int, filt: int, stride: int) -> int:
    return (length - filt) // stride + 1


# ---------------------------------------------------------------------------
# checkpoint container


def save_params(store: ParameterStore, path, metadata: dict | None = None) -> None:
    """Write the checkpoint container.

    Layout: magic "SA2S", version u16, count u32, then per entry a u16
    name length, UTF-8 name, rank u8, u32 dims, and float32 LE values;
    finally a u32-length-prefixed JSON metadata block (config echo, epoch
    counters, frozen names).
    """
    meta = dict(metadata or {})
    meta.setdefault("frozen", store.frozen_names())
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(store))]
    for name, p in store.items():
        encoded = name.encode("utf-8")
        values = p.values
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", values.ndim))
        parts.append(struct.pack(f"<{values.ndim}I", *values.shape))
        parts.append(values.astype("<f4").tobytes())
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_name(target.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, target)


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def read(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise ValueError(
                f"{self.path}: truncated checkpoint reading {what} at byte {self.pos}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out


def load_params(path) -> tuple[ParameterStore, dict]:
    """Read a checkpoint container; parameter values come back float64."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.read(4, "magic") != CKPT_MAGIC:
        raise ValueError(f"{path}: bad magic at byte 0, not a checkpoint")
    version, count = struct.unpack("<HI", r.read(6, "header"))
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    store = ParameterStore()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", r.read(2, "name length"))
        name = r.read(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", r.read(1, "rank"))
        dims = struct.unpack(f"<{rank}I", r.read(4 * rank, "dims"))
        n_values = int(np.prod(dims)) if rank else 1
        raw = r.read(4 * n_values, f"values of {name}")
        values = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(dims)
        store.add(name, values)
    (meta_len,) = struct.unpack("<I", r.read(4, "metadata length"))
    meta = json.loads(r.read(meta_len, "metadata").decode("utf-8"))
    for name in meta.get("frozen", []):
        store.freeze(name)
    return store, meta
