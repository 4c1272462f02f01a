"""Toy transformer encoders for proteins and biotexts, cross-attention fusion
and the EMA property-prototype bank.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names
(``protein.l0.wqkv``, ``fuse.wq`` ...) so checkpoints and optimizers can treat
them uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeMismatch, TooLong
from .records import PAD_ID, PropertyKind, check_spans
from .tensor import Tensor

Params = dict[str, Tensor]
_MASK_NEG = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    dim: int = 64
    layers: int = 2
    heads: int = 4
    ff_dim: int = 128
    max_len: int = 512
    dropout: float = 0.0

    def __post_init__(self) -> None:
        if min(self.vocab_size, self.dim, self.heads, self.ff_dim, self.max_len) < 1 or self.layers < 0:
            raise ConfigError(f"encoder dimensions must be positive: {self}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")


@dataclass
class EncodedProtein:
    residues: Tensor  # (n, d)
    pooled: Tensor  # (d,)
    key_mask: np.ndarray  # (n,) True for real residues


@dataclass
class EncodedBiotext:
    tokens: Tensor  # (m, d)
    pooled: Tensor  # (d,)
    prototypes: Tensor  # (4, d); absent rows are constant zeros
    present: np.ndarray = field(default_factory=lambda: np.zeros(4, dtype=bool))


def _uniform(rng: np.random.Generator, fan_in: int, shape, name: str) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def _const(value: float, shape, name: str) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True, name=name)


def init_encoder_params(config: EncoderConfig, prefix: str, rng: np.random.Generator) -> Params:
    d, f = config.dim, config.ff_dim
    p: Params = {}

    def add(name, t):
        p[f"{prefix}.{name}"] = t
        t.name = f"{prefix}.{name}"

    # Token embeddings see a one-hot input, so fan_in is 1.
    add("tok", _uniform(rng, 1, (config.vocab_size, d), ""))
    for i in range(config.layers):
        add(f"l{i}.ln1.g", _const(1.0, d, ""))
        add(f"l{i}.ln1.b", _const(0.0, d, ""))
        add(f"l{i}.wqkv", _uniform(rng, d, (d, 3 * d), ""))
        add(f"l{i}.wo", _uniform(rng, d, (d, d), ""))
        add(f"l{i}.ln2.g", _const(1.0, d, ""))
        add(f"l{i}.ln2.b", _const(0.0, d, ""))
        add(f"l{i}.ff1.w", _uniform(rng, d, (d, f), ""))
        add(f"l{i}.ff1.b", _const(0.0, f, ""))
        add(f"l{i}.ff2.w", _uniform(rng, f, (f, d), ""))
        add(f"l{i}.ff2.b", _const(0.0, d, ""))
    if config.layers:
        add("lnf.g", _const(1.0, d, ""))
        add("lnf.b", _const(0.0, d, ""))
    add("pool.w", _uniform(rng, d, (d, d), ""))
    add("pool.b", _const(0.0, d, ""))
    return p


def init_fusion_params(dim: int, rng: np.random.Generator) -> Params:
    return {f"fuse.{n}": _uniform(rng, dim, (dim, dim), f"fuse.{n}") for n in ("wq", "wk", "wv", "wo")}


def init_prototype_params(dim: int, rng: np.random.Generator) -> Params:
    return {"text.proto.w": _uniform(rng, dim, (dim, dim), "text.proto.w"),
            "text.proto.b": _const(0.0, dim, "text.proto.b")}


def init_head_params(prefix: str, dim: int, vocab: int, rng: np.random.Generator) -> Params:
    """Reconstruction head: linear -> GELU -> layer norm -> linear to vocab."""
    return {
        f"{prefix}.w1": _uniform(rng, dim, (dim, dim), f"{prefix}.w1"),
        f"{prefix}.b1": _const(0.0, dim, f"{prefix}.b1"),
        f"{prefix}.ln.g": _const(1.0, dim, f"{prefix}.ln.g"),
        f"{prefix}.ln.b": _const(0.0, dim, f"{prefix}.ln.b"),
        f"{prefix}.w2": _uniform(rng, dim, (dim, vocab), f"{prefix}.w2"),
        f"{prefix}.b2": _const(0.0, vocab, f"{prefix}.b2"),
    }


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return T.mul(x, Tensor(keep))


def _self_attention(x: Tensor, wqkv: Tensor, wo: Tensor, heads: int, key_bias: Tensor | None) -> Tensor:
    d = x.shape[1]
    dh = d // heads
    qkv = T.matmul(x, wqkv)
    inv = 1.0 / math.sqrt(dh)
    outs = []
    for h in range(heads):
        q = qkv[:, h * dh:(h + 1) * dh]
        k = qkv[:, d + h * dh:d + (h + 1) * dh]
        v = qkv[:, 2 * d + h * dh:2 * d + (h + 1) * dh]
        scores = T.scale(T.matmul(q, T.transpose(k)), inv)
        if key_bias is not None:
            scores = T.add(scores, key_bias)
        outs.append(T.matmul(T.softmax_rows(scores), v))
    merged = outs[0] if heads == 1 else T.concat(outs, axis=1)
    return T.matmul(merged, wo)


def _stack(x: Tensor, params: Params, prefix: str, config: EncoderConfig, key_mask: np.ndarray,
           rng: np.random.Generator | None) -> Tensor:
    n = x.shape[0]
    key_bias = None
    if not key_mask.all():
        key_bias = Tensor(np.broadcast_to(np.where(key_mask, 0.0, _MASK_NEG), (n, n)).copy())
    for i in range(config.layers):
        p = f"{prefix}.l{i}"
        h = T.layer_norm(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        h = _self_attention(h, params[f"{p}.wqkv"], params[f"{p}.wo"], config.heads, key_bias)
        x = T.add(x, _dropout(h, config.dropout, rng))
        h = T.layer_norm(x, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        h = T.gelu(T.add_row(T.matmul(h, params[f"{p}.ff1.w"]), params[f"{p}.ff1.b"]))
        h = T.add_row(T.matmul(h, params[f"{p}.ff2.w"]), params[f"{p}.ff2.b"])
        x = T.add(x, _dropout(h, config.dropout, rng))
    if config.layers:
        x = T.layer_norm(x, params[f"{prefix}.lnf.g"], params[f"{prefix}.lnf.b"])
    return x


def _embed(tokens: np.ndarray, params: Params, prefix: str, config: EncoderConfig) -> Tensor:
    n = len(tokens)
    if n == 0:
        raise ShapeMismatch("cannot encode an empty token list")
    if n > config.max_len:
        raise TooLong(f"{n} tokens exceed max_len {config.max_len}")
    emb = T.embedding_lookup(params[f"{prefix}.tok"], tokens)
    return T.add(emb, Tensor(sinusoidal_positions(n, config.dim)))


def _pool(x: Tensor, key_mask: np.ndarray, params: Params, prefix: str) -> Tensor:
    real = x if key_mask.all() else x[np.flatnonzero(key_mask)]
    return T.add(T.matmul(T.mean(real, axis=0), params[f"{prefix}.pool.w"]), params[f"{prefix}.pool.b"])


def encode_protein(tokens, params: Params, config: EncoderConfig, rng: np.random.Generator | None = None,
                   prefix: str = "protein") -> EncodedProtein:
    """Pre-norm transformer over residue ids; PAD positions are masked out as keys and from pooling."""
    tokens = np.asarray(tokens, dtype=np.int64)
    key_mask = tokens != PAD_ID
    x = _stack(_embed(tokens, params, prefix, config), params, prefix, config, key_mask, rng)
    return EncodedProtein(x, _pool(x, key_mask, params, prefix), key_mask)


def encode_biotext(tokens, spans, params: Params, config: EncoderConfig,
                   rng: np.random.Generator | None = None, prefix: str = "text") -> EncodedBiotext:
    """Encode biotext ids; prototype i is the projected mean of the token states in span i."""
    tokens = np.asarray(tokens, dtype=np.int64)
    check_spans(spans, len(tokens))
    key_mask = np.ones(len(tokens), dtype=bool)
    x = _stack(_embed(tokens, params, prefix, config), params, prefix, config, key_mask, rng)
    d = config.dim
    rows, present = [], np.zeros(4, dtype=bool)
    for kind in PropertyKind:
        if kind in spans:
            start, stop = spans[kind]
            span_mean = T.mean(x[start:stop], axis=0)
            rows.append(T.add(T.matmul(span_mean, params[f"{prefix}.proto.w"]), params[f"{prefix}.proto.b"]))
            present[kind] = True
        else:
            rows.append(Tensor(np.zeros(d)))
    return EncodedBiotext(x, _pool(x, key_mask, params, prefix), T.stack(rows), present)


def cross_attention_fuse(residues: Tensor, text_tokens: Tensor, params: Params) -> Tensor:
    """Residues attend (single head) over all biotext tokens; output is residual: x + attn(x, t) W_o."""
    if residues.ndim != 2 or text_tokens.ndim != 2 or residues.shape[1] != text_tokens.shape[1]:
        raise ShapeMismatch(f"fuse {residues.shape} with {text_tokens.shape}")
    q = T.matmul(residues, params["fuse.wq"])
    k = T.matmul(text_tokens, params["fuse.wk"])
    v = T.matmul(text_tokens, params["fuse.wv"])
    attn = T.softmax_rows(T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(residues.shape[1])))
    return T.add(residues, T.matmul(T.matmul(attn, v), params["fuse.wo"]))


def apply_head(h: Tensor, params: Params, prefix: str) -> Tensor:
    h = T.gelu(T.add_row(T.matmul(h, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    h = T.layer_norm(h, params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"])
    return T.add_row(T.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.where(norms > 0, norms, 1.0)


@dataclass(frozen=True)
class PrototypeBank:
    rows: np.ndarray  # (4, d), unit rows
    decay: float = 0.95

    @classmethod
    def initial(cls, dim: int, rng: np.random.Generator, decay: float = 0.95) -> "PrototypeBank":
        return cls(_unit_rows(rng.standard_normal((4, dim))), decay)


def update_prototype_bank(bank: PrototypeBank, prototypes: np.ndarray, present: np.ndarray) -> PrototypeBank:
    """EMA step. ``prototypes`` is (B, 4, d) and ``present`` (B, 4); rows no sample has are kept."""
    prototypes = np.asarray(prototypes, dtype=np.float64)
    present = np.asarray(present, dtype=bool)
    rows = bank.rows.copy()
    for i in range(4):
        mask = present[:, i]
        if mask.any():
            target = prototypes[mask, i].mean(axis=0)
            rows[i] = bank.decay * rows[i] + (1.0 - bank.decay) * target
            norm = np.linalg.norm(rows[i])
            if norm > 0:
                rows[i] /= norm
    return PrototypeBank(rows, bank.decay)
