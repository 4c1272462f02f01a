"""Pre-training losses: global contrastive, static segment reconstruction,
property-grouped dynamic segment alignment, masked language modeling, and
their weighted combination."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor as T
from .encoders import EncoderConfig, Params, apply_head, encode_protein
from .errors import BatchTooSmall, ConfigError, EmptyMask, InvariantBreach, WeightConstraintViolation
from .records import MASK_ID
from .tensor import Tensor

SEGMENT_MIN = 5
SEGMENT_MAX = 10
MIN_SEGMENT_SEQUENCE = 7


@dataclass(frozen=True)
class LossConfig:
    tau1: float = 0.07
    tau2: float = 0.07
    theta: float = 0.3
    lambda1: float = 0.7
    lambda2: float = 0.3
    bsr_rate: float = 0.15
    mlm_rate: float = 0.15
    allow_unconstrained: bool = False

    def __post_init__(self) -> None:
        if self.tau1 <= 0 or self.tau2 <= 0:
            raise ConfigError("temperatures must be positive")
        if not 0.0 <= self.theta < 1.0:
            raise ConfigError("theta must lie in [0, 1)")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise WeightConstraintViolation("loss weights must be non-negative")
        if not self.allow_unconstrained and abs(self.lambda1 + self.lambda2 - 1.0) > 1e-12:
            raise WeightConstraintViolation(
                f"lambda1 + lambda2 must equal 1 (got {self.lambda1} + {self.lambda2})")
        for rate in (self.bsr_rate, self.mlm_rate):
            if not 0.0 <= rate <= 1.0:
                raise ConfigError("mask rates must lie in [0, 1]")


# ------------------------------------------------------------------ global contrastive


def gc_loss(S: Tensor, Tx: Tensor, tau1: float) -> Tensor:
    """Symmetric InfoNCE over cosine similarities of matched rows."""
    K = S.shape[0]
    if K < 2:
        raise BatchTooSmall(f"contrastive loss needs at least 2 pairs, got {K}")
    logits = T.scale(T.cosine_similarity_rows(S, Tx), 1.0 / tau1)
    targets = np.arange(K)
    s2t = T.mean(T.cross_entropy_rows(logits, targets))
    t2s = T.mean(T.cross_entropy_rows(T.transpose(logits), targets))
    return T.scale(T.add(s2t, t2s), 0.5)


# ------------------------------------------------------------------ static segments


@dataclass(frozen=True)
class SegmentMaskSet:
    segments: tuple[tuple[int, int], ...]  # (start, length), in sampling order
    skipped: bool = False

    @property
    def total_masked(self) -> int:
        return sum(length for _, length in self.segments)

    def positions(self) -> np.ndarray:
        if not self.segments:
            return np.zeros(0, dtype=np.int64)
        return np.sort(np.concatenate([np.arange(s, s + l) for s, l in self.segments]))


def segment_budget(n: int, rate: float = 0.15) -> int:
    """round-half-up(rate * n) in exact arithmetic (0.15 is taken as 3/20, not its binary double)."""
    return math.floor(Fraction(str(rate)) * n + Fraction(1, 2))


def sample_static_segments(n: int, rng: np.random.Generator, rate: float = 0.15) -> SegmentMaskSet:
    """Place non-overlapping contiguous segments until exactly the masking budget is covered.

    Lengths are drawn from U{5..10} and clipped to the remaining budget, so
    only the final segment can be shorter than 5. Each start is uniform over
    the positions where the segment fits without overlap. Sequences shorter
    than 7 are skipped.
    """
    if n < MIN_SEGMENT_SEQUENCE:
        return SegmentMaskSet((), skipped=True)
    remaining = segment_budget(n, rate)
    used = np.zeros(n + 1, dtype=np.int64)  # prefix sums of the occupied indicator
    occupied = np.zeros(n, dtype=bool)
    segments = []
    while remaining > 0:
        length = min(int(rng.integers(SEGMENT_MIN, SEGMENT_MAX + 1)), remaining)
        np.cumsum(occupied, out=used[1:])
        starts = np.flatnonzero(used[length:] - used[:-length] == 0)
        if starts.size == 0:
            raise InvariantBreach(f"no room for a segment of length {length} in n={n}")
        start = int(starts[rng.integers(starts.size)])
        occupied[start:start + length] = True
        segments.append((start, length))
        remaining -= length
    return SegmentMaskSet(tuple(segments))


def reconstruction_loss(h: Tensor, targets, params: Params, head: str) -> Tensor:
    """Mean cross-entropy of a reconstruction head applied to the rows of ``h``."""
    logits = apply_head(h, params, head)
    return T.mean(T.cross_entropy_rows(logits, targets))


def bsr_loss(fused: Tensor, tokens, mask: SegmentMaskSet, params: Params, head: str = "bsr") -> Tensor:
    positions = mask.positions()
    if mask.skipped or positions.size == 0:
        raise EmptyMask("no static segments to reconstruct")
    tokens = np.asarray(tokens, dtype=np.int64)
    return reconstruction_loss(fused[positions], tokens[positions], params, head)


# ------------------------------------------------------------------ dynamic segments


@dataclass
class DynamicSegments:
    kinds: tuple[int, ...]  # property indices of the weight rows
    weights: Tensor  # (len(kinds), n), entries in {0} U [theta, 1]
    segments: Tensor | None = None  # (len(seg_kinds), d)
    seg_kinds: tuple[int, ...] = ()

    @property
    def surviving(self) -> int:
        return int(np.count_nonzero(self.weights.data))


def pda_weights(prototypes: Tensor, present, residues: Tensor, theta: float,
                counters: Counter | None = None) -> DynamicSegments:
    """Inner-product similarities of each present prototype with every residue,
    min-max normalized per property and sparsified at ``theta``."""
    kinds = tuple(int(i) for i in np.flatnonzero(np.asarray(present, dtype=bool)))
    if not kinds:
        raise ValueError("pda_weights needs at least one present property")
    a = prototypes[list(kinds)] if len(kinds) < prototypes.shape[0] else prototypes
    raw = T.matmul(a, T.transpose(residues))
    w = T.threshold_rows(T.min_max_normalize_rows(raw, counters), theta)
    if counters is not None:
        counters["pruned_residues"] += int(w.data.size - np.count_nonzero(w.data))
        counters["weight_entries"] += int(w.data.size)
    return DynamicSegments(kinds, w)


def pda_segments(dyn: DynamicSegments, residues: Tensor) -> DynamicSegments:
    """Weighted mean of residues per property row; all-zero rows are masked."""
    live = [r for r in range(len(dyn.kinds)) if np.any(dyn.weights.data[r] != 0)]
    if not live:
        dyn.segments, dyn.seg_kinds = None, ()
        return dyn
    w = dyn.weights if len(live) == len(dyn.kinds) else dyn.weights[live]
    dyn.segments = T.div_rows(T.matmul(w, residues), T.sum(w, axis=1))
    dyn.seg_kinds = tuple(dyn.kinds[r] for r in live)
    return dyn


def pda_loss(segments: Tensor, prototypes: Tensor, tau2: float) -> Tensor | None:
    """In-sample symmetric InfoNCE between matched segment/prototype rows.

    Row i of ``segments`` pairs with row i of ``prototypes``; both are already
    restricted to the jointly present properties. Returns None when fewer than
    two properties remain.
    """
    q = segments.shape[0]
    if q < 2:
        return None
    logits = T.scale(T.cosine_similarity_rows(segments, prototypes), 1.0 / tau2)
    targets = np.arange(q)
    over_prototypes = T.mean(T.cross_entropy_rows(logits, targets))
    over_segments = T.mean(T.cross_entropy_rows(T.transpose(logits), targets))
    return T.scale(T.add(over_prototypes, over_segments), 0.5)


def pda_sample_loss(prototypes: Tensor, present, residues: Tensor, config: LossConfig,
                    counters: Counter | None = None) -> Tensor | None:
    """Full dynamic-segment pipeline for one pair; None when it cannot contribute."""
    dyn = pda_segments(pda_weights(prototypes, present, residues, config.theta, counters), residues)
    if dyn.segments is None or len(dyn.seg_kinds) < 2:
        if counters is not None:
            counters["pda_skipped"] += 1
        return None
    return pda_loss(dyn.segments, prototypes[list(dyn.seg_kinds)], config.tau2)


# ------------------------------------------------------------------ masked language modeling


def mlm_mask(n: int, rng: np.random.Generator, rate: float = 0.15,
             exclude: np.ndarray | None = None) -> np.ndarray:
    """Independent Bernoulli(rate) choice per residue; returns sorted positions."""
    hits = rng.random(n) < rate
    if exclude is not None and exclude.size:
        hits[exclude] = False
    return np.flatnonzero(hits)


def mask_tokens(tokens, positions) -> np.ndarray:
    masked = np.array(tokens, dtype=np.int64)
    masked[np.asarray(positions, dtype=np.int64)] = MASK_ID
    return masked


def mlm_loss(tokens, params: Params, config: EncoderConfig, rng: np.random.Generator,
             rate: float = 0.15, counters: Counter | None = None) -> Tensor:
    """Standalone token MLM: mask, encode with the protein encoder, score masked positions."""
    tokens = np.asarray(tokens, dtype=np.int64)
    positions = mlm_mask(len(tokens), rng, rate)
    if positions.size == 0:
        if counters is not None:
            counters["mlm_empty"] += 1
        return Tensor(0.0)
    enc = encode_protein(mask_tokens(tokens, positions), params, config)
    return reconstruction_loss(enc.residues[positions], tokens[positions], params, "mlm")


# ------------------------------------------------------------------ combination


@dataclass
class LossReport:
    step: int
    gc: float
    bsr: float
    pda: float
    mlm: float
    total: float
    counters: Counter = field(default_factory=Counter)

    CSV_HEADER = "step,gc,bsr,pda,mlm,total,degenerate_rows,skipped_short"

    def csv_row(self) -> str:
        vals = [repr(float(v)) for v in (self.gc, self.bsr, self.pda, self.mlm, self.total)]
        return ",".join([str(self.step), *vals,
                         str(self.counters["degenerate_rows"]), str(self.counters["skipped_short"])])


def total_loss(gc, bsr, mlm, pda, lambda1: float, lambda2: float) -> Tensor:
    """L_GC + lambda1 * L_BSR + lambda2 * L_MLM + L_PDA. Parts may be floats or tensors."""
    gc, bsr, mlm, pda = (T.as_tensor(x) for x in (gc, bsr, mlm, pda))
    return T.add(T.add(T.add(gc, T.scale(bsr, lambda1)), T.scale(mlm, lambda2)), pda)
