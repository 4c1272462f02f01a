"""Property-driven sampling over (confidence, coverage) clusters.

Each nonempty cluster ``u`` gets weight ``C_u**exponent * R_u**coverage_power * N_u``
(defaults -3 and 1/2) and probability proportional to it. Draws use a Vose
alias table so each cluster draw costs one uniform and one comparison.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .curation import ALL_KEYS, ClusterKey, ClusterStats
from .errors import EmptyCluster, EmptyCorpus, ValidationError

DEFAULT_EXPONENT = -3.0
DEFAULT_COVERAGE_POWER = 0.5


def make_rng(seed: int, worker_id: int = 0) -> np.random.Generator:
    """PCG64 generator for ``seed XOR worker_id``; the stream is platform independent."""
    return np.random.Generator(np.random.PCG64(int(seed) ^ int(worker_id)))


def cluster_weight(key: ClusterKey, count: int, exponent: float = DEFAULT_EXPONENT,
                   coverage_power: float = DEFAULT_COVERAGE_POWER) -> float:
    return float(key.confidence) ** exponent * float(key.coverage) ** coverage_power * count


def build_alias_table(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vose's alias method. Returns (acceptance thresholds, alias indices)."""
    n = len(probs)
    scaled = np.asarray(probs, dtype=np.float64) * n
    threshold = np.ones(n)
    alias = np.arange(n)
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    while small and large:
        s = small.pop()
        g = large.pop()
        threshold[s] = scaled[s]
        alias[s] = g
        scaled[g] = (scaled[g] + scaled[s]) - 1.0
        (small if scaled[g] < 1.0 else large).append(g)
    # Leftovers are 1 up to rounding.
    for i in small + large:
        threshold[i] = 1.0
        alias[i] = i
    return threshold, alias


@dataclass(frozen=True)
class SamplingDistribution:
    keys: tuple[ClusterKey, ...]  # nonempty clusters, canonical order
    probs: np.ndarray
    threshold: np.ndarray
    alias: np.ndarray
    stats: ClusterStats
    exponent: float = DEFAULT_EXPONENT
    coverage_power: float = DEFAULT_COVERAGE_POWER

    def probability(self, key: ClusterKey) -> float:
        try:
            return float(self.probs[self.keys.index(key)])
        except ValueError:
            return 0.0

    def as_dict(self) -> dict[ClusterKey, float]:
        """Probabilities for all 20 clusters, zeros included."""
        return {k: self.probability(k) for k in ALL_KEYS}


def build_distribution(stats: ClusterStats, exponent: float = DEFAULT_EXPONENT,
                       coverage_power: float = DEFAULT_COVERAGE_POWER) -> SamplingDistribution:
    keys = tuple(k for k in ALL_KEYS if stats.counts.get(k, 0) > 0)
    if not keys:
        raise EmptyCorpus("no nonempty clusters to sample from")
    weights = np.array([cluster_weight(k, stats.counts[k], exponent, coverage_power) for k in keys])
    if not np.all(np.isfinite(weights)) or weights.sum() <= 0:
        raise ValidationError("cluster weights are not finite and positive")
    probs = weights / weights.sum()
    threshold, alias = build_alias_table(probs)
    return SamplingDistribution(keys, probs, threshold, alias, stats, exponent, coverage_power)


def _alias_index(dist: SamplingDistribution, u: np.ndarray) -> np.ndarray:
    # Integer part of n*u picks the column, fractional part decides column vs alias.
    n = len(dist.keys)
    scaled = u * n
    col = np.minimum(scaled.astype(np.int64), n - 1)
    frac = scaled - col
    return np.where(frac < dist.threshold[col], col, dist.alias[col])


def draw_cluster(dist: SamplingDistribution, rng: np.random.Generator) -> ClusterKey:
    return dist.keys[int(_alias_index(dist, np.array([rng.random()]))[0])]


def draw_cluster_indices(dist: SamplingDistribution, rng: np.random.Generator, size: int) -> np.ndarray:
    """Vectorized draws; returns indices into ``dist.keys``."""
    return _alias_index(dist, rng.random(size))


def build_index(records: Sequence, key_fn) -> dict[ClusterKey, list]:
    index: dict[ClusterKey, list] = {}
    for i, record in enumerate(records):
        index.setdefault(key_fn(record), []).append(i)
    return index


def sample_batch(dist: SamplingDistribution, index: Mapping[ClusterKey, Sequence],
                 rng: np.random.Generator, k: int) -> list:
    """Draw ``k`` ids with replacement: cluster by alias draw, member uniformly."""
    if k < 0:
        raise ValidationError("batch size must be non-negative")
    members = []
    for key in dist.keys:
        ids = index.get(key)
        if not ids or len(ids) != dist.stats.counts[key]:
            raise EmptyCluster(f"index for cluster {key} does not match its count {dist.stats.counts[key]}")
        members.append(ids)
    if k == 0:
        return []
    clusters = draw_cluster_indices(dist, rng, k)
    picks = rng.random(k)
    out = []
    for c, u in zip(clusters, picks):
        ids = members[c]
        out.append(ids[min(int(u * len(ids)), len(ids) - 1)])
    return out
