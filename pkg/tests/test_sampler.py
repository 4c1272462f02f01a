from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chi2

from oracles import eq1_probabilities
from protclip.curation import ALL_KEYS, ClusterKey, ClusterStats, cluster_key, cluster_statistics
from protclip.errors import EmptyCluster, EmptyCorpus
from protclip.records import PropertyKind, ProteinRecord
from protclip.sampler import (
    build_alias_table,
    build_distribution,
    build_index,
    draw_cluster,
    draw_cluster_indices,
    make_rng,
    sample_batch,
)

K = ClusterKey
ONE = Fraction(1)


def stats_of(counts):
    s = ClusterStats()
    for key, n in counts.items():
        s.counts[key] = n
    return s


count_maps = st.dictionaries(st.sampled_from(ALL_KEYS), st.integers(1, 10_000), min_size=1)


def test_single_cluster():
    dist = build_distribution(stats_of({K(2, Fraction(3, 4)): 5}))
    assert dist.probs.tolist() == [1.0]
    rng = make_rng(0)
    assert {draw_cluster(dist, rng) for _ in range(100)} == {K(2, Fraction(3, 4))}


def test_size_proportional():
    # Two clusters cannot share both C and R, so equal per-record weight is arranged
    # through C=2 with 8x the records: weights 1 and 16/8 = 2.
    dist = build_distribution(stats_of({K(1, ONE): 1, K(2, ONE): 16}))
    assert dist.probability(K(1, ONE)) == pytest.approx(1 / 3, abs=1e-15)
    assert dist.probability(K(2, ONE)) == pytest.approx(2 / 3, abs=1e-15)


@pytest.mark.parametrize("counts,expected", [
    ({K(1, ONE): 10, K(3, ONE): 10}, (0.96429, 0.03571)),
    ({K(2, Fraction(3, 4)): 7, K(2, ONE): 7}, (0.46410, 0.53590)),
])
def test_documented_examples(counts, expected):
    dist = build_distribution(stats_of(counts))
    oracle = eq1_probabilities(counts)
    for key, exp in zip(counts, expected):
        assert abs(dist.probability(key) - float(oracle[key])) < 1e-12
        assert dist.probability(key) == pytest.approx(exp, abs=5e-6)


@given(count_maps)
def test_oracle_agreement_and_normalization(counts):
    dist = build_distribution(stats_of(counts))
    oracle = eq1_probabilities(counts)
    assert abs(float(dist.probs.sum()) - 1.0) < 1e-12
    for key in ALL_KEYS:
        p = dist.as_dict()[key]
        assert (p == 0.0) == (key not in counts)
        if key in counts:
            assert abs(p - float(oracle[key])) < 1e-12


@given(count_maps, st.integers(2, 1000))
def test_scaling_counts_leaves_distribution(counts, factor):
    a = build_distribution(stats_of(counts)).probs
    b = build_distribution(stats_of({k: n * factor for k, n in counts.items()})).probs
    assert np.allclose(a, b, rtol=1e-13, atol=0)


@given(st.lists(st.floats(0.001, 1.0), min_size=1, max_size=20))
def test_alias_table_reproduces_probabilities(raw):
    p = np.array(raw) / np.sum(raw)
    threshold, alias = build_alias_table(p)
    n = len(p)
    implied = threshold.copy()
    for j in range(n):
        if alias[j] != j:
            implied[alias[j]] += 1.0 - threshold[j]
    assert np.allclose(implied / n, p, atol=1e-12)


def test_empty_corpus():
    with pytest.raises(EmptyCorpus):
        build_distribution(ClusterStats())


def test_uniform_20_cluster_chi_square():
    # N_u proportional to C^3 / sqrt(R) makes all 20 weights equal
    counts = {k: k.confidence**3 * {1: 24, 2: 17, 3: 14, 4: 12}[int(k.coverage * 4)] for k in ALL_KEYS}
    dist = build_distribution(stats_of(counts))
    expected = dist.probs * 1_000_000
    observed = np.bincount(draw_cluster_indices(dist, make_rng(3), 1_000_000), minlength=20)
    stat = float(np.sum((observed - expected) ** 2 / expected))
    assert stat < chi2.ppf(0.999, df=19)
    assert np.ptp(dist.probs) < 0.01


def _records(layout):
    out = []
    for (conf, present), n in layout.items():
        for i in range(n):
            props = {k.key: "t." for k in list(PropertyKind)[:present]}
            out.append(ProteinRecord.from_mapping(f"R{conf}{present}_{i}", "MKV", props, conf))
    return out


def test_sample_batch_single_record():
    records = _records({(1, 4): 1})
    dist = build_distribution(stats_of({K(1, ONE): 1}))
    assert sample_batch(dist, build_index(records, cluster_key), make_rng(0), 1) == [0]


def test_sample_batch_per_record_marginal():
    records = _records({(1, 4): 2, (2, 3): 3, (3, 4): 5})
    stats = cluster_statistics(records)
    dist = build_distribution(stats)
    index = build_index(records, cluster_key)
    draws = np.array(sample_batch(dist, index, make_rng(11), 1_000_000))
    freq = np.bincount(draws, minlength=len(records)) / draws.size
    for i, r in enumerate(records):
        key = cluster_key(r)
        assert abs(freq[i] - dist.probability(key) / stats.counts[key]) < 0.002


def test_sample_batch_determinism_and_k0():
    records = _records({(1, 4): 2, (2, 3): 3})
    dist = build_distribution(cluster_statistics(records))
    index = build_index(records, cluster_key)
    a = sample_batch(dist, index, make_rng(5), 50)
    b = sample_batch(dist, index, make_rng(5), 50)
    assert a == b and len(a) == 50
    assert sample_batch(dist, index, make_rng(5), 0) == []


def test_sample_batch_inconsistent_index():
    records = _records({(1, 4): 2})
    dist = build_distribution(stats_of({K(1, ONE): 3}))
    with pytest.raises(EmptyCluster):
        sample_batch(dist, build_index(records, cluster_key), make_rng(0), 1)
    with pytest.raises(EmptyCluster):
        sample_batch(dist, {}, make_rng(0), 1)


def test_rng_streams():
    assert np.array_equal(make_rng(7).random(5), make_rng(7).random(5))
    assert np.array_equal(make_rng(7, 3).random(5), make_rng(4).random(5))
    assert not np.array_equal(make_rng(7, 1).random(5), make_rng(7).random(5))
