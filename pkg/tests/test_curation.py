import json
from collections import Counter
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from protclip.curation import (
    ALL_KEYS,
    ClusterKey,
    ClusterStats,
    CorpusManifest,
    ParseLog,
    cluster_statistics,
    filter_for_pretraining,
    ingest,
    parse_records,
    read_manifest,
    write_manifest,
)
from protclip.errors import IoFailure, MalformedRecord
from protclip.records import PropertyKind, ProteinRecord
from protclip.synthetic import TABLE1_CONFIDENCE_COUNTS, TABLE1_FILE, data_path, table1_records

KEYS = [k.key for k in PropertyKind]


def line(conf=1, present=4, name="E", seq="MKVL", **extra):
    obj = {"entry_name": name, "sequence": seq, "confidence": conf, "reviewed": False,
           "properties": {k: f"{k} text." for k in KEYS[:present]}}
    obj.update(extra)
    return json.dumps(obj)


def rec(conf, present, name="E"):
    return ProteinRecord.from_mapping(name, "MKV", {k: "t." for k in KEYS[:present]}, conf)


record_st = st.builds(rec, st.integers(1, 5), st.integers(1, 4))


def test_parse_well_formed():
    [r] = list(parse_records([line()]))
    assert r.present_count == 4


def test_parse_rejects_confidence_7():
    log = ParseLog()
    assert list(parse_records([line(conf=7)], log=log)) == []
    assert [(x.line, x.reason) for x in log.rejections] == [(1, "ConfidenceOutOfRange")]


def _fixture_1000():
    lines = [line(conf=1 + i % 5, present=1 + i % 4, name=f"P{i}") for i in range(1000)]
    bad = {17: "{not json", 500: line(conf=7), 911: json.dumps({"entry_name": "x", "sequence": "MK"})}
    for i, text in bad.items():
        lines[i] = text
    return lines, bad


def test_fixture_with_planted_defects():
    lines, bad = _fixture_1000()
    log = ParseLog()
    records = list(parse_records(lines, log=log))
    assert len(records) == 997
    assert [r.line for r in log.rejections] == [i + 1 for i in sorted(bad)]
    assert {r.reason for r in log.rejections} == {"MalformedJson", "ConfidenceOutOfRange", "MissingField"}
    assert log.accepted + len(log.rejections) == log.lines_consumed == 1000


def test_strict_aborts_on_first_defect():
    lines, _ = _fixture_1000()
    with pytest.raises(MalformedRecord) as info:
        list(parse_records(lines, strict=True))
    assert info.value.line == 18


def test_blank_and_non_object_lines():
    log = ParseLog()
    list(parse_records(["", "[1, 2]", line(seq="MBZ")], log=log))
    assert [r.reason for r in log.rejections] == ["EmptyLine", "NotAnObject"]
    assert log.nonstandard_replaced == 2


@pytest.mark.parametrize("conf,present,reason", [
    (3, 3, None), (4, 4, "LowConfidence"), (1, 2, "LowCoverage"), (5, 1, "LowConfidence"), (1, 1, "LowCoverage"),
])
def test_filter_examples(conf, present, reason):
    kept, dropped = filter_for_pretraining([rec(conf, present)])
    assert (len(kept) == 1) == (reason is None)
    assert dropped == (Counter({reason: 1}) if reason else Counter())


@given(st.lists(record_st, max_size=40))
def test_filter_invariants(records):
    kept, dropped = filter_for_pretraining(records)
    assert len(kept) + sum(dropped.values()) == len(records)
    good = [r for r in records if r.confidence <= 3 and r.present_count >= 3]
    assert kept == good


@given(st.lists(record_st, max_size=40), st.randoms())
def test_statistics_permutation_invariant(records, random):
    shuffled = list(records)
    random.shuffle(shuffled)
    assert cluster_statistics(records) == cluster_statistics(shuffled)
    assert cluster_statistics(records).total == len(records)


@given(st.lists(record_st, max_size=20), st.lists(record_st, max_size=20), st.lists(record_st, max_size=20))
def test_merge_is_associative_and_commutative(a, b, c):
    sa, sb, sc = (cluster_statistics(x) for x in (a, b, c))
    assert sa.merge(sb) == sb.merge(sa)
    assert sa.merge(sb).merge(sc) == sa.merge(sb.merge(sc)) == cluster_statistics(a + b + c)


def test_statistics_examples():
    empty = cluster_statistics([])
    assert empty.total == 0 and set(empty.counts.values()) == {0} and len(empty.counts) == 20
    ten = cluster_statistics([rec(3, 4)] * 10)
    assert ten.nonempty() == {ClusterKey(3, Fraction(1)): 10}


def test_table1_fixture_marginals():
    stats = cluster_statistics(table1_records())
    targets = {1: 0.1982, 2: 0.0980, 3: 0.6777, 4: 0.0229, 5: 0.0032}
    for c, frac in stats.confidence_marginals().items():
        assert abs(frac - targets[c]) <= 1 / stats.total
    assert {c: round(f * stats.total) for c, f in stats.confidence_marginals().items()} == TABLE1_CONFIDENCE_COUNTS


def test_csv_round_trip():
    stats = cluster_statistics([rec(c, p) for c in range(1, 6) for p in range(1, 5) for _ in range(c + p)])
    text = stats.to_csv()
    assert text.splitlines()[0] == "confidence,coverage,count"
    assert ClusterStats.from_csv(text) == stats


def test_manifest_round_trip(tmp_path):
    records, manifest = ingest(data_path(TABLE1_FILE))
    path = write_manifest(manifest, tmp_path / "m.json")
    again = read_manifest(path)
    assert again == manifest
    assert again.stats.confidence_marginals() == cluster_statistics(records).confidence_marginals()
    assert manifest.record_count + sum(manifest.rejected.values()) == manifest.lines_consumed


def test_manifest_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    manifest = CorpusManifest([], 0, {}, ClusterStats(), "")
    with pytest.raises(IoFailure):
        write_manifest(manifest, blocker / "manifest.json")


def test_ingest_missing_file(tmp_path):
    with pytest.raises(IoFailure):
        ingest(tmp_path / "absent.jsonl")


def test_all_keys():
    assert len(ALL_KEYS) == 20 and len(set(ALL_KEYS)) == 20
