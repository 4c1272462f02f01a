"""Streaming corpus ingest, pre-training filter and (confidence, coverage) statistics."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

from .errors import InvalidRecord, IoFailure, MalformedRecord, ValidationError
from .records import ProteinRecord, compute_coverage, normalize_sequence

CONFIDENCE_LEVELS = (1, 2, 3, 4, 5)
COVERAGE_LEVELS = tuple(Fraction(i, 4) for i in range(1, 5))

LOW_CONFIDENCE = "LowConfidence"
LOW_COVERAGE = "LowCoverage"


class ClusterKey(NamedTuple):
    confidence: int
    coverage: Fraction

    def __str__(self) -> str:
        return f"C{self.confidence}/R{self.coverage}"


ALL_KEYS = tuple(ClusterKey(c, r) for c in CONFIDENCE_LEVELS for r in COVERAGE_LEVELS)


def cluster_key(record: ProteinRecord) -> ClusterKey:
    return ClusterKey(record.confidence, compute_coverage(record))


@dataclass
class Rejection:
    line: int
    reason: str
    detail: str = ""


@dataclass
class ParseLog:
    lines_consumed: int = 0
    accepted: int = 0
    rejections: list[Rejection] = field(default_factory=list)
    nonstandard_replaced: int = 0

    def rejected_by_reason(self) -> dict[str, int]:
        return dict(sorted(Counter(r.reason for r in self.rejections).items()))


def _record_from_json(obj) -> tuple[ProteinRecord, int]:
    if not isinstance(obj, dict):
        raise InvalidRecord("NotAnObject")
    for name in ("entry_name", "sequence", "properties", "confidence"):
        if name not in obj:
            raise InvalidRecord("MissingField", name)
    entry, seq, props, conf = obj["entry_name"], obj["sequence"], obj["properties"], obj["confidence"]
    reviewed = obj.get("reviewed", False)
    if not isinstance(entry, str) or not isinstance(seq, str) or not isinstance(reviewed, bool):
        raise InvalidRecord("BadType", "entry_name/sequence must be strings, reviewed boolean")
    if not isinstance(props, dict) or not all(v is None or isinstance(v, str) for v in props.values()):
        raise InvalidRecord("BadType", "properties must map to strings or null")
    seq, replaced = normalize_sequence(seq)
    return ProteinRecord.from_mapping(entry, seq, props, conf, reviewed), replaced


def parse_records(
    lines: Iterable[str], *, strict: bool = False, log: ParseLog | None = None
) -> Iterator[ProteinRecord]:
    """Yield valid records from JSON Lines text, in input order.

    Malformed lines are appended to ``log.rejections`` with their 1-based line
    number; with ``strict`` the first one raises :class:`MalformedRecord`.
    """
    log = log if log is not None else ParseLog()
    for lineno, line in enumerate(lines, start=1):
        log.lines_consumed += 1
        try:
            if not line.strip():
                raise InvalidRecord("EmptyLine")
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InvalidRecord("MalformedJson", exc.msg) from None
            record, replaced = _record_from_json(obj)
        except InvalidRecord as exc:
            if strict:
                raise MalformedRecord(lineno, exc.reason, exc.detail) from None
            log.rejections.append(Rejection(lineno, exc.reason, exc.detail))
            continue
        log.nonstandard_replaced += replaced
        log.accepted += 1
        yield record


def pretraining_drop_reason(record: ProteinRecord) -> str | None:
    # Confidence is checked first so double-failing records are counted once, deterministically.
    if record.confidence >= 4:
        return LOW_CONFIDENCE
    if record.present_count <= 2:
        return LOW_COVERAGE
    return None


def filter_for_pretraining(records: Iterable[ProteinRecord]) -> tuple[list[ProteinRecord], Counter]:
    kept: list[ProteinRecord] = []
    dropped: Counter = Counter()
    for record in records:
        reason = pretraining_drop_reason(record)
        if reason is None:
            kept.append(record)
        else:
            dropped[reason] += 1
    return kept, dropped


@dataclass
class ClusterStats:
    counts: dict[ClusterKey, int] = field(default_factory=lambda: dict.fromkeys(ALL_KEYS, 0))

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def add(self, record: ProteinRecord) -> None:
        self.counts[cluster_key(record)] += 1

    def merge(self, other: "ClusterStats") -> "ClusterStats":
        return ClusterStats({k: self.counts[k] + other.counts[k] for k in ALL_KEYS})

    def nonempty(self) -> dict[ClusterKey, int]:
        return {k: n for k, n in self.counts.items() if n > 0}

    def confidence_marginals(self) -> dict[int, float]:
        total = self.total
        sums = {c: sum(n for k, n in self.counts.items() if k.confidence == c) for c in CONFIDENCE_LEVELS}
        return {c: (s / total if total else 0.0) for c, s in sums.items()}

    def coverage_marginals(self) -> dict[Fraction, float]:
        total = self.total
        sums = {r: sum(n for k, n in self.counts.items() if k.coverage == r) for r in COVERAGE_LEVELS}
        return {r: (s / total if total else 0.0) for r, s in sums.items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["confidence", "coverage", "count"])
        for key in ALL_KEYS:
            writer.writerow([key.confidence, str(key.coverage), self.counts[key]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ClusterStats":
        stats = cls()
        for row in csv.DictReader(io.StringIO(text)):
            key = ClusterKey(int(row["confidence"]), Fraction(row["coverage"]))
            if key not in stats.counts:
                raise ValidationError(f"unknown cluster {key}")
            stats.counts[key] = int(row["count"])
        return stats

    def to_json(self) -> list[dict]:
        return [{"confidence": k.confidence, "coverage": str(k.coverage), "count": n} for k, n in self.counts.items()]

    @classmethod
    def from_json(cls, rows: list[dict]) -> "ClusterStats":
        stats = cls()
        for row in rows:
            stats.counts[ClusterKey(int(row["confidence"]), Fraction(row["coverage"]))] = int(row["count"])
        return stats


def cluster_statistics(records: Iterable[ProteinRecord]) -> ClusterStats:
    stats = ClusterStats()
    for record in records:
        stats.add(record)
    return stats


@dataclass
class CorpusManifest:
    sources: list[str]
    record_count: int
    rejected: dict[str, int]
    stats: ClusterStats
    checksum: str
    lines_consumed: int = 0
    filtered_stats: ClusterStats | None = None
    dropped: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        doc = {
            "sources": self.sources,
            "lines_consumed": self.lines_consumed,
            "record_count": self.record_count,
            "rejected": self.rejected,
            "checksum": self.checksum,
            "stats": self.stats.to_json(),
            "dropped": self.dropped,
        }
        if self.filtered_stats is not None:
            doc["filtered_stats"] = self.filtered_stats.to_json()
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "CorpusManifest":
        filtered = doc.get("filtered_stats")
        return cls(
            sources=list(doc["sources"]),
            record_count=int(doc["record_count"]),
            rejected={k: int(v) for k, v in doc["rejected"].items()},
            stats=ClusterStats.from_json(doc["stats"]),
            checksum=doc["checksum"],
            lines_consumed=int(doc.get("lines_consumed", 0)),
            filtered_stats=ClusterStats.from_json(filtered) if filtered is not None else None,
            dropped={k: int(v) for k, v in doc.get("dropped", {}).items()},
        )


def write_manifest(manifest: CorpusManifest, path: str | Path) -> Path:
    path = Path(path)
    try:
        path.write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write manifest {path}: {exc}") from exc
    return path


def read_manifest(path: str | Path) -> CorpusManifest:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc
    return CorpusManifest.from_json(doc)


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    try:
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                digest.update(chunk)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return digest.hexdigest()


def read_lines(path: str | Path) -> list[str]:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read().splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def load_corpus(path: str | Path, *, strict: bool = False, log: ParseLog | None = None) -> list[ProteinRecord]:
    return list(parse_records(read_lines(path), strict=strict, log=log))


def ingest(path: str | Path, *, strict: bool = False) -> tuple[list[ProteinRecord], CorpusManifest]:
    """Parse a corpus file and summarize it; ``records`` are the unfiltered valid records."""
    log = ParseLog()
    records = load_corpus(path, strict=strict, log=log)
    kept, dropped = filter_for_pretraining(records)
    manifest = CorpusManifest(
        sources=[str(path)],
        record_count=len(records),
        rejected=log.rejected_by_reason(),
        stats=cluster_statistics(records),
        checksum=sha256_file(path),
        lines_consumed=log.lines_consumed,
        filtered_stats=cluster_statistics(kept),
        dropped=dict(sorted(dropped.items())),
    )
    return records, manifest
