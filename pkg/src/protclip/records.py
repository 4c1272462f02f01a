"""Protein/biotext records, coverage, biotext assembly and tokenization."""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass
from enum import IntEnum
from fractions import Fraction
from typing import Mapping

from .errors import EmptySequence, InvalidRecord, SpanOutOfRange, UnknownCharacter

# 20 canonical residues in alphabetical one-letter order, then X for unknown.
ALPHABET = "ACDEFGHIKLMNPQRSTVWY" + "X"
NONSTANDARD = frozenset("BZUO")
MASK_ID = 21
PAD_ID = 22
PROTEIN_VOCAB_SIZE = 23

_RESIDUE_TO_ID = {c: i for i, c in enumerate(ALPHABET)}


class PropertyKind(IntEnum):
    NAME = 0
    FUNCTION = 1
    LOCATION = 2
    SIMILARITY = 3

    @property
    def prefix(self) -> str:
        return _PREFIXES[self]

    @property
    def key(self) -> str:
        """Field name used in the JSON Lines corpus format."""
        return self.name.lower()


_PREFIXES = {
    PropertyKind.NAME: "PROTEIN NAME:",
    PropertyKind.FUNCTION: "FUNCTION:",
    PropertyKind.LOCATION: "SUBCELLULAR LOCATION:",
    PropertyKind.SIMILARITY: "SIMILARITY:",
}


def _present(text: str | None) -> bool:
    return text is not None and text.strip() != ""


@dataclass(frozen=True)
class ProteinRecord:
    entry_name: str
    sequence: str
    # Indexed by PropertyKind; None marks a missing property.
    properties: tuple[str | None, str | None, str | None, str | None]
    confidence: int
    reviewed: bool

    def __post_init__(self) -> None:
        if not self.sequence:
            raise InvalidRecord("EmptySequence")
        bad = sorted(set(self.sequence) - _RESIDUE_TO_ID.keys())
        if bad:
            raise InvalidRecord("InvalidSequence", "characters " + "".join(bad))
        if len(self.properties) != 4:
            raise InvalidRecord("BadProperties", "expected 4 property slots")
        if isinstance(self.confidence, bool) or not isinstance(self.confidence, int):
            raise InvalidRecord("BadType", "confidence must be an integer")
        if not 1 <= self.confidence <= 5:
            raise InvalidRecord("ConfidenceOutOfRange", str(self.confidence))
        if not any(_present(p) for p in self.properties):
            raise InvalidRecord("NoProperties")

    @classmethod
    def from_mapping(
        cls,
        entry_name: str,
        sequence: str,
        properties: Mapping[str, str | None],
        confidence: int,
        reviewed: bool = False,
    ) -> "ProteinRecord":
        unknown = set(properties) - {k.key for k in PropertyKind}
        if unknown:
            raise InvalidRecord("UnknownProperty", ", ".join(sorted(unknown)))
        slots = tuple(properties.get(k.key) for k in PropertyKind)
        return cls(entry_name, sequence, slots, confidence, reviewed)  # type: ignore[arg-type]

    def text_for(self, kind: PropertyKind) -> str | None:
        text = self.properties[kind]
        return text if _present(text) else None

    @property
    def present_kinds(self) -> tuple[PropertyKind, ...]:
        return tuple(k for k in PropertyKind if _present(self.properties[k]))

    @property
    def present_count(self) -> int:
        return len(self.present_kinds)

    def to_json(self) -> dict:
        return {
            "entry_name": self.entry_name,
            "sequence": self.sequence,
            "properties": {k.key: self.properties[k] for k in PropertyKind if _present(self.properties[k])},
            "confidence": self.confidence,
            "reviewed": self.reviewed,
        }


def normalize_sequence(sequence: str) -> tuple[str, int]:
    """Map nonstandard residues (B, Z, U, O) to X.

    Returns the rewritten sequence and the number of replaced characters.
    """
    replaced = sum(1 for c in sequence if c in NONSTANDARD)
    if replaced:
        sequence = "".join("X" if c in NONSTANDARD else c for c in sequence)
    return sequence, replaced


def compute_coverage(record: ProteinRecord) -> Fraction:
    return Fraction(record.present_count, 4)


def assemble_biotext(record: ProteinRecord) -> str:
    return " ".join(f"{k.prefix} {record.properties[k]}" for k in record.present_kinds)


def tokenize_sequence(sequence: str) -> list[int]:
    if not sequence:
        raise EmptySequence("empty protein sequence")
    try:
        return [_RESIDUE_TO_ID[c] for c in sequence]
    except KeyError as exc:
        raise UnknownCharacter(f"residue {exc.args[0]!r} outside alphabet") from None


def detokenize_sequence(ids) -> str:
    return "".join(ALPHABET[i] for i in ids)


# Biotext tokenization: word-level with hashed ids, so no vocabulary file is
# needed and ids are stable across processes and platforms.
TEXT_PAD_ID = 0
PREFIX_TOKEN_IDS = {k: 1 + int(k) for k in PropertyKind}
FIRST_WORD_ID = 5

_WORD = re.compile(r"[a-z0-9]+")
_PREFIX_PATTERN = re.compile(
    "|".join(re.escape(p) for p in sorted(_PREFIXES.values(), key=len, reverse=True))
)
_PREFIX_KIND = {p: k for k, p in _PREFIXES.items()}


def word_id(word: str, vocab_size: int) -> int:
    return FIRST_WORD_ID + zlib.crc32(word.encode("utf-8")) % (vocab_size - FIRST_WORD_ID)


def tokenize_biotext(
    biotext: str, vocab_size: int = 512, max_len: int | None = None
) -> tuple[list[int], dict[PropertyKind, tuple[int, int]]]:
    """Tokenize an assembled biotext and recover property spans from its prefixes.

    Each property block becomes its prefix token followed by the hashed ids of
    its lower-cased alphanumeric words. Spans are half-open ``(start, stop)``
    token ranges covering the prefix token and its words. With ``max_len`` the
    token list is truncated and spans clipped; a property whose span would be
    empty after truncation is dropped.
    """
    if vocab_size <= FIRST_WORD_ID:
        raise ValueError(f"text vocab_size must exceed {FIRST_WORD_ID}")
    matches = list(_PREFIX_PATTERN.finditer(biotext))
    ids: list[int] = []
    spans: dict[PropertyKind, tuple[int, int]] = {}
    for i, m in enumerate(matches):
        kind = _PREFIX_KIND[m.group(0)]
        end = matches[i + 1].start() if i + 1 < len(matches) else len(biotext)
        start = len(ids)
        ids.append(PREFIX_TOKEN_IDS[kind])
        ids.extend(word_id(w, vocab_size) for w in _WORD.findall(biotext[m.end():end].lower()))
        spans[kind] = (start, len(ids))
    if max_len is not None and len(ids) > max_len:
        ids = ids[:max_len]
        spans = {k: (s, min(e, max_len)) for k, (s, e) in spans.items() if s < max_len}
    return ids, spans


def check_spans(spans: Mapping[PropertyKind, tuple[int, int]], length: int) -> None:
    for kind, (start, stop) in spans.items():
        if not 0 <= start < stop <= length:
            raise SpanOutOfRange(f"{PropertyKind(kind).name} span ({start}, {stop}) outside 0..{length}")
