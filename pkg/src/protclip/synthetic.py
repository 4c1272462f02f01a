"""Deterministic desk-scale fixtures.

* ``table1_records``: 10,000 reviewed records whose confidence marginals are
  exactly 0.1982 / 0.0980 / 0.6777 / 0.0229 / 0.0032.
* ``planted_records``: 64 protein/biotext pairs with a planted correspondence.
  Pair i draws its residues from a private 3-letter signature and its biotext
  names those three residues, so the pairing is learnable from composition.

Both ship under ``protclip/data``; ``python -m protclip.synthetic`` rewrites them.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np

from .records import ALPHABET, PropertyKind, ProteinRecord

TABLE1_CONFIDENCE_COUNTS = {1: 1982, 2: 980, 3: 6777, 4: 229, 5: 32}
TABLE1_FILE = "table1_fixture.jsonl"
PLANTED_FILE = "planted_64.jsonl"

RESIDUE_WORDS = {
    "A": "alanine", "C": "cysteine", "D": "aspartate", "E": "glutamate", "F": "phenylalanine",
    "G": "glycine", "H": "histidine", "I": "isoleucine", "K": "lysine", "L": "leucine",
    "M": "methionine", "N": "asparagine", "P": "proline", "Q": "glutamine", "R": "arginine",
    "S": "serine", "T": "threonine", "V": "valine", "W": "tryptophan", "Y": "tyrosine",
}
_CANONICAL = ALPHABET[:20]
_LOCATIONS = ("Cytoplasm.", "Nucleus.", "Cell membrane.", "Secreted.", "Mitochondrion.")
_FAMILIES = ("kinase", "transferase", "hydrolase", "oxidoreductase", "ligase", "isomerase")


def _texts_for_coverage(rng: np.random.Generator, present: int, i: int) -> dict[str, str]:
    kinds = [PropertyKind.NAME] + list(rng.permutation([1, 2, 3])[: present - 1])
    texts = {
        PropertyKind.NAME: f"Synthetic protein {i}.",
        PropertyKind.FUNCTION: f"Catalyzes reaction class {i % 97}.",
        PropertyKind.LOCATION: _LOCATIONS[i % len(_LOCATIONS)],
        PropertyKind.SIMILARITY: f"Belongs to the {_FAMILIES[i % len(_FAMILIES)]} family.",
    }
    return {PropertyKind(k).key: texts[PropertyKind(k)] for k in kinds}


def table1_records(seed: int = 1) -> list[ProteinRecord]:
    rng = np.random.default_rng(seed)
    confidences = np.concatenate([np.full(n, c) for c, n in TABLE1_CONFIDENCE_COUNTS.items()])
    confidences = rng.permutation(confidences)
    records = []
    for i, conf in enumerate(confidences):
        present = int(rng.integers(1, 5))
        seq = "".join(rng.choice(list(_CANONICAL), size=int(rng.integers(12, 33))))
        records.append(ProteinRecord.from_mapping(
            f"SYN{i:05d}_TABLE1", seq, _texts_for_coverage(rng, present, i), int(conf), reviewed=True))
    return records


def planted_records(n_pairs: int = 64, seed: int = 7) -> list[ProteinRecord]:
    rng = np.random.default_rng(seed)
    signatures: list[tuple[str, ...]] = []
    seen = set()
    while len(signatures) < n_pairs:
        sig = tuple(rng.choice(list(_CANONICAL), size=3, replace=False))
        if frozenset(sig) not in seen:
            seen.add(frozenset(sig))
            signatures.append(sig)
    records = []
    for i, sig in enumerate(signatures):
        words = [RESIDUE_WORDS[c] for c in sig]
        length = int(rng.integers(24, 41))
        seq = "".join(rng.choice(list(sig), size=length, p=[0.5, 0.3, 0.2]))
        props = {
            "name": f"{words[0].capitalize()} {words[1]} {words[2]} rich protein.",
            "function": f"Binds {words[0]} and {words[1]} motifs.",
            "similarity": f"Belongs to the {words[2]} {words[0]} family.",
        }
        if i % 4:
            props["location"] = _LOCATIONS[i % len(_LOCATIONS)]
        records.append(ProteinRecord.from_mapping(
            f"PLANT{i:02d}_SYN", seq, props, confidence=1 + (i % 3 == 0), reviewed=True))
    return records


def records_to_jsonl(records) -> str:
    return "".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in records)


def data_path(name: str) -> Path:
    return Path(str(resources.files("protclip") / "data" / name))


def main() -> None:
    data_path(TABLE1_FILE).write_text(records_to_jsonl(table1_records()), encoding="utf-8")
    data_path(PLANTED_FILE).write_text(records_to_jsonl(planted_records()), encoding="utf-8")


if __name__ == "__main__":
    main()
