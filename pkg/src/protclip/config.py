"""Run configuration and its plain-text ``key = value`` file format.

Blank lines and ``#`` comments are ignored; keys are the field names of
:class:`TrainConfig`. Unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .encoders import EncoderConfig
from .errors import ConfigError, IoFailure
from .objectives import LossConfig
from .records import PROTEIN_VOCAB_SIZE


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    # encoders
    dim: int = 64
    layers: int = 2
    heads: int = 4
    ff_dim: int = 128
    protein_max_len: int = 512
    text_vocab: int = 512
    text_max_len: int = 128
    dropout: float = 0.0
    # losses
    tau1: float = 0.07
    tau2: float = 0.07
    theta: float = 0.3
    lambda1: float = 0.7
    lambda2: float = 0.3
    bsr_rate: float = 0.15
    mlm_rate: float = 0.15
    allow_unconstrained: bool = False
    pda_prototypes: str = "sample"  # "sample" (per-pair a_i) or "bank" (EMA bank rows)
    bank_decay: float = 0.95
    # optimizer
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    # data
    batch_size: int = 16
    sampler_exponent: float = -3.0
    sampler_coverage_power: float = 0.5
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        if self.pda_prototypes not in ("sample", "bank"):
            raise ConfigError("pda_prototypes must be 'sample' or 'bank'")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 for the contrastive loss")
        if not 0.0 <= self.bank_decay <= 1.0:
            raise ConfigError("bank_decay must lie in [0, 1]")
        if self.lr <= 0 or self.weight_decay < 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("invalid optimizer settings")
        # Validate the derived configs eagerly so bad files fail at load time.
        self.loss_config()
        self.protein_config()
        self.text_config()

    def loss_config(self) -> LossConfig:
        return LossConfig(self.tau1, self.tau2, self.theta, self.lambda1, self.lambda2,
                          self.bsr_rate, self.mlm_rate, self.allow_unconstrained)

    def protein_config(self) -> EncoderConfig:
        return EncoderConfig(PROTEIN_VOCAB_SIZE, self.dim, self.layers, self.heads, self.ff_dim,
                             self.protein_max_len, self.dropout)

    def text_config(self) -> EncoderConfig:
        return EncoderConfig(self.text_vocab, self.dim, self.layers, self.heads, self.ff_dim,
                             self.text_max_len, self.dropout)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        unknown = set(values) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**values)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(name: str, kind: type, raw: str):
    raw = raw.strip()
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def parse_config_text(text: str) -> dict:
    types = {f.name: _TYPES[f.type] for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, types[key], raw)
    return values


def load_config(path: str | Path | None = None, **overrides) -> TrainConfig:
    values = {}
    if path is not None:
        try:
            values = parse_config_text(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise IoFailure(f"cannot read config {path}: {exc}") from exc
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(values)
