"""Training loop: batch assembly, the four-loss forward pass, Adam, and resumable state."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .curation import cluster_key, cluster_statistics, filter_for_pretraining
from .encoders import (
    Params,
    PrototypeBank,
    cross_attention_fuse,
    encode_biotext,
    encode_protein,
    init_encoder_params,
    init_fusion_params,
    init_head_params,
    init_prototype_params,
    update_prototype_bank,
)
from .errors import ValidationError
from .objectives import (
    LossReport,
    SegmentMaskSet,
    gc_loss,
    mask_tokens,
    mlm_mask,
    pda_sample_loss,
    reconstruction_loss,
    sample_static_segments,
    total_loss,
)
from .records import PROTEIN_VOCAB_SIZE, ProteinRecord, assemble_biotext, tokenize_biotext, tokenize_sequence
from .sampler import build_distribution, build_index, make_rng, sample_batch
from .tensor import Tape, Tensor


@dataclass(frozen=True)
class Example:
    entry_name: str
    tokens: np.ndarray
    text_ids: np.ndarray
    spans: dict


def prepare_example(record: ProteinRecord, config: TrainConfig) -> Example:
    tokens = np.asarray(tokenize_sequence(record.sequence)[: config.protein_max_len], dtype=np.int64)
    ids, spans = tokenize_biotext(assemble_biotext(record), config.text_vocab, config.text_max_len)
    return Example(record.entry_name, tokens, np.asarray(ids, dtype=np.int64), spans)


def init_params(config: TrainConfig, rng: np.random.Generator) -> Params:
    params: Params = {}
    params.update(init_encoder_params(config.protein_config(), "protein", rng))
    params.update(init_encoder_params(config.text_config(), "text", rng))
    params.update(init_prototype_params(config.dim, rng))
    params.update(init_fusion_params(config.dim, rng))
    params.update(init_head_params("bsr", config.dim, PROTEIN_VOCAB_SIZE, rng))
    params.update(init_head_params("mlm", config.dim, PROTEIN_VOCAB_SIZE, rng))
    return params


class Adam:
    """Adam; weight decay, when nonzero, is added to the gradient as an L2 term."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0) -> None:
        self.lr, self.beta1, self.beta2, self.eps, self.weight_decay = lr, beta1, beta2, eps, weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Params) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.grad = None


def draw_masks(examples: Sequence[Example], rng: np.random.Generator, config: TrainConfig
               ) -> list[tuple[SegmentMaskSet, np.ndarray]]:
    """Static segments first, then Bernoulli MLM positions outside them."""
    out = []
    for ex in examples:
        seg = sample_static_segments(len(ex.tokens), rng, config.bsr_rate)
        out.append((seg, mlm_mask(len(ex.tokens), rng, config.mlm_rate, exclude=seg.positions())))
    return out


@dataclass
class LossParts:
    gc: Tensor
    bsr: Tensor
    mlm: Tensor
    pda: Tensor
    prototypes: np.ndarray  # (B, 4, d) values for the bank update
    present: np.ndarray  # (B, 4)


def _batch_mean(terms: list[Tensor]) -> Tensor:
    if not terms:
        return Tensor(0.0)
    return T.mean(T.stack(terms))


def compute_losses(examples: Sequence[Example], masks, params: Params, bank: PrototypeBank,
                   config: TrainConfig, counters: Counter) -> LossParts:
    """Deterministic forward pass given pre-drawn masks.

    Each pair gets a clean protein pass (pooled embedding for the contrastive
    loss, residues for dynamic segments) and, if anything is masked, a masked
    pass feeding both the MLM head and the biotext-fused BSR head.
    """
    pcfg, tcfg, lcfg = config.protein_config(), config.text_config(), config.loss_config()
    pooled_s, pooled_t, bsr_terms, mlm_terms, pda_terms = [], [], [], [], []
    protos, present = [], []
    for ex, (seg, mlm_pos) in zip(examples, masks):
        text = encode_biotext(ex.text_ids, ex.spans, params, tcfg)
        clean = encode_protein(ex.tokens, params, pcfg)
        pooled_s.append(clean.pooled)
        pooled_t.append(text.pooled)
        protos.append(text.prototypes.data)
        present.append(text.present)

        if seg.skipped:
            counters["skipped_short"] += 1
        seg_pos = seg.positions()
        if seg_pos.size or mlm_pos.size:
            masked = encode_protein(mask_tokens(ex.tokens, np.concatenate([seg_pos, mlm_pos])), params, pcfg)
            if seg_pos.size:
                # Fusion is row-wise in the queries, so fusing only the masked rows is exact.
                fused = cross_attention_fuse(masked.residues[seg_pos], text.tokens, params)
                bsr_terms.append(reconstruction_loss(fused, ex.tokens[seg_pos], params, "bsr"))
            if mlm_pos.size:
                mlm_terms.append(reconstruction_loss(masked.residues[mlm_pos], ex.tokens[mlm_pos], params, "mlm"))
        if not mlm_pos.size:
            counters["mlm_empty"] += 1

        prototypes = text.prototypes if config.pda_prototypes == "sample" else Tensor(bank.rows)
        pda = pda_sample_loss(prototypes, text.present, clean.residues, lcfg, counters)
        if pda is not None:
            pda_terms.append(pda)

    gc = gc_loss(T.stack(pooled_s), T.stack(pooled_t), lcfg.tau1)
    return LossParts(gc, _batch_mean(bsr_terms), _batch_mean(mlm_terms), _batch_mean(pda_terms),
                     np.stack(protos), np.stack(present))


def train_step(examples: Sequence[Example], params: Params, bank: PrototypeBank, config: TrainConfig,
               rng: np.random.Generator, optimizer: Adam, step: int = 0) -> tuple[PrototypeBank, LossReport]:
    """One optimization step; updates ``params`` in place and returns the new bank."""
    counters: Counter = Counter()
    masks = draw_masks(examples, rng, config)
    with Tape():
        parts = compute_losses(examples, masks, params, bank, config, counters)
        loss = total_loss(parts.gc, parts.bsr, parts.mlm, parts.pda, config.lambda1, config.lambda2)
        T.backward(loss)
    optimizer.step(params)
    bank = update_prototype_bank(bank, parts.prototypes, parts.present)
    report = LossReport(step, parts.gc.item(), parts.bsr.item(), parts.pda.item(), parts.mlm.item(),
                        loss.item(), counters)
    return bank, report


def embed_examples(examples: Sequence[Example], params: Params, config: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    pcfg, tcfg = config.protein_config(), config.text_config()
    S = np.stack([encode_protein(ex.tokens, params, pcfg).pooled.data for ex in examples])
    Tx = np.stack([encode_biotext(ex.text_ids, ex.spans, params, tcfg).pooled.data for ex in examples])
    return S, Tx


def retrieval_accuracy(S: np.ndarray, Tx: np.ndarray, batch_size: int = 16) -> float:
    """In-batch top-1: fraction of rows whose most cosine-similar text (within its batch) is its own."""
    Su = S / np.linalg.norm(S, axis=1, keepdims=True)
    Tu = Tx / np.linalg.norm(Tx, axis=1, keepdims=True)
    hits = 0
    for start in range(0, len(S), batch_size):
        sims = Su[start:start + batch_size] @ Tu[start:start + batch_size].T
        hits += int(np.sum(sims.argmax(axis=1) == np.arange(sims.shape[0])))
    return hits / len(S)


def interference(totals: Sequence[float], window: int = 50) -> float:
    """Standard deviation of step-to-step total-loss changes over the trailing window."""
    deltas = np.diff(np.asarray(totals[-(window + 1):], dtype=np.float64))
    return float(np.std(deltas)) if deltas.size else 0.0


class Trainer:
    """Owns every piece of mutable training state, so a checkpoint is a complete resume point."""

    def __init__(self, config: TrainConfig, records: Sequence[ProteinRecord]) -> None:
        self.config = config
        kept, _ = filter_for_pretraining(records)
        if not kept:
            raise ValidationError("no records survive the pre-training filter")
        self.records = kept
        self.examples = [prepare_example(r, config) for r in kept]
        self.distribution = build_distribution(cluster_statistics(kept), config.sampler_exponent,
                                               config.sampler_coverage_power)
        self.index = build_index(kept, cluster_key)
        self.rng = make_rng(config.seed)
        self.params = init_params(config, self.rng)
        self.bank = PrototypeBank.initial(config.dim, self.rng, config.bank_decay)
        self.optimizer = Adam(config.lr, config.beta1, config.beta2, config.adam_eps, config.weight_decay)
        self.step = 0

    def next_batch(self) -> list[Example]:
        ids = sample_batch(self.distribution, self.index, self.rng, self.config.batch_size)
        return [self.examples[i] for i in ids]

    def train_step(self) -> LossReport:
        batch = self.next_batch()
        self.step += 1
        self.bank, report = train_step(batch, self.params, self.bank, self.config, self.rng,
                                       self.optimizer, self.step)
        return report

    def evaluate_retrieval(self, batch_size: int = 16) -> float:
        return retrieval_accuracy(*embed_examples(self.examples, self.params, self.config), batch_size)

    def save(self, path: str | Path) -> Path:
        arrays = {f"param.{k}": p.data for k, p in self.params.items()}
        arrays.update({f"adam.m.{k}": v for k, v in self.optimizer.m.items()})
        arrays.update({f"adam.v.{k}": v for k, v in self.optimizer.v.items()})
        arrays["bank.rows"] = self.bank.rows
        meta = {
            "config": self.config.to_dict(),
            "step": self.step,
            "adam_t": self.optimizer.t,
            "rng_state": self.rng.bit_generator.state,
        }
        return save_checkpoint(path, arrays, meta)

    def load(self, path: str | Path) -> None:
        meta, arrays = load_checkpoint(path)
        # checkpoint cadence does not affect the trajectory, so it may differ on resume
        saved = TrainConfig.from_dict(meta["config"]).replace(checkpoint_every=self.config.checkpoint_every)
        if saved != self.config:
            raise ValidationError("checkpoint config differs from the run config")
        for k, p in self.params.items():
            p.data = arrays[f"param.{k}"]
            p.grad = None
        self.optimizer.m = {k[len("adam.m."):]: v for k, v in arrays.items() if k.startswith("adam.m.")}
        self.optimizer.v = {k[len("adam.v."):]: v for k, v in arrays.items() if k.startswith("adam.v.")}
        self.optimizer.t = int(meta["adam_t"])
        self.bank = PrototypeBank(arrays["bank.rows"], self.config.bank_decay)
        self.rng.bit_generator.state = meta["rng_state"]
        self.step = int(meta["step"])
