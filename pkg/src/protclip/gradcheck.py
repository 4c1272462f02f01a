"""Central finite-difference checks of every pre-training loss.

For a micro model (default d=8, n=16, K=3) each loss is differentiated on the
tape and compared against central differences (h = 1e-5):

* one coordinate per parameter tensor (the one with the largest total-loss
  gradient), and
* one random direction through all parameters at once.

Piecewise ops (min-max, threshold) make the losses non-smooth on a measure
zero set. A probe whose +h and -h evaluations land on a different branch
pattern than the base point is resampled rather than scored.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .encoders import PrototypeBank
from .objectives import sample_static_segments
from .records import ALPHABET, ProteinRecord
from .sampler import make_rng
from .tensor import Tape
from .training import compute_losses, init_params, prepare_example, total_loss

LOSSES = ("gc", "bsr", "pda", "mlm", "total")
STEP = 1e-5
TOLERANCE = 1e-4
# Relative error uses max(|analytic|, |numeric|, ABS_FLOOR) as denominator, so
# gradients near zero are judged by absolute error instead.
ABS_FLOOR = 1e-6

_WORDS = ("kinase", "membrane", "binds", "zinc", "domain", "family", "transport", "nucleus", "atp", "helix")


@dataclass
class GradcheckReport:
    seed: int
    worst: dict[str, dict[str, float]] = field(default_factory=dict)  # loss -> param -> worst rel error
    directional: dict[str, float] = field(default_factory=dict)
    resampled: int = 0

    def max_error(self, loss: str) -> float:
        return max([*self.worst[loss].values(), self.directional[loss]])

    def passed(self, loss: str, tol: float = TOLERANCE) -> bool:
        return self.max_error(loss) < tol


def rel_error(analytic: float, numeric: float, floor: float = ABS_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def micro_problem(seed: int, dim: int = 8, n: int = 16, K: int = 3):
    """Random records, fixed masks, and fresh parameters for one gradient check."""
    rng = make_rng(seed)
    config = TrainConfig(seed=seed, dim=dim, layers=2, heads=2, ff_dim=2 * dim, text_vocab=64,
                         batch_size=max(K, 2))
    records = []
    for i in range(K):
        seq = "".join(rng.choice(list(ALPHABET[:20]), size=n))
        words = lambda: " ".join(rng.choice(_WORDS, size=int(rng.integers(2, 5))))  # noqa: E731
        props = {"name": words(), "function": words(), "location": words(), "similarity": words()}
        if i % 2:
            del props["location"]
        records.append(ProteinRecord.from_mapping(f"GC{i}", seq, props, 1))
    examples = [prepare_example(r, config) for r in records]
    masks = []
    for ex in examples:
        seg = sample_static_segments(len(ex.tokens), rng)
        free = np.setdiff1d(np.arange(len(ex.tokens)), seg.positions())
        mlm = np.sort(rng.choice(free, size=max(1, round(0.15 * len(free))), replace=False))
        masks.append((seg, mlm))
    params = init_params(config, rng)
    bank = PrototypeBank.initial(dim, rng)
    return config, examples, masks, params, bank


def _evaluate(config, examples, masks, params, bank) -> tuple[dict[str, float], list]:
    with T.record_kinks() as kinks:
        parts = compute_losses(examples, masks, params, bank, config, Counter())
        total = total_loss(parts.gc, parts.bsr, parts.mlm, parts.pda, config.lambda1, config.lambda2)
    values = {"gc": parts.gc.item(), "bsr": parts.bsr.item(), "pda": parts.pda.item(),
              "mlm": parts.mlm.item(), "total": total.item()}
    return values, kinks


def _analytic(config, examples, masks, params, bank, loss: str) -> dict[str, np.ndarray]:
    for p in params.values():
        p.grad = None
    with Tape():
        parts = compute_losses(examples, masks, params, bank, config, Counter())
        total = total_loss(parts.gc, parts.bsr, parts.mlm, parts.pda, config.lambda1, config.lambda2)
        target = {"gc": parts.gc, "bsr": parts.bsr, "pda": parts.pda, "mlm": parts.mlm, "total": total}[loss]
        if target.requires_grad:
            T.backward(target)
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    for p in params.values():
        p.grad = None
    return grads


def gradcheck(seed: int = 0, dim: int = 8, n: int = 16, K: int = 3, h: float = STEP,
              max_resample: int = 8) -> GradcheckReport:
    config, examples, masks, params, bank = micro_problem(seed, dim, n, K)
    rng = make_rng(seed, worker_id=0x6C)
    grads = {loss: _analytic(config, examples, masks, params, bank, loss) for loss in LOSSES}
    _, base_kinks = _evaluate(config, examples, masks, params, bank)
    report = GradcheckReport(seed, {loss: {} for loss in LOSSES})

    def central(perturb):
        perturb(+h)
        plus, kp = _evaluate(config, examples, masks, params, bank)
        perturb(-2 * h)
        minus, km = _evaluate(config, examples, masks, params, bank)
        perturb(+h)
        smooth = kp == base_kinks and km == base_kinks
        return {k: (plus[k] - minus[k]) / (2 * h) for k in LOSSES}, smooth

    for name, p in params.items():
        order = np.argsort(-np.abs(grads["total"][name]).ravel(), kind="stable")
        candidates = list(order[:1]) + list(rng.permutation(p.data.size))
        for flat in candidates[: max_resample + 1]:
            idx = np.unravel_index(int(flat), p.data.shape)
            original = p.data[idx]

            def perturb(delta, p=p, idx=idx):
                p.data[idx] += delta

            numeric, smooth = central(perturb)
            p.data[idx] = original
            if smooth:
                for loss in LOSSES:
                    report.worst[loss][name] = rel_error(float(grads[loss][name][idx]), numeric[loss])
                break
            report.resampled += 1

    originals = {k: p.data.copy() for k, p in params.items()}
    for _ in range(max_resample + 1):
        direction = {k: rng.standard_normal(p.data.shape) for k, p in params.items()}

        def perturb(delta):
            for k, p in params.items():
                p.data += delta * direction[k]

        numeric, smooth = central(perturb)
        for k, p in params.items():
            p.data = originals[k].copy()
        if smooth:
            for loss in LOSSES:
                analytic = float(sum(np.sum(grads[loss][k] * direction[k]) for k in params))
                report.directional[loss] = rel_error(analytic, numeric[loss])
            break
        report.resampled += 1
    else:
        for loss in LOSSES:
            report.directional[loss] = float("nan")
    return report


def format_report(reports: list[GradcheckReport], tol: float = TOLERANCE) -> str:
    lines = ["loss,seed,worst_param,worst_rel_error,directional_rel_error,status"]
    for rep in reports:
        for loss in LOSSES:
            worst_param, worst = max(rep.worst[loss].items(), key=lambda kv: kv[1])
            status = "pass" if rep.passed(loss, tol) else "FAIL"
            lines.append(f"{loss},{rep.seed},{worst_param},{worst:.3e},{rep.directional[loss]:.3e},{status}")
    return "\n".join(lines) + "\n"


def per_parameter_table(report: GradcheckReport) -> str:
    lines = ["loss,param,rel_error"]
    for loss in LOSSES:
        for name, err in report.worst[loss].items():
            lines.append(f"{loss},{name},{err:.3e}")
    return "\n".join(lines) + "\n"
