from collections import Counter

import numpy as np
import pytest

from protclip.config import TrainConfig
from protclip.errors import ValidationError
from protclip.gradcheck import LOSSES, gradcheck, micro_problem
from protclip.synthetic import planted_records
from protclip.tensor import Tensor
from protclip.training import (
    Adam,
    Trainer,
    compute_losses,
    draw_masks,
    interference,
    retrieval_accuracy,
    total_loss,
)

SMALL = dict(dim=16, heads=2, ff_dim=32, batch_size=4, lr=1e-3)


@pytest.fixture(scope="module")
def records():
    return planted_records(16)


def test_one_step_is_bitwise_reproducible(records):
    a = Trainer(TrainConfig(seed=3, **SMALL), records).train_step()
    b = Trainer(TrainConfig(seed=3, **SMALL), records).train_step()
    assert a.csv_row() == b.csv_row()
    assert all(np.isfinite([a.gc, a.bsr, a.pda, a.mlm, a.total]))


def test_report_total_matches_composition(records):
    cfg = TrainConfig(seed=1, **SMALL)
    trainer = Trainer(cfg, records)
    for _ in range(3):
        r = trainer.train_step()
        assert abs(r.total - (r.gc + cfg.lambda1 * r.bsr + cfg.lambda2 * r.mlm + r.pda)) < 1e-12


def test_two_record_micro_batch_gradient():
    report = gradcheck(seed=5, K=2)
    for loss in LOSSES:
        assert report.max_error(loss) < 1e-4


def test_masks_are_disjoint(records):
    cfg = TrainConfig(**SMALL)
    trainer = Trainer(cfg, records)
    for seg, mlm in draw_masks(trainer.examples, np.random.default_rng(0), cfg):
        assert not set(seg.positions()) & set(mlm)
        assert seg.total_masked == len(seg.positions())


def test_resume_is_bitwise(tmp_path, records):
    cfg = TrainConfig(seed=2, **SMALL)
    full = Trainer(cfg, records)
    rows = [full.train_step().csv_row() for _ in range(3)]
    full.save(tmp_path / "mid.bin")
    rows += [full.train_step().csv_row() for _ in range(3)]

    resumed = Trainer(cfg, records)
    resumed.load(tmp_path / "mid.bin")
    assert resumed.step == 3
    tail = [resumed.train_step().csv_row() for _ in range(3)]
    assert tail == rows[3:]
    for k, p in full.params.items():
        assert p.data.tobytes() == resumed.params[k].data.tobytes()
    assert full.bank.rows.tobytes() == resumed.bank.rows.tobytes()


def test_load_rejects_other_config(tmp_path, records):
    Trainer(TrainConfig(seed=2, **SMALL), records).save(tmp_path / "c.bin")
    with pytest.raises(ValidationError):
        Trainer(TrainConfig(seed=3, **SMALL), records).load(tmp_path / "c.bin")


def test_bank_prototype_path_runs(records):
    trainer = Trainer(TrainConfig(pda_prototypes="bank", **SMALL), records)
    before = trainer.bank.rows.copy()
    r = trainer.train_step()
    assert np.isfinite(r.total)
    assert not np.array_equal(before, trainer.bank.rows)
    assert np.allclose(np.linalg.norm(trainer.bank.rows, axis=1), 1.0)


def test_adam_first_step_matches_formula():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, -0.25])
    Adam(lr=0.1).step({"p": p})
    # bias-corrected first step moves each coordinate by lr * sign(g) (up to eps)
    assert np.allclose(p.data, [0.9, -1.9], atol=1e-7)
    assert p.grad is None


def test_filter_applies_before_training():
    from protclip.records import ProteinRecord

    low = [ProteinRecord.from_mapping(f"L{i}", "MKVLA", {"name": "x"}, 1) for i in range(4)]
    with pytest.raises(ValidationError):
        Trainer(TrainConfig(**SMALL), low)


def test_retrieval_accuracy():
    S = np.eye(4)
    assert retrieval_accuracy(S, S, batch_size=4) == 1.0
    assert retrieval_accuracy(S, S[[1, 0, 2, 3]], batch_size=4) == 0.5
    assert retrieval_accuracy(S, S[[1, 0, 3, 2]], batch_size=2) == 0.0


def test_interference():
    assert interference([1.0, 2.0, 3.0, 4.0]) == 0.0
    totals = list(range(100)) + [0, 10] * 30
    deltas = np.diff(np.array(totals[-51:], dtype=float))
    assert interference(totals) == pytest.approx(float(np.std(deltas)))


def test_compute_losses_is_pure():
    config, examples, masks, params, bank = micro_problem(1)
    a = compute_losses(examples, masks, params, bank, config, Counter())
    b = compute_losses(examples, masks, params, bank, config, Counter())
    assert total_loss(a.gc, a.bsr, a.mlm, a.pda, 0.7, 0.3).item() == total_loss(b.gc, b.bsr, b.mlm, b.pda, 0.7, 0.3).item()
