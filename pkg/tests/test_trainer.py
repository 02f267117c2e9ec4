import json
import math

import numpy as np
import pytest

from troi.grid import BinaryMask
from troi.nn import ModelDims, forward, init_params
from troi.synth import Ellipsoid, SyntheticSubjectSpec, generate_subject, zscore
from troi.trainer import (BudgetUnreachable, Schedule, Stage1Config, TrainConfig, finetune_continuation, lr_at,
                          pretrain, stage1_sparse_mask, stage2_rewind)

DIMS = ModelDims(d_model=16, d_embed=4, n_blocks=1)


def small_subject(seed, center=(4, 4, 4)):
    spec = SyntheticSubjectSpec(dims=(8, 8, 8), embed_dim=4, roi_spec=(Ellipsoid(center, (2.5, 2.5, 2.5)),),
                                snr=2.0, n_samples=120, n_test=40, seed=seed)
    return zscore(generate_subject(spec))


@pytest.fixture(scope="module")
def pretrained():
    cfg = TrainConfig(schedule=Schedule(total_epochs=6, warmup_epochs=2), dims=DIMS, seed=1)
    bundle, report = pretrain([small_subject(10, (3, 4, 4)), small_subject(11, (4, 3, 4))], cfg)
    return bundle, report, cfg


@pytest.fixture(scope="module")
def target():
    return small_subject(99)


# --- schedule ------------------------------------------------------------------------

def test_lr_schedule_conventions():
    s = Schedule(total_epochs=25, warmup_epochs=5, base_lr=1e-3, min_lr=1e-5)
    assert lr_at(s, 0) == pytest.approx(1e-3 / 5, abs=1e-15)
    assert lr_at(s, 4) == pytest.approx(1e-3, abs=1e-15)
    assert lr_at(s, 5) == pytest.approx(1e-3, abs=1e-15)
    assert abs(lr_at(s, 24) - 1e-5) <= 1e-12
    # cosine phase spans epochs 5..24; its midpoint is 14.5, so use an even span
    s2 = Schedule(total_epochs=26, warmup_epochs=5, base_lr=1e-3, min_lr=1e-5)
    assert abs(lr_at(s2, 15) - (1e-3 + 1e-5) / 2) <= 1e-12
    with pytest.raises(ValueError):
        lr_at(s, 25)
    with pytest.raises(ValueError):
        lr_at(s, -1)


def test_lr_monotone_after_warmup():
    s = Schedule()
    lrs = [lr_at(s, e) for e in range(s.warmup_epochs, s.total_epochs)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


# --- pretraining ---------------------------------------------------------------------------

def test_pretrain_report_and_mix_switch(pretrained):
    _, report, cfg = pretrained
    assert len(report.records) == 6
    assert report.lr_trace == [lr_at(cfg.schedule, e) for e in range(6)]
    assert [r["mixed"] for r in report.records] == [e < math.ceil(6 / 3) for e in range(6)]


def test_mix_stop_default_150_epochs():
    cfg = TrainConfig()
    assert cfg.schedule.total_epochs == 150
    assert cfg.batch_size == 24
    assert cfg.mix_epochs() == 50


def test_pretrain_needs_subjects():
    with pytest.raises(ValueError):
        pretrain([], TrainConfig())


def test_pretrain_reduces_loss(pretrained):
    _, report, _ = pretrained
    assert report.records[-1]["total"] < report.records[0]["total"]


def test_pretrain_converges_on_noiseless_subject():
    spec = SyntheticSubjectSpec(dims=(6, 6, 6), embed_dim=4, roi_spec=(Ellipsoid((2.5, 2.5, 2.5), (2, 2, 2)),),
                                snr=1e9, n_samples=200, n_test=0, seed=1)
    s = generate_subject(spec)
    b = 8
    cfg = TrainConfig(schedule=Schedule(150), dims=ModelDims(d_model=32, d_embed=4), batch_size=b)
    _, report = pretrain([s], cfg)
    assert report.records[-1]["clip"] < math.log(b) * 0.1


def test_pretrain_nan_abort():
    s = small_subject(5)
    s.fmri[s.train[:3], 0] = np.nan
    cfg = TrainConfig(schedule=Schedule(2, 1), dims=DIMS)
    with pytest.raises(FloatingPointError, match="epoch 0"):
        pretrain([s], cfg)


def test_checkpoint_resume_matches_uninterrupted(tmp_path):
    subjects = [small_subject(20), small_subject(21, (3, 3, 3))]
    cfg = TrainConfig(schedule=Schedule(total_epochs=4, warmup_epochs=1), dims=DIMS, seed=3)
    _, full = pretrain(subjects, cfg)
    ckpt = tmp_path / "mid.json"
    pretrain(subjects, cfg, checkpoint_path=ckpt, stop_epoch=2)
    _, resumed = pretrain(subjects, cfg, resume_from=ckpt)
    assert len(resumed.records) == 4
    for a, b in zip(full.records, resumed.records):
        assert abs(a["total"] - b["total"]) <= 1e-12


# --- stage 1 -------------------------------------------------------------------------------

def test_stage1_vacuous_budget(pretrained, target):
    bundle, _, cfg = pretrained
    with pytest.warns(UserWarning):
        res = stage1_sparse_mask(bundle, target, Stage1Config(budget=target.n_voxels), cfg)
    assert res.iterations == 0
    assert res.mask.nonzero_count() == target.n_voxels


def test_stage1_contract(pretrained, target):
    bundle, _, cfg = pretrained
    res = stage1_sparse_mask(bundle, target, Stage1Config(budget=120), cfg)
    assert res.mask.nonzero_count() <= 120
    trace = res.report.mask_trace
    assert len(trace) == res.iterations
    assert all(a >= b for a, b in zip(trace, trace[1:]))
    # the pretrained bundle is left untouched
    assert "target" not in bundle.troi


def test_stage1_is_deterministic(pretrained, target):
    bundle, _, cfg = pretrained
    a = stage1_sparse_mask(bundle, target, Stage1Config(budget=150), cfg)
    b = stage1_sparse_mask(bundle, target, Stage1Config(budget=150), cfg)
    assert json.dumps(a.report.to_dict()) == json.dumps(b.report.to_dict())
    np.testing.assert_array_equal(a.mask.bits, b.mask.bits)


def test_stage1_budget_unreachable(pretrained, target):
    bundle, _, cfg = pretrained
    with pytest.raises(BudgetUnreachable) as info:
        stage1_sparse_mask(bundle, target, Stage1Config(budget=1, max_iters=2), cfg)
    assert info.value.result.iterations == 2


def test_stage1_without_l1_only_removes_small_weights(pretrained, target):
    bundle, _, cfg = pretrained
    th = 1e-9
    with pytest.raises(BudgetUnreachable) as info:
        stage1_sparse_mask(bundle, target, Stage1Config(budget=10, psi0=0.0, th=th, max_iters=3), cfg)
    res = info.value.result
    wm = res.weighted_mask
    layer_mask = res.bundle.troi["target"].mask.data.ravel()
    assert np.all(layer_mask[~wm.frozen.ravel()] > th)
    assert wm.frozen.sum() < 0.05 * target.n_voxels


# --- stage 2 -------------------------------------------------------------------------------

def test_stage2_gathers_and_rewinds(pretrained, target):
    bundle, pre_report, _ = pretrained
    mask = BinaryMask((target.true_roi.bits & (np.arange(512).reshape(8, 8, 8) % 2 == 0)).astype(np.uint8))
    cfg = TrainConfig(schedule=Schedule(total_epochs=6, warmup_epochs=2), dims=DIMS, seed=1)
    out, report = stage2_rewind(bundle, mask, target, cfg)
    layer = out.troi["target"]
    assert layer.n_inputs == mask.nonzero_count()
    assert layer.mask is None
    assert report.lr_trace == pre_report.lr_trace
    assert report.records[-1]["total"] < report.records[0]["total"]


def test_stage2_empty_mask(pretrained, target):
    bundle, _, _ = pretrained
    with pytest.raises(ValueError, match="empty"):
        stage2_rewind(bundle, BinaryMask.zeros(target.dims), target)


def test_gather_equals_hadamard_with_zeroed_rows(target):
    rng = np.random.default_rng(0)
    bits = (rng.uniform(size=target.dims) > 0.7).astype(np.uint8)
    mask = BinaryMask(bits)
    full = init_params(0, {"t": target.dims}, DIMS)
    gathered = full.copy()
    idx = mask.indices()
    layer = gathered.add_subject("t", target.dims, 0, index=idx, with_mask=False)
    layer.linear.weight.data[...] = full.troi["t"].linear.weight.data[idx]
    full.troi["t"].mask.data[...] = bits.reshape(1, -1)
    x = target.fmri[:5]
    np.testing.assert_allclose(forward(gathered, "t", x)[1].data, forward(full, "t", x)[1].data, atol=1e-12)


def test_finetune_continuation_starts_from_stage1(pretrained, target):
    bundle, _, cfg = pretrained
    res = stage1_sparse_mask(bundle, target, Stage1Config(budget=150), cfg)
    short = TrainConfig(schedule=Schedule(total_epochs=2, warmup_epochs=1), dims=DIMS)
    out, report = finetune_continuation(res, res.mask, target, short)
    assert out.troi["target"].n_inputs == res.mask.nonzero_count()
    assert report.lr_trace == [short.schedule.min_lr] * 2
