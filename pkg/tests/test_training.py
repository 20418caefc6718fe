import csv
import dataclasses
import math

import numpy as np
import pytest

from idenc.models import ModelDescriptor, init_params
from idenc.numerics import Tensor
from idenc.schedules import make_schedule
from idenc.synthdata import generate_dataset
from idenc.training import (
    LOG_FIELDS,
    AdamW,
    TrainConfig,
    TrainingDivergedError,
    clip_grad_norm,
    compose_batch,
    curriculum_p,
    lr_at,
    total_loss,
    train,
)

MICRO = ModelDescriptor(
    image_size=16, base_channels=4, channel_mult=(1, 2), num_res_blocks=1, attn_resolutions=(8,),
    emb_dim=8, enc_base_channels=4, enc_channel_mult=(1, 2), enc_attn_resolutions=(), max_groups=2,
)
SCHEDULE = make_schedule("cosine", 20)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(4, 1, 5, 12, 16, seed=3)


def _cfg(**kw):
    base = dict(total_steps=20, batch_size=6, warmup_steps=2, lr=1e-3, max_refs=4, checkpoint_interval=10)
    base.update(kw)
    return TrainConfig(**base)


def test_defaults():
    c = TrainConfig()
    assert (c.alpha1, c.alpha2) == (0.01, 0.01)
    assert (c.p_start, c.p_end) == (1.0, 0.05)
    assert c.labeled_fraction == 0.5


def test_curriculum_endpoints_exact():
    assert curriculum_p(0, 1000) == 1.0
    assert curriculum_p(1000, 1000) == 0.05
    assert curriculum_p(500, 1000) == pytest.approx(0.525, abs=1e-15)
    assert curriculum_p(5000, 1000) == 0.05
    steps = [curriculum_p(s, 100) for s in range(101)]
    assert all(a > b for a, b in zip(steps, steps[1:]))
    assert np.allclose(np.diff(steps), -0.0095)


def test_lr_warmup():
    assert lr_at(0, 1e-3, 10) == 0.0
    assert lr_at(5, 1e-3, 10) == pytest.approx(5e-4)
    assert lr_at(10, 1e-3, 10) == 1e-3
    assert lr_at(99, 1e-3, 10) == 1e-3
    assert lr_at(1, 1e-3, 0) == 1e-3


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(labeled_fraction=1.5)
    with pytest.raises(ValueError):
        TrainConfig(alpha1=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(drop_mode="nope")
    with pytest.raises(ValueError):
        TrainConfig(min_refs=1)
    with pytest.raises(ValueError):
        TrainConfig(temperature=0.0)


def test_compose_batch_counts(data):
    batch = compose_batch(data, _cfg(batch_size=7, labeled_fraction=0.5), np.random.default_rng(0))
    assert len(batch.labeled) == 3 and len(batch.unlabeled) == 4
    assert len({s.label for s in batch.labeled}) == 3
    for s in batch.labeled:
        assert 2 <= len(s.refs) <= 4
        assert any(np.array_equal(s.target, r) for r in s.refs)
        assert s.label in data.train


def test_compose_batch_extremes(data):
    rng = np.random.default_rng(1)
    full = compose_batch(data, _cfg(labeled_fraction=1.0), rng)
    assert len(full.labeled) == 6 and len(full.unlabeled) == 0
    none = compose_batch(data, _cfg(labeled_fraction=0.0), rng)
    assert len(none.labeled) == 0 and len(none.unlabeled) == 6
    empty_pool = dataclasses.replace(data, unlabeled=data.unlabeled[:0])
    with pytest.raises(ValueError, match="unlabeled"):
        compose_batch(empty_pool, _cfg(), rng)


def test_compose_batch_deterministic(data):
    a = compose_batch(data, _cfg(), np.random.default_rng(5))
    b = compose_batch(data, _cfg(), np.random.default_rng(5))
    assert [s.label for s in a.labeled] == [s.label for s in b.labeled]
    assert all(np.array_equal(x.refs, y.refs) for x, y in zip(a.labeled, b.labeled))
    assert np.array_equal(a.unlabeled, b.unlabeled)


def test_reported_decomposition_exact(data):
    params = init_params(MICRO, 0)
    cfg = _cfg(p_start=0.0, p_end=0.0, alpha1=0.3, alpha2=0.7)
    batch = compose_batch(data, cfg, np.random.default_rng(2))
    loss, rep = total_loss(batch, params, SCHEDULE, 3, cfg, np.random.default_rng(3))
    assert rep.l_id is not None and rep.n_dropped == 0
    assert rep.total == rep.l_diff_id + 0.3 * rep.l_id + 0.7 * rep.l_diff_g
    assert float(loss.data) == pytest.approx(rep.total, rel=1e-6)


def test_all_dropped_omits_identity_term(data):
    params = init_params(MICRO, 0)
    cfg = _cfg(p_start=1.0, p_end=1.0)
    batch = compose_batch(data, cfg, np.random.default_rng(4))
    loss, rep = total_loss(batch, params, SCHEDULE, 3, cfg, np.random.default_rng(5))
    assert rep.l_id is None and rep.id_omitted
    assert rep.n_dropped == len(batch.labeled)
    assert rep.total == rep.l_diff_id + cfg.alpha2 * rep.l_diff_g


def test_zero_drop_mode_runs(data):
    params = init_params(MICRO, 0)
    cfg = _cfg(p_start=1.0, p_end=1.0, drop_mode="zero")
    batch = compose_batch(data, cfg, np.random.default_rng(4))
    loss, rep = total_loss(batch, params, SCHEDULE, 3, cfg, np.random.default_rng(5))
    assert math.isfinite(rep.total)


def test_adamw_hand_calculation():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True, dtype=np.float64)
    opt = AdamW([w], betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01)
    w.grad = np.array([0.5, 0.25])
    opt.step(0.1)
    # first step: m̂ = g, v̂ = g², so the Adam direction is g/(|g|+eps)
    expected = np.array([1.0, -2.0]) - 0.1 * (np.array([0.5, 0.25]) / (np.array([0.5, 0.25]) + 1e-8) + 0.01 * np.array([1.0, -2.0]))
    np.testing.assert_allclose(w.data, expected, rtol=1e-14)
    w.grad = np.array([-0.5, 0.25])
    opt.step(0.1)
    m = 0.9 * 0.1 * np.array([0.5, 0.25]) + 0.1 * np.array([-0.5, 0.25])
    v = 0.999 * 0.001 * np.array([0.25, 0.0625]) + 0.001 * np.array([0.25, 0.0625])
    upd = (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8) + 0.01 * expected
    np.testing.assert_allclose(w.data, expected - 0.1 * upd, rtol=1e-12)


def test_adamw_matches_torch():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(6)
    w0 = rng.standard_normal(5)
    grads = rng.standard_normal((6, 5))
    w = Tensor(w0.copy(), requires_grad=True, dtype=np.float64)
    opt = AdamW([w], betas=(0.9, 0.99), eps=1e-6, weight_decay=0.05)
    tw = torch.tensor(w0.copy(), requires_grad=True, dtype=torch.float64)
    topt = torch.optim.AdamW([tw], lr=0.01, betas=(0.9, 0.99), eps=1e-6, weight_decay=0.05)
    for g in grads:
        w.grad = g.copy()
        opt.step(0.01)
        tw.grad = torch.tensor(g)
        topt.step()
    np.testing.assert_allclose(w.data, tw.detach().numpy(), rtol=1e-12, atol=1e-14)


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True, dtype=np.float64)
    a.grad = np.array([3.0, 4.0])
    assert clip_grad_norm([a], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(a.grad, [0.6, 0.8])
    a.grad = np.array([0.3, 0.4])
    clip_grad_norm([a], 1.0)
    np.testing.assert_allclose(a.grad, [0.3, 0.4])


def test_nan_aborts_with_term_and_step(data):
    params = init_params(MICRO, 0)
    params["gen.out.conv.w"].data[...] = np.nan
    with pytest.raises(TrainingDivergedError, match=r"non-finite l_diff_id = nan at step 1"):
        train(data, MICRO, _cfg(total_steps=3), SCHEDULE, params=params)


def test_resolution_mismatch(data):
    with pytest.raises(ValueError, match="resolution"):
        train(data, dataclasses.replace(MICRO, image_size=32), _cfg(total_steps=1), SCHEDULE)


def test_training_reproducible_and_logged(data, tmp_path):
    cfg = _cfg(total_steps=12, checkpoint_interval=6, p_start=0.5, p_end=0.0)
    ra = train(data, MICRO, cfg, SCHEDULE, out_dir=tmp_path / "a")
    rb = train(data, MICRO, cfg, SCHEDULE, out_dir=tmp_path / "b")
    assert [p.name for p in ra.checkpoints] == ["step_000006.ckpt", "step_000012.ckpt", "final.ckpt"]
    for pa, pb in zip(ra.checkpoints, rb.checkpoints):
        assert pa.read_bytes() == pb.read_bytes()
    log_a = (tmp_path / "a" / "train_log.csv").read_text()
    assert log_a == (tmp_path / "b" / "train_log.csv").read_text()
    rows = list(csv.DictReader(log_a.splitlines()))
    assert tuple(rows[0]) == LOG_FIELDS and len(rows) == 12
    for r in rows:
        l_id = cfg.alpha1 * float(r["l_id"]) if r["l_id"] else 0.0
        assert float(r["total"]) == float(r["l_diff_id"]) + l_id + cfg.alpha2 * float(r["l_diff_g"])
    assert float(rows[0]["lr"]) == cfg.lr / 2


def test_overfit_fixed_batch(data):
    params = init_params(MICRO, 1)
    cfg = _cfg(p_start=0.0, p_end=0.0, alpha1=0.1)
    batch = compose_batch(data, cfg, np.random.default_rng(7))
    opt = AdamW(params.parameters(), weight_decay=0.0)
    first = last = None
    for step in range(80):
        loss, rep = total_loss(batch, params, SCHEDULE, 1, cfg, np.random.default_rng(8))
        first = rep.total if first is None else first
        last = rep.total
        loss.backward()
        opt.step(3e-3)
        opt.zero_grad()
    assert last < 0.5 * first
