import dataclasses

import numpy as np
import pytest
from conftest import gfsl_run

from lcwof import phases
from lcwof.config import PhaseConfig
from lcwof.data import TRAIN
from lcwof.model import ModelState, param_hash
from lcwof.phases import (EvalSet, LabeledSet, PhaseError, ReplaySampler, backbone_displacement, build_replay_set,
                          evaluate, run_batch_ratio, run_interleaved, run_phase1, run_phase2, run_phase3)


@pytest.fixture
def parts(small_setup, small_cfg):
    base, pool, p1, _ = small_setup
    support = LabeledSet(pool.features[[0, 20, 40]], [0, 1, 2])
    return small_cfg, base, pool, p1.clone(), support


def test_phase1_learns_and_leaves_snapshot(small_setup):
    _, _, model, res = small_setup
    assert res.losses[-1] < res.losses[0]
    assert model.backbone.norm.frozen and model.snapshot_prev is not None
    assert set(model.snapshot_prev) == {p.name for p in model.backbone_params()}


def test_phase1_rejects_bad_labels(rng):
    m = ModelState.create(3, 2, rng, d_hidden=4, d_emb=4)
    with pytest.raises(PhaseError):
        run_phase1(m, LabeledSet(np.zeros((2, 3)), [0, 5]), PhaseConfig(epochs=1), rng)


def test_phase2_needs_snapshot(rng):
    m = ModelState.create(3, 2, rng, d_hidden=4, d_emb=4)
    with pytest.raises(PhaseError, match="snapshot"):
        run_phase2(m, LabeledSet(np.zeros((1, 3)), [0]), PhaseConfig(epochs=1), rng)


def test_phase2_freezes_base_head_and_norm(parts, rng):
    cfg, _, _, m, support = parts
    head, norm = param_hash(m.base_head.params()), m.backbone.norm.running_mean.copy()
    gamma = m.backbone.norm.gamma.value.copy()
    res = run_phase2(m, support, cfg.phase2, rng)
    assert param_hash(m.base_head.params()) == head
    assert np.array_equal(norm, m.backbone.norm.running_mean) and np.array_equal(gamma, m.backbone.norm.gamma.value)
    assert m.n_novel == 3 and res.displacement > 0 and len(res.losses) == cfg.phase2.epochs


def test_phase2_unfrozen_norm_moves(parts, rng):
    cfg, _, _, m, support = parts
    mean = m.backbone.norm.running_mean.copy()
    run_phase2(m, support, dataclasses.replace(cfg.phase2, freeze_norm=False), rng)
    assert not np.array_equal(mean, m.backbone.norm.running_mean)


def test_phase2_snapshot_replaced_not_mutated(parts, rng):
    cfg, _, _, m, support = parts
    old = m.snapshot_prev
    h = param_hash(old)
    run_phase2(m, support, cfg.phase2, rng)
    assert param_hash(old) == h and m.snapshot_prev is not old
    assert backbone_displacement(m) == 0.0


def test_stronger_constraint_moves_backbone_less(parts):
    cfg, _, _, m, support = parts
    disp = []
    for lam in (0.0, 1e4):
        res = run_phase2(m.clone(), support, dataclasses.replace(cfg.phase2, lam=lam), np.random.default_rng(0),
                         init_rng=np.random.default_rng(1))
        disp.append(res.displacement)
    assert disp[1] < disp[0]


def test_kd_phase2_runs(parts, rng):
    cfg, _, _, m, support = parts
    res = run_phase2(m, support, dataclasses.replace(cfg.phase2, lam=0.0, kd_weight=1.0), rng)
    assert np.isfinite(res.losses).all()


def test_early_stop_restores_best_epoch(parts, small_setup, rng):
    cfg, base, pool, m, support = parts
    ev = EvalSet(base.local(TRAIN), LabeledSet(pool.features[[1, 21, 41]], [0, 1, 2]))
    res = run_phase2(m, support, dataclasses.replace(cfg.phase2, early_stop_metric="hm_on_val", epochs=6), rng,
                     evaluator=lambda mm: evaluate(mm, ev))
    assert len(res.curve) == 6 and res.best.hm == max(r.hm for r in res.curve)
    assert evaluate(m, ev).hm == pytest.approx(res.best.hm)


def test_replay_size_64_base_5_novel():
    rng = np.random.default_rng(0)
    pool = LabeledSet(rng.normal(size=(640, 2)), np.repeat(np.arange(64), 10), np.arange(640))
    novel = LabeledSet(rng.normal(size=(5, 2)), np.arange(5))
    rs = build_replay_set(pool, novel, 64, 1, rng)
    assert len(rs) == 69 and (rs.provenance == 0).sum() == 64
    assert sorted(rs.data.y[:64]) == list(range(64)) and list(rs.data.y[64:]) == [64, 65, 66, 67, 68]
    assert len(build_replay_set(pool, novel, 64, 3, rng)) == 64 * 3 + 5


def test_lim_fixed_unlim_redrawn():
    rng = np.random.default_rng(0)
    pool = LabeledSet(rng.normal(size=(60, 2)), np.repeat(np.arange(6), 10), np.arange(60))
    novel = LabeledSet(rng.normal(size=(2, 2)), [0, 1])
    lim = ReplaySampler(pool, novel, 6, 2, "lim", rng)
    draws = [lim.draw().base_indices.tolist() for _ in range(20)]
    assert all(d == draws[0] for d in draws)
    unlim = ReplaySampler(pool, novel, 6, 2, "unlim", rng)
    assert len({tuple(sorted(unlim.draw().base_indices.tolist())) for _ in range(20)}) > 1
    with pytest.raises(ValueError):
        ReplaySampler(pool, novel, 6, 2, "sometimes", rng)


def test_phase3_requires_novel_head(small_setup, rng):
    m = small_setup[2].clone()
    with pytest.raises(PhaseError):
        run_phase3(m, None, PhaseConfig(epochs=1), rng)


def test_phase3_trains_all_heads(parts, rng):
    cfg, base, _, m, support = parts
    run_phase2(m, support, cfg.phase2, rng)
    head = param_hash(m.base_head.params())
    sampler = ReplaySampler(base.local(TRAIN), support, base.n_base, 1, "lim", rng)
    res = run_phase3(m, sampler, cfg.phase3, rng)
    assert param_hash(m.base_head.params()) != head and len(res.replay_history) == cfg.phase3.epochs


def test_phase3_recovers_base_accuracy_in_joint_space():
    res = gfsl_run("default", 20)
    assert res.stage_reports["phase3"].b_over_j > res.stage_reports["phase2"].b_over_j


def test_interleave_schedule(parts, rng):
    cfg, base, _, m, support = parts
    sampler = ReplaySampler(base.local(TRAIN), support, base.n_base, 1, "lim", rng)
    res = run_interleaved(m, support, sampler, 2, 7, cfg.phase2, cfg.phase3, rng)
    # novel 2, replay 1, novel 2, replay 1, novel 1
    assert (res.novel_epochs, res.replay_epochs, len(res.losses)) == (5, 2, 7)
    with pytest.raises(PhaseError):
        run_interleaved(m, support, sampler, 0, 3, cfg.phase2, cfg.phase3, rng)


def test_batch_ratio_composition(parts, rng, monkeypatch):
    cfg, base, _, m, support = parts
    seen = []
    real = phases._joint_step

    def spy(model, x, y, c, lam, r):
        seen.append(np.asarray(y).copy())
        return real(model, x, y, c, lam, r)

    monkeypatch.setattr(phases, "_joint_step", spy)
    base_pool = LabeledSet(base.local(TRAIN).x[:12], base.local(TRAIN).y[:12])
    res = run_batch_ratio(m, support, base_pool, 2, 3, dataclasses.replace(cfg.phase3, epochs=2), rng)
    nb = m.n_base
    assert len(res.losses) == 2 and len(seen) == 2 * 4  # max(ceil(3/2), ceil(12/3)) batches per epoch
    for y in seen:
        assert (y >= nb).sum() == 2 and (y < nb).sum() == 3
    with pytest.raises(PhaseError):
        run_batch_ratio(m, support, base_pool, 0, 1, cfg.phase3, rng)


def test_cycler_visits_everything_each_pass():
    c = phases._Cycler(5, np.random.default_rng(0))
    assert sorted(c.take(5)) == [0, 1, 2, 3, 4] and sorted(c.take(5)) == [0, 1, 2, 3, 4]
