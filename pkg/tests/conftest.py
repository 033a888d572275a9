"""Shared fixtures: one phase-1 checkpoint per configuration, reused across tests."""
from __future__ import annotations

import functools

import numpy as np
import pytest

from lcwof.config import ExperimentConfig, apply_ablation
from lcwof.protocol import gfsl_data, run_gfsl, train_phase1


_PHASE1: dict[tuple, tuple] = {}


def phase1_for(cfg: ExperimentConfig):
    """(base, pool, model, phase1 result); the model must be cloned before mutation."""
    key = (cfg.phase1_key, cfg.n_way, cfg.k_shot)
    if key not in _PHASE1:
        base, _, pool = gfsl_data(cfg)
        model, res = train_phase1(base, cfg)
        _PHASE1[key] = (base, pool, model, res)
    return _PHASE1[key]


@functools.lru_cache(maxsize=None)
def gfsl_run(ablation: str = "default", episodes: int = 20, **overrides):
    """Paired-seed GFSL run of an ablation at defaults; cached for the session."""
    cfg = apply_ablation(ExperimentConfig(), ablation).replace(episodes=episodes, **overrides)
    base, pool, model, _ = phase1_for(cfg)
    return run_gfsl(model, base, pool, episodes, cfg, record_curves=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cfg():
    """A fast configuration for structural tests."""
    return ExperimentConfig(n_base=6, n_val=2, n_pool=6, dim=8, per_class_train=12, per_class_test=6,
                            d_hidden=16, d_emb=16, n_way=3, query_per_class=4, episodes=2).replace(
        phase1__epochs=5, phase2__epochs=4, phase3__epochs=3)


@pytest.fixture(scope="session")
def small_setup(small_cfg):
    return phase1_for(small_cfg)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance PASS/FAIL lines after the run, where capture cannot hide them."""
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        ok, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
