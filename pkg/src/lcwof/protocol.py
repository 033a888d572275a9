"""Episodic GFSL evaluation and sequential IFSL evaluation.

Randomness: every episode owns a seed ``master_seed ^ episode_index``. A
``SeedSequence`` on that seed spawns four Philox (counter-based, 64-bit)
streams, used for sampling, head initialisation, replay draws and training
shuffles respectively, so each concern consumes its own stream.
"""
from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .data import TEST, TRAIN, DatasetError, FeatureDataset, SplitConfig, generate_synthetic, load_features, split
from .metrics import MetricsReport, aggregate_episodes
from .model import ModelState
from .phases import (EvalSet, LabeledSet, PhaseResult, ReplaySampler, combine_replay, draw_base_exemplars, evaluate,
                     run_batch_ratio, run_interleaved, run_phase1, run_phase2, run_phase3)


class ProtocolError(ValueError):
    pass


@dataclass
class Streams:
    sample: np.random.Generator
    init: np.random.Generator
    replay: np.random.Generator
    train: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "Streams":
        children = np.random.SeedSequence(seed & 0xFFFFFFFFFFFFFFFF).spawn(4)
        return cls(*(np.random.Generator(np.random.Philox(c)) for c in children))


def episode_seed(master_seed: int, episode_index: int) -> int:
    return (master_seed ^ episode_index) & 0xFFFFFFFFFFFFFFFF


# -- datasets in local label space ------------------------------------------------

@dataclass
class BaseData:
    """Base classes remapped to ``0..n_base-1`` with their train and test splits."""

    dataset: FeatureDataset
    class_ids: list[int]

    @classmethod
    def from_dataset(cls, ds: FeatureDataset) -> "BaseData":
        return cls(ds, list(ds.class_ids))

    @property
    def n_base(self) -> int:
        return len(self.class_ids)

    def local(self, split: int) -> LabeledSet:
        idx = np.flatnonzero(self.dataset.split == split)
        lut = {c: i for i, c in enumerate(self.class_ids)}
        y = np.array([lut[int(c)] for c in self.dataset.labels[idx]], dtype=np.int64)
        return LabeledSet(self.dataset.features[idx], y, idx)

    def sample_queries(self, per_class: int, rng: np.random.Generator) -> np.ndarray:
        out = []
        for c in self.class_ids:
            pool = self.dataset.indices(c, TEST)
            if pool.size < per_class:
                raise ProtocolError(f"base class {c} has {pool.size} test samples, need {per_class}")
            out.append(rng.choice(pool, size=per_class, replace=False))
        return np.stack(out)


@dataclass
class EpisodeSpec:
    n_way: int
    k_shot: int
    query_per_class: int
    novel_class_ids: list[int]
    support_idx: np.ndarray  # (n_way, k_shot) indices into the pool
    query_idx: np.ndarray  # (n_way, query_per_class)
    base_query_idx: np.ndarray | None = None  # (n_base, query_per_class) into the base dataset

    def support(self, pool: FeatureDataset, offset: int = 0) -> LabeledSet:
        idx = self.support_idx.reshape(-1)
        y = np.repeat(np.arange(self.n_way), self.k_shot) + offset
        return LabeledSet(pool.features[idx], y, idx)

    def query(self, pool: FeatureDataset, offset: int = 0) -> LabeledSet:
        idx = self.query_idx.reshape(-1)
        y = np.repeat(np.arange(self.n_way), self.query_per_class) + offset
        return LabeledSet(pool.features[idx], y, idx)


def sample_episode(pool: FeatureDataset, n_way: int, k_shot: int, query_per_class: int,
                   rng: np.random.Generator, exclude: set[int] | None = None) -> EpisodeSpec:
    """Draw ``n_way`` distinct novel classes, then disjoint support and query samples per class."""
    candidates = [c for c in pool.class_ids if not exclude or c not in exclude]
    if len(candidates) < n_way:
        raise ProtocolError(f"pool has {len(candidates)} classes, episode needs {n_way}")
    need = k_shot + query_per_class
    classes = [int(c) for c in rng.choice(candidates, size=n_way, replace=False)]
    sup, qry = [], []
    for c in classes:
        idx = pool.indices(c)
        if idx.size < need:
            raise ProtocolError(f"class {c} has {idx.size} samples, episode needs {need}")
        perm = rng.permutation(idx)
        sup.append(perm[:k_shot])
        qry.append(perm[k_shot:need])
    return EpisodeSpec(n_way, k_shot, query_per_class, classes, np.stack(sup), np.stack(qry))


# -- data preparation ---------------------------------------------------------------

def _source(cfg: ExperimentConfig, n_classes: int) -> FeatureDataset:
    if cfg.data_path:
        ds = load_features(cfg.data_path)
        if len(ds.class_ids) < n_classes:
            raise DatasetError(f"{cfg.data_path} has {len(ds.class_ids)} classes, the split needs {n_classes}")
        return ds
    return generate_synthetic(n_classes, cfg.dim, cfg.per_class_train, cfg.per_class_test, cfg.cluster_spread,
                              cfg.data_seed)


def gfsl_data(cfg: ExperimentConfig) -> tuple[BaseData, FeatureDataset | None, FeatureDataset]:
    """Base, validation and novel-pool splits: contiguous class ids in that order."""
    sc = SplitConfig.contiguous(cfg.n_base, cfg.n_val, cfg.n_pool, cfg.k_shot, cfg.n_way)
    base, val, pool = split(_source(cfg, cfg.n_base + cfg.n_val + cfg.n_pool), sc)
    return BaseData.from_dataset(base), val, pool


def ifsl_data(cfg: ExperimentConfig) -> tuple[BaseData, FeatureDataset]:
    """Base task and the pool the incremental tasks are drawn from."""
    n_pool = cfg.ifsl_tasks * cfg.ifsl_way
    sc = SplitConfig.contiguous(cfg.ifsl_base, cfg.n_val, n_pool, cfg.ifsl_shot, cfg.ifsl_way)
    base, _, pool = split(_source(cfg, cfg.ifsl_base + cfg.n_val + n_pool), sc)
    return BaseData.from_dataset(base), pool


# -- phase 1 ---------------------------------------------------------------------

def train_phase1(base: BaseData, cfg: ExperimentConfig) -> tuple[ModelState, PhaseResult]:
    streams = Streams.from_seed(cfg.seed)
    model = ModelState.create(base.dataset.dim, base.n_base, streams.init, d_hidden=cfg.d_hidden, d_emb=cfg.d_emb,
                              head_mode=cfg.head_mode, temperature=cfg.temperature, use_norm=cfg.use_norm,
                              dropout=cfg.dropout)
    res = run_phase1(model, base.local(TRAIN), cfg.phase1, streams.train)
    return model, res


# -- GFSL -------------------------------------------------------------------------

STAGES = ("phase1", "phase2", "phase3")


@dataclass
class EpisodeResult:
    index: int
    seed: int
    novel_class_ids: list[int]
    stages: dict[str, MetricsReport]
    curve: list[tuple[str, int, MetricsReport]] = field(default_factory=list)
    displacement: float = math.nan
    phase2_best: MetricsReport | None = None
    phase2_best_epoch: int | None = None

    @property
    def final(self) -> MetricsReport:
        return self.stages["phase3"]


def _curve(tag: str, res: PhaseResult) -> list[tuple[str, int, MetricsReport]]:
    return [(tag, i + 1, r) for i, r in enumerate(res.curve)]


def run_episode(phase1_model: ModelState, base: BaseData, pool: FeatureDataset, cfg: ExperimentConfig,
                index: int, record_curves: bool = True) -> EpisodeResult:
    """One GFSL episode: clone, train phases 2-3 (or a variant), evaluate, discard."""
    seed = episode_seed(cfg.seed, index)
    st = Streams.from_seed(seed)
    spec = sample_episode(pool, cfg.n_way, cfg.k_shot, cfg.query_per_class, st.sample)
    spec.base_query_idx = base.sample_queries(cfg.query_per_class, st.sample)
    return _run_spec(phase1_model, base, pool, spec, cfg, index, seed, st, record_curves)


def _run_spec(phase1_model: ModelState, base: BaseData, pool: FeatureDataset, spec: EpisodeSpec,
              cfg: ExperimentConfig, index: int, seed: int, st: Streams, record_curves: bool) -> EpisodeResult:
    bq = spec.base_query_idx.reshape(-1)
    lut = {c: i for i, c in enumerate(base.class_ids)}
    base_q = LabeledSet(base.dataset.features[bq], [lut[int(c)] for c in base.dataset.labels[bq]], bq)
    ev = EvalSet(base_q, spec.query(pool))
    evaluator = (lambda m: evaluate(m, ev)) if record_curves else None
    support = spec.support(pool)

    model = phase1_model.clone()
    stages = {"phase1": evaluate(model, EvalSet(base_q))}
    sampler = ReplaySampler(base.local(TRAIN), support, base.n_base, cfg.replay_per_class,
                            cfg.phase3.replay_mode, st.replay)
    curve: list = []
    result = EpisodeResult(index, seed, spec.novel_class_ids, stages)

    p2 = cfg.phase2
    if cfg.variant == "standard":
        r2 = run_phase2(model, support, p2, st.train, init_rng=st.init, evaluator=evaluator)
        result.displacement = r2.displacement
        result.phase2_best, result.phase2_best_epoch = r2.best, r2.best_epoch
        stages["phase2"] = evaluate(model, ev)
        r3 = run_phase3(model, sampler, cfg.phase3, st.train, evaluator=evaluator)
        curve = _curve("phase2", r2) + _curve("phase3", r3)
    elif cfg.variant == "skip_phase2":
        model.add_novel_classes(cfg.n_way, st.init)
        model.snapshot()
        stages["phase2"] = evaluate(model, ev)
        result.displacement = 0.0
        r3 = run_phase3(model, sampler, cfg.phase3, st.train, evaluator=evaluator)
        curve = _curve("phase3", r3)
    elif cfg.variant == "interleave":
        budget = cfg.interleave_budget or (p2.epochs + cfg.phase3.epochs)
        r = run_interleaved(model, support, sampler, cfg.interleave_x, budget, p2, cfg.phase3, st.train,
                            init_rng=st.init, evaluator=evaluator)
        stages["phase2"] = evaluate(model, ev)
        curve = _curve("interleave", r)
    elif cfg.variant == "batch_ratio":
        model.add_novel_classes(cfg.n_way, st.init)
        model.snapshot()
        stages["phase2"] = evaluate(model, ev)
        pool_set = sampler.draw().data
        base_pool = LabeledSet(pool_set.x[: base.n_base * cfg.replay_per_class],
                               pool_set.y[: base.n_base * cfg.replay_per_class])
        r = run_batch_ratio(model, support, base_pool, cfg.novel_per_batch, cfg.base_per_batch, cfg.phase3,
                            st.train, evaluator=evaluator)
        curve = _curve("batch_ratio", r)
    else:  # pragma: no cover - guarded by ExperimentConfig
        raise ProtocolError(cfg.variant)
    stages["phase3"] = evaluate(model, ev)
    result.curve = curve
    return result


@dataclass
class GFSLResult:
    report: MetricsReport
    stage_reports: dict[str, MetricsReport]
    episodes: list[EpisodeResult]
    phase1_fingerprint: str

    def mean_curve(self) -> list[tuple[str, int, MetricsReport]]:
        """Per-(phase, epoch) average over episodes of the recorded training curves."""
        if not self.episodes or not self.episodes[0].curve:
            return []
        keys = [(tag, ep) for tag, ep, _ in self.episodes[0].curve]
        out = []
        for j, (tag, ep) in enumerate(keys):
            out.append((tag, ep, aggregate_episodes([e.curve[j][2] for e in self.episodes])))
        return out


def _episode_job(args) -> EpisodeResult:
    phase1_model, base, pool, cfg, index, record = args
    return run_episode(phase1_model, base, pool, cfg, index, record)


def run_gfsl(phase1_model: ModelState, base: BaseData, pool: FeatureDataset, num_episodes: int,
             cfg: ExperimentConfig, record_curves: bool = True, workers: int = 1) -> GFSLResult:
    """Average of independent episodes, each starting from the same phase-1 checkpoint."""
    if num_episodes < 1:
        raise ProtocolError("need at least one episode")
    fp = phase1_model.fingerprint()
    jobs = [(phase1_model, base, pool, cfg, i, record_curves) for i in range(num_episodes)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            episodes = list(ex.map(_episode_job, jobs))
    else:
        episodes = [_episode_job(j) for j in jobs]
    if phase1_model.fingerprint() != fp:
        raise ProtocolError("phase-1 checkpoint was mutated by an episode")
    episodes.sort(key=lambda e: e.index)
    stage_reports = {s: aggregate_episodes([e.stages[s] for e in episodes]) for s in STAGES}
    return GFSLResult(stage_reports["phase3"], stage_reports, episodes, fp)


# -- IFSL -------------------------------------------------------------------------

@dataclass
class TaskSequence:
    base_query_idx: np.ndarray
    tasks: list[EpisodeSpec]

    @property
    def n_way(self) -> int:
        return self.tasks[0].n_way if self.tasks else 0


def joint_dim(n_base: int, n_way: int, task: int) -> int:
    """Classes in the joint space after task ``task`` (task 1 is the base task)."""
    return n_base + (task - 1) * n_way


def build_task_sequence(base: BaseData, pool: FeatureDataset, n_tasks: int, n_way: int, k_shot: int,
                        query_per_class: int, streams: Streams) -> TaskSequence:
    """Incremental tasks over disjoint pool classes, drawn with the episode's sampling stream."""
    used: set[int] = set()
    tasks = []
    for _ in range(n_tasks):
        spec = sample_episode(pool, n_way, k_shot, query_per_class, streams.sample, exclude=used)
        used.update(spec.novel_class_ids)
        tasks.append(spec)
    bq = base.sample_queries(query_per_class, streams.sample)
    for t in tasks:
        t.base_query_idx = bq
    return TaskSequence(bq, tasks)


@dataclass
class TaskReport:
    task: int
    joint_dim: int
    metrics: MetricsReport


def run_ifsl(phase1_model: ModelState, base: BaseData, pool: FeatureDataset, seq: TaskSequence,
             cfg: ExperimentConfig, streams: Streams, skip_phase2: bool = False) -> list[TaskReport]:
    """Sequential phase 2 per task; a phase-3 branch on the exemplar store produces each report.

    The exemplar store keeps ``cfg.replay_per_class`` base samples per class,
    drawn once, plus every few-shot sample seen so far.
    """
    bq = seq.base_query_idx.reshape(-1)
    lut = {c: i for i, c in enumerate(base.class_ids)}
    base_q = LabeledSet(base.dataset.features[bq], [lut[int(c)] for c in base.dataset.labels[bq]], bq)
    model = phase1_model.clone()
    reports = [TaskReport(1, base.n_base, evaluate(model, EvalSet(base_q)))]
    p3 = cfg.phase3
    lam3 = cfg.phase2.lam if cfg.ifsl_phase3_lam < 0 else cfg.ifsl_phase3_lam
    p3 = dataclasses.replace(p3, lam=lam3)
    base_train = base.local(TRAIN)
    supports: list[LabeledSet] = []
    queries: list[LabeledSet] = []
    exemplars: LabeledSet | None = None
    for t, spec in enumerate(seq.tasks, start=2):
        offset = model.n_novel
        supports.append(spec.support(pool, offset))
        queries.append(spec.query(pool, offset))
        if skip_phase2:
            model.add_novel_classes(spec.n_way, streams.init)
            model.snapshot()
        else:
            run_phase2(model, spec.support(pool), cfg.phase2, streams.train, init_rng=streams.init)
        if exemplars is None:
            exemplars = draw_base_exemplars(base_train, base.n_base, cfg.replay_per_class, streams.replay)
        store = combine_replay(exemplars, LabeledSet.concat(*supports), base.n_base)
        branch = model if cfg.ifsl_persist_phase3 else model.clone()
        run_phase3(branch, store, p3, streams.train)
        ev = EvalSet(base_q, LabeledSet.concat(*queries))
        reports.append(TaskReport(t, joint_dim(base.n_base, spec.n_way, t), evaluate(branch, ev)))
        if cfg.ifsl_persist_phase3:
            model.snapshot()
    return reports


def run_ifsl_many(phase1_model: ModelState, base: BaseData, pool: FeatureDataset, cfg: ExperimentConfig,
                  num_sequences: int, skip_phase2: bool = False) -> tuple[list[TaskReport], list[list[TaskReport]]]:
    """Average per-task reports over independently seeded task sequences."""
    runs = []
    for i in range(num_sequences):
        st = Streams.from_seed(episode_seed(cfg.seed, i))
        seq = build_task_sequence(base, pool, cfg.ifsl_tasks, cfg.ifsl_way, cfg.ifsl_shot, cfg.query_per_class, st)
        runs.append(run_ifsl(phase1_model, base, pool, seq, cfg, st, skip_phase2=skip_phase2))
    merged = []
    for j, first in enumerate(runs[0]):
        merged.append(TaskReport(first.task, first.joint_dim, aggregate_episodes([r[j].metrics for r in runs])))
    return merged, runs
