"""The three training phases and the scheduling variants used in ablations."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import losses
from .config import PhaseConfig
from .metrics import MetricsReport, accuracy_in_space
from .model import ModelState
from .numcore import OptimConfig, ParamTensor, sgd_step


class PhaseError(RuntimeError):
    pass


@dataclass
class LabeledSet:
    """Features with local (contiguous) labels; ``index`` keeps dataset provenance."""

    x: np.ndarray
    y: np.ndarray
    index: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError("features and labels disagree in length")

    def __len__(self) -> int:
        return self.y.shape[0]

    @classmethod
    def concat(cls, *parts: "LabeledSet") -> "LabeledSet":
        idx = None
        if all(p.index is not None for p in parts):
            idx = np.concatenate([p.index for p in parts])
        return cls(np.vstack([p.x for p in parts]), np.concatenate([p.y for p in parts]), idx)


@dataclass
class EvalSet:
    """Query samples for evaluation; labels local to the base and novel spaces."""

    base: LabeledSet
    novel: LabeledSet | None = None


Evaluator = Callable[[ModelState], MetricsReport]


def evaluate(model: ModelState, ev: EvalSet) -> MetricsReport:
    """All four-space accuracies for the current model. Pure: does not touch the model."""
    emb_b = model.embed(ev.base.x)
    base_b = model.base_head.logits(emb_b)
    b_over_b = accuracy_in_space(base_b, ev.base.y, "base_only")
    if model.novel_head is None or ev.novel is None or len(ev.novel) == 0:
        return MetricsReport(b_over_b, math.nan, b_over_b, math.nan, b_over_b)
    joint_b = np.hstack([base_b, model.novel_head.logits(emb_b)])
    emb_n = model.embed(ev.novel.x)
    base_n = model.base_head.logits(emb_n)
    novel_n = model.novel_head.logits(emb_n)
    joint_n = np.hstack([base_n, novel_n])
    nb = model.n_base
    n_over_n = accuracy_in_space(novel_n, ev.novel.y, "novel_only")
    b_over_j = accuracy_in_space(joint_b, ev.base.y, "joint")
    n_over_j = accuracy_in_space(joint_n, ev.novel.y + nb, "joint")
    j_over_j = accuracy_in_space(np.vstack([joint_b, joint_n]), np.concatenate([ev.base.y, ev.novel.y + nb]), "joint")
    # Joint argmax only adds competitors, so these orderings are exact.
    assert b_over_j <= b_over_b and n_over_j <= n_over_n
    return MetricsReport(b_over_b, n_over_n, b_over_j, n_over_j, j_over_j)


@dataclass
class PhaseResult:
    losses: list[float] = field(default_factory=list)
    curve: list[MetricsReport] = field(default_factory=list)
    best_epoch: int | None = None
    best: MetricsReport | None = None
    displacement: float | None = None
    replay_history: list[np.ndarray] = field(default_factory=list)
    novel_epochs: int = 0
    replay_epochs: int = 0


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    perm = rng.permutation(n)
    bs = n if batch_size <= 0 else batch_size
    for start in range(0, n, bs):
        yield perm[start:start + bs]


def _optim(cfg: PhaseConfig) -> OptimConfig:
    return OptimConfig(cfg.lr_head, cfg.momentum, cfg.weight_decay, cfg.clip_value or None)


def _zero(params: list[ParamTensor]) -> None:
    for p in params:
        p.zero_grad()


def _reset_momentum(model: ModelState) -> None:
    for p in model.backbone_params() + model.head_params():
        p.reset_momentum()


def _set_norm(model: ModelState, frozen: bool) -> None:
    norm = model.backbone.norm
    if norm is None:
        return
    if frozen:
        norm.freeze()
    else:
        norm.unfreeze()


def _wc_params(model: ModelState, cfg: PhaseConfig) -> list[ParamTensor]:
    return [p for p in model.backbone_params(weights_only=cfg.wc_weights_only) if p.trainable]


def _apply_updates(model: ModelState, head_params: list[ParamTensor], cfg: PhaseConfig, lam: float) -> None:
    opt = _optim(cfg)
    bb_opt = opt.scaled(cfg.backbone_lr_multiplier)
    anchors = None
    if lam > 0:
        wc = _wc_params(model, cfg)
        if cfg.wc_update == "gradient":
            for p in wc:
                p.grad += 2.0 * lam * (p.value - model.snapshot_prev[p.name])
        else:
            anchors = {p.name: model.snapshot_prev[p.name] for p in wc}
    sgd_step(head_params, opt)
    sgd_step(model.backbone_params(), bb_opt, anchors, lam)


def backbone_displacement(model: ModelState, reference: dict[str, np.ndarray] | None = None) -> float:
    """Squared L2 distance of the backbone from ``reference`` (default: the stored snapshot)."""
    ref = reference if reference is not None else model.snapshot_prev
    if ref is None:
        raise PhaseError("no snapshot to measure displacement against")
    return losses.l2_wc(model.backbone_params(), ref).value


# -- phase 1 -------------------------------------------------------------------

def run_phase1(model: ModelState, base_train: LabeledSet, cfg: PhaseConfig, rng: np.random.Generator) -> PhaseResult:
    """Supervised training of backbone and base head; ends with a frozen norm and the first snapshot."""
    if len(base_train) == 0:
        raise PhaseError("phase 1 needs a non-empty base training set")
    if base_train.y.max() >= model.n_base:
        raise PhaseError("base labels exceed the base head size")
    res = PhaseResult()
    _reset_momentum(model)
    _set_norm(model, False)
    model.base_head.set_trainable(True)
    params = model.head_params()
    bb = model.backbone_params()
    for _ in range(cfg.epochs):
        total = 0.0
        for idx in _batches(len(base_train), cfg.batch_size, rng):
            _zero(params + bb)
            emb, tape = model.backbone.forward(base_train.x[idx], train=True, rng=rng)
            logits, cache = model.base_head.forward(emb)
            out = losses.softmax_ce(logits, base_train.y[idx])
            d_emb = model.base_head.backward(cache, out.grads["logits"])
            model.backbone.backward(tape, d_emb)
            _apply_updates(model, params, cfg, 0.0)
            total += out.value * len(idx)
        res.losses.append(total / len(base_train))
    _set_norm(model, True)
    model.snapshot()
    return res


# -- phase 2 -------------------------------------------------------------------

def _teacher_logits(teacher: ModelState | None, x: np.ndarray, n_old_novel: int) -> np.ndarray | None:
    if teacher is None:
        return None
    emb = teacher.embed(x)
    out = teacher.base_head.logits(emb)
    if n_old_novel:
        out = np.hstack([out, teacher.novel_head.logits(emb)[:, :n_old_novel]])
    return out


def _novel_step(model: ModelState, x: np.ndarray, y: np.ndarray, cfg: PhaseConfig,
                teacher: ModelState | None, rng: np.random.Generator) -> float:
    """One phase-2 update on novel samples; ``y`` indexes the newest novel block."""
    head = model.novel_head
    n_old = head.frozen_rows
    params = head.params()
    _zero(params + model.backbone_params() + model.base_head.params())
    emb, tape = model.backbone.forward(x, train=True, rng=rng)
    base_logits, base_cache = model.base_head.forward(emb)
    novel_logits, novel_cache = head.forward(emb)
    old_block = np.hstack([base_logits, novel_logits[:, :n_old]])
    new_block = novel_logits[:, n_old:]
    d_old = np.zeros_like(old_block)
    d_new = np.zeros_like(new_block)
    if cfg.loss == "ce_bn":
        out = losses.base_normalized_ce(new_block, old_block, y)
        d_new += out.grads["novel"]
        d_old += out.grads["base"]
    else:
        out = losses.softmax_ce(new_block, y)
        d_new += out.grads["logits"]
    value = out.value
    if cfg.kd_weight > 0:
        kd = losses.kd_kl(old_block, _teacher_logits(teacher, x, n_old), cfg.kd_temperature)
        d_old += cfg.kd_weight * kd.grads["logits"]
        value += cfg.kd_weight * kd.value
    nb = model.n_base
    d_novel = np.hstack([d_old[:, nb:], d_new])
    d_emb = head.backward(novel_cache, d_novel)
    d_emb += model.base_head.backward(base_cache, d_old[:, :nb], accumulate=not cfg.freeze_base_head)
    model.backbone.backward(tape, d_emb)
    head_params = params + ([] if cfg.freeze_base_head else model.base_head.params())
    _apply_updates(model, head_params, cfg, cfg.lam)
    if cfg.lam > 0:
        value += cfg.lam * losses.l2_wc(_wc_params(model, cfg), model.snapshot_prev).value
    return value


def _enter_phase2(model: ModelState, n_new: int, cfg: PhaseConfig, rng: np.random.Generator) -> ModelState | None:
    if model.snapshot_prev is None:
        raise PhaseError("phase 2 needs the snapshot taken at the end of the previous phase")
    if n_new < 1:
        raise PhaseError("phase 2 needs at least one novel class")
    teacher = model.clone() if cfg.kd_weight > 0 else None
    n_old = model.n_novel
    model.add_novel_classes(n_new, rng)
    model.novel_head.frozen_rows = n_old
    model.novel_head.set_trainable(True)
    model.base_head.set_trainable(not cfg.freeze_base_head)
    _set_norm(model, cfg.freeze_norm)
    _reset_momentum(model)
    return teacher


def _track(res: PhaseResult, model: ModelState, evaluator: Evaluator | None, cfg: PhaseConfig,
           epoch: int, best_state: list) -> None:
    if evaluator is None:
        return
    rep = evaluator(model)
    res.curve.append(rep)
    if cfg.early_stop_metric == "hm_on_val" and not math.isnan(rep.hm):
        if res.best is None or rep.hm > res.best.hm:
            res.best, res.best_epoch = rep, epoch
            best_state[:] = [model.clone()]


def run_phase2(model: ModelState, novel_train: LabeledSet, cfg: PhaseConfig, rng: np.random.Generator,
               *, init_rng: np.random.Generator | None = None, evaluator: Evaluator | None = None) -> PhaseResult:
    """Learn a new novel block with CE_BN (or CE) plus the weight constraint.

    The base head (and, incrementally, earlier novel rows) stays fixed. With
    ``early_stop_metric='hm_on_val'`` the evaluator's best-hm epoch is restored.
    """
    n_new = int(novel_train.y.max()) + 1 if len(novel_train) else 0
    teacher = _enter_phase2(model, n_new, cfg, init_rng or rng)
    anchor = model.snapshot_prev
    res = PhaseResult()
    best_state: list[ModelState] = []
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for idx in _batches(len(novel_train), cfg.batch_size, rng):
            total += _novel_step(model, novel_train.x[idx], novel_train.y[idx], cfg, teacher, rng) * len(idx)
        res.losses.append(total / len(novel_train))
        _track(res, model, evaluator, cfg, epoch, best_state)
    if best_state:
        restored = best_state[0]
        model.backbone, model.base_head, model.novel_head = restored.backbone, restored.base_head, restored.novel_head
    res.displacement = losses.l2_wc(model.backbone_params(), anchor).value
    model.snapshot()
    return res


# -- replay --------------------------------------------------------------------

@dataclass
class ReplaySet:
    data: LabeledSet
    provenance: np.ndarray  # 0 = base exemplar, 1 = novel train
    base_indices: np.ndarray

    def __len__(self) -> int:
        return len(self.data)


BASE_EXEMPLAR, NOVEL_TRAIN = 0, 1


def draw_base_exemplars(base_pool: LabeledSet, n_base: int, per_class: int,
                        rng: np.random.Generator) -> LabeledSet:
    """``per_class`` random samples of every base class (with replacement only if a class is short)."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    picks = []
    for c in range(n_base):
        ix = np.flatnonzero(base_pool.y == c)
        if ix.size == 0:
            raise PhaseError(f"base class {c} has no samples")
        picks.append(rng.choice(ix, size=per_class, replace=ix.size < per_class))
    pos = np.concatenate(picks)
    index = base_pool.index[pos] if base_pool.index is not None else pos
    return LabeledSet(base_pool.x[pos], base_pool.y[pos], index)


def combine_replay(base_exemplars: LabeledSet, novel_train: LabeledSet, n_base: int) -> ReplaySet:
    """Join base exemplars with novel samples, shifting novel labels into the joint space."""
    data = LabeledSet(np.vstack([base_exemplars.x, novel_train.x]),
                      np.concatenate([base_exemplars.y, novel_train.y + n_base]))
    prov = np.r_[np.full(len(base_exemplars), BASE_EXEMPLAR), np.full(len(novel_train), NOVEL_TRAIN)]
    return ReplaySet(data, prov, base_exemplars.index)


class ReplaySampler:
    """Balanced replay: ``lim`` draws base exemplars once, ``unlim`` redraws on every call."""

    def __init__(self, base_pool: LabeledSet, novel_train: LabeledSet, n_base: int, per_class: int,
                 mode: str, rng: np.random.Generator) -> None:
        if mode not in ("lim", "unlim"):
            raise ValueError("mode must be lim or unlim")
        self.base_pool = base_pool
        self.novel_train = novel_train
        self.n_base = n_base
        self.per_class = per_class
        self.mode = mode
        self.rng = rng
        self._fixed: ReplaySet | None = None

    def _draw(self) -> ReplaySet:
        ex = draw_base_exemplars(self.base_pool, self.n_base, self.per_class, self.rng)
        return combine_replay(ex, self.novel_train, self.n_base)

    def draw(self) -> ReplaySet:
        if self.mode == "unlim":
            return self._draw()
        if self._fixed is None:
            self._fixed = self._draw()
        return self._fixed


def build_replay_set(base_pool: LabeledSet, novel_train: LabeledSet, n_base: int, per_class: int,
                     rng: np.random.Generator, mode: str = "lim") -> ReplaySet:
    return ReplaySampler(base_pool, novel_train, n_base, per_class, mode, rng).draw()


# -- phase 3 -------------------------------------------------------------------

def _joint_step(model: ModelState, x: np.ndarray, y: np.ndarray, cfg: PhaseConfig, lam: float,
                rng: np.random.Generator) -> float:
    params = model.head_params()
    _zero(params + model.backbone_params())
    emb, tape = model.backbone.forward(x, train=True, rng=rng)
    base_logits, base_cache = model.base_head.forward(emb)
    novel_logits, novel_cache = model.novel_head.forward(emb)
    out = losses.softmax_ce(np.hstack([base_logits, novel_logits]), y)
    g = out.grads["logits"]
    nb = model.n_base
    d_emb = model.base_head.backward(base_cache, g[:, :nb]) + model.novel_head.backward(novel_cache, g[:, nb:])
    model.backbone.backward(tape, d_emb)
    _apply_updates(model, params, cfg, lam)
    value = out.value
    if lam > 0:
        value += lam * losses.l2_wc(_wc_params(model, cfg), model.snapshot_prev).value
    return value


def _enter_phase3(model: ModelState, cfg: PhaseConfig) -> None:
    if model.novel_head is None:
        raise PhaseError("phase 3 needs a novel head")
    if model.snapshot_prev is None:
        model.snapshot()
    model.base_head.set_trainable(True)
    model.novel_head.set_trainable(True)
    model.novel_head.frozen_rows = 0
    _set_norm(model, cfg.freeze_norm)
    _reset_momentum(model)


def _replay_epoch(model: ModelState, rs: ReplaySet, cfg: PhaseConfig, lam: float, rng: np.random.Generator) -> float:
    total = 0.0
    for idx in _batches(len(rs), cfg.batch_size, rng):
        total += _joint_step(model, rs.data.x[idx], rs.data.y[idx], cfg, lam, rng) * len(idx)
    return total / len(rs)


def run_phase3(model: ModelState, replay: ReplaySampler | ReplaySet, cfg: PhaseConfig, rng: np.random.Generator,
               *, evaluator: Evaluator | None = None) -> PhaseResult:
    """Joint-space softmax CE on balanced replay, optionally anchored to the phase-2 snapshot.

    A plain ``ReplaySet`` is reused for every epoch.
    """
    _enter_phase3(model, cfg)
    res = PhaseResult()
    best_state: list[ModelState] = []
    for epoch in range(1, cfg.epochs + 1):
        rs = replay if isinstance(replay, ReplaySet) else replay.draw()
        res.replay_history.append(rs.base_indices.copy())
        res.losses.append(_replay_epoch(model, rs, cfg, cfg.lam, rng))
        _track(res, model, evaluator, cfg, epoch, best_state)
    if best_state:
        restored = best_state[0]
        model.backbone, model.base_head, model.novel_head = restored.backbone, restored.base_head, restored.novel_head
    return res


# -- variants ------------------------------------------------------------------

def run_interleaved(model: ModelState, novel_train: LabeledSet, replay: ReplaySampler, x_epochs: int,
                    budget: int, cfg2: PhaseConfig, cfg3: PhaseConfig, rng: np.random.Generator, *,
                    init_rng: np.random.Generator | None = None, evaluator: Evaluator | None = None) -> PhaseResult:
    """Alternate ``x_epochs`` novel-only epochs with one replay epoch until ``budget`` epochs are spent."""
    if x_epochs < 1:
        raise PhaseError("x_epochs must be >= 1")
    n_new = int(novel_train.y.max()) + 1
    teacher = _enter_phase2(model, n_new, cfg2, init_rng or rng)
    res = PhaseResult()
    used = 0
    in_novel = True
    while used < budget:
        if not in_novel:
            _enter_phase3(model, cfg3)
        elif used:
            model.base_head.set_trainable(not cfg2.freeze_base_head)
            _set_norm(model, cfg2.freeze_norm)
            _reset_momentum(model)
        if in_novel:
            for _ in range(min(x_epochs, budget - used)):
                total = 0.0
                for idx in _batches(len(novel_train), cfg2.batch_size, rng):
                    total += _novel_step(model, novel_train.x[idx], novel_train.y[idx], cfg2, teacher, rng) * len(idx)
                res.losses.append(total / len(novel_train))
                res.novel_epochs += 1
                used += 1
                if evaluator is not None:
                    res.curve.append(evaluator(model))
        else:
            rs = replay.draw()
            res.replay_history.append(rs.base_indices.copy())
            res.losses.append(_replay_epoch(model, rs, cfg3, cfg3.lam, rng))
            res.replay_epochs += 1
            used += 1
            if evaluator is not None:
                res.curve.append(evaluator(model))
        in_novel = not in_novel
    return res


class _Cycler:
    """Endless reshuffled pass over ``n`` indices."""

    def __init__(self, n: int, rng: np.random.Generator) -> None:
        self.n, self.rng = n, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        for _ in range(k):
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            out.append(self.order[self.pos])
            self.pos += 1
        return np.asarray(out, dtype=np.int64)


def run_batch_ratio(model: ModelState, novel_train: LabeledSet, base_pool: LabeledSet, novel_per_batch: int,
                    base_per_batch: int, cfg: PhaseConfig, rng: np.random.Generator, *,
                    init_rng: np.random.Generator | None = None, evaluator: Evaluator | None = None) -> PhaseResult:
    """Skip phase 2; every joint batch holds exactly ``novel_per_batch`` novel and ``base_per_batch`` base samples.

    An epoch lasts until the larger of the two pools has been passed over once;
    the smaller one is re-cycled.
    """
    if novel_per_batch < 1 or base_per_batch < 1:
        raise PhaseError("novel_per_batch and base_per_batch must both be >= 1")
    if len(base_pool) == 0 or len(novel_train) == 0:
        raise PhaseError("empty pool")
    if model.novel_head is None:
        model.add_novel_classes(int(novel_train.y.max()) + 1, init_rng or rng)
    if model.snapshot_prev is None:
        model.snapshot()
    _enter_phase3(model, cfg)
    nb = model.n_base
    novel = _Cycler(len(novel_train), rng)
    base = _Cycler(len(base_pool), rng)
    n_batches = max(math.ceil(len(novel_train) / novel_per_batch), math.ceil(len(base_pool) / base_per_batch))
    res = PhaseResult()
    for _ in range(cfg.epochs):
        total = 0.0
        for _ in range(n_batches):
            ni = novel.take(novel_per_batch)
            bi = base.take(base_per_batch)
            x = np.vstack([novel_train.x[ni], base_pool.x[bi]])
            y = np.concatenate([novel_train.y[ni] + nb, base_pool.y[bi]])
            total += _joint_step(model, x, y, cfg, cfg.lam, rng)
        res.losses.append(total / n_batches)
        if evaluator is not None:
            res.curve.append(evaluator(model))
    return res
