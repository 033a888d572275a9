"""Analytic-versus-finite-difference gradient checks for every loss and layer."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses
from .model import Backbone, ClassifierHead
from .numcore import ParamTensor, finite_diff_grad, max_relative_error

TOLERANCE = 1e-4
STEP = 1e-3
KINK_MARGIN = 0.05


@dataclass
class CheckRow:
    name: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _compare(fn: Callable[[np.ndarray], float], analytic: np.ndarray, at: np.ndarray, h: float) -> float:
    p = ParamTensor(at)
    numeric = finite_diff_grad(lambda q: fn(q.value), p, h)
    return max_relative_error(analytic, numeric)


def _check_softmax_ce(rng, h, corrupt):
    z = rng.normal(size=(6, 3))
    t = rng.integers(0, 3, size=6)
    g = losses.softmax_ce(z, t).grads["logits"]
    return _compare(lambda v: losses.softmax_ce(v, t).value, corrupt(g), z, h)


def _check_base_normalized_ce(rng, h, corrupt):
    zn = rng.normal(size=(5, 3))
    zb = rng.normal(size=(5, 4))
    t = rng.integers(0, 3, size=5)
    out = losses.base_normalized_ce(zn, zb, t)
    e1 = _compare(lambda v: losses.base_normalized_ce(v, zb, t).value, corrupt(out.grads["novel"]), zn, h)
    e2 = _compare(lambda v: losses.base_normalized_ce(zn, v, t).value, out.grads["base"], zb, h)
    return max(e1, e2)


def _check_l2_wc(rng, h, corrupt):
    cur = {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=(1, 4))}
    snap = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in cur.items()}
    out = losses.l2_wc(cur, snap)
    errs = []
    for k in cur:
        fn = lambda v, k=k: losses.l2_wc({**cur, k: v}, snap).value
        g = corrupt(out.grads[k]) if k == "w" else out.grads[k]
        errs.append(_compare(fn, g, cur[k], h))
    return max(errs)


def _check_phase2_loss(rng, h, corrupt):
    zn = rng.normal(size=(4, 2))
    zb = rng.normal(size=(4, 5))
    t = rng.integers(0, 2, size=4)
    p = ParamTensor(rng.normal(size=(3, 3)), name="backbone.w")
    snap = {"backbone.w": p.value + 0.05 * rng.normal(size=(3, 3))}
    lam = 3.0
    out = losses.phase2_loss(zn, zb, t, [p], snap, lam)

    def via_param(v):
        q = ParamTensor(v, name="backbone.w")
        return losses.phase2_loss(zn, zb, t, [q], snap, lam).value

    e1 = _compare(lambda v: losses.phase2_loss(v, zb, t, [p], snap, lam).value, corrupt(out.grads["novel"]), zn, h)
    e2 = _compare(lambda v: losses.phase2_loss(zn, v, t, [p], snap, lam).value, out.grads["base"], zb, h)
    e3 = _compare(via_param, out.grads["backbone.w"], p.value, h)
    return max(e1, e2, e3)


def _check_kd_kl(rng, h, corrupt):
    cur = rng.normal(size=(5, 4))
    old = rng.normal(size=(5, 4))
    g = losses.kd_kl(cur, old, 2.0).grads["logits"]
    return _compare(lambda v: losses.kd_kl(v, old, 2.0).value, corrupt(g), cur, h)


def _check_head(mode):
    def check(rng, h, corrupt):
        head = ClassifierHead.create(mode, 4, 5, rng, temperature=3.0)
        if head.bias is not None:
            head.bias.value[:] = rng.normal(size=head.bias.shape)
        emb = rng.normal(size=(6, 5))
        if mode == "cosine":
            # Cosine logits ignore the scale of both factors; a larger scale keeps the
            # central-difference truncation error far below the tolerance.
            head.weights.value *= 10.0
            emb *= 10.0
        t = rng.integers(0, 4, size=6)

        def loss_at(e):
            return losses.softmax_ce(head.forward(e)[0], t).value

        logits, cache = head.forward(emb)
        for p in head.params():
            p.zero_grad()
        d_emb = head.backward(cache, losses.softmax_ce(logits, t).grads["logits"])
        errs = [_compare(loss_at, corrupt(d_emb), emb, h)]
        for p in head.params():
            numeric = finite_diff_grad(lambda q: loss_at(emb), p, h)
            errs.append(max_relative_error(p.grad, numeric))
        return max(errs)
    return check


def _check_backbone(rng, h, corrupt):
    bb = Backbone.create(4, 6, 3, rng, use_bias=True, use_norm=True)
    # The normalised layer is invariant to the scale of w1 and x, so a larger scale
    # shrinks the higher derivatives that dominate the central-difference error.
    bb.w1.value *= 10.0
    bb.norm.gamma.value[:] = 1.0 + 0.1 * rng.normal(size=bb.norm.gamma.shape)
    bb.norm.beta.value[:] = 0.1 * rng.normal(size=bb.norm.beta.shape)
    w_out = rng.normal(size=(3, 1))
    # Finite differences are meaningless across a ReLU kink, so probe at a point
    # whose normalised pre-activations all sit away from zero.
    for _ in range(10_000):
        x = 10.0 * rng.normal(size=(8, 4))
        if np.abs(bb.forward(x, train=True)[1]["pre_act"]).min() > KINK_MARGIN:
            break
    else:  # pragma: no cover - vanishingly unlikely
        raise RuntimeError("no kink-free probe point found")

    # Training mode uses batch statistics, so the norm backward is exercised in full.
    def loss_at(inp):
        emb, _ = bb.forward(inp, train=True)
        return float(np.sum(emb @ w_out))

    emb, tape = bb.forward(x, train=True)
    d_emb = np.repeat(w_out.T, emb.shape[0], axis=0)
    for p in bb.params():
        p.zero_grad()
    dx = bb.backward(tape, d_emb)
    errs = [_compare(loss_at, corrupt(dx), x, h)]
    for p in bb.params():
        numeric = finite_diff_grad(lambda q: loss_at(x), p, h)
        errs.append(max_relative_error(p.grad, numeric))
    return max(errs)


CHECKS: dict[str, Callable] = {
    "softmax_ce": _check_softmax_ce,
    "base_normalized_ce": _check_base_normalized_ce,
    "l2_wc": _check_l2_wc,
    "phase2_loss": _check_phase2_loss,
    "kd_kl": _check_kd_kl,
    "head_no_bias": _check_head("no_bias"),
    "head_bias": _check_head("bias"),
    "head_cosine": _check_head("cosine"),
    "backbone": _check_backbone,
}


def run_suite(seed: int = 0, h: float = STEP, corrupt: str | None = None) -> list[CheckRow]:
    """One row per checked function. ``corrupt`` names a check whose analytic gradient gets perturbed."""
    if corrupt is not None and corrupt not in CHECKS:
        raise KeyError(f"unknown check {corrupt!r}")
    rows = []
    for i, (name, fn) in enumerate(CHECKS.items()):
        rng = np.random.default_rng(seed + i)
        bump = (lambda g: g + 1e-2 * (np.abs(g) + 1.0)) if name == corrupt else (lambda g: g)
        rows.append(CheckRow(name, fn(rng, h, bump)))
    return rows
