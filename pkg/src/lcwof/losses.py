"""Loss functions with analytic gradients.

All classification losses are mean negative log-likelihoods over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import ParamTensor, ShapeError, as_matrix


@dataclass
class LossOutput:
    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)


def _check_targets(targets, n_rows: int, n_classes: int) -> np.ndarray:
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != n_rows:
        raise ShapeError("targets", (n_rows,), t.shape)
    if t.size and (t.min() < 0 or t.max() >= n_classes):
        raise ValueError(f"target out of range [0, {n_classes})")
    return t


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def softmax_ce(novel_logits: np.ndarray, targets) -> LossOutput:
    z = as_matrix(novel_logits)
    t = _check_targets(targets, z.shape[0], z.shape[1])
    n = z.shape[0]
    logp = log_softmax(z)
    value = -logp[np.arange(n), t].mean()
    g = np.exp(logp)
    g[np.arange(n), t] -= 1.0
    return LossOutput(float(value), {"logits": g / n})


def base_normalized_ce(novel_logits: np.ndarray, base_logits: np.ndarray, targets) -> LossOutput:
    """Cross-entropy over novel targets whose softmax denominator also sums the base exponentials.

    Base logits may be ``-inf`` to mask them out.
    """
    zn = as_matrix(novel_logits)
    zb = as_matrix(base_logits)
    if zn.shape[0] != zb.shape[0]:
        raise ShapeError("base_normalized_ce", zn.shape, zb.shape)
    t = _check_targets(targets, zn.shape[0], zn.shape[1])
    out = softmax_ce(np.hstack([zn, zb]), t)
    g = out.grads["logits"]
    k = zn.shape[1]
    return LossOutput(out.value, {"novel": g[:, :k], "base": g[:, k:]})


def l2_wc(current: list[ParamTensor] | dict[str, np.ndarray], snapshot: dict[str, np.ndarray]) -> LossOutput:
    """Sum of squared differences between current backbone tensors and the snapshot."""
    items = current.items() if isinstance(current, dict) else ((p.name, p.value) for p in current)
    value = 0.0
    grads: dict[str, np.ndarray] = {}
    for name, cur in items:
        if name not in snapshot:
            raise KeyError(f"snapshot lacks tensor {name!r}")
        prev = snapshot[name]
        if prev.shape != cur.shape:
            raise ShapeError("l2_wc", cur.shape, prev.shape)
        diff = cur - prev
        value += float((diff * diff).sum())
        grads[name] = 2.0 * diff
    return LossOutput(value, grads)


def phase2_loss(novel_logits: np.ndarray, base_logits: np.ndarray, targets, params: list[ParamTensor],
                snapshot: dict[str, np.ndarray], lam: float) -> LossOutput:
    """``base_normalized_ce + lam * l2_wc``; grads keyed by ``novel``, ``base`` and parameter name."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    ce = base_normalized_ce(novel_logits, base_logits, targets)
    wc = l2_wc(params, snapshot)
    grads = dict(ce.grads)
    for k, g in wc.grads.items():
        grads[k] = lam * g
    return LossOutput(ce.value + lam * wc.value, grads)


def kd_kl(cur_base_logits: np.ndarray, old_base_logits: np.ndarray, temperature: float = 2.0) -> LossOutput:
    """Mean KL(softmax(old/T) || softmax(cur/T)); the old logits act as a fixed teacher."""
    cur = as_matrix(cur_base_logits)
    old = as_matrix(old_base_logits)
    if cur.shape != old.shape:
        raise ShapeError("kd_kl", cur.shape, old.shape)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    n = cur.shape[0]
    log_q = log_softmax(cur / temperature)
    log_p = log_softmax(old / temperature)
    p = np.exp(log_p)
    kl = (p * (log_p - log_q)).sum(axis=1)
    value = max(float(kl.mean()), 0.0)
    g = (np.exp(log_q) - p) / (temperature * n)
    return LossOutput(value, {"logits": g})
