"""Dense numeric primitives: matmul, parameter tensors, SGD and a gradient oracle."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, *shapes: tuple[int, ...]) -> None:
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NonFiniteError(ArithmeticError):
    pass


def as_matrix(x) -> np.ndarray:
    """Coerce ``x`` to a 2-D float64 array (a row vector if 1-D)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ShapeError("as_matrix", arr.shape)
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


@dataclass
class ParamTensor:
    """A trainable value with its gradient accumulator and momentum buffer."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]
    momentum_buf: np.ndarray = field(default=None)  # type: ignore[assignment]
    trainable: bool = True
    name: str = ""

    def __post_init__(self) -> None:
        self.value = as_matrix(self.value).copy()
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.momentum_buf is None:
            self.momentum_buf = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape or self.momentum_buf.shape != self.value.shape:
            raise ShapeError("ParamTensor", self.value.shape, self.grad.shape, self.momentum_buf.shape)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def reset_momentum(self) -> None:
        self.momentum_buf.fill(0.0)


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    clip_value: float | None = 100.0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.clip_value is not None and self.clip_value <= 0:
            raise ValueError("clip_value must be positive")

    def scaled(self, factor: float) -> "OptimConfig":
        return OptimConfig(self.learning_rate * factor, self.momentum, self.weight_decay, self.clip_value)


def sgd_step(params: Iterable[ParamTensor], cfg: OptimConfig, anchors: dict[str, np.ndarray] | None = None,
             anchor_strength: float = 0.0) -> None:
    """One SGD-with-momentum update.

    Gradients are clamped elementwise to ``[-clip, clip]`` before weight decay
    and momentum accumulation. Frozen parameters are skipped entirely.

    With ``anchors`` the penalty ``anchor_strength * ||value - anchor||^2`` is
    folded into the momentum step implicitly: its gradient is evaluated at the
    updated value, which keeps the step stable for any strength and leaves the
    stationary point of the penalised objective unchanged.
    """
    lr = cfg.learning_rate
    for p in params:
        if not p.trainable:
            continue
        g = p.grad
        if cfg.clip_value is not None:
            g = np.clip(g, -cfg.clip_value, cfg.clip_value)
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.value
        if anchors is not None and anchor_strength > 0 and p.name in anchors:
            anchor = anchors[p.name]
            c = 2.0 * lr * anchor_strength
            partial = cfg.momentum * p.momentum_buf + g
            new = (p.value - lr * partial + c * anchor) / (1.0 + c)
            p.momentum_buf[...] = partial + 2.0 * anchor_strength * (new - anchor)
            p.value[...] = new
            continue
        p.momentum_buf *= cfg.momentum
        p.momentum_buf += g
        p.value -= lr * p.momentum_buf


def finite_diff_grad(loss_fn: Callable[[ParamTensor], float], p: ParamTensor, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` w.r.t. ``p.value``.

    ``p.value`` is perturbed in place and restored afterwards.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    out = np.zeros_like(p.value)
    flat = p.value.reshape(-1)
    grad_flat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(loss_fn(p))
        flat[i] = orig - h
        f_minus = float(loss_fn(p))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteError(f"non-finite loss while probing element {i} of {p.name or 'param'}")
        grad_flat[i] = (f_plus - f_minus) / (2.0 * h)
    return out


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Elementwise ``|a-b| / max(|a|, |b|, floor)``, maximised."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("max_relative_error", a.shape, b.shape)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
