"""MLP backbone, classifier heads, joint-space logits and checkpoints."""
from __future__ import annotations

import copy
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .numcore import ParamTensor, ShapeError, as_matrix, matmul

HEAD_MODES = ("no_bias", "bias", "cosine")


class DegenerateEmbeddingError(ArithmeticError):
    pass


class MissingNovelHeadError(RuntimeError):
    pass


def _init_weight(rng: np.random.Generator, rows: int, cols: int, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(rows, cols))


@dataclass
class NormLayer:
    """Batch normalisation over features with running statistics.

    When ``frozen`` the layer always normalises with the stored running
    statistics and neither the statistics nor ``gamma``/``beta`` change.
    """

    gamma: ParamTensor
    beta: ParamTensor
    running_mean: np.ndarray
    running_var: np.ndarray
    frozen: bool = False
    stat_momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, dim: int) -> "NormLayer":
        return cls(
            gamma=ParamTensor(np.ones((1, dim)), name="norm.gamma"),
            beta=ParamTensor(np.zeros((1, dim)), name="norm.beta"),
            running_mean=np.zeros((1, dim)),
            running_var=np.ones((1, dim)),
        )

    def freeze(self) -> None:
        self.frozen = True
        self.gamma.trainable = False
        self.beta.trainable = False

    def unfreeze(self) -> None:
        self.frozen = False
        self.gamma.trainable = True
        self.beta.trainable = True

    def forward(self, x: np.ndarray, train: bool) -> tuple[np.ndarray, dict]:
        use_batch = train and not self.frozen
        if use_batch:
            mean = x.mean(axis=0, keepdims=True)
            var = x.var(axis=0, keepdims=True)
            m = self.stat_momentum
            n = x.shape[0]
            unbiased = var * n / (n - 1) if n > 1 else var
            self.running_mean = (1 - m) * self.running_mean + m * mean
            self.running_var = (1 - m) * self.running_var + m * unbiased
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        out = self.gamma.value * xhat + self.beta.value
        return out, {"xhat": xhat, "inv_std": inv_std, "batch": use_batch}

    def backward(self, cache: dict, dout: np.ndarray) -> np.ndarray:
        xhat, inv_std = cache["xhat"], cache["inv_std"]
        if self.gamma.trainable:
            self.gamma.grad += (dout * xhat).sum(axis=0, keepdims=True)
            self.beta.grad += dout.sum(axis=0, keepdims=True)
        dxhat = dout * self.gamma.value
        if not cache["batch"]:
            return dxhat * inv_std
        n = dout.shape[0]
        return (inv_std / n) * (
            n * dxhat - dxhat.sum(axis=0, keepdims=True) - xhat * (dxhat * xhat).sum(axis=0, keepdims=True)
        )


@dataclass
class Backbone:
    """``linear -> norm -> relu -> [dropout] -> linear`` over feature vectors."""

    w1: ParamTensor
    b1: ParamTensor | None
    norm: NormLayer | None
    w2: ParamTensor
    b2: ParamTensor | None
    dropout: float = 0.0

    @classmethod
    def create(
        cls,
        d_in: int,
        d_hidden: int,
        d_emb: int,
        rng: np.random.Generator,
        *,
        use_bias: bool = True,
        use_norm: bool = True,
        dropout: float = 0.0,
    ) -> "Backbone":
        return cls(
            w1=ParamTensor(_init_weight(rng, d_in, d_hidden, d_in), name="backbone.w1"),
            b1=ParamTensor(np.zeros((1, d_hidden)), name="backbone.b1") if use_bias else None,
            norm=NormLayer.create(d_hidden) if use_norm else None,
            w2=ParamTensor(_init_weight(rng, d_hidden, d_emb, d_hidden), name="backbone.w2"),
            b2=ParamTensor(np.zeros((1, d_emb)), name="backbone.b2") if use_bias else None,
            dropout=dropout,
        )

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def d_emb(self) -> int:
        return self.w2.shape[1]

    def params(self) -> list[ParamTensor]:
        out = [self.w1]
        if self.b1 is not None:
            out.append(self.b1)
        if self.norm is not None:
            out += [self.norm.gamma, self.norm.beta]
        out.append(self.w2)
        if self.b2 is not None:
            out.append(self.b2)
        return out

    def forward(self, x: np.ndarray, train: bool = False, rng: np.random.Generator | None = None) -> tuple[np.ndarray, dict]:
        x = as_matrix(x)
        if x.shape[1] != self.d_in:
            raise ShapeError("forward_features", x.shape, self.w1.shape)
        tape: dict = {"x": x}
        h = x @ self.w1.value
        if self.b1 is not None:
            h = h + self.b1.value
        if self.norm is not None:
            h, tape["norm"] = self.norm.forward(h, train)
        tape["pre_act"] = h
        a = np.maximum(h, 0.0)
        if train and self.dropout > 0:
            if rng is None:
                raise ValueError("dropout needs an rng in training mode")
            keep = (rng.random(a.shape) >= self.dropout) / (1.0 - self.dropout)
            a = a * keep
            tape["keep"] = keep
        tape["act"] = a
        emb = a @ self.w2.value
        if self.b2 is not None:
            emb = emb + self.b2.value
        return emb, tape

    def backward(self, tape: dict, d_emb: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients; returns the gradient w.r.t. the input."""
        a = tape["act"]
        if self.w2.trainable:
            self.w2.grad += a.T @ d_emb
        if self.b2 is not None and self.b2.trainable:
            self.b2.grad += d_emb.sum(axis=0, keepdims=True)
        da = d_emb @ self.w2.value.T
        if "keep" in tape:
            da = da * tape["keep"]
        dh = da * (tape["pre_act"] > 0)
        if self.norm is not None:
            dh = self.norm.backward(tape["norm"], dh)
        if self.w1.trainable:
            self.w1.grad += tape["x"].T @ dh
        if self.b1 is not None and self.b1.trainable:
            self.b1.grad += dh.sum(axis=0, keepdims=True)
        return dh @ self.w1.value.T


@dataclass
class ClassifierHead:
    mode: str
    weights: ParamTensor
    bias: ParamTensor | None = None
    temperature: float = 10.0
    # Rows below this index receive no parameter gradient (earlier incremental tasks).
    frozen_rows: int = 0

    def __post_init__(self) -> None:
        if self.mode not in HEAD_MODES:
            raise ValueError(f"unknown head mode {self.mode!r}")
        if self.mode == "bias" and self.bias is None:
            raise ValueError("bias mode needs a bias tensor")
        if self.mode != "bias" and self.bias is not None:
            raise ValueError(f"{self.mode} mode must not carry a bias")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @classmethod
    def create(cls, mode: str, num_classes: int, d_emb: int, rng: np.random.Generator,
               temperature: float = 10.0, prefix: str = "head") -> "ClassifierHead":
        w = ParamTensor(_init_weight(rng, num_classes, d_emb, d_emb), name=f"{prefix}.weights")
        b = ParamTensor(np.zeros((1, num_classes)), name=f"{prefix}.bias") if mode == "bias" else None
        return cls(mode, w, b, temperature)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def trainable(self) -> bool:
        return self.weights.trainable

    def set_trainable(self, flag: bool) -> None:
        for p in self.params():
            p.trainable = flag

    def params(self) -> list[ParamTensor]:
        return [self.weights] if self.bias is None else [self.weights, self.bias]

    def extend(self, n_new: int, rng: np.random.Generator) -> None:
        """Append ``n_new`` freshly initialised class rows."""
        d = self.weights.shape[1]
        new_w = np.vstack([self.weights.value, _init_weight(rng, n_new, d, d)])
        self.weights = ParamTensor(new_w, trainable=self.weights.trainable, name=self.weights.name)
        if self.bias is not None:
            new_b = np.hstack([self.bias.value, np.zeros((1, n_new))])
            self.bias = ParamTensor(new_b, trainable=self.bias.trainable, name=self.bias.name)

    def forward(self, emb: np.ndarray) -> tuple[np.ndarray, dict]:
        emb = as_matrix(emb)
        W = self.weights.value
        if emb.shape[1] != W.shape[1]:
            raise ShapeError("head_logits", emb.shape, W.shape)
        if self.mode != "cosine":
            logits = matmul(emb, W.T)
            if self.bias is not None:
                logits = logits + self.bias.value
            return logits, {"emb": emb}
        e_norm = np.linalg.norm(emb, axis=1, keepdims=True)
        if np.any(e_norm == 0):
            raise DegenerateEmbeddingError("zero-norm embedding has no direction for cosine logits")
        w_norm = np.linalg.norm(W, axis=1, keepdims=True)
        if np.any(w_norm == 0):
            raise DegenerateEmbeddingError("zero-norm class weight in cosine head")
        e_hat = emb / e_norm
        w_hat = W / w_norm
        logits = self.temperature * (e_hat @ w_hat.T)
        return logits, {"e_hat": e_hat, "w_hat": w_hat, "e_norm": e_norm, "w_norm": w_norm}

    def logits(self, emb: np.ndarray) -> np.ndarray:
        return self.forward(emb)[0]

    def backward(self, cache: dict, d_logits: np.ndarray, accumulate: bool = True) -> np.ndarray:
        """Gradient w.r.t. the embedding; parameter grads accumulate when trainable."""
        W = self.weights.value
        accumulate = accumulate and self.weights.trainable
        if self.mode != "cosine":
            if accumulate:
                gw = d_logits.T @ cache["emb"]
                gw[: self.frozen_rows] = 0.0
                self.weights.grad += gw
                if self.bias is not None:
                    gb = d_logits.sum(axis=0, keepdims=True)
                    gb[:, : self.frozen_rows] = 0.0
                    self.bias.grad += gb
            return d_logits @ W
        e_hat, w_hat = cache["e_hat"], cache["w_hat"]
        g = self.temperature * d_logits
        d_ehat = g @ w_hat
        d_emb = (d_ehat - e_hat * (d_ehat * e_hat).sum(axis=1, keepdims=True)) / cache["e_norm"]
        if accumulate:
            d_what = g.T @ e_hat
            gw = (d_what - w_hat * (d_what * w_hat).sum(axis=1, keepdims=True)) / cache["w_norm"]
            gw[: self.frozen_rows] = 0.0
            self.weights.grad += gw
        return d_emb


@dataclass
class ModelState:
    backbone: Backbone
    base_head: ClassifierHead
    novel_head: ClassifierHead | None = None
    snapshot_prev: dict[str, np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, d_in: int, n_base: int, rng: np.random.Generator, *, d_hidden: int = 64, d_emb: int = 64,
               head_mode: str = "no_bias", temperature: float = 10.0, use_norm: bool = True,
               dropout: float = 0.0) -> "ModelState":
        backbone = Backbone.create(d_in, d_hidden, d_emb, rng, use_norm=use_norm, dropout=dropout)
        head = ClassifierHead.create(head_mode, n_base, d_emb, rng, temperature, prefix="base_head")
        return cls(backbone, head)

    @property
    def n_base(self) -> int:
        return self.base_head.num_classes

    @property
    def n_novel(self) -> int:
        return 0 if self.novel_head is None else self.novel_head.num_classes

    def backbone_params(self, weights_only: bool = False) -> list[ParamTensor]:
        ps = self.backbone.params()
        if weights_only:
            ps = [p for p in ps if p.name in ("backbone.w1", "backbone.w2")]
        return ps

    def head_params(self) -> list[ParamTensor]:
        out = list(self.base_head.params())
        if self.novel_head is not None:
            out += self.novel_head.params()
        return out

    def add_novel_classes(self, n_new: int, rng: np.random.Generator) -> None:
        if n_new < 1:
            raise ValueError("need at least one novel class")
        if self.novel_head is None:
            self.novel_head = ClassifierHead.create(self.base_head.mode, n_new, self.backbone.d_emb, rng,
                                                    self.base_head.temperature, prefix="novel_head")
        else:
            self.novel_head.extend(n_new, rng)

    def snapshot(self) -> None:
        self.snapshot_prev = {p.name: p.value.copy() for p in self.backbone.params()}

    def clone(self) -> "ModelState":
        return copy.deepcopy(self)

    def embed(self, x: np.ndarray) -> np.ndarray:
        return self.backbone.forward(x, train=False)[0]

    def joint_logits(self, emb: np.ndarray) -> np.ndarray:
        if self.novel_head is None:
            raise MissingNovelHeadError("joint logits need a novel head (created in phase 2)")
        return np.hstack([self.base_head.logits(emb), self.novel_head.logits(emb)])

    def iter_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        for p in self.backbone.params():
            yield p.name, p.value
        if self.backbone.norm is not None:
            yield "norm.running_mean", self.backbone.norm.running_mean
            yield "norm.running_var", self.backbone.norm.running_var
        for p in self.head_params():
            yield p.name, p.value
        if self.snapshot_prev is not None:
            for k, v in self.snapshot_prev.items():
                yield f"snapshot.{k}", v

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.iter_tensors():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def forward_features(m: ModelState, x: np.ndarray, train: bool = False,
                     rng: np.random.Generator | None = None) -> tuple[np.ndarray, dict]:
    return m.backbone.forward(x, train=train, rng=rng)


def head_logits(h: ClassifierHead, emb: np.ndarray) -> np.ndarray:
    return h.logits(emb)


def joint_logits(m: ModelState, emb: np.ndarray) -> np.ndarray:
    return m.joint_logits(emb)


def snapshot(m: ModelState) -> None:
    m.snapshot()


def param_hash(params: list[ParamTensor] | dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    items = params.items() if isinstance(params, dict) else ((p.name, p.value) for p in params)
    for name, arr in items:
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


# -- checkpoints -----------------------------------------------------------

CKPT_MAGIC = b"LCWF"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(m: ModelState, path: str | Path) -> None:
    """Flat little-endian tensor dump; shape and mode metadata ride along as 1x1 tensors."""
    tensors = list(m.iter_tensors())
    norm = m.backbone.norm
    meta = {
        "meta.head_mode": HEAD_MODES.index(m.base_head.mode),
        "meta.temperature": m.base_head.temperature,
        "meta.norm_frozen": float(norm.frozen) if norm is not None else -1.0,
        "meta.dropout": m.backbone.dropout,
        "meta.novel_frozen_rows": float(m.novel_head.frozen_rows) if m.novel_head is not None else 0.0,
    }
    tensors += [(k, np.array([[float(v)]])) for k, v in meta.items()]
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<II", CKPT_VERSION, len(tensors))
    for name, arr in tensors:
        arr = as_matrix(arr)
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<II", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path: str | Path) -> ModelState:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    t: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + n].decode("utf-8")
        off += n
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        size = rows * cols * 8
        if off + size > len(data):
            raise CheckpointError(f"{path}: truncated tensor {name}")
        t[name] = np.frombuffer(data[off:off + size], dtype="<f8").reshape(rows, cols).astype(np.float64)
        off += size

    mode = HEAD_MODES[int(t["meta.head_mode"][0, 0])]
    temp = float(t["meta.temperature"][0, 0])
    norm_flag = t["meta.norm_frozen"][0, 0]

    def pt(name: str) -> ParamTensor | None:
        return ParamTensor(t[name], name=name) if name in t else None

    norm = None
    if norm_flag >= 0:
        norm = NormLayer(pt("norm.gamma"), pt("norm.beta"), t["norm.running_mean"].copy(),
                         t["norm.running_var"].copy())
        if norm_flag > 0:
            norm.freeze()
    backbone = Backbone(pt("backbone.w1"), pt("backbone.b1"), norm, pt("backbone.w2"), pt("backbone.b2"),
                        dropout=float(t["meta.dropout"][0, 0]))
    base = ClassifierHead(mode, pt("base_head.weights"), pt("base_head.bias"), temp)
    novel = None
    if "novel_head.weights" in t:
        novel = ClassifierHead(mode, pt("novel_head.weights"), pt("novel_head.bias"), temp,
                               frozen_rows=int(t["meta.novel_frozen_rows"][0, 0]))
    snap = {k[len("snapshot."):]: v.copy() for k, v in t.items() if k.startswith("snapshot.")} or None
    return ModelState(backbone, base, novel, snap)
