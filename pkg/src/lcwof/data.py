"""Feature datasets: CSV/binary I/O, splits and the synthetic Gaussian generator."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

TRAIN, TEST = 0, 1
SPLIT_NAMES = {TRAIN: "train", TEST: "test"}
_SPLIT_CODES = {v: k for k, v in SPLIT_NAMES.items()}

BIN_MAGIC = b"LCFD"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureDataset:
    features: np.ndarray
    labels: np.ndarray
    split: np.ndarray

    def __post_init__(self) -> None:
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2:
            raise DatasetError(f"features must be 2-D, got shape {f.shape}")
        lab = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        sp = np.asarray(self.split, dtype=np.uint8).reshape(-1)
        if lab.shape[0] != f.shape[0] or sp.shape[0] != f.shape[0]:
            raise DatasetError("features, labels and split tags disagree in length")
        if not np.all(np.isfinite(f)):
            raise DatasetError("features contain NaN or Inf")
        if np.any(sp > TEST):
            raise DatasetError("unknown split tag")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "split", sp)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @cached_property
    def class_ids(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    @cached_property
    def class_index(self) -> dict[int, np.ndarray]:
        return {c: np.flatnonzero(self.labels == c) for c in self.class_ids}

    def indices(self, cls: int, split: int | None = None) -> np.ndarray:
        idx = self.class_index.get(cls, np.empty(0, dtype=np.int64))
        if split is None:
            return idx
        return idx[self.split[idx] == split]

    def subset(self, idx) -> "FeatureDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureDataset(self.features[idx], self.labels[idx], self.split[idx])

    def select_classes(self, class_ids) -> "FeatureDataset":
        mask = np.isin(self.labels, np.asarray(list(class_ids), dtype=np.int64))
        return self.subset(np.flatnonzero(mask))

    def with_split(self, split: int) -> "FeatureDataset":
        return self.subset(np.flatnonzero(self.split == split))


# -- I/O ---------------------------------------------------------------------

def _validate_labels(labels: np.ndarray) -> None:
    if labels.size == 0:
        raise DatasetError("dataset is empty")
    if labels.min() < 0:
        raise DatasetError("negative label")
    present = np.unique(labels)
    missing = np.setdiff1d(np.arange(present.max() + 1), present)
    if missing.size:
        raise DatasetError(f"label gaps: classes {missing.tolist()} have no samples")


def save_csv(ds: FeatureDataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(ds.dim)] + ["label", "split"])
        for row, lab, sp in zip(ds.features, ds.labels, ds.split):
            w.writerow([repr(float(v)) for v in row] + [int(lab), SPLIT_NAMES[int(sp)]])


def save_binary(ds: FeatureDataset, path: str | Path) -> None:
    n, d = ds.features.shape
    with open(path, "wb") as fh:
        fh.write(BIN_MAGIC + struct.pack("<II", n, d))
        fh.write(np.ascontiguousarray(ds.features, dtype="<f8").tobytes())
        fh.write(ds.labels.astype("<i4").tobytes())
        fh.write(ds.split.astype("u1").tobytes())


def _load_csv(path: Path) -> FeatureDataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if len(header) < 3 or header[-2:] != ["label", "split"]:
            raise DatasetError(f"{path}: header must end with label,split")
        d = len(header) - 2
        if header[:d] != [f"f{i}" for i in range(d)]:
            raise DatasetError(f"{path}: feature columns must be f0..f{d - 1}")
        feats, labs, splits = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + 2:
                raise DatasetError(f"{path}:{lineno}: expected {d + 2} fields, got {len(row)}")
            try:
                feats.append([float(v) for v in row[:d]])
                labs.append(int(row[d]))
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
            if row[d + 1] not in _SPLIT_CODES:
                raise DatasetError(f"{path}:{lineno}: unknown split {row[d + 1]!r}")
            splits.append(_SPLIT_CODES[row[d + 1]])
    labels = np.asarray(labs, dtype=np.int64)
    _validate_labels(labels)
    return FeatureDataset(np.asarray(feats, dtype=np.float64).reshape(-1, d), labels, np.asarray(splits))


def _load_binary(path: Path) -> FeatureDataset:
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != BIN_MAGIC:
        raise DatasetError(f"{path}: malformed header")
    n, d = struct.unpack_from("<II", data, 4)
    expected = 12 + n * d * 8 + n * 4 + n
    if len(data) != expected:
        raise DatasetError(f"{path}: size {len(data)} does not match header (expected {expected})")
    off = 12
    feats = np.frombuffer(data, dtype="<f8", count=n * d, offset=off).reshape(n, d).astype(np.float64)
    off += n * d * 8
    labels = np.frombuffer(data, dtype="<i4", count=n, offset=off).astype(np.int64)
    off += n * 4
    split = np.frombuffer(data, dtype="u1", count=n, offset=off).copy()
    _validate_labels(labels)
    return FeatureDataset(feats, labels, split)


def load_features(path: str | Path, format: str | None = None) -> FeatureDataset:
    """Load a dataset from CSV or the binary layout; ``format`` defaults from the suffix."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    fmt = format or ("csv" if path.suffix.lower() == ".csv" else "binary")
    if fmt == "csv":
        return _load_csv(path)
    if fmt == "binary":
        return _load_binary(path)
    raise DatasetError(f"unknown format {fmt!r}")


# -- synthetic ---------------------------------------------------------------

def generate_synthetic(n_classes: int, d: int, per_class_train: int, per_class_test: int,
                       cluster_spread: float = 0.3, rng: np.random.Generator | int = 0) -> FeatureDataset:
    """Isotropic Gaussian clusters around random unit-norm centres.

    ``cluster_spread`` is the per-coordinate standard deviation of the difference
    between two samples of one class, so each sample has per-coordinate noise
    ``cluster_spread / sqrt(2)``.
    """
    if min(n_classes, d, per_class_train, per_class_test) < 1:
        raise ValueError("all counts must be >= 1")
    if cluster_spread <= 0:
        raise ValueError("cluster_spread must be positive")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    centers = rng.standard_normal((n_classes, d))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    sigma = cluster_spread / np.sqrt(2.0)
    per = per_class_train + per_class_test
    noise = rng.standard_normal((n_classes, per, d)) * sigma
    feats = (centers[:, None, :] + noise).reshape(-1, d)
    labels = np.repeat(np.arange(n_classes), per)
    split = np.tile(np.r_[np.full(per_class_train, TRAIN), np.full(per_class_test, TEST)], n_classes)
    return FeatureDataset(feats, labels, split)


@dataclass(frozen=True)
class SplitConfig:
    base_class_ids: tuple[int, ...]
    novel_pool_ids: tuple[int, ...]
    validation_ids: tuple[int, ...] = ()
    shots: int = 1
    n_way: int = 5

    def __post_init__(self) -> None:
        b, n, v = set(self.base_class_ids), set(self.novel_pool_ids), set(self.validation_ids)
        if b & n or b & v or n & v:
            raise DatasetError("base, validation and novel class ids must be pairwise disjoint")

    @classmethod
    def contiguous(cls, n_base: int, n_val: int, n_novel: int, shots: int = 1, n_way: int = 5) -> "SplitConfig":
        return cls(tuple(range(n_base)), tuple(range(n_base + n_val, n_base + n_val + n_novel)),
                   tuple(range(n_base, n_base + n_val)), shots, n_way)


def split(ds: FeatureDataset, cfg: SplitConfig) -> tuple[FeatureDataset, FeatureDataset | None, FeatureDataset]:
    """Partition into (base, validation, novel_pool); validation is None when no ids are given."""
    known = set(ds.class_ids)
    for name, ids in (("base", cfg.base_class_ids), ("validation", cfg.validation_ids),
                      ("novel", cfg.novel_pool_ids)):
        unknown = set(ids) - known
        if unknown:
            raise DatasetError(f"{name} ids not present in dataset: {sorted(unknown)}")
    base = ds.select_classes(cfg.base_class_ids)
    val = ds.select_classes(cfg.validation_ids) if cfg.validation_ids else None
    novel = ds.select_classes(cfg.novel_pool_ids)
    return base, val, novel
