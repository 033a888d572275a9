"""Phase and experiment configuration, INI round-tripping and ablation deltas."""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

REPLAY_MODES = ("lim", "unlim")
LOSSES = ("ce_bn", "ce")
VARIANTS = ("standard", "skip_phase2", "interleave", "batch_ratio")


@dataclass
class PhaseConfig:
    epochs: int = 150
    lr_head: float = 1e-2
    backbone_lr_multiplier: float = 0.1
    lam: float = 500.0
    batch_size: int = 0  # 0 means full batch
    momentum: float = 0.9
    weight_decay: float = 0.0
    clip_value: float = 100.0
    replay_mode: str = "lim"
    base_replay_per_class: int = 0  # 0 means "use K"
    freeze_base_head: bool = True
    freeze_norm: bool = True
    early_stop_metric: str = "none"
    loss: str = "ce_bn"
    kd_weight: float = 0.0
    kd_temperature: float = 2.0
    wc_weights_only: bool = False
    wc_update: str = "implicit"

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_head <= 0:
            raise ValueError("lr_head must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.replay_mode not in REPLAY_MODES:
            raise ValueError(f"replay_mode must be one of {REPLAY_MODES}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.early_stop_metric not in ("none", "hm_on_val"):
            raise ValueError("early_stop_metric must be 'none' or 'hm_on_val'")
        if self.wc_update not in ("implicit", "gradient"):
            raise ValueError("wc_update must be 'implicit' or 'gradient'")


def phase1_defaults() -> PhaseConfig:
    return PhaseConfig(epochs=30, lr_head=0.05, backbone_lr_multiplier=1.0, lam=0.0, batch_size=64,
                       freeze_base_head=False, freeze_norm=False)


def phase2_defaults() -> PhaseConfig:
    # desk-scale calibration: the synthetic MLP needs a larger step than the image backbones
    return PhaseConfig(lr_head=0.1, backbone_lr_multiplier=10.0)


def phase3_defaults() -> PhaseConfig:
    return PhaseConfig(epochs=40, lr_head=1e-2, backbone_lr_multiplier=1.0, lam=500.0, freeze_base_head=False)


@dataclass
class ExperimentConfig:
    # data
    data_path: str = ""
    n_base: int = 20
    n_val: int = 5
    n_pool: int = 10
    dim: int = 32
    per_class_train: int = 50
    per_class_test: int = 15
    cluster_spread: float = 0.3
    data_seed: int = 0
    # model
    d_hidden: int = 64
    d_emb: int = 64
    head_mode: str = "no_bias"
    temperature: float = 10.0
    use_norm: bool = True
    dropout: float = 0.0
    # protocol
    n_way: int = 5
    k_shot: int = 1
    query_per_class: int = 15
    episodes: int = 20
    seed: int = 0
    workers: int = 1
    # pipeline variant
    variant: str = "standard"
    interleave_x: int = 30
    interleave_budget: int = 0  # 0 means phase2.epochs + phase3.epochs
    novel_per_batch: int = 5
    base_per_batch: int = 1
    # ifsl
    ifsl_base: int = 12
    ifsl_tasks: int = 4
    ifsl_way: int = 3
    ifsl_shot: int = 5
    ifsl_phase3_lam: float = -1.0  # negative means "same as phase2.lam"
    ifsl_persist_phase3: bool = False
    # phases
    phase1: PhaseConfig = field(default_factory=phase1_defaults)
    phase2: PhaseConfig = field(default_factory=phase2_defaults)
    phase3: PhaseConfig = field(default_factory=phase3_defaults)

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.head_mode not in ("no_bias", "bias", "cosine"):
            raise ValueError("head_mode must be no_bias, bias or cosine")
        if self.interleave_x < 1:
            raise ValueError("interleave_x must be >= 1")
        if self.novel_per_batch < 1 or self.base_per_batch < 1:
            raise ValueError("batch-ratio counts must be >= 1")

    def replace(self, **kw: Any) -> "ExperimentConfig":
        """Copy with overrides; ``phase2__lam=...`` style keys reach into phases."""
        top = {k: v for k, v in kw.items() if "__" not in k}
        new = dataclasses.replace(self, **top)
        for k, v in kw.items():
            if "__" in k:
                phase, key = k.split("__", 1)
                setattr(new, phase, dataclasses.replace(getattr(new, phase), **{key: v}))
        new.phase1 = dataclasses.replace(new.phase1)
        new.phase2 = dataclasses.replace(new.phase2)
        new.phase3 = dataclasses.replace(new.phase3)
        return new

    @property
    def replay_per_class(self) -> int:
        return self.phase3.base_replay_per_class or self.k_shot

    @property
    def phase1_key(self) -> tuple:
        """Fields that determine the phase-1 model; episodes sharing a key share a checkpoint."""
        return (self.data_path, self.n_base, self.n_val, self.n_pool, self.dim, self.per_class_train,
                self.per_class_test, self.cluster_spread, self.data_seed, self.d_hidden, self.d_emb,
                self.head_mode, self.temperature, self.use_norm, self.dropout, self.seed,
                tuple(dataclasses.astuple(self.phase1)))


# -- ablations ----------------------------------------------------------------

ABLATIONS: dict[str, tuple[str, dict[str, Any]]] = {
    "default": ("full method: CE_BN + L2 weight constraints, then balanced replay", {}),
    "no_ce_bn": ("plain CE over novel classes in phase 2", {"phase2__loss": "ce"}),
    "no_wc": ("no weight constraint in phase 2", {"phase2__lam": 0.0}),
    "neither": ("plain CE and no weight constraint in phase 2", {"phase2__loss": "ce", "phase2__lam": 0.0}),
    "kd": ("KL distillation on base logits replaces the weight constraint",
           {"phase2__lam": 0.0, "phase2__kd_weight": 1.0}),
    "cosine": ("cosine-normalised heads", {"head_mode": "cosine"}),
    "bias": ("linear heads with bias", {"head_mode": "bias"}),
    "skip_phase2": ("phase 1 straight into balanced replay", {"variant": "skip_phase2"}),
    "batch_ratio": ("no phase 2; replay with a fixed novel/base batch ratio", {"variant": "batch_ratio"}),
    "interleave": ("alternate X novel epochs with one replay epoch", {"variant": "interleave"}),
    "lambda_sweep": ("end-of-phase-2 metrics over a grid of weight-constraint strengths", {}),
    "bn_unfrozen": ("normalisation statistics and affine params keep training after phase 1",
                    {"phase2__freeze_norm": False, "phase3__freeze_norm": False}),
}

LAMBDA_GRID = (1e1, 1e2, 5e2, 5e3, 1e4, 5e4, 1e5)


def apply_ablation(cfg: ExperimentConfig, name: str) -> ExperimentConfig:
    if name not in ABLATIONS:
        raise KeyError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    return cfg.replace(**ABLATIONS[name][1])


# -- INI round trip -------------------------------------------------------------

_SECTIONS = {
    "data": ("data_path", "n_base", "n_val", "n_pool", "dim", "per_class_train", "per_class_test",
             "cluster_spread", "data_seed"),
    "model": ("d_hidden", "d_emb", "head_mode", "temperature", "use_norm", "dropout"),
    "protocol": ("n_way", "k_shot", "query_per_class", "episodes", "seed", "workers"),
    "variant": ("variant", "interleave_x", "interleave_budget", "novel_per_batch", "base_per_batch"),
    "ifsl": ("ifsl_base", "ifsl_tasks", "ifsl_way", "ifsl_shot", "ifsl_phase3_lam", "ifsl_persist_phase3"),
}


def _coerce(kind: type | str, raw: str) -> Any:
    kind = kind if isinstance(kind, str) else kind.__name__
    if kind == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_ini(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    for sec, keys in _SECTIONS.items():
        cp[sec] = {k: _fmt(getattr(cfg, k)) for k in keys}
    for ph in ("phase1", "phase2", "phase3"):
        pc = getattr(cfg, ph)
        cp[ph] = {f.name: _fmt(getattr(pc, f.name)) for f in fields(pc)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def from_ini(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(text)
    cfg = base or ExperimentConfig()
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    top: dict[str, Any] = {}
    for sec, keys in _SECTIONS.items():
        if sec not in cp:
            continue
        for k, raw in cp[sec].items():
            if k not in keys:
                raise KeyError(f"unknown key [{sec}] {k}")
            top[k] = _coerce(types[k], raw)
    phases: dict[str, Any] = {}
    ptypes = {f.name: f.type for f in fields(PhaseConfig)}
    for ph in ("phase1", "phase2", "phase3"):
        if ph not in cp:
            continue
        for k, raw in cp[ph].items():
            if k not in ptypes:
                raise KeyError(f"unknown key [{ph}] {k}")
            phases[f"{ph}__{k}"] = _coerce(ptypes[k], raw)
    unknown = set(cp.sections()) - set(_SECTIONS) - {"phase1", "phase2", "phase3"}
    if unknown:
        raise KeyError(f"unknown sections {sorted(unknown)}")
    return cfg.replace(**top, **phases)


def load_config(path: str | Path) -> ExperimentConfig:
    return from_ini(Path(path).read_text())
