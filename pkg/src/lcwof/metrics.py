"""Four-space accuracy decomposition and episode aggregation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

SPACES = ("base_only", "novel_only", "joint")
METRIC_KEYS = ("b_over_b", "n_over_n", "b_over_j", "n_over_j", "j_over_j", "hm", "am")


def accuracy_in_space(logits: np.ndarray, labels, space: str = "joint") -> float:
    """Fraction of rows whose argmax equals the label.

    Ties resolve to the lowest class index. ``space`` only labels the error
    message; the logits must already be restricted to that space.
    """
    if space not in SPACES:
        raise ValueError(f"unknown space {space!r}")
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"logits {logits.shape} do not match {labels.shape[0]} labels")
    if labels.size == 0:
        return float("nan")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError(f"label outside the {space} space of {logits.shape[1]} classes")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def harmonic_mean(b: float, n: float) -> float:
    if b < 0 or n < 0:
        raise ValueError("accuracies must be non-negative")
    s = b + n
    return 0.0 if s == 0 else 2.0 * b * n / s


def arithmetic_mean(b: float, n: float) -> float:
    if b < 0 or n < 0:
        raise ValueError("accuracies must be non-negative")
    return (b + n) / 2.0


@dataclass
class MetricsReport:
    b_over_b: float
    n_over_n: float
    b_over_j: float
    n_over_j: float
    j_over_j: float
    hm: float = field(default=float("nan"))
    am: float = field(default=float("nan"))
    episode_count: int = 1
    ci95: dict[str, float] = field(default_factory=dict)
    hm_of_means: float = field(default=float("nan"))
    am_of_means: float = field(default=float("nan"))

    def __post_init__(self) -> None:
        if math.isnan(self.hm) and not math.isnan(self.n_over_j):
            self.hm = harmonic_mean(self.b_over_j, self.n_over_j)
            self.am = arithmetic_mean(self.b_over_j, self.n_over_j)
        if math.isnan(self.hm_of_means):
            self.hm_of_means = self.hm
            self.am_of_means = self.am
        if not self.ci95:
            self.ci95 = {k: 0.0 for k in METRIC_KEYS}

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_KEYS}

    def to_text(self) -> str:
        """Fixed-key ``key = value`` rendering in percent with two decimals."""
        lines = []
        for k in METRIC_KEYS:
            lines.append(f"{k} = {_pct(getattr(self, k))}")
        for k in ("hm_of_means", "am_of_means"):
            lines.append(f"{k} = {_pct(getattr(self, k))}")
        for k in METRIC_KEYS:
            lines.append(f"ci95_{k} = {_pct(self.ci95.get(k, 0.0))}")
        lines.append(f"episode_count = {self.episode_count}")
        return "\n".join(lines) + "\n"

    def as_row(self) -> dict[str, float]:
        d = asdict(self)
        d.pop("ci95")
        return d


def _pct(x: float) -> str:
    return "nan" if math.isnan(x) else f"{100.0 * x:.2f}"


def parse_report(text: str) -> dict[str, float]:
    out: dict[str, float] = {}
    for line in text.splitlines():
        if "=" not in line:
            continue
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = float(v)
    return out


def aggregate_episodes(reports: list[MetricsReport]) -> MetricsReport:
    """Per-metric means with 1.96 * standard-error intervals.

    ``hm``/``am`` are per-episode means; the means computed from the averaged
    B/J and N/J are kept alongside as ``hm_of_means``/``am_of_means``.
    """
    if not reports:
        raise ValueError("cannot aggregate an empty list of reports")
    n = len(reports)
    table = {k: np.array([getattr(r, k) for r in reports], dtype=np.float64) for k in METRIC_KEYS}
    means = {k: float(np.mean(v)) for k, v in table.items()}
    ci = {}
    for k, v in table.items():
        ci[k] = 0.0 if n < 2 else float(1.96 * np.std(v, ddof=1) / np.sqrt(n))
    if math.isnan(means["n_over_j"]):
        hm_m = am_m = float("nan")
    else:
        hm_m = harmonic_mean(means["b_over_j"], means["n_over_j"])
        am_m = arithmetic_mean(means["b_over_j"], means["n_over_j"])
    return MetricsReport(means["b_over_b"], means["n_over_n"], means["b_over_j"], means["n_over_j"],
                         means["j_over_j"], means["hm"], means["am"], n, ci, hm_m, am_m)


REPORT_FIELDS = [f.name for f in fields(MetricsReport) if f.name != "ci95"]
