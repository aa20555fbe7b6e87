"""Performance and fairness metrics, plus density-curve data for reports."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MetricsError(Exception):
    pass


class LengthMismatch(MetricsError):
    pass


class EmptyInput(MetricsError):
    pass


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape[0] != y.shape[0]:
        raise LengthMismatch(f"lengths differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] == 0:
        raise EmptyInput("metric over zero samples")
    return x, y


def mse(preds, targets) -> float:
    preds, targets = _pair(preds, targets)
    return float(np.mean((preds - targets) ** 2))


def accuracy(preds, targets) -> float:
    """Fraction of samples where (probability >= 0.5) matches the 0/1 target."""
    preds, targets = _pair(preds, targets)
    return float(np.mean((preds >= 0.5).astype(np.float64) == targets))


def total_effect(preds_factual, preds_counterfactual) -> float:
    """Mean absolute change of the prediction under counterfactual substitution."""
    f, c = _pair(preds_factual, preds_counterfactual)
    return float(np.mean(np.abs(f - c)))


def group_total_effect(preds_factual, preds_counterfactual, sensitive) -> dict[int, float]:
    """total_effect restricted to each sensitive level; empty levels omitted."""
    f, c = _pair(preds_factual, preds_counterfactual)
    a = np.asarray(sensitive, dtype=np.int64).ravel()
    if a.shape[0] != f.shape[0]:
        raise LengthMismatch(f"sensitive length {a.shape[0]} vs predictions {f.shape[0]}")
    out = {}
    for lvl in np.unique(a):
        mask = a == lvl
        out[int(lvl)] = float(np.mean(np.abs(f[mask] - c[mask])))
    return out


@dataclass(frozen=True)
class DensityData:
    """Shared-edge histograms of factual vs counterfactual predictions."""

    bin_edges: np.ndarray
    factual_counts: np.ndarray
    counterfactual_counts: np.ndarray


def density_data(preds_factual, preds_counterfactual, bins: int = 40) -> DensityData:
    f, c = _pair(preds_factual, preds_counterfactual)
    if bins < 2:
        raise MetricsError(f"need at least 2 bins, got {bins}")
    lo = float(min(f.min(), c.min()))
    hi = float(max(f.max(), c.max()))
    if lo == hi:  # degenerate constant predictions
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    fc, _ = np.histogram(f, bins=edges)
    cc, _ = np.histogram(c, bins=edges)
    return DensityData(edges, fc, cc)


@dataclass
class MethodMetrics:
    """Per-seed metric samples for one method, aggregated on demand."""

    metric_name: str  # "mse" or "acc"
    metric: list[float] = field(default_factory=list)
    te: list[float] = field(default_factory=list)
    te_group: dict[int, list[float]] = field(default_factory=dict)

    def add(self, metric_value: float, te_value: float, te_by_group: dict[int, float]):
        self.metric.append(metric_value)
        self.te.append(te_value)
        for lvl, v in te_by_group.items():
            self.te_group.setdefault(lvl, []).append(v)


def mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise EmptyInput("aggregating zero values")
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


@dataclass
class MetricsReport:
    """Mean/std over seeds for every method's metric, TE, and per-group TE."""

    methods: dict[str, MethodMetrics]
    seeds: list[int]

    def rows(self) -> list[dict]:
        out = []
        for name, mm in self.methods.items():
            m_mean, m_std = mean_std(mm.metric)
            te_mean, te_std = mean_std(mm.te)
            out.append({"method": name, "metric": mm.metric_name, "group": "",
                        "mean": m_mean, "std": m_std})
            out.append({"method": name, "metric": "te", "group": "",
                        "mean": te_mean, "std": te_std})
            for lvl in sorted(mm.te_group):
                g_mean, g_std = mean_std(mm.te_group[lvl])
                out.append({"method": name, "metric": "te", "group": str(lvl),
                            "mean": g_mean, "std": g_std})
        return out
