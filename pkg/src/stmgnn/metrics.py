"""Point, interval, distributional and discrete forecast scores.

All functions take flat or arbitrarily shaped arrays and pool over every
cell.  Interval bounds are inclusive, rounding is half-up, and the F1 score
treats "count > 0" as the positive class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distributions import PMF_FLOOR

METRIC_KEYS = ("mae", "kl_divergence", "picp", "mpiw", "f1", "true_zero_rate")
POINT_KEYS = ("mae", "kl_divergence", "f1", "true_zero_rate")


def _pair(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty input")
    return a, b


def mae(pred_mean, actual):
    pred_mean, actual = _pair(pred_mean, actual)
    return float(np.mean(np.abs(pred_mean - actual)))


def interval(head, params, lo=0.10, hi=0.90):
    return head.interval(params, lo, hi)


def picp(lower, upper, actual):
    lower, actual = _pair(lower, actual)
    upper = np.asarray(upper, float)
    return float(np.mean((lower <= actual) & (actual <= upper)))


def mpiw(lower, upper):
    lower, upper = _pair(lower, upper)
    if np.any(upper < lower):
        raise ValueError("upper bound below lower bound")
    return float(np.mean(upper - lower))


def empirical_histogram(actual, y_max):
    actual = np.asarray(actual).astype(np.int64).ravel()
    return np.bincount(actual, minlength=y_max + 1)[: y_max + 1] / actual.size


def kl_from_histograms(empirical, model):
    model = np.maximum(model, PMF_FLOOR)
    mask = empirical > 0
    return float(np.sum(empirical[mask] * np.log(empirical[mask] / model[mask])))


def kl_divergence(actual, head, params, y_max=None):
    """KL(empirical count histogram || cell-averaged predicted pmf) on 0..y_max."""
    actual = np.asarray(actual)
    top = int(actual.max()) if actual.size else 0
    y_max = top if y_max is None else y_max
    if y_max < top:
        raise ValueError("support cap is below the largest observed count")
    table = head.pmf_table(params, y_max)
    model = table.reshape(-1, y_max + 1).mean(axis=0)
    return kl_from_histograms(empirical_histogram(actual, y_max), model)


def round_half_up(x):
    return np.floor(np.asarray(x, float) + 0.5)


def discrete_scores(pred_mean, actual):
    """``(true_zero_rate, f1)`` after rounding the predicted means.

    Negative means (possible under a Gaussian head) are floored at zero first.
    ``true_zero_rate`` is None when ``actual`` has no zeros.
    """
    pred_mean, actual = _pair(pred_mean, actual)
    rounded = round_half_up(np.maximum(pred_mean, 0.0))
    zero = actual == 0
    tzr = float(np.mean(rounded[zero] == 0)) if zero.any() else None
    pred_pos, true_pos = rounded > 0, actual > 0
    tp = np.sum(pred_pos & true_pos)
    fp = np.sum(pred_pos & ~true_pos)
    fn = np.sum(~pred_pos & true_pos)
    denom = 2 * tp + fp + fn
    f1 = float(2 * tp / denom) if denom else 0.0
    return tzr, f1


@dataclass
class MetricsReport:
    mae: float
    kl_divergence: float
    f1: float
    true_zero_rate: float | None
    picp: float | None = None
    mpiw: float | None = None
    meta: dict = field(default_factory=dict)

    def values(self):
        return {k: getattr(self, k) for k in METRIC_KEYS if getattr(self, k) is not None}

    def to_text(self):
        """Fixed-key ``key = value`` lines; metadata goes in ``#`` comments."""
        lines = [f"# {k} = {v}" for k, v in self.meta.items()]
        lines += [f"{k} = {v:.6g}" for k, v in self.values().items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        values = {}
        for line in text.splitlines():
            if line.startswith("#") or not line.strip():
                continue
            key, _, value = line.partition("=")
            values[key.strip()] = float(value)
        unknown = set(values) - set(METRIC_KEYS)
        if unknown:
            raise ValueError(f"unknown report keys {sorted(unknown)}")
        return cls(**{k: values.get(k) for k in METRIC_KEYS})


def evaluate_distribution(head, params, actual, meta=None):
    """All six scores for a distribution head on the same cells."""
    actual = np.asarray(actual)
    mean = head.mean(params)
    lower, upper = head.interval(params)
    tzr, f1 = discrete_scores(mean, actual)
    return MetricsReport(
        mae=mae(mean, actual),
        kl_divergence=kl_divergence(actual, head, params),
        f1=f1,
        true_zero_rate=tzr,
        picp=picp(lower, upper, actual),
        mpiw=mpiw(lower, upper),
        meta=dict(meta or {}),
    )
