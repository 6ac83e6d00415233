"""Historical-value (persistence) baseline and point-forecast evaluation."""

from __future__ import annotations

import numpy as np

from .metrics import MetricsReport, discrete_scores, empirical_histogram, kl_from_histograms, mae, round_half_up


def historical_value(window, horizon, mode="last"):
    """Forecast ``horizon`` steps from a ``(..., N, T, C)`` history.

    ``mode="last"`` repeats the last observed day.  ``mode="weekday"``
    averages the window days that fall on the same weekday as each target
    day (falling back to the last day when the window is shorter than a week).
    """
    window = np.asarray(window, float)
    t = window.shape[-2]
    if t < 1:
        raise ValueError("history window is empty")
    if mode == "last":
        last = window[..., -1:, :]
        return np.repeat(last, horizon, axis=-2)
    if mode != "weekday":
        raise ValueError(f"unknown mode {mode!r}")
    steps = []
    for q in range(horizon):
        days = [d for d in range(t) if (t + q - d) % 7 == 0]
        steps.append(window[..., days, :].mean(axis=-2) if days else window[..., -1, :])
    return np.stack(steps, axis=-2)


def evaluate_point_model(predictions, actual, meta=None):
    """MAE, KL, F1 and true-zero rate for point forecasts; no interval scores.

    KL compares the empirical histogram of ``actual`` against the histogram
    of rounded predictions.
    """
    predictions, actual = np.asarray(predictions, float), np.asarray(actual)
    rounded = round_half_up(np.maximum(predictions, 0.0)).astype(np.int64)
    y_max = int(max(actual.max(), rounded.max()))
    kl = kl_from_histograms(empirical_histogram(actual, y_max), empirical_histogram(rounded, y_max))
    tzr, f1 = discrete_scores(predictions, actual)
    return MetricsReport(
        mae=mae(predictions, actual), kl_divergence=kl, f1=f1, true_zero_rate=tzr, meta=dict(meta or {})
    )
