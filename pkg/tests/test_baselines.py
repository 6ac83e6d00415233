import math

import numpy as np
import pytest

from stmgnn.baselines import evaluate_point_model, historical_value
from stmgnn.data import SynthConfig, synthesize
from stmgnn.metrics import mae


def test_constant_series():
    x = np.full((3, 7, 2), 4.0)
    assert np.array_equal(historical_value(x, 2), np.full((3, 2, 2), 4.0))


def test_last_day_zero():
    x = np.ones((2, 5, 1))
    x[:, -1] = 0
    assert not historical_value(x, 1).any()


def test_shape_and_batch_axes(rng):
    x = rng.poisson(1, (4, 3, 10, 2))
    pred = historical_value(x, 3)
    assert pred.shape == (4, 3, 3, 2)
    assert np.array_equal(pred[..., 1, :], x[..., -1, :])


def test_weekday_mode():
    x = np.arange(14.0)[None, :, None]
    # target day 14 shares a weekday with days 0 and 7
    assert historical_value(x, 1, "weekday")[0, 0, 0] == pytest.approx(3.5)
    short = np.arange(3.0)[None, :, None]
    assert historical_value(short, 1, "weekday")[0, 0, 0] == 2.0
    with pytest.raises(ValueError):
        historical_value(x, 1, "median")


def test_hv_not_better_than_constant_mean_on_iid_data():
    tensor, truth = synthesize(SynthConfig(rows=3, cols=3, days=400), seed=2)
    counts = tensor.counts.astype(float)
    actual = counts[:, 1:]
    hv = counts[:, :-1]
    const = np.broadcast_to(counts.mean(axis=1, keepdims=True), actual.shape)
    assert mae(hv, actual) >= mae(const, actual)


def test_perfect_persistence():
    x = np.full((2, 4, 1), 3.0)
    report = evaluate_point_model(historical_value(x, 1), x[:, -1:])
    assert report.mae == 0.0
    assert report.kl_divergence == 0.0


def test_point_report_has_no_interval_keys(rng):
    report = evaluate_point_model(rng.poisson(1, 50).astype(float), rng.poisson(1, 50))
    assert report.picp is None and report.mpiw is None
    assert "picp" not in report.to_text() and "mpiw" not in report.to_text()


def test_point_kl_matches_brute_force():
    preds = np.array([0.2, 0.6, 1.4, 2.5, 0.0, 0.0])
    actual = np.array([0, 1, 1, 3, 0, 2])
    rounded = [0, 1, 1, 3, 0, 0]
    emp = {y: actual.tolist().count(y) / 6 for y in set(actual.tolist())}
    model = {y: rounded.count(y) / 6 for y in range(4)}
    want = sum(e * math.log(e / max(model[y], 1e-12)) for y, e in emp.items())
    assert evaluate_point_model(preds, actual).kl_divergence == pytest.approx(want, rel=1e-12)
