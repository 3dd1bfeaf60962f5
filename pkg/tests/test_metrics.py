import numpy as np
import pytest

from modalcast.errors import ShapeError, UsageError
from modalcast.metrics import (MetricReport, mae, mase, mse, owa,
                               seasonal_naive_forecast, smape)


def brute_force_mse(pred, truth):
    total, n = 0.0, 0
    for p, t in zip(np.ravel(pred), np.ravel(truth)):
        total += (p - t) ** 2
        n += 1
    return total / n


def brute_force_mae(pred, truth):
    total, n = 0.0, 0
    for p, t in zip(np.ravel(pred), np.ravel(truth)):
        total += abs(p - t)
        n += 1
    return total / n


def brute_force_smape(pred, truth):
    total, n = 0.0, 0
    for p, t in zip(np.ravel(pred), np.ravel(truth)):
        n += 1
        if abs(p) + abs(t) == 0:
            continue
        total += abs(p - t) / (abs(p) + abs(t))
    return 200.0 * total / n


def test_zero_cases():
    x = np.arange(5.0) + 1
    assert mse(x, x) == 0.0
    assert mae(x, x) == 0.0
    assert smape(x, x) == 0.0
    assert mase(x[:2], x[:2], np.arange(10.0)) == 0.0


def test_hand_arithmetic():
    assert mse([0.0, 0.0], [1.0, 1.0]) == 1.0
    assert mae([0.0, 0.0], [1.0, 1.0]) == 1.0
    assert smape([1.0], [3.0]) == pytest.approx(100.0)  # 200 * 2 / 4
    assert owa(10.0, 2.0, 20.0, 4.0) == pytest.approx(0.5)


def test_smape_both_zero_guard():
    assert smape([0.0], [0.0]) == 0.0
    assert smape([0.0, 1.0], [0.0, 1.0]) == 0.0


def test_against_brute_force_oracles():
    rng = np.random.default_rng(0)
    for _ in range(25):
        pred = rng.standard_normal(1000)
        truth = rng.standard_normal(1000)
        assert abs(mse(pred, truth) - brute_force_mse(pred, truth)) < 1e-9
        assert abs(mae(pred, truth) - brute_force_mae(pred, truth)) < 1e-9
        assert abs(smape(pred, truth) - brute_force_smape(pred, truth)) < 1e-9


def test_smape_scale_invariance():
    rng = np.random.default_rng(1)
    pred = np.abs(rng.standard_normal(100)) + 0.1
    truth = np.abs(rng.standard_normal(100)) + 0.1
    base = smape(pred, truth)
    for _ in range(20):
        a = float(rng.uniform(0.01, 100.0))
        assert abs(smape(a * pred, a * truth) - base) < 1e-9


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        mse(np.zeros(3), np.zeros(4))


def test_mase_hand_built_six_points():
    insample = np.array([1.0, 3.0, 2.0, 5.0, 4.0, 6.0])
    # season 1 scale: mean(|2|, |1|, |3|, |1|, |2|) = 1.8
    pred = np.array([7.0, 8.0])
    truth = np.array([6.0, 10.0])
    expected = np.mean([1.0, 2.0]) / 1.8
    assert abs(mase(pred, truth, insample, season=1) - expected) < 1e-9


def test_mase_lagged_forecast_on_periodic_series_is_one():
    # Strictly periodic series: forecasting with the lag-m continuation
    # reproduces the in-sample seasonal diffs exactly, forcing MASE = 1.
    pattern = np.array([1.0, 4.0, 2.0, 8.0])
    extended = np.tile(pattern, 8)
    insample, truth = extended[:24], extended[24:32]
    pred = extended[24 - 2:32 - 2]  # lag-2 continuation of the pattern
    assert mase(pred, truth, insample, season=2) == pytest.approx(1.0)


def test_mase_exact_continuation_is_zero():
    pattern = np.array([1.0, 4.0, 2.0, 8.0])
    insample = np.tile(pattern, 6)
    truth = np.tile(pattern, 2)
    pred = seasonal_naive_forecast(insample, len(truth), season=4)
    assert mase(pred, truth, insample, season=2) == pytest.approx(0.0)


def test_mase_flat_series_epsilon_guard():
    with pytest.warns(UserWarning, match="flat"):
        value = mase([1.0], [2.0], np.ones(10))
    assert np.isfinite(value)


def test_mase_requires_long_insample():
    with pytest.raises(UsageError):
        mase([1.0], [1.0], np.ones(3), season=4)


def test_owa_identity_and_linearity():
    assert owa(13.0, 3.0, 13.0, 3.0) == pytest.approx(1.0)
    assert owa(6.5, 1.5, 13.0, 3.0) == pytest.approx(0.5)
    with pytest.raises(UsageError):
        owa(1.0, 1.0, 0.0, 1.0)


def test_seasonal_naive_forecast_tiles_last_cycle():
    insample = np.array([1.0, 2.0, 3.0, 10.0, 20.0, 30.0])
    out = seasonal_naive_forecast(insample, 5, season=3)
    np.testing.assert_array_equal(out, [10.0, 20.0, 30.0, 10.0, 20.0])


def test_metric_report_average_is_mean():
    report = MetricReport()
    report.add(96, {"mse": 1.0, "mae": 2.0}, 10)
    report.add(192, {"mse": 3.0, "mae": 4.0}, 9)
    avg = report.averaged
    assert abs(avg["mse"] - 2.0) < 1e-9 and abs(avg["mae"] - 3.0) < 1e-9
    text = report.to_text()
    assert "horizon=96" in text and "horizon=avg" in text
    csv = report.to_csv()
    assert csv.splitlines()[0] == "metric,horizon,value"
    assert any(line.startswith("mse,avg,") for line in csv.splitlines())
