"""Forecast quality metrics (pure numpy, no autodiff).

MSE/MAE for the long-horizon protocol, SMAPE/MASE/OWA for the
short-horizon one. OWA references are caller-supplied; a built-in
seasonal-naive generator exists but is only an approximation of the
official Naive2 values and is flagged as such.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UsageError

MASE_EPS = 1e-12


def _paired(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"metric shapes differ: pred {pred.shape} vs truth {truth.shape}")
    return pred, truth


def mse(pred, truth) -> float:
    pred, truth = _paired(pred, truth)
    return float(np.mean((pred - truth) ** 2))


def mae(pred, truth) -> float:
    pred, truth = _paired(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def smape(pred, truth) -> float:
    """(200/n) * sum |y - yhat| / (|y| + |yhat|); both-zero terms contribute 0."""
    pred, truth = _paired(pred, truth)
    denom = np.abs(pred) + np.abs(truth)
    denom[denom == 0.0] = 1.0  # numerator is 0 there as well
    return float(200.0 * np.mean(np.abs(pred - truth) / denom))


def mase(pred, truth, insample, season: int = 1) -> float:
    """Mean absolute error scaled by the in-sample seasonal-naive error."""
    pred, truth = _paired(pred, truth)
    insample = np.asarray(insample, dtype=np.float64).reshape(-1)
    if insample.size <= season:
        raise UsageError(
            f"mase needs an in-sample series longer than the season ({season}), "
            f"got {insample.size} points")
    scale = float(np.mean(np.abs(insample[season:] - insample[:-season])))
    if scale < MASE_EPS:
        warnings.warn("mase scale is ~0 (flat in-sample series); guarding with epsilon")
        scale = MASE_EPS
    return float(np.mean(np.abs(pred - truth)) / scale)


def owa(smape_value: float, mase_value: float,
        ref_smape: float, ref_mase: float) -> float:
    """Overall weighted average against a reference method's SMAPE/MASE."""
    if ref_smape <= 0 or ref_mase <= 0:
        raise UsageError(f"owa references must be positive, got ({ref_smape}, {ref_mase})")
    return 0.5 * (smape_value / ref_smape + mase_value / ref_mase)


def seasonal_naive_forecast(insample, horizon: int, season: int = 1) -> np.ndarray:
    """Repeat the last observed seasonal cycle over the horizon.

    Approximate stand-in for the official Naive2 reference (which
    deseasonalizes first); metrics derived from it are marked
    approximate by callers.
    """
    insample = np.asarray(insample, dtype=np.float64).reshape(-1)
    if insample.size < season:
        raise UsageError(f"need at least {season} in-sample points, got {insample.size}")
    tail = insample[-season:]
    reps = int(np.ceil(horizon / season))
    return np.tile(tail, reps)[:horizon]


@dataclass
class MetricReport:
    """Per-horizon metric values plus their horizon average."""
    per_horizon: dict = field(default_factory=dict)  # horizon -> {metric: value}
    counts: dict = field(default_factory=dict)       # horizon -> evaluated windows

    def add(self, horizon: int, values: dict, count: int) -> None:
        self.per_horizon[int(horizon)] = {k: float(v) for k, v in values.items()}
        self.counts[int(horizon)] = int(count)

    @property
    def averaged(self) -> dict:
        if not self.per_horizon:
            return {}
        names = list(next(iter(self.per_horizon.values())))
        return {m: float(np.mean([vals[m] for vals in self.per_horizon.values()]))
                for m in names}

    def to_text(self) -> str:
        lines = []
        for h in sorted(self.per_horizon):
            vals = " ".join(f"{k}={v:.6f}" for k, v in self.per_horizon[h].items())
            lines.append(f"horizon={h} windows={self.counts[h]} {vals}")
        avg = " ".join(f"{k}={v:.6f}" for k, v in self.averaged.items())
        lines.append(f"horizon=avg {avg}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        rows = ["metric,horizon,value"]
        for h in sorted(self.per_horizon):
            for k, v in self.per_horizon[h].items():
                rows.append(f"{k},{h},{v!r}")
        for k, v in self.averaged.items():
            rows.append(f"{k},avg,{v!r}")
        return "\n".join(rows) + "\n"
