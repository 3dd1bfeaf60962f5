"""The three-part training loss.

A supervised term on the temporal forecast, a depth-weighted feature
alignment term between the two branches' per-layer features (each side
passed through its own trainable projection), and an output consistency
term between the two branch forecasts. The weighted sum is the training
objective; either auxiliary term can be disabled and then contributes
exactly zero.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .backbone import ForwardTrace
from .errors import UsageError
from .tensor import (Tensor, absolute, detach, div, elementwise_loss, matmul,
                     sub, tmean)

SIM_KINDS = ("L1", "SmoothL1", "MSE", "SMAPE", "MASE")
ELEMENTWISE_KINDS = ("L1", "SmoothL1", "MSE")
SCALE_EPS = 1e-8


@dataclass
class LossWeights:
    gamma: float = 0.8     # per-layer decay; the deepest layer always has weight 1
    lambda1: float = 1.0   # feature term
    lambda2: float = 0.01  # output term

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise UsageError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise UsageError(f"loss weights must be nonnegative, got {self}")


@dataclass
class SimSpec:
    sup_kind: str = "L1"
    feature_kind: str = "L1"
    output_kind: str = "L1"

    def __post_init__(self):
        for kind in (self.sup_kind, self.feature_kind, self.output_kind):
            if kind not in SIM_KINDS:
                raise UsageError(f"unknown similarity kind {kind!r}; expected {SIM_KINDS}")
        if self.feature_kind not in ELEMENTWISE_KINDS:
            raise UsageError(
                f"feature similarity must be elementwise ({ELEMENTWISE_KINDS}), "
                f"got {self.feature_kind!r}")

    @classmethod
    def for_dataset(cls, kind: str, name: str = "") -> "SimSpec":
        """Protocol defaults: ETT -> L1; other long-horizon -> SmoothL1;
        M4 -> SMAPE supervised, MASE consistency, SmoothL1 feature."""
        if kind == "m4":
            return cls("SMAPE", "SmoothL1", "MASE")
        if "ett" in name.lower():
            return cls("L1", "L1", "L1")
        return cls("SmoothL1", "SmoothL1", "SmoothL1")


@dataclass
class ProjectionStack:
    """Per-layer trainable maps into the shared comparison space (2L total)."""
    text: list   # L of (weight M x M, bias M)
    time: list

    def __post_init__(self):
        if len(self.text) != len(self.time):
            raise UsageError(
                f"projection stack is lopsided: {len(self.text)} text vs {len(self.time)} time")

    @property
    def layers(self) -> int:
        return len(self.text)


def make_projection_stack(layers: int, width: int, rng: np.random.Generator,
                          dtype=np.float32, init_std: float = 0.02) -> ProjectionStack:
    def pair():
        w = Tensor((rng.standard_normal((width, width)) * init_std).astype(dtype),
                   requires_grad=True)
        b = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)
        return w, b

    return ProjectionStack(text=[pair() for _ in range(layers)],
                           time=[pair() for _ in range(layers)])


def smape_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Differentiable SMAPE; both-zero positions contribute 0."""
    diff = absolute(sub(pred, target))
    denom = absolute(pred) + absolute(target)
    guard = (denom.data == 0.0).astype(denom.dtype)
    safe = denom + Tensor(guard)  # where |p|+|t| == 0 the numerator is 0 too
    return tmean(div(diff, safe)) * 200.0


def mase_loss(pred: Tensor, target: Tensor, scale) -> Tensor:
    """Mean absolute difference divided by a constant in-sample scale.

    `scale` is one seasonal-naive denominator per batch item (shape
    broadcastable against the prediction's leading axes).
    """
    if scale is None:
        raise UsageError("MASE similarity needs an in-sample scale context")
    scale = np.asarray(scale, dtype=np.float64)
    if (scale < SCALE_EPS).any():
        warnings.warn("MASE scale ~0 for some windows; guarding with epsilon")
        scale = np.maximum(scale, SCALE_EPS)
    lead = scale.reshape(scale.shape + (1,) * (pred.ndim - scale.ndim))
    per = div(absolute(sub(pred, target)), Tensor(lead.astype(pred.dtype)))
    return tmean(per)


def sim_loss(kind: str, a: Tensor, b: Tensor, scale_context=None) -> Tensor:
    if kind in ELEMENTWISE_KINDS:
        return elementwise_loss(kind, a, b)
    if kind == "SMAPE":
        return smape_loss(a, b)
    if kind == "MASE":
        return mase_loss(a, b, scale_context)
    raise UsageError(f"unknown similarity kind {kind!r}")


def detach_trace(trace: ForwardTrace) -> ForwardTrace:
    """Constant copy of a trace: used to stop gradients into one branch."""
    return ForwardTrace(features=[detach(f) for f in trace.features],
                        output=detach(trace.output))


def feature_reg_loss(text_trace: ForwardTrace, time_trace: ForwardTrace,
                     proj: ProjectionStack, weights: LossWeights,
                     kind: str = "L1") -> Tensor:
    """Depth-weighted per-layer similarity of projected branch features.

    Layer l of L carries weight gamma^(L - l); similarities are
    mean-reduced per layer before weighting.
    """
    layers = len(text_trace.features)
    if layers != len(time_trace.features) or layers != proj.layers:
        raise UsageError(
            f"layer counts disagree: text {len(text_trace.features)}, "
            f"time {len(time_trace.features)}, projections {proj.layers}")
    total = None
    for l in range(layers):
        w_text, b_text = proj.text[l]
        w_time, b_time = proj.time[l]
        p_text = matmul(text_trace.features[l], w_text) + b_text
        p_time = matmul(time_trace.features[l], w_time) + b_time
        term = sim_loss(kind, p_text, p_time) * (weights.gamma ** (layers - 1 - l))
        total = term if total is None else total + term
    return total


def output_consistency_loss(y_text: Tensor, y_time: Tensor, kind: str = "L1",
                            scale_context=None) -> Tensor:
    """Similarity between the two branches' forecasts."""
    if y_text.shape != y_time.shape:
        raise UsageError(f"branch outputs differ in shape: {y_text.shape} vs {y_time.shape}")
    return sim_loss(kind, y_text, y_time, scale_context=scale_context)


def total_loss(sup: Tensor, feature: Tensor | None, output: Tensor | None,
               weights: LossWeights) -> Tensor:
    """sup + lambda1 * feature + lambda2 * output; None terms contribute 0."""
    total = sup
    if feature is not None:
        total = total + feature * weights.lambda1
    if output is not None:
        total = total + output * weights.lambda2
    return total
