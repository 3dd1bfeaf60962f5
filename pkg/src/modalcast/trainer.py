"""Training loop and evaluation.

Each step runs both branches, assembles the weighted loss, backprops
through the tape, and applies Adam to the trainable parameters only.
Evaluation windows the requested split, forecasts with the temporal
branch alone (the textual branch must not run), de-normalizes, and
hands the pooled arrays to the metric functions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics as metrics_mod
from .data import NORM_EPS, WindowSpec, normalize_batch, window_count, windows
from .errors import NumericError, UsageError
from .losses import (LossWeights, SimSpec, detach_trace, feature_reg_loss,
                     output_consistency_loss, sim_loss, total_loss)
from .model import CrossModalForecaster
from .optim import Adam, zero_fill_missing_grads
from .tensor import Tape, Tensor, backward, no_grad


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    lr: float = 5e-4
    patience: int = 3          # early stop on validation MSE
    enable_feature: bool = True
    enable_output: bool = True
    stop_gradient_textual: bool = False
    mase_season: int = 1
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise UsageError(f"epochs and batch size must be >= 1, got {self}")


@dataclass
class StepReport:
    step: int
    sup: float
    feature: float
    output: float
    total: float
    grad_norm: float

    def line(self) -> str:
        return (f"step={self.step} sup={self.sup:.6f} feature={self.feature:.6f} "
                f"output={self.output:.6f} total={self.total:.6f} "
                f"grad_norm={self.grad_norm:.6f}")


@dataclass
class Batch:
    """Raw and normalized views of a stack of windows."""
    inputs: np.ndarray        # (B, T, C) raw
    targets: np.ndarray       # (B, H, C) raw
    normalized: np.ndarray    # (B, T, C)
    mean: np.ndarray          # (B, C)
    std: np.ndarray           # (B, C)
    mase_scale: np.ndarray    # (B,), raw-scale seasonal-naive denominator

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


def make_batch(pairs, dtype=np.float32, season: int = 1, eps: float = NORM_EPS) -> Batch:
    """Stack (input, target) window pairs and instance-normalize the inputs."""
    inputs = np.stack([p[0] for p in pairs]).astype(dtype)
    targets = np.stack([p[1] for p in pairs]).astype(dtype)
    normalized, mean, std = normalize_batch(inputs, eps=eps)
    season = min(season, inputs.shape[1] - 1)
    diffs = np.abs(inputs[:, season:, :] - inputs[:, :-season, :])
    scale = diffs.mean(axis=(1, 2))
    return Batch(inputs=inputs, targets=targets, normalized=normalized.astype(dtype),
                 mean=mean, std=std, mase_scale=scale)


def _denormalize(output: Tensor, batch: Batch) -> Tensor:
    """Map a (B, C, H) normalized forecast back to the raw scale (in-graph)."""
    std = Tensor(batch.std[:, :, None].astype(output.dtype))
    mean = Tensor(batch.mean[:, :, None].astype(output.dtype))
    return output * std + mean


def model_losses(model: CrossModalForecaster, batch: Batch, sim: SimSpec,
                 weights: LossWeights, cfg: TrainConfig) -> dict:
    """Forward both branches (as enabled) and assemble the loss terms."""
    window = Tensor(batch.normalized.astype(model.dtype))
    targets_cm = Tensor(np.swapaxes(batch.targets, 1, 2).astype(model.dtype))  # (B, C, H)
    need_text = cfg.enable_feature or cfg.enable_output
    if need_text:
        time_trace, text_trace, _ = model.forward_pair(window)
    else:
        time_trace = model.forward_temporal(window)
        text_trace = None
    y_time = _denormalize(time_trace.output, batch)
    sup = sim_loss(sim.sup_kind, y_time, targets_cm, scale_context=batch.mase_scale)
    feature = output = None
    if text_trace is not None and cfg.stop_gradient_textual:
        text_trace = detach_trace(text_trace)
    if cfg.enable_feature:
        feature = feature_reg_loss(text_trace, time_trace, model.proj, weights,
                                   kind=sim.feature_kind)
    if cfg.enable_output:
        y_text = _denormalize(text_trace.output, batch)
        output = output_consistency_loss(y_text, y_time, kind=sim.output_kind,
                                         scale_context=batch.mase_scale)
    total = total_loss(sup, feature, output, weights)
    return {"sup": sup, "feature": feature, "output": output, "total": total}


def _name_nonfinite(tape: Tape) -> str:
    culprit = tape.first_nonfinite()
    return (f"op {culprit[0]!r} (tape index {culprit[1]})" if culprit
            else "not on tape (check inputs)")


def train_step(model: CrossModalForecaster, optimizer: Adam, batch: Batch,
               sim: SimSpec, weights: LossWeights, cfg: TrainConfig,
               step: int = 0) -> StepReport:
    """One forward/backward/update cycle over a batch."""
    with Tape() as tape:
        try:
            losses = model_losses(model, batch, sim, weights, cfg)
        except NumericError as e:
            raise NumericError(
                f"non-finite value at step {step} ({e}); "
                f"first bad tensor: {_name_nonfinite(tape)}") from e
        total = losses["total"]
        if not np.isfinite(total.data).all():
            raise NumericError(f"non-finite loss at step {step}; "
                               f"first bad tensor: {_name_nonfinite(tape)}")
        backward(total)
    params = [t for _, t in model.trainable_parameters()]
    zero_fill_missing_grads(params)
    grad_norm = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params))
    optimizer.step()
    return StepReport(
        step=step,
        sup=losses["sup"].item(),
        feature=losses["feature"].item() if losses["feature"] is not None else 0.0,
        output=losses["output"].item() if losses["output"] is not None else 0.0,
        total=total.item(),
        grad_norm=grad_norm,
    )


@dataclass
class FitResult:
    steps: list = field(default_factory=list)       # StepReport per step
    val_history: list = field(default_factory=list)  # per-epoch validation MSE
    best_val: float = math.inf
    epochs_run: int = 0
    optimizer_steps: int = 0


def fit(model: CrossModalForecaster, train_pairs, val_pairs, cfg: TrainConfig,
        sim: SimSpec, weights: LossWeights, log=None) -> FitResult:
    """Epoch loop with early stopping on validation MSE.

    `train_pairs` / `val_pairs` are lists of (input, target) window
    pairs. The model is left at the best validation snapshot.
    """
    if not train_pairs:
        raise UsageError("fit: empty training window list")
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam([t for _, t in model.trainable_parameters()], lr=cfg.lr)
    result = FitResult()
    best_snapshot = None
    bad_epochs = 0
    step = 0
    for epoch in range(cfg.epochs):
        order = np.arange(len(train_pairs))
        if cfg.shuffle:
            rng.shuffle(order)
        for start in range(0, len(order), cfg.batch_size):
            chosen = [train_pairs[i] for i in order[start:start + cfg.batch_size]]
            batch = make_batch(chosen, dtype=model.dtype, season=cfg.mase_season)
            report = train_step(model, optimizer, batch, sim, weights, cfg, step=step)
            result.steps.append(report)
            if log is not None:
                log(report.line())
            step += 1
        result.epochs_run = epoch + 1
        if val_pairs:
            val_mse = _pairs_mse(model, val_pairs, cfg.batch_size)
            result.val_history.append(val_mse)
            if log is not None:
                log(f"epoch={epoch} val_mse={val_mse:.6f}")
            if val_mse < result.best_val:
                result.best_val = val_mse
                best_snapshot = model.snapshot()
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs > cfg.patience:
                    if log is not None:
                        log(f"early stop after epoch {epoch} "
                            f"(no improvement for {bad_epochs} epochs)")
                    break
    if best_snapshot is not None:
        model.restore(best_snapshot)
    result.optimizer_steps = step
    return result


def _predict_batch(model: CrossModalForecaster, batch: Batch) -> np.ndarray:
    """Temporal-only forecast for a batch, denormalized, as (B, C, H) numpy."""
    with no_grad():
        trace = model.forward_temporal(Tensor(batch.normalized.astype(model.dtype)))
        return _denormalize(trace.output, batch).data


def _pairs_mse(model: CrossModalForecaster, pairs, batch_size: int) -> float:
    preds, truths = _collect_forecasts(model, pairs, batch_size)
    return metrics_mod.mse(preds, truths)


def _collect_forecasts(model: CrossModalForecaster, pairs, batch_size: int):
    preds, truths = [], []
    for start in range(0, len(pairs), batch_size):
        batch = make_batch(pairs[start:start + batch_size], dtype=model.dtype)
        preds.append(_predict_batch(model, batch))
        truths.append(np.swapaxes(batch.targets, 1, 2))
    return np.concatenate(preds), np.concatenate(truths)


def evaluate(model: CrossModalForecaster, view, spec: WindowSpec,
             metric_names=("mse", "mae"), batch_size: int = 64) -> dict:
    """Window a split, forecast, de-normalize, compute pooled metrics.

    Every window is used (no drop-last); forecasts come exclusively from
    the temporal branch, which is enforced with the branch counters.
    """
    if len(view) == 0:
        raise UsageError("evaluate: empty split")
    pairs = list(windows(view, spec))
    if not pairs:
        raise UsageError(f"evaluate: split {view.name!r} yields no windows")
    assert len(pairs) == window_count(len(view), spec)
    textual_before = model.text_branch.forward_count
    preds, truths = _collect_forecasts(model, pairs, batch_size)
    textual_delta = model.text_branch.forward_count - textual_before
    if textual_delta != 0:
        raise UsageError(f"evaluate ran the textual branch {textual_delta} times; "
                         "inference must use the temporal branch only")
    out = {"windows": len(pairs)}
    for name in metric_names:
        fn = getattr(metrics_mod, name)
        out[name] = fn(preds, truths)
    return out


# ---------------------------------------------------------------------------
# M4-style univariate collections
# ---------------------------------------------------------------------------

def m4_train_pairs(collection) -> list:
    """Sliding (2H input, H target) windows over every series' history."""
    pairs = []
    for s in collection.series:
        t, h = s.input_len, s.horizon
        values = s.insample[:, None]  # univariate -> one channel
        for start in range(len(s.insample) - t - h + 1):
            pairs.append((values[start:start + t], values[start + t:start + t + h]))
    return pairs


def m4_evaluate(model: CrossModalForecaster, collection, refs: dict | None = None,
                batch_size: int = 64) -> dict:
    """Forecast each series' held-out tail; pooled SMAPE/MASE/OWA.

    Every series must share the model's forecast horizon (mixed
    collections are evaluated one horizon group at a time). `refs`
    supplies the reference {"smape": ..., "mase": ...} for OWA; when
    absent, a seasonal-naive reference is computed and the result is
    marked approximate.
    """
    usable = [s for s in collection.series if s.outsample is not None
              and len(s.outsample) >= s.horizon]
    if not usable:
        raise UsageError("m4_evaluate: no series with test values")
    horizon = model.options.horizon
    odd = sorted({s.horizon for s in usable if s.horizon != horizon})
    if odd:
        raise UsageError(
            f"m4_evaluate: series horizons {odd} do not match the model horizon "
            f"{horizon}; evaluate one horizon group per model")
    smapes, mases, naive_smapes, naive_mases = [], [], [], []
    for start in range(0, len(usable), batch_size):
        group = usable[start:start + batch_size]
        pairs = [(s.insample[-s.input_len:, None], s.outsample[:s.horizon, None])
                 for s in group]
        batch = make_batch(pairs, dtype=model.dtype)
        preds = _predict_batch(model, batch)  # (B, 1, H)
        for i, s in enumerate(group):
            pred = preds[i, 0]
            truth = s.outsample[:s.horizon]
            smapes.append(metrics_mod.smape(pred, truth))
            mases.append(metrics_mod.mase(pred, truth, s.insample, season=s.season))
            if refs is None:
                naive = metrics_mod.seasonal_naive_forecast(s.insample, s.horizon, s.season)
                naive_smapes.append(metrics_mod.smape(naive, truth))
                naive_mases.append(metrics_mod.mase(naive, truth, s.insample, season=s.season))
    result = {"smape": float(np.mean(smapes)), "mase": float(np.mean(mases)),
              "series": len(usable)}
    if refs is not None:
        result["owa"] = metrics_mod.owa(result["smape"], result["mase"],
                                        refs["smape"], refs["mase"])
    else:
        result["ref_smape"] = float(np.mean(naive_smapes))
        result["ref_mase"] = float(np.mean(naive_mases))
        result["owa"] = metrics_mod.owa(result["smape"], result["mase"],
                                        result["ref_smape"], result["ref_mase"])
        result["owa_reference"] = "seasonal-naive (approximate)"
    return result
