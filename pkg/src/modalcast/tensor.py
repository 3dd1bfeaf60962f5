"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap contiguous row-major numpy buffers (float32 by default,
float64 for the verification suite). Differentiable ops record a
backward rule onto the ambient :class:`Tape`; because rules are appended
in execution order, the tape is already topologically sorted and
``backward`` walks it exactly once in reverse.

Outside any tape (or inside ``no_grad``) ops run as plain forward
arithmetic and never attach a tape node.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import NumericError, ShapeError, UsageError

_TAPE_STACK: list = []

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Execution-ordered record of differentiable operations.

    Each entry holds the output tensor, the input tensors, and a rule
    mapping the output gradient to per-input gradients. Inputs always
    precede the operations that consume them.
    """

    def __init__(self):
        self.entries = []  # list of (out, inputs, rule, op_name)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def __len__(self):
        return len(self.entries)

    def first_nonfinite(self):
        """Name and index of the earliest recorded op with a non-finite output."""
        for idx, (out, _, _, name) in enumerate(self.entries):
            if not np.isfinite(out.data).all():
                return name, idx
        return None


class no_grad:
    """Context manager that suppresses tape recording."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


class Tensor:
    """A dense numeric array plus optional gradient and tape node."""

    __slots__ = ("data", "grad", "requires_grad", "node", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr) if arr.ndim > 0 else arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise UsageError(f"item() requires a single-element tensor, got shape {self.shape}")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars and arrays become non-grad constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op_name: str, out_data: np.ndarray, inputs: tuple, rule) -> Tensor:
    """Wrap op output; attach a tape node when recording applies.

    A tensor acquires a node only if a tape is active and at least one
    input requires grad; otherwise the output is a plain constant.
    """
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = len(tape.entries)
        out._tape = tape
        tape.entries.append((out, inputs, rule, op_name))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", out, (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", out, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    ad, bd = a.data, b.data

    def rule(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _record("mul", out, (a, b), rule)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    ad, bd = a.data, b.data

    def rule(g):
        return (_unbroadcast(g / bd, a.shape),
                _unbroadcast(-g * ad / (bd * bd), b.shape))

    return _record("div", out, (a, b), rule)


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    out = ad ** p

    def rule(g):
        return (g * p * ad ** (p - 1.0),)

    return _record("power", out, (a,), rule)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def rule(g):
        return (g * out,)

    return _record("exp", out, (a,), rule)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def rule(g):
        return (g * (1.0 - out * out),)

    return _record("tanh", out, (a,), rule)


def absolute(a: Tensor) -> Tensor:
    ad = a.data

    def rule(g):
        return (g * np.sign(ad),)

    return _record("abs", np.abs(ad), (a,), rule)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation GELU, the published GPT-2 formulation."""
    x = a.data
    u = _GELU_K * (x + _GELU_C * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def rule(g):
        du = _GELU_K * (1.0 + 3.0 * _GELU_C * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _record("gelu", out, (a,), rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports stacked (batched) leading dimensions."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as e:  # mismatched broadcast of leading dims
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}") from e
    ad, bd = a.data, b.data

    def rule(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape)
        return ga, gb

    return _record("matmul", out, (a, b), rule)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)

    def rule(g):
        return (np.transpose(g, inv),)

    return _record("transpose", np.transpose(a.data, axes), (a,), rule)


def swap_last(a: Tensor) -> Tensor:
    """Transpose of the last two axes (matrix transpose for stacks)."""
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape

    def rule(g):
        return (g.reshape(orig),)

    return _record("reshape", a.data.reshape(shape), (a,), rule)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def rule(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % len(shape) for ax in axes)
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape),)

    return _record("sum", out, (a,), rule)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(np.asarray(1.0 / n, dtype=a.dtype)))


def first_rows(a: Tensor, n: int) -> Tensor:
    """The leading n rows of a 2-D tensor (gradient scatters back)."""
    shape = a.shape

    def rule(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:n] = g
        return (full,)

    return _record("first_rows", a.data[:n].copy(), (a,), rule)


def detach(a: Tensor) -> Tensor:
    """A constant copy of `a`: blocks gradient flow."""
    return Tensor(a.data)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along `axis`."""
    x = a.data
    if not np.isfinite(x).all():
        raise NumericError("softmax received non-finite input")
    shifted = x - x.max(axis=axis, keepdims=True)  # invariant shift, treated as constant
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax", out, (a,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization over the last axis, then affine."""
    if x.shape[-1] != gain.shape[-1] or x.shape[-1] != bias.shape[-1]:
        raise ShapeError(
            f"layer_norm: width {x.shape[-1]} vs gain {gain.shape} / bias {bias.shape}")
    mu = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(add(var, Tensor(np.asarray(eps, dtype=x.dtype))), -0.5)
    return add(mul(mul(centered, inv), gain), bias)


# ---------------------------------------------------------------------------
# losses and backward
# ---------------------------------------------------------------------------

LOSS_KINDS = ("L1", "SmoothL1", "MSE")
SMOOTH_L1_BETA = 1.0


def elementwise_loss(kind: str, pred: Tensor, target: Tensor) -> Tensor:
    """Mean-reduced L1 / SmoothL1 / MSE between same-shape tensors."""
    if pred.shape != target.shape:
        raise ShapeError(f"elementwise_loss: pred {pred.shape} vs target {target.shape}")
    d = sub(pred, target)
    if kind == "L1":
        return tmean(absolute(d))
    if kind == "MSE":
        return tmean(mul(d, d))
    if kind == "SmoothL1":
        beta = SMOOTH_L1_BETA
        near = Tensor((np.abs(d.data) < beta).astype(d.dtype))
        quad = mul(mul(d, d), Tensor(np.asarray(0.5 / beta, dtype=d.dtype)))
        lin = sub(absolute(d), Tensor(np.asarray(0.5 * beta, dtype=d.dtype)))
        return tmean(add(mul(near, quad), mul(Tensor(1.0 - near.data), lin)))
    raise UsageError(f"unknown elementwise loss kind {kind!r}; expected one of {LOSS_KINDS}")


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from `loss`.

    Gradients accumulate additively across fan-out. The traversal is a
    single reverse pass over the recording tape.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss.node is None or loss._tape is None:
        raise UsageError("backward: loss is not recorded on a tape")
    tape = loss._tape
    loss.grad = np.ones_like(loss.data)
    for out, inputs, rule, _ in reversed(tape.entries[: loss.node + 1]):
        if out.grad is None:
            continue
        grads = rule(out.grad)
        for inp, g in zip(inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            inp.grad = g if inp.grad is None else inp.grad + g
