"""Reverse-mode automatic differentiation on numpy float32 arrays.

Usage: create leaf tensors (``requires_grad=True`` for trainables), open a
:class:`Tape` as a context manager, compute with the op functions in this
module, then call ``tape.backward(loss)`` on a scalar result. Gradients
accumulate into ``tensor.grad`` for every reachable leaf that requires them;
repeated backward calls keep accumulating until the caller resets ``grad``.

The tape records ops in execution order, so the reverse sweep is a reverse
iteration, no sorting needed. Only ops executed inside an active tape are
recorded; everything else runs as plain numpy. Data is float32 throughout,
with reductions accumulating in float64 before casting back.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as t:
    ...     loss = reduce_sum(scale(x, 3.0))
    >>> t.backward(loss)
    >>> x.grad
    array([3., 3.], dtype=float32)
"""

from __future__ import annotations

import math
import threading

import numpy as np


class AutodiffError(RuntimeError):
    """Base class for engine errors."""


class ShapeMismatch(AutodiffError, ValueError):
    """Operands have incompatible shapes."""


class NotScalar(AutodiffError, ValueError):
    """backward needs a tensor with exactly one element."""


class DisconnectedGraph(AutodiffError):
    """The loss was not produced on the tape being differentiated."""


class NonFiniteInput(AutodiffError, FloatingPointError):
    """A debug-mode finiteness check failed."""


_CHECK_FINITE = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle per-op finiteness checks (off by default; they cost a pass)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _as_f32(value) -> np.ndarray:
    arr = np.asarray(value)
    if arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A float32 array with an optional gradient slot.

    ``requires_grad`` marks trainable leaves. Tensors produced by ops while a
    tape is active carry a reference to that tape so backward can detect
    disconnection.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = _as_f32(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


class _Entry:
    """One recorded op: the output it produced and how to push grads back."""

    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


_ACTIVE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = []
        _ACTIVE.stack = stack
    return stack


def _current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of ops; reverse iteration is the backward sweep."""

    def __init__(self) -> None:
        self.entries: list[_Entry] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise AutodiffError("tape exited out of order")
        stack.pop()

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for tracked leaves."""
        if loss.data.size != 1:
            raise NotScalar(f"loss must be a scalar, got shape {loss.data.shape}")
        if loss._tape is not self:
            raise DisconnectedGraph("loss was not computed on this tape")
        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)
        }
        for entry in reversed(self.entries):
            out_grad = grads.pop(id(entry.output), None)
            if out_grad is None:
                continue
            for tensor, grad in entry.backward_fn(out_grad):
                if grad.dtype != np.float32:
                    grad = grad.astype(np.float32)
                if tensor._tape is self:
                    key = id(tensor)
                    if key in grads:
                        grads[key] += grad
                    else:
                        grads[key] = grad
                elif tensor.requires_grad:
                    if tensor.grad is None:
                        tensor.grad = np.zeros_like(tensor.data)
                    tensor.grad += grad


def _record(output: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    tape = _current_tape()
    if tape is not None and any(t.requires_grad or t._tape is tape for t in inputs):
        output._tape = tape
        tape.entries.append(_Entry(output, inputs, backward_fn))
    return output


def _check_finite(name: str, *arrays: np.ndarray) -> None:
    if _CHECK_FINITE:
        for arr in arrays:
            if not np.all(np.isfinite(arr)):
                raise NonFiniteInput(f"non-finite values entering {name}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports 2D @ 2D, ND @ 2D, and equal-rank stacked ND."""
    _check_finite("matmul", a.data, b.data)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs 2D+ operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        out = Tensor(a.data @ b.data)

        def backward(g: np.ndarray):
            ga = g @ b.data.T
            k, m = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
            return ((a, ga), (b, gb))

        return _record(out, (a, b), backward)
    if a.shape[:-2] == b.shape[:-2]:
        out = Tensor(a.data @ b.data)

        def backward(g: np.ndarray):
            ga = g @ b.data.swapaxes(-1, -2)
            gb = a.data.swapaxes(-1, -2) @ g
            return ((a, ga), (b, gb))

        return _record(out, (a, b), backward)
    raise ShapeMismatch(f"unsupported matmul broadcast: {a.shape} @ {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may broadcast against ``a`` (or vice versa)."""
    _check_finite("add", a.data, b.data)
    try:
        out = Tensor(a.data + b.data)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot add {a.shape} and {b.shape}") from exc

    def backward(g: np.ndarray):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    _check_finite("mul", a.data, b.data)
    try:
        out = Tensor(a.data * b.data)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot multiply {a.shape} and {b.shape}") from exc

    def backward(g: np.ndarray):
        return (
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        )

    return _record(out, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar constant."""
    _check_finite("scale", a.data)
    factor = float(factor)
    out = Tensor(a.data * np.float32(factor))

    def backward(g: np.ndarray):
        return ((a, g * np.float32(factor)),)

    return _record(out, (a,), backward)


def reduce_sum(a: Tensor) -> Tensor:
    """Sum of all elements, accumulated in float64, returned as a scalar."""
    _check_finite("reduce_sum", a.data)
    out = Tensor(np.float32(a.data.sum(dtype=np.float64)))

    def backward(g: np.ndarray):
        return ((a, np.broadcast_to(g, a.shape).copy()),)

    return _record(out, (a,), backward)


def row_lookup(table: Tensor, indices) -> Tensor:
    """Gather rows ``table[indices]``; backward scatter-adds into the table."""
    _check_finite("row_lookup", table.data)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeMismatch(f"indices must be integers, got dtype {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"row index out of range for table with {table.shape[0]} rows"
        )
    out = Tensor(table.data[idx])

    def backward(g: np.ndarray):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return ((table, gt),)

    return _record(out, (table,), backward)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    """Permute axes (reverse them when ``axes`` is None)."""
    out = Tensor(np.transpose(a.data, axes))
    if axes is None:
        inverse = None
    else:
        inverse = tuple(int(i) for i in np.argsort(axes))

    def backward(g: np.ndarray):
        return ((a, np.transpose(g, inverse)),)

    return _record(out, (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = a.shape
    try:
        out = Tensor(a.data.reshape(shape))
    except ValueError as exc:
        raise ShapeMismatch(f"cannot reshape {orig} to {shape}") from exc

    def backward(g: np.ndarray):
        return ((a, g.reshape(orig)),)

    return _record(out, (a,), backward)


def concat_rows(tensors: list[Tensor] | tuple[Tensor, ...]) -> Tensor:
    """Concatenate along axis 0; backward splits the gradient back."""
    if not tensors:
        raise ShapeMismatch("concat_rows needs at least one tensor")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=0))
    sizes = [t.shape[0] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g: np.ndarray):
        return tuple(
            (t, g[offsets[i]:offsets[i + 1]]) for i, t in enumerate(tensors)
        )

    return _record(out, tuple(tensors), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis."""
    _check_finite("softmax", a.data)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def backward(g: np.ndarray):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((a, (g - dot) * y),)

    return _record(out, (a,), backward)


_LN_EPS = np.float32(1e-5)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    _check_finite("layer_norm", a.data, gain.data, bias.data)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(
            f"gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    mean = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = centered * inv_std
    out = Tensor(xhat * gain.data + bias.data)

    def backward(g: np.ndarray):
        g_gain = (g * xhat).reshape(-1, d).sum(axis=0)
        g_bias = g.reshape(-1, d).sum(axis=0)
        gx = g * gain.data
        term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        return ((a, term * inv_std), (gain, g_gain), (bias, g_bias))

    return _record(out, (a, gain, bias), backward)


_GELU_C = np.float32(math.sqrt(2.0 / math.pi))
_GELU_K = np.float32(0.044715)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    _check_finite("gelu", a.data)
    x = a.data
    u = _GELU_C * (x + _GELU_K * x * x * x)
    t = np.tanh(u)
    out = Tensor(np.float32(0.5) * x * (1.0 + t))

    def backward(g: np.ndarray):
        du = _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        return ((a, g * local),)

    return _record(out, (a,), backward)


_MASK_FILL = np.float32(-1e9)


def causal_mask_fill(scores: Tensor) -> Tensor:
    """Replace attention scores at future positions (column > row) with -1e9."""
    _check_finite("causal_mask_fill", scores.data)
    if scores.ndim < 2 or scores.shape[-1] != scores.shape[-2]:
        raise ShapeMismatch(f"expected trailing square axes, got {scores.shape}")
    t = scores.shape[-1]
    allowed = np.tril(np.ones((t, t), dtype=bool))
    out = Tensor(np.where(allowed, scores.data, _MASK_FILL))

    def backward(g: np.ndarray):
        return ((scores, np.where(allowed, g, np.float32(0.0))),)

    return _record(out, (scores,), backward)


def cross_entropy_from_logits(logits: Tensor, targets) -> Tensor:
    """Per-row cross entropy from raw logits.

    ``logits`` is (N, V); ``targets`` is an int array (N,). Returns (N,)
    losses. Uses the log-sum-exp trick; the inner reduction runs in float64.
    """
    _check_finite("cross_entropy_from_logits", logits.data)
    if logits.ndim != 2:
        raise ShapeMismatch(f"logits must be 2D, got {logits.shape}")
    tgt = np.asarray(targets)
    if tgt.shape != (logits.shape[0],) or not np.issubdtype(tgt.dtype, np.integer):
        raise ShapeMismatch(
            f"targets must be int with shape ({logits.shape[0]},), got {tgt.shape}"
        )
    if tgt.size and (tgt.min() < 0 or tgt.max() >= logits.shape[1]):
        raise IndexError(f"target id out of range for {logits.shape[1]} classes")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=1, dtype=np.float64)
    rows = np.arange(x.shape[0])
    log_probs_t = (x[rows, tgt] - m[:, 0]) - np.log(z).astype(np.float32)
    out = Tensor(-log_probs_t)
    probs = e / z.astype(np.float32)[:, None]

    def backward(g: np.ndarray):
        gl = probs * g[:, None]
        gl[rows, tgt] -= g
        return ((logits, gl),)

    return _record(out, (logits,), backward)
