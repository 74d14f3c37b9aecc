"""Dense float64 tensors with tape-based reverse-mode differentiation.

Values are numpy arrays in binary64, stored row-major and treated as
immutable once wrapped in a :class:`Tensor`. A :class:`Tape` records every
operation whose output depends on a watched (``requires_grad``) tensor.
Records are appended in execution order, so the tape is topologically
sorted by construction and :func:`backward` is a single reverse sweep that
visits each node exactly once.

Operations executed without an active tape, or whose inputs are all
constants, are plain numpy evaluations and record nothing.

Reductions delegate to numpy, whose summation order is fixed for a given
shape; repeated evaluation of the same graph on the same inputs is
bitwise reproducible.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "active_tape",
    "stop_recording",
    "backward",
    "matmul",
    "softmax_rows",
    "log_softmax_rows",
    "layer_norm",
    "gelu",
    "tanh",
    "embedding",
    "take",
    "l2_normalize",
    "dropout",
    "finite_diff_grad",
    "max_rel_error",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class Tensor:
    """Immutable dense array value, optionally linked into a Tape.

    ``node_id`` is assigned when the tensor first participates in a
    recorded computation and is only meaningful for the tape it was
    registered on. A tensor must not be shared between two live tapes.
    """

    __slots__ = ("data", "requires_grad", "node_id", "_tape", "_connected")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id: Optional[int] = None
        self._tape: Optional["Tape"] = None
        self._connected = self.requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return _reshape(self, tuple(shape))

    def transpose(self, axes=None) -> "Tensor":
        return _transpose(self, axes)

    def __add__(self, other: "Tensor") -> "Tensor":
        return _add(self, _as_tensor(other))

    def __sub__(self, other: "Tensor") -> "Tensor":
        return _sub(self, _as_tensor(other))

    def __neg__(self) -> "Tensor":
        return _neg(self)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return _scale(self, float(other))
        return _mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return _scale(self, 1.0 / float(other))
        raise TypeError("tensor division is only supported by a python scalar")

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class TapeNode:
    """One recorded operation: input ids, output id, local gradient rule."""

    __slots__ = ("op", "inputs", "output", "grad_fn")

    def __init__(self, op: str, inputs: tuple, output: int, grad_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.grad_fn = grad_fn


_TAPE_STACK: list[Optional["Tape"]] = []


def active_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextmanager
def stop_recording():
    """Suspend recording inside a tape context (e.g. frozen-teacher passes)."""
    _TAPE_STACK.append(None)
    try:
        yield
    finally:
        _TAPE_STACK.pop()


class Tape:
    """Append-only record of operations, topologically ordered.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded. A single tape is single-writer: do not record onto it from
    two threads. Disjoint tapes over disjoint tensors are independent.
    """

    def __init__(self):
        self._records: list[TapeNode] = []
        self._next_id = 0
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape contexts must nest"

    @property
    def nodes(self) -> tuple:
        return tuple(self._records)

    def watch(self, t: Tensor) -> int:
        """Register ``t`` as a leaf of this tape and return its node id."""
        if t._tape is not self:
            t._tape = self
            t.node_id = self._next_id
            self._next_id += 1
            self._leaves[t.node_id] = t
        return t.node_id

    def _record(self, op: str, inputs: Sequence[Tensor], out: Tensor,
                grad_fns: Sequence[Optional[Callable]]) -> None:
        in_ids = tuple(self.watch(t) for t in inputs)
        connected = tuple(t._connected for t in inputs)
        out._tape = self
        out.node_id = self._next_id
        self._next_id += 1
        out._connected = True

        def grad_fn(g: np.ndarray, accumulate: Callable[[int, np.ndarray], None]) -> None:
            for in_id, is_conn, fn in zip(in_ids, connected, grad_fns):
                if is_conn and fn is not None:
                    accumulate(in_id, fn(g))

        self._records.append(TapeNode(op, in_ids, out.node_id, grad_fn))


def _apply(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
           grad_fns: Sequence[Optional[Callable]]) -> Tensor:
    """Wrap an op result, recording it if a tape is active and any input is live."""
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t._connected for t in inputs):
        tape._record(op, inputs, out, grad_fns)
    return out


def backward(tape: Tape, loss: Tensor) -> dict:
    """Reverse sweep over the tape; returns {node_id: gradient Tensor}.

    Gradients are returned for every watched leaf with ``requires_grad``;
    leaves the loss does not reach get exact zeros. Deterministic for a
    fixed tape.
    """
    if loss.shape != ():
        raise ValueError(f"loss must be a scalar tensor, got shape {loss.shape}")
    if loss._tape is not tape or loss.node_id is None:
        raise ValueError("loss is not an output recorded on this tape")

    grads: list[Optional[np.ndarray]] = [None] * tape._next_id
    grads[loss.node_id] = np.ones((), dtype=np.float64)

    def accumulate(node_id: int, g: np.ndarray) -> None:
        held = grads[node_id]
        grads[node_id] = g if held is None else held + g

    for node in reversed(tape._records):
        g = grads[node.output]
        if g is None:
            continue
        node.grad_fn(g, accumulate)
        grads[node.output] = None  # each output is consumed exactly once

    out = {}
    for node_id, leaf in tape._leaves.items():
        if leaf.requires_grad:
            g = grads[node_id]
            out[node_id] = Tensor(g if g is not None else np.zeros_like(leaf.data))
    return out


# ---------------------------------------------------------------------------
# elementwise / linear algebra ops


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _apply("add", out, (a, b),
                  (lambda g: _unbroadcast(g, a.data.shape),
                   lambda g: _unbroadcast(g, b.data.shape)))


def _sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _apply("sub", out, (a, b),
                  (lambda g: _unbroadcast(g, a.data.shape),
                   lambda g: _unbroadcast(-g, b.data.shape)))


def _neg(a: Tensor) -> Tensor:
    return _apply("neg", -a.data, (a,), (lambda g: -g,))


def _mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    out = ad * bd
    return _apply("mul", out, (a, b),
                  (lambda g: _unbroadcast(g * bd, ad.shape),
                   lambda g: _unbroadcast(g * ad, bd.shape)))


def _scale(a: Tensor, c: float) -> Tensor:
    return _apply("scale", a.data * c, (a,), (lambda g: g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-d or stacked (numpy semantics on the last two axes)."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs 2-d or higher operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    out = ad @ bd
    return _apply("matmul", out, (a, b),
                  (lambda g: _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape),
                   lambda g: _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)))


def _transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _apply("transpose", np.transpose(a.data, axes), (a,),
                  (lambda g: np.transpose(g, inverse),))


def _reshape(a: Tensor, shape: tuple) -> Tensor:
    src_shape = a.data.shape
    return _apply("reshape", a.data.reshape(shape), (a,),
                  (lambda g: g.reshape(src_shape),))


def _sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src_shape = a.data.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad(g: np.ndarray) -> np.ndarray:
        if axis is None:
            return np.broadcast_to(g, src_shape).copy() if not keepdims else \
                np.broadcast_to(g.reshape((1,) * len(src_shape)), src_shape).copy()
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axes)
        return np.broadcast_to(gg, src_shape).copy()

    return _apply("sum", out, (a,), (grad,))


# ---------------------------------------------------------------------------
# neural-network ops


def softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax of x/temperature along the last axis.

    Computed with max-subtraction, which cancels in the ratio and only
    improves conditioning. Rows sum to 1; the per-row argmax is invariant
    under any positive temperature.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad(g: np.ndarray) -> np.ndarray:
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (g - inner) * y / temperature

    return _apply("softmax_rows", y, (x,), (grad,))


def log_softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Log-probabilities of x/temperature along the last axis (stable log-sum-exp)."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = x.data / temperature
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def grad(g: np.ndarray) -> np.ndarray:
        return (g - sm * g.sum(axis=-1, keepdims=True)) / temperature

    return _apply("log_softmax_rows", out, (x,), (grad,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Standardize the last axis to mean 0 / variance 1, then apply gain and bias.

    Population variance; eps sits inside the square root so a constant row
    maps to exact zeros.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.data.shape} and {bias.data.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = gain.data * xhat + bias.data

    def grad_x(g: np.ndarray) -> np.ndarray:
        gy = g * gain.data
        term = d * gy - gy.sum(axis=-1, keepdims=True) - xhat * (gy * xhat).sum(axis=-1, keepdims=True)
        return term * inv / d

    def grad_gain(g: np.ndarray) -> np.ndarray:
        return (g * xhat).reshape(-1, d).sum(axis=0)

    def grad_bias(g: np.ndarray) -> np.ndarray:
        return g.reshape(-1, d).sum(axis=0)

    return _apply("layer_norm", out, (x, gain, bias), (grad_x, grad_gain, grad_bias))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation:

        gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x**3)))
    """
    xd = x.data
    x_sq = xd * xd
    inner = _GELU_C * (xd + 0.044715 * (x_sq * xd))
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def grad(g: np.ndarray) -> np.ndarray:
        dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * x_sq)
        return g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner)

    return _apply("gelu", out, (x,), (grad,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _apply("tanh", y, (x,), (lambda g: g * (1.0 - y * y),))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatter-adds into the table."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError(f"embedding ids must be integers, got dtype {ids.dtype}")
    n_rows, width = table.data.shape
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise ValueError(f"embedding id out of range [0, {n_rows}): min {ids.min()}, max {ids.max()}")
    out = table.data[ids]

    def grad(g: np.ndarray) -> np.ndarray:
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, width))
        return gt

    return _apply("embedding", out, (table,), (grad,))


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one index along an axis, dropping that axis."""
    out = np.take(x.data, index, axis=axis)
    src_shape = x.data.shape

    def grad(g: np.ndarray) -> np.ndarray:
        gx = np.zeros(src_shape, dtype=np.float64)
        sl = [slice(None)] * len(src_shape)
        sl[axis] = index
        gx[tuple(sl)] = g
        return gx

    return _apply("take", out, (x,), (grad,))


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale the last axis to unit L2 norm: x / max(||x||, eps)."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    xd = x.data
    raw = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    norm = np.maximum(raw, eps)
    out = xd / norm

    def grad(g: np.ndarray) -> np.ndarray:
        # below eps the denominator is the constant eps, so the second term vanishes
        dot = (g * xd).sum(axis=-1, keepdims=True)
        return g / norm - np.where(raw > eps, xd * dot / (norm * norm * norm), 0.0)

    return _apply("l2_normalize", out, (x,), (grad,))


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0 (consumes no randomness)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return _apply("dropout", x.data * mask, (x,), (lambda g: g * mask,))


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_grad(f: Callable[[dict], float], params: dict, h: float = 1e-5) -> dict:
    """Central-difference gradient estimate, one coordinate at a time.

    ``f`` is called with a dict of numpy arrays (same keys as ``params``)
    and must return a scalar; it must re-read the arrays on every call.
    Returns {name: gradient array}.
    """
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    work = {name: np.array(arr, dtype=np.float64, copy=True) for name, arr in params.items()}
    grads = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(f(work))
            flat[i] = orig - h
            f_minus = float(f(work))
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
        grads[name] = g
    return grads


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-3) -> float:
    """Worst elementwise |a-b| / max(|a|, |b|, floor).

    The floor keeps entries that are tiny on both sides (where central
    differences are all roundoff) from inflating the ratio.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare gradients of shapes {a.shape} and {b.shape}")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    if a.size == 0:
        return 0.0
    return float((np.abs(a - b) / denom).max())
