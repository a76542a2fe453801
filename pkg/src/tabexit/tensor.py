"""Dense float64 tensors with a reverse-mode gradient tape.

Arrays are stored in numpy; differentiation is done by our own tape. Every
primitive records a node holding its inputs, its output and a closure that
maps the output gradient to input gradients. :func:`backward` walks the tape
in exact reverse recording order.

Matrix products default to a row-stable kernel (numpy's non-BLAS einsum
loop): the value of each output row depends only on that row of the left
operand, never on its neighbours or its position. The model relies on this
for bit-exact permutation invariance. Training loops, which only need
gradients, may opt into BLAS with :func:`fast_kernels`.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericInputError

__all__ = [
    "Tensor", "GradTape", "FlopCounter", "backward", "zero_grad", "fast_kernels",
    "tensor", "matmul", "rowdot", "add", "sub", "mul", "div", "neg", "exp", "log",
    "tanh", "sum", "mean", "reshape", "swapaxes", "concat", "gather_rows", "take",
    "softmax", "log_softmax", "layer_norm", "gelu", "LN_EPS",
]

LN_EPS = 1e-5
_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715

_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def _counters() -> list:
    if not hasattr(_state, "counters"):
        _state.counters = []
    return _state.counters


def _fast() -> bool:
    return getattr(_state, "fast", False)


def _count(flops: int) -> None:
    for c in _counters():
        c.total += flops


@contextlib.contextmanager
def fast_kernels(enabled: bool = True):
    """Use BLAS for matrix products inside the block (not row-stable)."""
    prev = _fast()
    _state.fast = enabled
    try:
        yield
    finally:
        _state.fast = prev


class FlopCounter:
    """Counts multiply-add FLOPs (2 per MAC) of contraction primitives.

    Only :func:`matmul` and :func:`rowdot` are counted; elementwise work is
    ignored on purpose so the count has a simple closed form.
    """

    def __init__(self):
        self.total = 0

    def __enter__(self):
        _counters().append(self)
        return self

    def __exit__(self, *exc):
        _counters().remove(self)
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = None
        self._tape = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr if arr.dtype == np.float64 else arr.astype(np.float64)
        t.requires_grad = False
        t.grad = None
        t.node_id = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


@dataclass
class _Node:
    inputs: tuple
    output: Tensor
    rule: str
    backward: Callable


class GradTape:
    """Append-only record of primitive operations.

    Use as a context manager; primitives executed inside the block whose
    inputs require grad are recorded. One tape per thread.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def reset(self) -> None:
        self.nodes.clear()

    def _record(self, out: Tensor, inputs: tuple, rule: str, fn: Callable) -> None:
        out.requires_grad = True
        out.node_id = len(self.nodes)
        out._tape = self
        self.nodes.append(_Node(inputs, out, rule, fn))


def _current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _result(arr: np.ndarray, inputs: tuple, rule: str, fn: Callable) -> Tensor:
    out = Tensor._wrap(arr)
    tape = _current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape._record(out, inputs, rule, fn)
    return out


def backward(tape: GradTape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node_id is None or loss._tape is not tape:
        raise ContractError("loss was not recorded on this tape")
    grads = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        g = grads.pop(node.output.node_id, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._tape is tape and inp.node_id is not None:
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = gi if prev is None else prev + gi
            else:
                inp.grad = np.array(gi) if inp.grad is None else inp.grad + gi


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(a.data + b.data, (a, b), "add",
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(a.data - b.data, (a, b), "sub",
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(a.data * b.data, (a, b), "mul",
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return _result(out, (a, b), "div",
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, (a,), "neg", lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _result(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def gelu(a) -> Tensor:
    """Tanh-approximation GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    a = _as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    out = 0.5 * x * (1.0 + t)

    def _bw(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _result(out, (a,), "gelu", _bw)


# --- reductions and shape ----------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), "sum", _bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _result(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)
    return _result(np.swapaxes(a.data, ax1, ax2), (a,), "swapaxes",
                   lambda g: (np.swapaxes(g, ax1, ax2),))


def _getitem(a: Tensor, idx) -> Tensor:
    def _bw(g):
        z = np.zeros_like(a.data)
        z[idx] += g
        return (z,)

    return _result(a.data[idx], (a,), "getitem", _bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    ax = axis % ts[0].ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _result(np.concatenate([t.data for t in ts], axis=ax), ts, "concat",
                   lambda g: tuple(np.split(g, bounds, axis=ax)))


def gather_rows(a, index: np.ndarray) -> Tensor:
    """Select rows along axis -2; ``index[..., j]`` names the source row.

    Leading dims of ``index`` broadcast against those of ``a``. Indices within
    one slice must be distinct (a permutation or a sub-selection).
    """
    a = _as_tensor(a)
    idx = np.asarray(index)[..., None]

    def _bw(g):
        z = np.zeros(np.broadcast_shapes(a.shape[:-2], g.shape[:-2]) + a.shape[-2:])
        np.put_along_axis(z, np.broadcast_to(idx, z.shape[:-2] + idx.shape[-2:]),
                          g, axis=-2)
        return (_unbroadcast(z, a.shape),)

    return _result(np.take_along_axis(a.data, idx, axis=-2), (a,), "gather_rows", _bw)


def take(table, index: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[index]`` with repeats allowed."""
    table = _as_tensor(table)
    idx = np.asarray(index, dtype=np.int64)

    def _bw(g):
        z = np.zeros_like(table.data)
        np.add.at(z, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (z,)

    return _result(table.data[idx], (table,), "take", _bw)


# --- contractions -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, leading batch dims broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if _fast():
        out = np.matmul(a.data, b.data)
    else:
        out = np.einsum("...ij,...jk->...ik", a.data, b.data, optimize=False)
    if _counters():
        _count(2 * int(np.prod(out.shape)) * a.shape[-1])

    def _bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _result(out, (a, b), "matmul", _bw)


def rowdot(a, b) -> Tensor:
    """Dot product along the last axis, keeping it as size 1."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"rowdot shape mismatch: {a.shape} vs {b.shape}")
    if _counters():
        _count(2 * a.size)
    return _result(np.sum(a.data * b.data, axis=-1, keepdims=True), (a, b), "rowdot",
                   lambda g: (g * b.data, g * a.data))


# --- normalisation ------------------------------------------------------------

def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericInputError(f"{op}: input contains NaN or Inf")


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    _check_finite(a.data, "softmax")
    e = np.exp(a.data - np.max(a.data, axis=axis, keepdims=True))
    out = e / np.sum(e, axis=axis, keepdims=True)
    return _result(out, (a,), "softmax",
                   lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    _check_finite(a.data, "log_softmax")
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    out = z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    return _result(out, (a,), "log_softmax",
                   lambda g: (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),))


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis (biased variance), then scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last axis {d}")
    xc = x.data - np.mean(x.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def _bw(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, bias), "layer_norm", _bw)
