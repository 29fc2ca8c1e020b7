"""Dense N-d tensors with reverse-mode automatic differentiation.

Tensors hold a row-major float32/float64 numpy buffer plus an optional
gradient buffer. Every differentiable operation appends a node to a
module-level tape; ``backward`` replays the tape in reverse and accumulates
gradients (+=) into the reachable leaves. Layout convention is
channels-first (C, H, W) with an optional leading batch extent.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """An operand shape violates the operation's contract."""


class NumericError(ArithmeticError):
    """An operation produced (or would produce) non-finite values."""


_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


# ---------------------------------------------------------------------------
# global execution state: tape, grad mode, debug checks, flop counters
# ---------------------------------------------------------------------------

class _Node:
    __slots__ = ("parents", "out", "backward_fn")

    def __init__(self, parents, out, backward_fn):
        self.parents = parents
        self.out = out
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of executed differentiable operations."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        self.nodes.clear()


_tape = Tape()
_grad_enabled = True
_debug_checks = False
_flop_counters: list["flop_counter"] = []


def tape() -> Tape:
    return _tape


def reset_tape() -> None:
    """Drop all recorded nodes. Call between training steps to bound memory."""
    _tape.clear()


class no_grad:
    """Context manager that suspends tape recording (parameter updates, eval)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def set_debug_checks(on: bool) -> None:
    """Enable per-op NaN/Inf detection (reported as NumericError, never silent)."""
    global _debug_checks
    _debug_checks = bool(on)


class flop_counter:
    """Context manager counting the FLOP cost of every op executed inside it.

    Convention: one multiply-accumulate = one FLOP for matmul/conv/linear;
    elementwise ops, softmax, reductions and pooling cost one per output
    element; data movement (reshape/transpose/concat/split) is free.
    """

    def __init__(self):
        self.total = 0

    def __enter__(self):
        _flop_counters.append(self)
        return self

    def __exit__(self, *exc):
        _flop_counters.remove(self)
        return False


def _count(n: int) -> None:
    if _flop_counters:
        for c in _flop_counters:
            c.total += int(n)


# ---------------------------------------------------------------------------
# tensor
# ---------------------------------------------------------------------------

class Tensor:
    """Dense array value, optionally tracked on the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)   # keeps 0-d arrays 0-d
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: _Node | None = None

    # -- inspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying buffer (copy before mutating)."""
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- gradient bookkeeping --------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def requires_grad_(self, flag: bool = True) -> "Tensor":
        if self.node is not None:
            raise ValueError("cannot toggle requires_grad on a tape-produced tensor")
        self.requires_grad = flag
        return self

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    def __radd__(self, other):
        return add(_coerce(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self.dtype))

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    def __rmul__(self, other):
        return mul(_coerce(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _coerce(other, self.dtype))

    def __neg__(self):
        return mul(self, _coerce(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axes=None, keepdims: bool = False) -> "Tensor":
        if axes is None:
            axes = tuple(range(self.ndim))
        return reduce("sum", self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False) -> "Tensor":
        if axes is None:
            axes = tuple(range(self.ndim))
        return reduce("mean", self, axes, keepdims)


def _coerce(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


# ---------------------------------------------------------------------------
# creation
# ---------------------------------------------------------------------------

def _validate_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"extents must be >= 1, got {shape}")
    return shape


def zeros(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(_validate_shape(shape), dtype=dtype))


def full(shape, value, dtype=np.float64) -> Tensor:
    return Tensor(np.full(_validate_shape(shape), value, dtype=dtype))


def randn(shape, seed: int, mean: float = 0.0, std: float = 1.0, dtype=np.float64) -> Tensor:
    """Seeded normal draw; the explicit seed is what makes runs reproducible."""
    if seed is None:
        raise ValueError("randn requires an explicit seed")
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    data = mean + std * rng.standard_normal(_validate_shape(shape))
    return Tensor(data.astype(dtype))


def from_values(values, shape=None, dtype=np.float64) -> Tensor:
    arr = np.asarray(values, dtype=dtype)
    if shape is not None:
        shape = _validate_shape(shape)
        if arr.size != int(np.prod(shape)):
            raise ShapeError(f"{arr.size} values cannot fill shape {shape}")
        arr = arr.reshape(shape)
    return Tensor(arr)


def as_tensor(values, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.asarray(values)
    if dtype is not None:
        arr = arr.astype(dtype)
    elif arr.dtype not in _ALLOWED_DTYPES:
        arr = arr.astype(np.float64)
    return Tensor(arr, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# recording helpers
# ---------------------------------------------------------------------------

def _finish(out_data: np.ndarray, parents: tuple[Tensor, ...],
            backward_fn: Callable, opname: str) -> Tensor:
    if _debug_checks and not np.all(np.isfinite(out_data)):
        raise NumericError(f"{opname} produced non-finite values")
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        node = _Node(parents, out, backward_fn)
        out.node = node
        _tape.nodes.append(node)
    return out


def record_op(out_data: np.ndarray, parents: tuple[Tensor, ...],
              backward_fn: Callable, opname: str, flops: int) -> Tensor:
    """Hook for layer primitives defined outside this module (conv, pools, BN)."""
    _count(flops)
    return _finish(out_data, parents, backward_fn, opname)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # inverse of numpy broadcasting: sum the expanded axes back down
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_binary(a: Tensor, b: Tensor, opname: str) -> tuple[int, ...]:
    if a.dtype != b.dtype:
        raise ShapeError(f"{opname}: dtype mismatch {a.dtype} vs {b.dtype}")
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from e


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "add")
    out = a.data + b.data
    _count(out.size)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish(out, (a, b), backward_fn, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "sub")
    out = a.data - b.data
    _count(out.size)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _finish(out, (a, b), backward_fn, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "mul")
    out = a.data * b.data
    _count(out.size)

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _finish(out, (a, b), backward_fn, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise quotient. The denominator must be nonzero; guard with an
    explicit epsilon at the call site when it can vanish."""
    _check_binary(a, b, "div")
    if np.any(b.data == 0):
        raise NumericError("div: zero denominator (add an epsilon guard at the call site)")
    out = a.data / b.data
    _count(out.size)

    def backward_fn(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _finish(out, (a, b), backward_fn, "div")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    _count(out.size)

    def backward_fn(g):
        return (g * out,)

    return _finish(out, (a,), backward_fn, "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log: non-positive input")
    out = np.log(a.data)
    _count(out.size)

    def backward_fn(g):
        return (g / a.data,)

    return _finish(out, (a,), backward_fn, "log")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    _count(out.size)

    def backward_fn(g):
        return (g * (a.data > 0),)

    return _finish(out, (a,), backward_fn, "relu")


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    out = np.where(a.data > 0, a.data, slope * a.data)
    _count(out.size)

    def backward_fn(g):
        return (g * np.where(a.data > 0, 1.0, slope),)

    return _finish(out, (a,), backward_fn, "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so exp never overflows
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    _count(out.size)

    def backward_fn(g):
        return (g * out * (1.0 - out),)

    return _finish(out, (a,), backward_fn, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    _count(out.size)

    def backward_fn(g):
        return (g * (1.0 - out * out),)

    return _finish(out, (a,), backward_fn, "tanh")


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "exp": exp, "log": log, "relu": relu, "sigmoid": sigmoid, "tanh": tanh,
}


def elementwise(op: str, a: Tensor, b: Tensor | None = None, slope: float = 0.1) -> Tensor:
    """Dispatch-by-name wrapper over the elementwise ops."""
    if op == "leaky_relu":
        return leaky_relu(a, slope)
    fn = _ELEMENTWISE.get(op)
    if fn is None:
        raise ValueError(f"unknown elementwise op {op!r}")
    if op in ("add", "sub", "mul", "div"):
        if b is None:
            raise ValueError(f"{op} is binary")
        return fn(a, b)
    if b is not None:
        raise ValueError(f"{op} is unary")
    return fn(a)


# ---------------------------------------------------------------------------
# linear algebra / reductions
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    out = a.data @ b.data
    _count(a.shape[0] * a.shape[1] * b.shape[1])

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _finish(out, (a, b), backward_fn, "matmul")


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(ax) % ndim if -ndim <= int(ax) < ndim else int(ax) for ax in axes)
    if len(axes) == 0:
        raise ShapeError("empty axis set is disallowed; make identity copies explicit")
    if len(set(axes)) != len(axes) or any(ax < 0 or ax >= ndim for ax in axes):
        raise ShapeError(f"invalid axes {axes} for ndim {ndim}")
    return axes


def reduce(op: str, a: Tensor, axes, keepdims: bool = False) -> Tensor:
    """sum / mean / max over an explicit, non-empty axis set."""
    axes = _normalize_axes(axes, a.ndim)
    if op == "sum":
        out = a.data.sum(axis=axes, keepdims=keepdims)
    elif op == "mean":
        out = a.data.mean(axis=axes, keepdims=keepdims)
    elif op == "max":
        out = a.data.max(axis=axes, keepdims=keepdims)
    else:
        raise ValueError(f"unknown reduction {op!r}")
    out = np.asarray(out, dtype=a.dtype)
    _count(out.size)
    n_reduced = int(np.prod([a.shape[ax] for ax in axes]))

    def expand(g):
        if keepdims:
            return g
        return np.expand_dims(g, axes)

    if op == "sum":
        def backward_fn(g):
            return (np.broadcast_to(expand(g), a.shape).copy(),)
    elif op == "mean":
        def backward_fn(g):
            return (np.broadcast_to(expand(g) / n_reduced, a.shape).copy(),)
    else:  # max: subgradient split evenly across ties
        def backward_fn(g):
            full_max = a.data.max(axis=axes, keepdims=True)
            mask = (a.data == full_max)
            counts = mask.sum(axis=axes, keepdims=True)
            return (expand(g) * mask / counts,)

    return _finish(out, (a,), backward_fn, f"reduce_{op}")


def softmax(a: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax (max-subtraction) along one axis."""
    axis = _normalize_axes(axis, a.ndim)[0]
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    _count(out.size)

    def backward_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _finish(out, (a,), backward_fn, "softmax")


# ---------------------------------------------------------------------------
# layout ops (gradient-transparent, zero cost)
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} ({a.size} elems) to {shape}")
    out = np.ascontiguousarray(a.data.reshape(shape))

    def backward_fn(g):
        return (g.reshape(a.shape),)

    return _finish(out, (a,), backward_fn, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for ndim {a.ndim}")
    out = np.ascontiguousarray(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _finish(out, (a,), backward_fn, "transpose")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    axis = _normalize_axes(axis, tensors[0].ndim)[0]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        return tuple(np.ascontiguousarray(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis))
                     for i in range(len(sizes)))

    return _finish(out, tuple(tensors), backward_fn, "concat")


def split(a: Tensor, axis: int, groups: int) -> list[Tensor]:
    axis = _normalize_axes(axis, a.ndim)[0]
    extent = a.shape[axis]
    if extent % groups != 0:
        raise ShapeError(f"extent {extent} not divisible by {groups} groups")
    step = extent // groups
    pieces = []
    for i in range(groups):
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(i * step, (i + 1) * step)
        piece_data = np.ascontiguousarray(a.data[tuple(idx)])

        def backward_fn(g, i=i):
            full = np.zeros_like(a.data)
            idx2 = [slice(None)] * a.ndim
            idx2[axis] = slice(i * step, (i + 1) * step)
            full[tuple(idx2)] = g
            return (full,)

        pieces.append(_finish(piece_data, (a,), backward_fn, "split"))
    return pieces


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(out: Tensor) -> None:
    """Populate .grad for every requires_grad leaf reachable from a scalar.

    Repeated calls accumulate into existing gradients; use zero_grads (or
    Tensor.zero_grad) between passes when accumulation is not wanted.
    """
    if out.size != 1:
        raise ShapeError(f"backward requires a scalar output, got shape {out.shape}")
    if out.node is None:
        raise ValueError("output is detached from the tape (nothing recorded)")
    pending: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
    holders: dict[int, Tensor] = {id(out): out}  # keep ids alive
    for node in reversed(_tape.nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        holders.pop(id(node.out), None)
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg
                holders[key] = parent


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
