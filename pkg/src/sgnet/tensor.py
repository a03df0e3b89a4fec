"""Dense float64 tensors with a recording tape for reverse-mode differentiation.

Operations only record themselves while a :class:`Tape` is active; outside a
tape they run as plain numpy computations, which is what inference and the
finite-difference side of :func:`grad_check` use.

Broadcasting is deliberately absent except for tensor-with-python-scalar
arithmetic. Row-wise bias addition and row scaling have dedicated ops
(:func:`add_bias`, :func:`scale_rows`) so that every backward rule stays
easy to audit.
"""

from __future__ import annotations

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError, NumericError

logger = logging.getLogger(__name__)

_TAPES: list["Tape | None"] = []


@dataclass
class _Entry:
    out: "Tensor"
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; every op whose inputs need gradients is
    appended while the tape is on top of the stack.
    """

    def __init__(self) -> None:
        self.entries: list[_Entry] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self, "tapes must be exited in LIFO order"

    def __len__(self) -> int:
        return len(self.entries)


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextmanager
def no_grad():
    """Suspend recording, even inside an enclosing tape."""
    _TAPES.append(None)
    try:
        yield
    finally:
        _TAPES.pop()


class Tensor:
    """A dense float64 array plus optional gradient.

    ``data`` is a numpy array in C (row-major) order; ``grad`` is ``None``
    until a backward pass reaches the tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_leaf")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        if not np.isfinite(arr).all():
            raise NumericError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._leaf = True

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._tape = None
        t._leaf = True
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(
    data: np.ndarray,
    inputs: tuple[Tensor, ...],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    check: bool = True,
) -> Tensor:
    """Wrap ``data`` and record it on the active tape.

    ``check=False`` is for ops that only move, select or squash finite
    inputs and so cannot create NaN or Inf.
    """
    # a sum is finite only if every entry is; the full scan runs only when it is not
    if check and not math.isfinite(np.add.reduce(data, axis=None)) and not np.isfinite(data).all():
        raise NumericError("operation produced NaN or Inf")
    out = Tensor._wrap(np.asarray(data, dtype=np.float64, order="C"))
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        out._tape = tape
        tape.entries.append(_Entry(out, inputs, backward))
    return out


def _same_shape(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- arithmetic


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def back(g):
        return g @ B.T, A.T @ g

    return _result(A @ B, (a, b), back)


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data + c, (a,), lambda g: (g,))
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data - c, (a,), lambda g: (g,))
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data * c, (a,), lambda g: (g * c,))
    _same_shape(a, b, "mul")
    A, B = a.data, b.data
    return _result(A * B, (a, b), lambda g: (g * B, g * A))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), check=False)


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),), check=False)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1.0 - t * t),), check=False)


def log(a: Tensor, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the input is clamped from below first
    and the clamped entries receive zero gradient."""
    x = a.data
    if floor is not None:
        keep = x >= floor
        x = np.where(keep, x, floor)
    else:
        keep = None
    if (x <= 0).any():
        raise NumericError("log of non-positive value")
    inv = 1.0 / x
    if keep is not None:
        inv = inv * keep
    return _result(np.log(x), (a,), lambda g: (g * inv,))


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis."""
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (a,), back)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------- reductions


def _check_axis(t: Tensor, axis: int | None) -> None:
    if axis is not None and not (-t.ndim <= axis < t.ndim):
        raise IndexError(f"axis {axis} out of range for tensor of rank {t.ndim}")


def reduce_sum(t: Tensor, axis: int | None = None) -> Tensor:
    _check_axis(t, axis)
    shape = t.shape
    if axis is None:
        return _result(np.asarray(t.data.sum()), (t,), lambda g: (np.full(shape, g.reshape(-1)[0]),))
    ax = axis % t.ndim

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _result(t.data.sum(axis=ax), (t,), back)


def reduce_mean(t: Tensor, axis: int | None = None) -> Tensor:
    _check_axis(t, axis)
    count = t.size if axis is None else t.shape[axis]
    if count == 0:
        raise ContractError("mean over an empty extent")
    return mul(reduce_sum(t, axis), 1.0 / count)


def reduce_max(t: Tensor, axis: int | None = None) -> Tensor:
    """Maximum; ties send the whole gradient to the first maximal element."""
    _check_axis(t, axis)
    shape = t.shape
    if axis is None:
        idx = int(np.argmax(t.data))

        def back(g):
            out = np.zeros(t.size)
            out[idx] = g.reshape(-1)[0]
            return (out.reshape(shape),)

        return _result(np.asarray(t.data.reshape(-1)[idx]), (t,), back)
    ax = axis % t.ndim
    idx = np.expand_dims(np.argmax(t.data, axis=ax), ax)

    def back(g):
        out = np.zeros(shape)
        np.put_along_axis(out, idx, np.expand_dims(g, ax), axis=ax)
        return (out,)

    return _result(np.take_along_axis(t.data, idx, axis=ax).squeeze(ax), (t,), back)


_REDUCTIONS = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}


def reduce(op: str, t: Tensor, axis: int | None = None) -> Tensor:
    try:
        fn = _REDUCTIONS[op]
    except KeyError:
        raise ContractError(f"unknown reduction {op!r}") from None
    return fn(t, axis)


# ---------------------------------------------------------------- structure


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    old = t.shape
    try:
        out = t.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _result(out, (t,), lambda g: (g.reshape(old),), check=False)


def transpose(t: Tensor) -> Tensor:
    if t.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {t.shape}")
    return _result(t.data.T, (t,), lambda g: (g.T,), check=False)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("concat of nothing")
    ax = axis % tensors[0].ndim
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as exc:
        raise DimensionError(
            f"concat: incompatible shapes {[t.shape for t in tensors]}"
        ) from exc
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(out, tensors, back, check=False)


def take_rows(t: Tensor, index) -> Tensor:
    """Gather rows ``t[index]``; duplicate indices accumulate on backward."""
    idx = np.asarray(index, dtype=np.intp)
    shape = t.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _result(t.data[idx], (t,), back, check=False)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add vector ``b`` to every row of matrix ``x``."""
    if x.ndim != 2 or b.shape != (x.shape[1],):
        raise DimensionError(f"add_bias: bias {b.shape} does not fit rows of {x.shape}")
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row ``i`` of ``x`` by ``s[i]``."""
    if x.ndim != 2 or s.shape != (x.shape[0],):
        raise DimensionError(f"scale_rows: scales {s.shape} do not fit {x.shape}")
    X, S = x.data, s.data
    return _result(X * S[:, None], (x, s), lambda g: (g * S[:, None], (g * X).sum(axis=1)))


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Single-channel 1-D cross-correlation over each row of ``x``.

    Stride 1, zero "same" padding, odd kernel width. ``bias`` is a
    one-element tensor added everywhere.
    """
    if x.ndim != 2 or kernel.ndim != 1 or kernel.shape[0] % 2 != 1 or bias.size != 1:
        raise DimensionError(
            f"conv1d: bad shapes x={x.shape} kernel={kernel.shape} bias={bias.shape}"
        )
    k = kernel.shape[0]
    half = k // 2
    X = x.data
    L = X.shape[1]
    padded = np.pad(X, ((0, 0), (half, half)))
    K = kernel.data
    out = np.full(X.shape, float(bias.data.reshape(-1)[0]))
    for j in range(k):
        out += K[j] * padded[:, j : j + L]
    bshape = bias.shape

    def back(g):
        gk = np.array([(g * padded[:, j : j + L]).sum() for j in range(k)])
        gpad = np.zeros_like(padded)
        for j in range(k):
            gpad[:, j : j + L] += K[j] * g
        return gpad[:, half : half + L], gk, np.full(bshape, g.sum())

    return _result(out, (x, kernel, bias), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w (+ b)`` for a batch of row vectors."""
    y = matmul(x, w)
    return add_bias(y, b) if b is not None else y


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._leaf:
        if not loss.requires_grad:
            raise ContractError("loss was not produced under an active tape")
        loss.grad = np.ones(loss.shape) if loss.grad is None else loss.grad + 1.0
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for entry in reversed(loss._tape.entries):
        g = grads.pop(id(entry.out), None)
        if g is None:
            continue
        for inp, gi in zip(entry.inputs, entry.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._leaf:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    errors: list[float] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors, default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` against central finite differences.

    ``f`` takes no arguments and rebuilds its scalar output from the current
    contents of ``params``. Relative errors use ``max(|a|, |n|, floor)`` as
    the denominator so that exact zeros compare cleanly.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    params = list(params)
    for p in params:
        p.grad = None
        p.requires_grad = True
    with Tape():
        out = f()
    if out.requires_grad:
        backward(out)
    report = GradCheckReport(tol=tol)
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros(p.shape)
        numeric = np.zeros(p.size)
        flat = p.data.reshape(-1)
        for i in range(p.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = _scalar(f())
            flat[i] = orig - step
            fm = _scalar(f())
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * step)
        err = relative_error(analytic.reshape(-1), numeric, floor)
        report.errors.append(float(err.max()) if err.size else 0.0)
    for p in params:
        p.grad = None
    return report


def _scalar(t: Tensor) -> float:
    v = float(t.data.reshape(-1)[0])
    if not np.isfinite(v):
        raise NumericError("function value is not finite")
    return v
