"""Reverse-mode automatic differentiation over dense numpy arrays.

Values are plain ``numpy.ndarray`` objects (float64 unless float32 is
requested).  A :class:`Variable` wraps a value together with its gradient,
and every differentiable operation applied to a Variable that requires
gradients appends one record to the active :class:`Tape`.  Calling
:func:`backward` on a scalar walks the tape in exact reverse order.

Tapes are define-by-run and thread-local: each thread records onto its own
tape, and a tape is consumed by a single backward pass.  After that the next
recorded operation transparently starts a fresh tape.

Broadcasting is deliberately narrow.  Binary operations accept equal shapes,
or a 1-D bias vector against the last axis of the other operand.  Anything
else raises :class:`~implicit_sent.errors.ShapeError`.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError, TapeReuseError

Tensor = np.ndarray

_DEFAULT_DTYPE = np.float64
_local = threading.local()


def set_default_dtype(dtype) -> None:
    """Select float64 (default) or float32 for newly created Variables."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def as_tensor(data, dtype=None) -> Tensor:
    """Return ``data`` as a floating-point array of the requested dtype."""
    return np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)


class Variable:
    """A value on the autodiff graph.

    ``grad`` always has the shape of ``value``; it reads as zeros until a
    backward pass deposits something into it.  Gradients accumulate across
    fan-out and across backward passes, so call :meth:`zero_grad` between
    optimisation steps.
    """

    __slots__ = ("value", "_grad", "requires_grad", "tape", "name", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(value, Variable):
            value = value.value
        arr = np.asarray(value)
        if dtype is not None or not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(dtype or _DEFAULT_DTYPE)
        self.value = arr
        self._grad = None
        self.requires_grad = bool(requires_grad)
        self.tape = None
        self.name = name

    @property
    def grad(self) -> Tensor:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        g = np.asarray(g, dtype=self.value.dtype)
        if g.shape != self.value.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match value shape {self.value.shape}")
        self._grad = g

    def zero_grad(self) -> None:
        self._grad = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def dtype(self):
        return self.value.dtype

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float(self.value)

    def numpy(self) -> Tensor:
        return self.value

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Variable(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # Operator sugar; every operator routes through the checked functions below.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def _accumulate(var: Variable, g: Tensor) -> None:
    if var._grad is None:
        var._grad = np.array(g, dtype=var.value.dtype, copy=True)
    else:
        var._grad = var._grad + g


class Tape:
    """Ordered record of differentiable operations.

    Usable as a context manager to make it the active tape of the current
    thread; otherwise an implicit per-thread tape is used.
    """

    def __init__(self):
        self.records: list[tuple[Variable, tuple[Variable, ...], Callable]] = []
        self.consumed = False
        self._previous = None

    def __len__(self):
        return len(self.records)

    def __enter__(self):
        self._previous = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._previous
        self._previous = None
        return False

    def record(self, output: Variable, inputs: tuple, backward_fn: Callable) -> None:
        if self.consumed:
            raise TapeReuseError("cannot record onto a tape that already ran backward")
        output.tape = self
        self.records.append((output, inputs, backward_fn))

    def backward(self, loss: Variable) -> None:
        if self.consumed:
            raise TapeReuseError("tape was already consumed by a backward pass")
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise ContractError("loss was not recorded on this tape")
        self.consumed = True
        loss._grad = np.ones_like(loss.value)
        # Records after the loss cannot influence it.
        stop = next(i for i in range(len(self.records) - 1, -1, -1) if self.records[i][0] is loss)
        for out, inputs, fn in reversed(self.records[: stop + 1]):
            g = out._grad
            if g is None:
                continue
            in_grads = fn(g)
            for var, gi in zip(inputs, in_grads):
                if gi is not None and var.requires_grad:
                    _accumulate(var, gi)
        self.records = []


def current_tape() -> Tape:
    """Return the tape new operations record onto in this thread."""
    tape = getattr(_local, "tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _local.tape = tape
    return tape


def _grad_enabled() -> bool:
    return not getattr(_local, "no_grad", False)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything on a tape."""
    prev = getattr(_local, "no_grad", False)
    _local.no_grad = True
    try:
        yield
    finally:
        _local.no_grad = prev


def backward(loss: Variable) -> None:
    """Populate ``grad`` for every Variable that ``loss`` depends on."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        # Constant loss: nothing upstream depends on it.
        loss._grad = np.ones_like(loss.value)
        return
    loss.tape.backward(loss)


def _var(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(x)


def _result(value: Tensor, inputs: Sequence[Variable], backward_fn: Callable) -> Variable:
    needs = _grad_enabled() and any(v.requires_grad for v in inputs)
    out = Variable(value, requires_grad=needs)
    if needs:
        tape = current_tape()
        for v in inputs:
            if v.tape is not None and v.tape.consumed and v.requires_grad and v.tape is not tape:
                raise TapeReuseError("operand belongs to a tape that was already consumed")
        tape.record(out, tuple(inputs), backward_fn)
    return out


# ---------------------------------------------------------------------------
# Linear algebra and elementwise arithmetic
# ---------------------------------------------------------------------------


def matmul(a, b) -> Variable:
    """Matrix product of ``[m, k]`` and ``[k, n]`` operands."""
    a, b = _var(a), _var(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.value, b.value

    def back(g):
        return g @ bv.T, av.T @ g

    return _result(av @ bv, (a, b), back)


def _binary_layout(a: Variable, b: Variable, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "bias_b"
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return "bias_a"
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _unbias(g: Tensor, layout: str, which: str) -> Tensor:
    if layout == f"bias_{which}":
        return g.reshape(-1, g.shape[-1]).sum(axis=0)
    return g


def add(a, b) -> Variable:
    a, b = _var(a), _var(b)
    layout = _binary_layout(a, b, "add")

    def back(g):
        return _unbias(g, layout, "a"), _unbias(g, layout, "b")

    return _result(a.value + b.value, (a, b), back)


def sub(a, b) -> Variable:
    a, b = _var(a), _var(b)
    layout = _binary_layout(a, b, "sub")

    def back(g):
        return _unbias(g, layout, "a"), -_unbias(g, layout, "b")

    return _result(a.value - b.value, (a, b), back)


def mul(a, b) -> Variable:
    a, b = _var(a), _var(b)
    layout = _binary_layout(a, b, "mul")
    av, bv = a.value, b.value

    def back(g):
        return _unbias(g * bv, layout, "a"), _unbias(g * av, layout, "b")

    return _result(av * bv, (a, b), back)


def scale(a, c: float) -> Variable:
    a = _var(a)
    c = float(c)
    return _result(a.value * c, (a,), lambda g: (g * c,))


def tanh(x) -> Variable:
    x = _var(x)
    y = np.tanh(x.value)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Variable:
    x = _var(x)
    v = x.value
    # Split by sign so exp never overflows.
    e = np.exp(-np.abs(v))
    y = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x) -> Variable:
    x = _var(x)
    active = x.value > 0
    return _result(np.where(active, x.value, 0.0).astype(x.dtype, copy=False), (x,), lambda g: (g * active,))


def exp(x) -> Variable:
    x = _var(x)
    y = np.exp(x.value)
    return _result(y, (x,), lambda g: (g * y,))


def log(x, floor: float = 0.0) -> Variable:
    """Natural log of ``max(x, floor)``; clamped entries get zero gradient."""
    x = _var(x)
    v = x.value
    if floor > 0:
        live = v >= floor
        safe = np.where(live, v, floor)
    else:
        live = None
        safe = v
    y = np.log(safe)

    def back(g):
        out = g / safe
        return ((out * live) if live is not None else out,)

    return _result(y, (x,), back)


_UNARY = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu, "exp": exp}
_BINARY = {"add": add, "mul": mul}


def elementwise(op: str, *operands, factor: float | None = None) -> Variable:
    """Dispatch one of tanh, sigmoid, relu, exp, add, mul or scale by name."""
    if op in _UNARY:
        (x,) = operands
        return _UNARY[op](x)
    if op in _BINARY:
        a, b = operands
        return _BINARY[op](a, b)
    if op == "scale":
        (x,) = operands
        return scale(x, factor)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# Softmax and reductions
# ---------------------------------------------------------------------------


def softmax_rows(x) -> Variable:
    """Softmax along the last axis with max subtraction.

    ``-inf`` is a mask value and yields exactly zero probability.  A row that
    is entirely ``-inf`` is rejected.
    """
    x = _var(x)
    v = x.value
    if v.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    if np.isnan(v).any():
        raise NumericError("softmax input contains NaN")
    m = v.max(axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise NumericError("softmax row has no finite entry")
    e = np.exp(v - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), back)


def _check_axis(x: Variable, axis) -> None:
    if axis is not None and not (-x.ndim <= axis < x.ndim):
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")


def sum(x, axis: int | None = None) -> Variable:  # noqa: A001 - mirrors numpy naming
    x = _var(x)
    _check_axis(x, axis)
    shape = x.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.asarray(x.value.sum(axis=axis)), (x,), back)


def mean(x, axis: int | None = None) -> Variable:
    x = _var(x)
    _check_axis(x, axis)
    n = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def max(x, axis: int) -> Variable:  # noqa: A001
    """Maximum over ``axis``; ties route the gradient to the first index."""
    x = _var(x)
    _check_axis(x, axis)
    if x.shape[axis] == 0:
        raise ShapeError("max over an empty axis")
    arg = np.argmax(x.value, axis=axis)
    out = np.take_along_axis(x.value, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
    shape = x.shape

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _result(out, (x,), back)


def reduce(op: str, x, axis: int | None = None) -> Variable:
    """Dispatch ``sum``, ``mean`` or ``max_over_axis``."""
    if op == "sum":
        return sum(x, axis)
    if op == "mean":
        return mean(x, axis)
    if op == "max_over_axis":
        return max(x, axis)
    raise ValueError(f"unknown reduction {op!r}")


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def reshape(x, shape: Sequence[int]) -> Variable:
    x = _var(x)
    old = x.shape
    try:
        y = x.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _result(y, (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence, axis: int = -1) -> Variable:
    xs = [_var(x) for x in xs]
    try:
        y = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[x.shape for x in xs]}") from exc
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(y, tuple(xs), back)


def stack(xs: Sequence, axis: int = 0) -> Variable:
    xs = [_var(x) for x in xs]
    if len({x.shape for x in xs}) != 1:
        raise ShapeError(f"cannot stack shapes {[x.shape for x in xs]}")
    y = np.stack([x.value for x in xs], axis=axis)

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(y, tuple(xs), back)


def slice_axis(x, axis: int, start: int, stop: int) -> Variable:
    """Contiguous slice ``[start, stop)`` along one axis."""
    x = _var(x)
    _check_axis(x, axis)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[idx] = g
        return (gx,)

    return _result(x.value[idx], (x,), back)


def take(x, i: int, axis: int) -> Variable:
    """Select one index along ``axis``, dropping that axis."""
    x = _var(x)
    _check_axis(x, axis)
    shape = x.shape
    idx = [slice(None)] * x.ndim
    idx[axis] = i
    idx = tuple(idx)

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[idx] = g
        return (gx,)

    return _result(x.value[idx], (x,), back)


def index(x, key) -> Variable:
    """Basic numpy indexing (ints and slices) with a scatter backward."""
    x = _var(x)
    shape = x.shape

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, key, g)
        return (gx,)

    return _result(np.asarray(x.value[key]), (x,), back)


def where(cond, a, b) -> Variable:
    """Select ``a`` where ``cond`` is true, else ``b``.

    ``cond`` is a constant boolean array whose shape is a leading prefix of
    the operand shape; it is extended over the trailing axes.
    """
    a, b = _var(a), _var(b)
    if a.shape != b.shape:
        raise ShapeError(f"where: operand shapes {a.shape} and {b.shape} differ")
    cond = np.asarray(cond, dtype=bool)
    if cond.shape != a.shape[: cond.ndim]:
        raise ShapeError(f"where: condition shape {cond.shape} is not a prefix of {a.shape}")
    c = cond.reshape(cond.shape + (1,) * (a.ndim - cond.ndim))
    y = np.where(c, a.value, b.value)

    def back(g):
        return g * c, g * ~c

    return _result(y, (a, b), back)


def pad_time(x, left: int, right: int) -> Variable:
    """Zero-pad axis 1 of a ``[batch, length, channels]`` tensor."""
    x = _var(x)
    if x.ndim != 3:
        raise ShapeError(f"pad_time expects rank 3, got {x.shape}")
    L = x.shape[1]
    y = np.pad(x.value, ((0, 0), (left, right), (0, 0)))
    return _result(y, (x,), lambda g: (g[:, left : left + L, :],))


def unfold(x, width: int) -> Variable:
    """Sliding windows over time.

    ``[B, L, C]`` becomes ``[B, L - width + 1, width * C]`` where window
    position ``j`` occupies columns ``j*C:(j+1)*C``.
    """
    x = _var(x)
    if x.ndim != 3:
        raise ShapeError(f"unfold expects rank 3, got {x.shape}")
    B, L, C = x.shape
    if width < 1 or L < width:
        raise ShapeError(f"sequence length {L} shorter than window {width}")
    n = L - width + 1
    y = np.concatenate([x.value[:, j : j + n, :] for j in range(width)], axis=2)

    def back(g):
        gx = np.zeros((B, L, C), dtype=g.dtype)
        for j in range(width):
            gx[:, j : j + n, :] += g[:, :, j * C : (j + 1) * C]
        return (gx,)

    return _result(y, (x,), back)


def permute_time(x, order: np.ndarray) -> Variable:
    """Per-row reordering along axis 1: ``out[b, t] = x[b, order[b, t]]``."""
    x = _var(x)
    order = np.asarray(order, dtype=np.intp)
    if order.shape != x.shape[:2]:
        raise ShapeError(f"permutation shape {order.shape} does not match {x.shape[:2]}")
    rows = np.arange(x.shape[0])[:, None]
    y = x.value[rows, order]
    shape = x.shape

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, (rows, order), g)
        return (gx,)

    return _result(y, (x,), back)


def gather_rows(table, ids, frozen_row: int | None = None) -> Variable:
    """Embedding lookup ``table[ids]``; ``frozen_row`` never receives gradient."""
    table = _var(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("token ids must be integers")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range [0, {vocab})")
    shape = table.shape

    def back(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        if frozen_row is not None:
            gt[frozen_row] = 0.0
        return (gt,)

    return _result(table.value[ids], (table,), back)


def weighted_sum(weights, x) -> Variable:
    """Per-row weighted sum over time: ``[B, L]`` x ``[B, L, D]`` -> ``[B, D]``."""
    w, x = _var(weights), _var(x)
    if w.ndim != 2 or x.ndim != 3 or w.shape != x.shape[:2]:
        raise ShapeError(f"weighted_sum shape mismatch: {w.shape} and {x.shape}")
    wv, xv = w.value, x.value
    y = np.einsum("bl,bld->bd", wv, xv)

    def back(g):
        return np.einsum("bd,bld->bl", g, xv), wv[:, :, None] * g[:, None, :]

    return _result(y, (w, x), back)


def pick(x, indices) -> Variable:
    """Select ``x[i, indices[i]]`` from a ``[B, C]`` matrix."""
    x = _var(x)
    indices = np.asarray(indices, dtype=np.intp)
    if x.ndim != 2 or indices.shape != (x.shape[0],):
        raise ShapeError(f"pick shape mismatch: {x.shape} and {indices.shape}")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[rows, indices] = g
        return (gx,)

    return _result(x.value[rows, indices], (x,), back)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple | None
    checked: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def _param_names(params) -> list[tuple[str, Variable]]:
    if isinstance(params, dict):
        return list(params.items())
    return [(p.name or f"param{i}", p) for i, p in enumerate(params)]


def grad_check_detail(
    f: Callable[[], Variable],
    params,
    h: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckResult:
    """Compare analytic gradients of ``f`` with central differences.

    ``f`` takes no arguments and returns a scalar Variable computed from
    ``params`` (a list of Variables or a name -> Variable mapping).  When
    ``max_entries`` is set, at most that many coordinates per parameter are
    probed, chosen with a seeded generator.
    """
    named = _param_names(params)
    for _, p in named:
        p.zero_grad()
    with Tape():
        loss = f()
        backward(loss)
    analytic = {name: p.grad.copy() for name, p in named}

    rng = np.random.default_rng(seed)
    worst, worst_name, worst_idx, checked = 0.0, None, None, 0
    with no_grad():
        for name, p in named:
            flat = p.value.reshape(-1)
            if not np.shares_memory(flat, p.value):
                raise ContractError(f"parameter {name} is not contiguous")
            n = flat.size
            if max_entries is not None and n > max_entries:
                coords = rng.choice(n, size=max_entries, replace=False)
            else:
                coords = range(n)
            a_flat = analytic[name].reshape(-1)
            for k in coords:
                orig = flat[k]
                flat[k] = orig + h
                fp = float(f().value)
                flat[k] = orig - h
                fm = float(f().value)
                flat[k] = orig
                num = (fp - fm) / (2.0 * h)
                ana = float(a_flat[k])
                rel = abs(ana - num) / np.max([abs(ana), abs(num), 1e-8])
                if np.isnan(rel):
                    rel = np.inf
                checked += 1
                if rel > worst:
                    worst = float(rel)
                    worst_name = name
                    worst_idx = np.unravel_index(k, p.shape)
    return GradCheckResult(worst, worst_name, worst_idx, checked)


def grad_check(f: Callable[[], Variable], params, h: float = 1e-5, max_entries: int | None = None, seed: int = 0) -> float:
    """Maximum relative error between analytic and central-difference gradients."""
    return grad_check_detail(f, params, h=h, max_entries=max_entries, seed=seed).max_rel_error

