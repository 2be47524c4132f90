"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op computes its forward value with numpy. When a :class:`Tape` is
active on the current thread and at least one input requires a gradient,
the op appends a node to the tape; :meth:`Tape.backward` walks the nodes in
reverse recording order.

Broadcasting follows numpy for ``add``/``sub``/``mul`` (gradients are summed
back over broadcast axes) so a bias row can be added to a batch. ``matmul``
accepts batched operands with the usual ``np.matmul`` semantics.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "GradMap",
    "DimensionError",
    "GradCheckError",
    "GradCheckResult",
    "as_tensor",
    "parameter",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "elementwise",
    "tanh",
    "sigmoid",
    "activation",
    "softmax",
    "log_softmax",
    "concat",
    "stack",
    "reshape",
    "transpose",
    "getitem",
    "take_columns",
    "pick",
    "tsum",
    "backward",
    "grad_check",
]

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class GradCheckError(ArithmeticError):
    """A finite-difference probe produced a non-finite objective."""

    def __init__(self, message: str, param: str, index: tuple[int, ...]):
        super().__init__(message)
        self.param = param
        self.index = index


_local = threading.local()


def _dtype():
    return getattr(_local, "dtype", DTYPE)


@contextmanager
def _precision(dtype):
    """Build tensors in ``dtype`` on this thread (finite-difference probes)."""
    prev = _dtype()
    _local.dtype = dtype
    try:
        yield
    finally:
        _local.dtype = prev


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A numpy array plus the bookkeeping needed to sit on a tape."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_dtype())
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    """A leaf tensor that always participates in differentiation."""
    return Tensor(np.array(data, dtype=_dtype()), requires_grad=True, name=name)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradMap(dict):
    """Tensor -> gradient array; tensors never reached read as zeros."""

    def __missing__(self, key: Tensor) -> np.ndarray:
        return np.zeros_like(key.data)


@dataclass
class Tape:
    """Records ops executed on this thread while the tape is entered."""

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, out: Tensor, parents: tuple[Tensor, ...], fn) -> None:
        self.nodes.append(_Node(out, parents, fn))

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> GradMap:
        """Gradients of the scalar ``loss`` for every tensor it depends on.

        If ``wrt`` is given the result holds exactly those tensors, with
        zeros for any that ``loss`` does not reach.
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owners: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    owners[key] = parent
        out = GradMap()
        if wrt is None:
            for key, g in grads.items():
                out[owners[key]] = g
        else:
            for t in wrt:
                g = grads.get(id(t))
                out[t] = np.zeros_like(t.data) if g is None else g
        return out


def backward(loss: Tensor, tape: Tape, wrt: Iterable[Tensor] | None = None) -> GradMap:
    return tape.backward(loss, wrt)


def _emit(data: np.ndarray, parents: tuple[Tensor, ...], fn) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = True
        out.name = None
        tape.record(out, parents, fn)
        return out
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.name = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not match") from None


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _emit(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _emit(a.data * s, (a,), lambda g: (g * s,))


def elementwise(kind: str, a, b) -> Tensor:
    """Dispatch by name: ``add``, ``sub``, ``mul`` or ``scale`` (b a float)."""
    if kind == "scale":
        return scale(a, b)
    try:
        op = {"add": add, "sub": sub, "mul": mul}[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return op(a, b)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise DimensionError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    a2 = ad[None, :] if ad.ndim == 1 else ad
    b2 = bd[:, None] if bd.ndim == 1 else bd
    if a2.shape[-1] != b2.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    try:
        out2 = np.matmul(a2, b2)
    except ValueError as err:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape}: {err}") from None
    out = out2
    if ad.ndim == 1:
        out = out.squeeze(-2)
    if bd.ndim == 1:
        out = out.squeeze(-1)
    out2_shape = out2.shape

    def fn(g):
        g2 = g.reshape(out2_shape)
        ga = _unbroadcast(np.matmul(g2, np.swapaxes(b2, -1, -2)), a2.shape).reshape(ad.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g2), b2.shape).reshape(bd.shape)
        return ga, gb

    return _emit(out, (a, b), fn)


# --------------------------------------------------------------- nonlinearity


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _emit(y, (x,), lambda g: (g * (1.0 - y * y),))


def _expit(z: np.ndarray) -> np.ndarray:
    # exp(-log(1 + e^-z)) stays in (0, 1) without overflow for large |z|
    return np.exp(-np.logaddexp(0.0, -z))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _expit(x.data)
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def activation(kind: str, x) -> Tensor:
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.data.size == 0 or x.data.shape[axis] == 0:
        raise ValueError("softmax of an empty tensor")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _emit(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.data.size == 0 or x.data.shape[axis] == 0:
        raise ValueError("log_softmax of an empty tensor")
    m = x.data.max(axis=axis, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def fn(g):
        p = np.exp(y)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _emit(y, (x,), fn)


# ------------------------------------------------------------------ structure


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    if not parts:
        raise ValueError("concat needs at least one part")
    parts = tuple(as_tensor(p) for p in parts)
    if len(parts) == 1:
        return parts[0]
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as err:
        raise DimensionError(f"concat: {[p.shape for p in parts]}: {err}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _emit(data, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(parts: Sequence, axis: int = 0) -> Tensor:
    if not parts:
        raise ValueError("stack needs at least one part")
    parts = tuple(as_tensor(p) for p in parts)
    try:
        data = np.stack([p.data for p in parts], axis=axis)
    except ValueError as err:
        raise DimensionError(f"stack: {[p.shape for p in parts]}: {err}") from None
    n = len(parts)
    return _emit(
        data,
        parts,
        lambda g: tuple(np.squeeze(s, axis=axis) for s in np.split(g, n, axis=axis)),
    )


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x) -> Tensor:
    """Swap the last two axes (plain transpose for a matrix)."""
    x = as_tensor(x)
    if x.ndim < 2:
        return x
    return _emit(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    data = x.data[index]
    basic = _is_basic(index)

    def fn(g):
        z = np.zeros_like(x.data)
        if basic:
            z[index] = g
        else:
            np.add.at(z, index, g)
        return (z,)

    return _emit(np.array(data, dtype=_dtype()), (x,), fn)


def take_columns(table, ids) -> Tensor:
    """Columns ``ids`` of a matrix, one row per id: ``[len(ids), rows]``.

    A scalar id gives a vector. Gradients land only in the selected columns.
    """
    table = as_tensor(table)
    ids = np.asarray(ids)
    ncol = table.shape[1]
    if ids.size and (ids.min() < 0 or ids.max() >= ncol):
        raise IndexError(f"column id out of range for table with {ncol} columns: {ids}")
    data = table.data[:, ids].T.copy()

    def fn(g):
        z = np.zeros_like(table.data)
        if ids.ndim == 0:
            z[:, int(ids)] += g
        else:
            np.add.at(z.T, ids, g)
        return (z,)

    return _emit(data, (table,), fn)


def pick(x, ids) -> Tensor:
    """``out[..., ] = x[..., ids[...]]`` along the last axis."""
    x = as_tensor(x)
    ids = np.asarray(ids, dtype=np.intp)
    if ids.shape != x.shape[:-1]:
        raise DimensionError(f"pick: ids shape {ids.shape} vs tensor shape {x.shape}")
    data = np.take_along_axis(x.data, ids[..., None], axis=-1)[..., 0]

    def fn(g):
        z = np.zeros_like(x.data)
        np.put_along_axis(z, ids[..., None], g[..., None], axis=-1)
        return (z,)

    return _emit(data, (x,), fn)


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    data = x.data.sum(axis=axis)

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit(np.asarray(data, dtype=_dtype()), (x,), fn)


# ----------------------------------------------------------- gradient check


@dataclass(frozen=True)
class GradCheckResult:
    max_error: float
    param: str | None
    index: tuple[int, ...] | None

    def __float__(self) -> float:
        return self.max_error


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor],
    eps: float = 1e-5,
    perturb_grad: Callable[[str, np.ndarray], np.ndarray] | None = None,
    probe_dtype=np.longdouble,
) -> GradCheckResult:
    """Compare tape gradients of ``f()`` with central differences.

    ``f`` closes over ``params`` and is re-evaluated with each coordinate
    nudged by ``±eps``. The error per coordinate is
    ``|a - n| / max(1e-8, |a| + |n|)``; the worst one is reported.
    ``perturb_grad`` lets tests corrupt the analytic gradient on purpose.

    The probes run in ``probe_dtype`` (extended precision where the
    platform has it). In float64 a loss near 10 carries about 2e-15 of
    rounding, which after dividing by ``2 * eps`` swamps any gradient
    coordinate below roughly 1e-6; the analytic side stays float64.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    if not isinstance(params, Mapping):
        params = {(p.name or f"param{i}"): p for i, p in enumerate(params)}
    with Tape() as tape:
        loss = f()
    grads = tape.backward(loss, params.values())

    def value():
        return np.asarray(f().data).reshape(-1)[0]

    saved = {name: p.data for name, p in params.items()}
    worst = GradCheckResult(0.0, None, None)
    try:
        with _precision(probe_dtype):
            for p in params.values():
                p.data = p.data.astype(probe_dtype)
            for name, p in params.items():
                analytic = grads[p]
                if perturb_grad is not None:
                    analytic = perturb_grad(name, analytic)
                flat = p.data.reshape(-1)
                ga = analytic.reshape(-1)
                for j in range(flat.size):
                    orig = flat[j]
                    flat[j] = orig + eps
                    fp = value()
                    flat[j] = orig - eps
                    fm = value()
                    flat[j] = orig
                    idx = np.unravel_index(j, p.shape)
                    if not (np.isfinite(fp) and np.isfinite(fm)):
                        raise GradCheckError(f"non-finite objective probing {name}{list(idx)}", name, idx)
                    numeric = float((fp - fm) / (2 * probe_dtype(eps)))
                    a = float(ga[j])
                    err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                    if err > worst.max_error:
                        worst = GradCheckResult(float(err), name, tuple(int(i) for i in idx))
    finally:
        for name, p in params.items():
            p.data = saved[name]
    return worst
