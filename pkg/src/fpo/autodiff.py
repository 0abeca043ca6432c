"""Small reverse-mode autodiff over dense float64 arrays.

Only what MLP policies and their losses need: elementwise arithmetic with
numpy broadcasting, matmul, a handful of activations, reductions, slicing
and concatenation.  Recording happens on an explicit :class:`Tape`::

    with Tape() as tape:
        loss = (mlp.forward(theta, x) ** 2).mean()
    (g,) = tape.gradient(loss, [theta])

Nothing is recorded outside a tape, so rollouts pay no bookkeeping cost.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """A tensor op produced NaN or Inf."""


class GraphError(RuntimeError):
    """Backward was requested on something the active tape never saw."""


_ACTIVE: list["Tape"] = []


def _check(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")
    return arr


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "requires_grad")

    # make ndarray <op> Tensor dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = _check(arr, "tensor construction")
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records ops on grad-requiring tensors while active.

    A tape is single use: gradients are read with :meth:`gradient` and the
    tape is then discarded, so graphs never outlive an optimizer step.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple, Callable]] = []
        self._seen: set[int] = set()

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def _record(self, out: Tensor, parents: tuple, vjp: Callable) -> None:
        self._nodes.append((out, parents, vjp))
        self._seen.add(id(out))

    def gradient(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        if loss.data.size != 1:
            raise GraphError(f"loss must be a scalar, got shape {loss.shape}")
        wrt_ids = {id(t) for t in wrt}
        if id(loss) not in self._seen and id(loss) not in wrt_ids:
            if loss.requires_grad:
                raise GraphError("loss was not recorded on this tape")
            # constant loss: gradient is identically zero
            return [np.zeros_like(t.data) for t in wrt]
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, vjp in reversed(self._nodes):
            g = grads.pop(id(out), None) if id(out) not in wrt_ids else grads.get(id(out))
            if g is None:
                continue
            for parent, pg in zip(parents, vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out = []
        for t in wrt:
            g = grads.get(id(t))
            out.append(np.zeros_like(t.data) if g is None else _check(np.asarray(g), "backward"))
        return out


def _make(data: np.ndarray, parents: tuple, vjp: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _check(data, op)
    # outside a tape the result still carries requires_grad so misuse is detectable
    out.requires_grad = any(p.requires_grad for p in parents)
    if _ACTIVE and out.requires_grad:
        _ACTIVE[-1]._record(out, parents, vjp)
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)), "div")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2:
        raise ValueError("matmul expects 2-d operands")
    if ad.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul shape mismatch {ad.shape} @ {bd.shape}")
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if p == 2:
        return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")
    return _make(ad ** p, (a,), lambda g: (p * ad ** (p - 1) * g,), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def swish(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    s = _sigmoid(ad)
    return _make(ad * s, (a,), lambda g: (g * (s + ad * s * (1.0 - s)),), "swish")


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), vjp, "sum")


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        if isinstance(idx, slice):
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.asarray(a.data[idx]), (a,), vjp, "getitem")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, vjp, "concat")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside ``[lo, hi]`` (straight PPO semantics)."""
    a = as_tensor(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _make(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clip")


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    pick_a = ad <= bd
    return _make(np.minimum(ad, bd), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, ad.shape),
                            _unbroadcast(g * ~pick_a, bd.shape)), "minimum")


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    pick_a = ad >= bd
    return _make(np.maximum(ad, bd), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, ad.shape),
                            _unbroadcast(g * ~pick_a, bd.shape)), "maximum")


def backward(loss: Tensor, tape: Tape, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Functional spelling of :meth:`Tape.gradient`."""
    return tape.gradient(loss, wrt)
