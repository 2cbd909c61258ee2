"""Reverse-mode differentiation over a closed set of array primitives.

A :class:`Tape` records each primitive applied to :class:`Var` operands together
with its vector-Jacobian product.  ``Tape.backward`` replays the record in
reverse.  Only the primitives needed by the networks, kinematics, projection
and robust losses in this package are provided.

All functions here also accept plain ndarrays, in which case they compute the
value without recording anything; model code is written once and run either
way.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Var:
    __slots__ = ("value", "tape", "idx")
    __array_priority__ = 100.0

    def __init__(self, value: np.ndarray, tape: "Tape", idx: int):
        self.value = value
        self.tape = tape
        self.idx = idx

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape}, idx={self.idx})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)


class Tape:
    """Record of one forward evaluation."""

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []
        self._grads: list[np.ndarray | None] | None = None

    def __len__(self) -> int:
        return len(self._parents)

    def clear(self) -> None:
        self._parents.clear()
        self._vjps.clear()
        self._grads = None

    def var(self, value) -> Var:
        """Register a differentiable input."""
        return self._push(np.asarray(value, dtype=np.float64), (), None)

    def _push(self, value, parents, vjp) -> Var:
        self._parents.append(parents)
        self._vjps.append(vjp)
        return Var(value, self, len(self._parents) - 1)

    def backward(self, out: Var, seed=None) -> None:
        if out.tape is not self:
            raise ValueError("output does not belong to this tape")
        grads: list[np.ndarray | None] = [None] * len(self._parents)
        grads[out.idx] = np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=np.float64)
        for i in range(out.idx, -1, -1):
            g = grads[i]
            vjp = self._vjps[i]
            if g is None or vjp is None:
                continue
            for p, gp in zip(self._parents[i], vjp(g)):
                if gp is None:
                    continue
                grads[p] = gp if grads[p] is None else grads[p] + gp
        self._grads = grads

    def grad(self, v: Var) -> np.ndarray:
        if self._grads is None:
            raise RuntimeError("backward() has not been run")
        g = self._grads[v.idx]
        return np.zeros_like(v.value) if g is None else g


def _val(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    shape = tuple(shape)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _record(value, operands: Sequence, vjp_per_operand: Sequence[Callable]):
    """Record ``value`` with one vjp closure per operand; constants are skipped."""
    tape = _tape_of(*operands)
    if tape is None:
        return value
    parents = []
    fns = []
    for x, fn in zip(operands, vjp_per_operand):
        if isinstance(x, Var):
            if x.tape is not tape:
                raise ValueError("operands come from different tapes")
            parents.append(x.idx)
            fns.append(fn)

    def vjp(g):
        return [fn(g) for fn in fns]

    return tape._push(value, tuple(parents), vjp)


def add(a, b):
    va, vb = _val(a), _val(b)
    out = va + vb
    return _record(out, (a, b), (lambda g: _unbroadcast(g, np.shape(va)), lambda g: _unbroadcast(g, np.shape(vb))))


def sub(a, b):
    va, vb = _val(a), _val(b)
    out = va - vb
    return _record(out, (a, b), (lambda g: _unbroadcast(g, np.shape(va)), lambda g: -_unbroadcast(g, np.shape(vb))))


def neg(a):
    return _record(-_val(a), (a,), (lambda g: -g,))


def mul(a, b):
    va, vb = _val(a), _val(b)
    out = va * vb
    return _record(
        out,
        (a, b),
        (lambda g: _unbroadcast(g * vb, np.shape(va)), lambda g: _unbroadcast(g * va, np.shape(vb))),
    )


def div(a, b):
    va, vb = _val(a), _val(b)
    out = va / vb
    return _record(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g / vb, np.shape(va)),
            lambda g: _unbroadcast(-g * va / (vb * vb), np.shape(vb)),
        ),
    )


def matmul(a, b):
    """Batched matrix product of arrays with ndim >= 2."""
    va, vb = _val(a), _val(b)
    out = va @ vb
    return _record(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g @ np.swapaxes(vb, -1, -2), va.shape),
            lambda g: _unbroadcast(np.swapaxes(va, -1, -2) @ g, vb.shape),
        ),
    )


def matvec(m, v):
    """``m[..., i, j] * v[..., j]`` summed over j, broadcasting leading dims."""
    vm, vv = _val(m), _val(v)
    out = np.einsum("...ij,...j->...i", vm, vv)
    return _record(
        out,
        (m, v),
        (
            lambda g: _unbroadcast(g[..., :, None] * vv[..., None, :], vm.shape),
            lambda g: _unbroadcast(np.einsum("...ij,...i->...j", vm, g), vv.shape),
        ),
    )


def square(a):
    va = _val(a)
    return _record(va * va, (a,), (lambda g: 2.0 * va * g,))


def exp(a):
    out = np.exp(_val(a))
    return _record(out, (a,), (lambda g: g * out,))


def silu(a):
    va = _val(a)
    s = 1.0 / (1.0 + np.exp(-va))
    out = va * s
    return _record(out, (a,), (lambda g: g * (s * (1.0 + va * (1.0 - s))),))


def sum(a, axis=None, keepdims: bool = False):  # noqa: A001 - mirrors numpy naming
    va = _val(a)
    out = np.sum(va, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, va.shape).copy()

    return _record(out, (a,), (back,))


def reshape(a, shape):
    va = _val(a)
    return _record(va.reshape(shape), (a,), (lambda g: g.reshape(va.shape),))


def swapaxes(a, ax1: int, ax2: int):
    va = _val(a)
    return _record(np.swapaxes(va, ax1, ax2), (a,), (lambda g: np.swapaxes(g, ax1, ax2),))


def getitem(a, key):
    va = _val(a)

    def back(g):
        out = np.zeros_like(va)
        np.add.at(out, key, g) if _fancy(key) else out.__setitem__(key, g)
        return out

    return _record(va[key], (a,), (back,))


def _fancy(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def concat(xs: Sequence, axis: int = -1):
    vals = [_val(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    fns = [(lambda g, i=i: np.split(g, bounds, axis=axis)[i]) for i in range(len(xs))]
    return _record(out, tuple(xs), fns)


def stack(xs: Sequence, axis: int = 0):
    vals = [_val(x) for x in xs]
    out = np.stack(vals, axis=axis)
    fns = [(lambda g, i=i: np.take(g, i, axis=axis)) for i in range(len(xs))]
    return _record(out, tuple(xs), fns)


def gm_rho(r2, scale: float):
    """Geman-McClure penalty on squared residual norms: s^2 r2 / (s^2 + r2)."""
    v = _val(r2)
    s2 = float(scale) ** 2
    den = s2 + v
    out = s2 * v / den
    return _record(out, (r2,), (lambda g: g * (s2 * s2) / (den * den),))


# Rodrigues coefficients and their derivatives, with series below this angle.
_SERIES_ANGLE = 1e-3


def _rodrigues_coeffs(theta2: np.ndarray):
    """Return A, B, dA/θ, dB/θ where R = I + A K + B K², K = skew(v)."""
    theta = np.sqrt(theta2)
    small = theta < _SERIES_ANGLE
    ts = np.where(small, 1.0, theta)
    sin, cos = np.sin(ts), np.cos(ts)
    half = np.sin(0.5 * ts)
    a = sin / ts
    b = 2.0 * half * half / (ts * ts)
    da = (ts * cos - sin) / ts**3
    db = (ts * sin - 4.0 * half * half) / ts**4
    t2, t4 = theta2, theta2 * theta2
    a = np.where(small, 1.0 - t2 / 6.0 + t4 / 120.0, a)
    b = np.where(small, 0.5 - t2 / 24.0 + t4 / 720.0, b)
    da = np.where(small, -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0, da)
    db = np.where(small, -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0, db)
    return a, b, da, db


def _skew(v: np.ndarray) -> np.ndarray:
    k = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    k[..., 0, 1], k[..., 0, 2] = -z, y
    k[..., 1, 0], k[..., 1, 2] = z, -x
    k[..., 2, 0], k[..., 2, 1] = -y, x
    return k


def rodrigues(v):
    """Axis-angle vectors (..., 3) to rotation matrices (..., 3, 3)."""
    vv = _val(v)
    theta2 = np.sum(vv * vv, axis=-1)
    a, b, da, db = _rodrigues_coeffs(theta2)
    k = _skew(vv)
    k2 = k @ k
    out = np.eye(3) + a[..., None, None] * k + b[..., None, None] * k2

    def back(g):
        g_k = np.stack(
            [g[..., 2, 1] - g[..., 1, 2], g[..., 0, 2] - g[..., 2, 0], g[..., 1, 0] - g[..., 0, 1]],
            axis=-1,
        )
        tr = np.trace(g, axis1=-2, axis2=-1)
        gs = g + np.swapaxes(g, -1, -2)
        g_k2 = np.einsum("...ij,...j->...i", gs, vv) - 2.0 * tr[..., None] * vv
        dot_k = np.sum(g * k, axis=(-2, -1))
        dot_k2 = np.sum(g * k2, axis=(-2, -1))
        radial = (da * dot_k + db * dot_k2)[..., None] * vv
        return a[..., None] * g_k + b[..., None] * g_k2 + radial

    return _record(out, (v,), (back,))
