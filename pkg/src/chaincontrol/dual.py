"""Nested forward-mode differentiation with tagged dual numbers.

A :class:`Dual` carries a primal part and a tangent part, each of which is an
ndarray or another :class:`Dual`.  Every call to :func:`jvp` creates a fresh tag,
and the tag with the largest value is always the outermost layer.  Binary
operations split both operands at the larger tag, which keeps perturbations
from different nesting levels apart.

Numpy ufuncs dispatch through ``__array_ufunc__``, so model code written with
``np.exp``, ``np.log1p`` and friends differentiates without modification.
"""
from __future__ import annotations

import itertools
from typing import Any, Callable

import numpy as np

_tags = itertools.count(1)


class Dual:
    __slots__ = ("val", "eps", "tag")
    __array_priority__ = 1000

    def __init__(self, val: Any, eps: Any, tag: int):
        self.val = val
        self.eps = eps
        self.tag = tag

    def __repr__(self) -> str:
        return f"Dual(tag={self.tag}, val={self.val!r}, eps={self.eps!r})"

    @property
    def shape(self) -> tuple[int, ...]:
        return np.shape(primal(self))

    @property
    def ndim(self) -> int:
        return len(self.shape)

    def __len__(self) -> int:
        return self.shape[0]

    def __getitem__(self, idx) -> "Dual":
        return Dual(self.val[idx], self.eps[idx], self.tag)

    @property
    def T(self) -> "Dual":
        return Dual(_transpose(self.val), _transpose(self.eps), self.tag)

    def sum(self, axis=None) -> "Dual":
        return Dual(_sum(self.val, axis), _sum(self.eps, axis), self.tag)

    # arithmetic routes through the ufunc machinery
    def __add__(self, other):
        return np.add(self, other)

    def __radd__(self, other):
        return np.add(other, self)

    def __sub__(self, other):
        return np.subtract(self, other)

    def __rsub__(self, other):
        return np.subtract(other, self)

    def __mul__(self, other):
        return np.multiply(self, other)

    def __rmul__(self, other):
        return np.multiply(other, self)

    def __truediv__(self, other):
        return np.true_divide(self, other)

    def __rtruediv__(self, other):
        return np.true_divide(other, self)

    def __pow__(self, other):
        return np.power(self, other)

    def __neg__(self):
        return np.negative(self)

    def __pos__(self):
        return self

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs.get("out") is not None:
            return NotImplemented
        rule = _RULES.get(ufunc)
        if rule is None:
            return NotImplemented
        tag = max(x.tag for x in inputs if isinstance(x, Dual))
        parts = [_split(x, tag) for x in inputs]
        return rule(tag, *parts)


def _transpose(x):
    return x.T


def _sum(x, axis):
    return x.sum(axis=axis)


def _split(x, tag: int):
    """Primal and tangent of ``x`` with respect to ``tag`` (tangent None if absent)."""
    if isinstance(x, Dual) and x.tag == tag:
        return x.val, x.eps
    return x, None


def _add_t(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _mk(tag, val, eps):
    if eps is None:
        return val
    return Dual(val, eps, tag)


def _r_add(tag, a, b):
    return _mk(tag, a[0] + b[0], _add_t(a[1], b[1]))


def _r_sub(tag, a, b):
    neg_b = None if b[1] is None else -b[1]
    return _mk(tag, a[0] - b[0], _add_t(a[1], neg_b))


def _r_mul(tag, a, b):
    ta = None if a[1] is None else a[1] * b[0]
    tb = None if b[1] is None else a[0] * b[1]
    return _mk(tag, a[0] * b[0], _add_t(ta, tb))


def _r_div(tag, a, b):
    out = a[0] / b[0]
    ta = None if a[1] is None else a[1] / b[0]
    tb = None if b[1] is None else -(out * b[1]) / b[0]
    return _mk(tag, out, _add_t(ta, tb))


def _r_neg(tag, a):
    return _mk(tag, -a[0], -a[1])


def _r_power(tag, a, b):
    if b[1] is not None:
        raise TypeError("Dual exponents are not supported")
    p = b[0]
    # y**0 is constant; differentiating it as 0 * y**-1 would give nan at y = 0
    if np.ndim(p) == 0 and p == 0:
        return _mk(tag, a[0] ** 0, 0.0 * a[1])
    return _mk(tag, a[0] ** p, p * a[0] ** (p - 1) * a[1])


def _unary(fn, dfn):
    def rule(tag, a):
        return _mk(tag, fn(a[0]), dfn(a[0]) * a[1])

    return rule


def _r_exp(tag, a):
    e = np.exp(a[0])
    return _mk(tag, e, e * a[1])


def _r_tanh(tag, a):
    th = np.tanh(a[0])
    return _mk(tag, th, (1.0 - th * th) * a[1])


def _r_sqrt(tag, a):
    s = np.sqrt(a[0])
    return _mk(tag, s, a[1] / (2.0 * s))


def _r_logaddexp(tag, a, b):
    out = np.logaddexp(a[0], b[0])
    ta = None if a[1] is None else np.exp(a[0] - out) * a[1]
    tb = None if b[1] is None else np.exp(b[0] - out) * b[1]
    return _mk(tag, out, _add_t(ta, tb))


def _r_maximum(tag, a, b):
    mask = primal(a[0]) >= primal(b[0])
    out = where(mask, a[0], b[0])
    za = zeros_like(primal(out)) if a[1] is None else a[1]
    zb = zeros_like(primal(out)) if b[1] is None else b[1]
    if a[1] is None and b[1] is None:
        return out
    return Dual(out, where(mask, za, zb), tag)


_RULES: dict[Any, Callable] = {
    np.add: _r_add,
    np.subtract: _r_sub,
    np.multiply: _r_mul,
    np.true_divide: _r_div,
    np.negative: _r_neg,
    np.power: _r_power,
    np.exp: _r_exp,
    np.expm1: lambda tag, a: _mk(tag, np.expm1(a[0]), np.exp(a[0]) * a[1]),
    np.log: _unary(np.log, lambda x: 1.0 / x),
    np.log1p: _unary(np.log1p, lambda x: 1.0 / (1.0 + x)),
    np.sin: _unary(np.sin, np.cos),
    np.cos: _unary(np.cos, lambda x: -np.sin(x)),
    np.tanh: _r_tanh,
    np.sqrt: _r_sqrt,
    np.square: lambda tag, a: _mk(tag, a[0] * a[0], 2.0 * a[0] * a[1]),
    np.logaddexp: _r_logaddexp,
    np.maximum: _r_maximum,
}


# ---------------------------------------------------------------------------
# structural helpers usable on both ndarrays and duals


def primal(x):
    """Strip every dual layer."""
    while isinstance(x, Dual):
        x = x.val
    return x


def zeros_like(x):
    return np.zeros(np.shape(primal(x)))


def where(mask, a, b):
    if not isinstance(a, Dual) and not isinstance(b, Dual):
        return np.where(mask, a, b)
    tag = max(x.tag for x in (a, b) if isinstance(x, Dual))
    av, at = _split(a, tag)
    bv, bt = _split(b, tag)
    val = where(mask, av, bv)
    at = zeros_like(av) if at is None else at
    bt = zeros_like(bv) if bt is None else bt
    return Dual(val, where(mask, at, bt), tag)


def concatenate(parts, axis: int = 0):
    """``np.concatenate`` that accepts a mix of ndarrays and duals."""
    duals = [x for x in parts if isinstance(x, Dual)]
    if not duals:
        return np.concatenate([np.asarray(x, dtype=float) for x in parts], axis=axis)
    tag = max(x.tag for x in duals)
    vals, tans = [], []
    for x in parts:
        v, t = _split(x, tag)
        vals.append(v)
        tans.append(zeros_like(v) if t is None else t)
    return Dual(concatenate(vals, axis), concatenate(tans, axis), tag)


def stack(parts, axis: int = 0):
    expanded = [expand_dims(x, axis) for x in parts]
    return concatenate(expanded, axis=axis)


def expand_dims(x, axis: int):
    if isinstance(x, Dual):
        return Dual(expand_dims(x.val, axis), expand_dims(x.eps, axis), x.tag)
    return np.expand_dims(np.asarray(x, dtype=float), axis)


def broadcast_to(x, shape):
    if isinstance(x, Dual):
        return Dual(broadcast_to(x.val, shape), broadcast_to(x.eps, shape), x.tag)
    return np.broadcast_to(np.asarray(x, dtype=float), shape)


def contract(a, b):
    """Sum over the leading axis of ``a * b`` (a batched dot product)."""
    return (a * b).sum(axis=0)


# ---------------------------------------------------------------------------
# differentiation entry points


def seed(x, v) -> Dual:
    return Dual(x, v, next(_tags))


def value_and_jvp(fn: Callable, x, v):
    """Return ``(fn(x), D fn(x) v)`` from a single dual evaluation."""
    d = seed(x, v)
    out = fn(d)
    if isinstance(out, Dual) and out.tag == d.tag:
        return out.val, out.eps
    return out, zeros_like(out)


def jvp(fn: Callable, x, v):
    return value_and_jvp(fn, x, v)[1]


def jacobian(fn: Callable, x: np.ndarray) -> np.ndarray:
    """Dense Jacobian of ``fn`` at a single point, one dual pass per column.

    Columns are evaluated together by moving the seed directions into a
    trailing batch axis, so ``fn`` must accept states of shape ``(dim, batch)``.
    """
    x = np.asarray(x, dtype=float)
    dim = x.shape[0]
    xs = np.repeat(x[:, None], dim, axis=1)
    _, cols = value_and_jvp(fn, xs, np.eye(dim))
    return np.asarray(cols)
