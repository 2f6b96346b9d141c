"""Iterated Lie brackets, distribution ranks and involutivity at a point.

Vector fields are :class:`VectorFieldExpr` evaluators.  A bracket of two
expressions is itself an expression whose evaluator calls the operands on dual
inputs, so the directional derivatives at every nesting level are exact.
Evaluating ``ad^m f g`` costs roughly ``3^m`` evaluations of ``f``.

All evaluators accept states of shape ``(2n,)`` or batches ``(2n, B)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import dual
from .chain import ControlAffineField, PotentialModel, as_vector, control_direction, drift


class BracketDepthError(RecursionError):
    pass


class NonFiniteBracketError(FloatingPointError):
    pass


class VectorFieldExpr:
    """A vector field ``x -> F(x)`` with exact directional derivatives."""

    def __init__(self, evaluator: Callable, label: str = "F", depth: int = 0):
        self._eval = evaluator
        self.label = label
        self.depth = depth

    def __call__(self, x):
        return self._eval(x)

    def __repr__(self) -> str:
        return f"VectorFieldExpr({self.label})"

    def jvp(self, x, direction):
        return dual.jvp(self._eval, x, direction)

    def value_and_jvp(self, x, direction):
        return dual.value_and_jvp(self._eval, x, direction)

    @classmethod
    def constant(cls, vec, label: str = "const") -> "VectorFieldExpr":
        vec = np.asarray(vec, dtype=float)

        def ev(x):
            shape = np.shape(dual.primal(x))
            return np.broadcast_to(vec.reshape((-1,) + (1,) * (len(shape) - 1)), shape).copy()

        return cls(ev, label)


def drift_expr(potential: PotentialModel) -> VectorFieldExpr:
    return VectorFieldExpr(lambda x: drift(x, potential), "f")


def channel_expr(n: int, channel: str) -> VectorFieldExpr:
    return VectorFieldExpr.constant(control_direction(n, channel), f"g^{channel}")


def coordinate_expr(n: int, kind: str, index: int) -> VectorFieldExpr:
    """The constant field d/dq_index or d/dp_index (1-based index)."""
    e = np.zeros(2 * n)
    e[(index - 1) + (n if kind == "p" else 0)] = 1.0
    return VectorFieldExpr.constant(e, f"d/d{kind}{index}")


def bracket(F: VectorFieldExpr, G: VectorFieldExpr) -> VectorFieldExpr:
    """[F, G] = DG F - DF G as a new expression."""

    def ev(x):
        gx, dg_f = G.value_and_jvp(x, F(x))
        return dg_f - F.jvp(x, gx)

    return VectorFieldExpr(ev, f"[{F.label},{G.label}]", max(F.depth, G.depth) + 1)


def lie_bracket(F: VectorFieldExpr, G: VectorFieldExpr, x) -> np.ndarray:
    out = np.asarray(bracket(F, G)(as_vector(x)))
    if not np.all(np.isfinite(out)):
        raise NonFiniteBracketError(f"non-finite value in {F.label} bracket {G.label} at depth {max(F.depth, G.depth) + 1}")
    return out


def ad_exprs(f: VectorFieldExpr, g: VectorFieldExpr, m: int, max_depth: int | None = None) -> list[VectorFieldExpr]:
    if m < 1:
        raise ValueError("m must be at least 1")
    if max_depth is not None and m - 1 > max_depth:
        raise BracketDepthError(f"requested bracket depth {m - 1} exceeds the cap {max_depth}")
    out = [g]
    for k in range(1, m):
        nxt = bracket(f, out[-1])
        nxt.label = f"ad^{k} f {g.label}"
        out.append(nxt)
    return out


def ad_chain(f: VectorFieldExpr, g: VectorFieldExpr, x, m: int, max_depth: int | None = None) -> list[np.ndarray]:
    """``[(ad^0 f g)(x), ..., (ad^{m-1} f g)(x)]``.

    ``x`` may be a batch ``(2n, B)``; the default depth cap is ``2n + 2``.
    """
    x = as_vector(x)
    if max_depth is None:
        max_depth = x.shape[0] + 2
    values = []
    for k, expr in enumerate(ad_exprs(f, g, m, max_depth)):
        val = np.asarray(expr(x))
        if not np.all(np.isfinite(val)):
            raise NonFiniteBracketError(f"non-finite value in ad^{k} f {g.label}")
        values.append(val)
    return values


# ---------------------------------------------------------------------------
# ranks


@dataclass
class DistributionEval:
    base_point: np.ndarray
    generators: np.ndarray  # (count, 2n)
    label: str
    rank: int
    tol: float


def equilibrate(mat: np.ndarray, sweeps: int = 30, floor: float = 1e-13) -> np.ndarray:
    """Ruiz row/column scaling of a generator matrix (or a stack of them).

    Row scaling rescales generators and column scaling rescales coordinates;
    neither changes the rank.  Iterated brackets differ in magnitude by many
    orders, which hides full rank from a plain relative SVD test.  Entries below
    ``floor`` times the largest one are treated as roundoff and zeroed first so
    that the column scaling cannot inflate noise.
    """
    a = np.array(mat, dtype=float)
    top = np.abs(a).max(axis=(-2, -1), keepdims=True)
    a[np.abs(a) <= floor * top] = 0.0
    for _ in range(sweeps):
        r = np.sqrt(np.abs(a).max(axis=-1, keepdims=True))
        a = a / np.where(r > 0, r, 1.0)
        c = np.sqrt(np.abs(a).max(axis=-2, keepdims=True))
        a = a / np.where(c > 0, c, 1.0)
    return a


def distribution_rank(vectors: Sequence[np.ndarray], tol: float = 1e-8) -> int:
    """Number of singular values above ``tol`` times the largest one.

    The SVD runs on the equilibrated generator matrix (see :func:`equilibrate`).
    """
    mat = np.atleast_2d(np.asarray(vectors, dtype=float))
    if mat.size == 0:
        raise ValueError("need at least one vector")
    s = np.linalg.svd(equilibrate(mat), compute_uv=False)
    if s[0] == 0:
        return 0
    return int(np.sum(s > tol * s[0]))


def batched_ranks(stack: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Ranks for a stack of generator matrices of shape ``(B, count, dim)``."""
    s = np.linalg.svd(equilibrate(stack), compute_uv=False)
    top = s[:, :1]
    return np.sum(s > tol * np.where(top > 0, top, np.inf), axis=1)


def _generators(potential: PotentialModel, X: np.ndarray, channel: str, m: int) -> np.ndarray:
    """ad^k f g^channel for k < m at a batch X of shape (2n, B) -> (B, m, 2n)."""
    n = X.shape[0] // 2
    vals = ad_chain(drift_expr(potential), channel_expr(n, channel), X, m, max_depth=max(m, 2 * n + 2))
    return np.stack(vals, axis=0).transpose(2, 0, 1)


def distribution_eval(x, potential: PotentialModel, label: str, m: int, tol: float = 1e-8) -> DistributionEval:
    """Evaluate Lambda^m (label 'Lambda'), Xi^m ('Xi') or Delta^m ('Delta') at one state."""
    x = as_vector(x)
    X = x[:, None]
    if label == "Lambda":
        gens = _generators(potential, X, "u", m)[0]
    elif label == "Xi":
        gens = _generators(potential, X, "v", m)[0]
    elif label == "Delta":
        gens = np.concatenate([_generators(potential, X, "u", m)[0], _generators(potential, X, "v", m)[0]])
    else:
        raise ValueError(f"unknown distribution label {label!r}")
    return DistributionEval(x, gens, f"{label}^{m}", distribution_rank(gens, tol), tol)


def predicted_dims(n: int) -> dict[str, list[int]]:
    """Coordinate-subspace dimensions of Lambda^m, Xi^m, Delta^m for m = 1..2n."""
    out = {"Lambda": [], "Xi": [], "Delta": []}
    for m in range(1, 2 * n + 1):
        k, odd = divmod(m, 2)
        left = {("q", s) for s in range(1, k + 1)} | {("p", s) for s in range(1, k + 1)}
        right = {("q", n - s + 1) for s in range(1, k + 1)} | {("p", n - s + 1) for s in range(1, k + 1)}
        if odd:
            left.add(("p", k + 1))
            right.add(("p", n - k))
        left = {c for c in left if 1 <= c[1] <= n}
        right = {c for c in right if 1 <= c[1] <= n}
        out["Lambda"].append(len(left))
        out["Xi"].append(len(right))
        out["Delta"].append(len(left | right))
    return out


def rank_profiles(X: np.ndarray, potential: PotentialModel, tol: float = 1e-8) -> dict[str, np.ndarray]:
    """Observed dim Lambda^m, Xi^m, Delta^m for m = 1..2n at each column of ``X``.

    Returns arrays of shape ``(B, 2n)`` keyed by label.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0] // 2
    gu = _generators(potential, X, "u", 2 * n)
    gv = _generators(potential, X, "v", 2 * n)
    lam, xi, delta = [], [], []
    for m in range(1, 2 * n + 1):
        lam.append(batched_ranks(gu[:, :m], tol))
        xi.append(batched_ranks(gv[:, :m], tol))
        delta.append(batched_ranks(np.concatenate([gu[:, :m], gv[:, :m]], axis=1), tol))
    return {"Lambda": np.stack(lam, 1), "Xi": np.stack(xi, 1), "Delta": np.stack(delta, 1)}


def delta_rank_profile(x, potential: PotentialModel, tol: float = 1e-8) -> dict[int, int]:
    """``{m: dim Delta^m}`` for m = 1..2n at a single state."""
    prof = rank_profiles(as_vector(x), potential, tol)["Delta"][0]
    return {m + 1: int(r) for m, r in enumerate(prof)}


# ---------------------------------------------------------------------------
# closed forms


@dataclass(frozen=True)
class ClosedFormBracket:
    """Leading term of an iterated bracket modulo the previous distribution.

    ``power`` is the bracket order (ad^power f g), ``direction`` a pair like
    ``('p', k)``, and ``residual_span`` the coordinate directions modulo which
    the identity holds.
    """

    power: int
    coefficient: float
    direction: tuple[str, int]
    residual_span: tuple[tuple[str, int], ...]


def mu(q, k: int, potential: PotentialModel, channel: str = "u"):
    """Product of phi'(gap) over the first k gaps (from the left for u, from the right for v)."""
    q = np.asarray(q, dtype=float)
    gaps = q[:-1] - q[1:]
    if channel == "v":
        gaps = gaps[::-1]
    return np.prod(potential.phi2(gaps[:k]), axis=0) if k > 0 else np.ones(q.shape[1:]) if q.ndim > 1 else 1.0


def _span_before(power: int, n: int, channel: str) -> tuple[tuple[str, int], ...]:
    dims = []
    for j in range(power):
        k, odd = divmod(j, 2)
        s = k + 1
        if channel == "v":
            s = n - k
        dims.append(("q" if odd else "p", s))
    return tuple(dims)


def closed_form_ad(k: int, x, potential: PotentialModel, channel: str = "u", kind: str = "p") -> ClosedFormBracket:
    """Leading term of the k-th pair of iterated brackets of g^channel.

    ``kind='p'``: ad^{2k-2} f g = mu_{k-1}(q) d/dp_k  (mod Lambda^{2k-2});
    ``kind='q'``: ad^{2k-1} f g = -mu_{k-1}(q) d/dq_k (mod Lambda^{2k-1}).
    For channel v the particle index counts from the right end and the
    gaps in mu are taken from the right.
    """
    x = as_vector(x)
    n = x.shape[0] // 2
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in 1..{n}")
    coef = mu(x[:n], k - 1, potential, channel)
    s = k if channel == "u" else n - k + 1
    if kind == "p":
        power = 2 * k - 2
    elif kind == "q":
        power, coef = 2 * k - 1, -coef
    else:
        raise ValueError("kind must be 'p' or 'q'")
    return ClosedFormBracket(power, float(coef), (kind, s), _span_before(power, n, channel))


def leading_coefficient(vec: np.ndarray, span: Sequence[np.ndarray], direction_index: int) -> float:
    """Component of ``vec`` along a coordinate after removing ``span`` by least squares."""
    vec = np.asarray(vec, dtype=float)
    if len(span):
        basis = np.asarray(span, dtype=float).T
        coef, *_ = np.linalg.lstsq(basis, vec, rcond=None)
        vec = vec - basis @ coef
    return float(vec[direction_index])


# ---------------------------------------------------------------------------
# involutivity


def involutivity_check(generators: Sequence[VectorFieldExpr], x, tol: float = 1e-8) -> bool:
    """True iff every pairwise bracket at ``x`` lies in the span of the generators."""
    x = as_vector(x)
    return involutivity_residual(generators, x) <= tol


def involutivity_residual(generators: Sequence[VectorFieldExpr], x) -> float:
    """Largest relative least-squares residual of a pairwise bracket off the span."""
    x = as_vector(x)
    basis = np.stack([np.asarray(G(x), dtype=float) for G in generators], axis=1)
    worst = 0.0
    for i in range(len(generators)):
        for j in range(i + 1, len(generators)):
            b = lie_bracket(generators[i], generators[j], x)
            norm = np.linalg.norm(b)
            if norm == 0:
                continue
            coef, *_ = np.linalg.lstsq(basis, b, rcond=None)
            worst = max(worst, float(np.linalg.norm(b - basis @ coef) / norm))
    return worst


def chain_field_exprs(field: ControlAffineField) -> tuple[VectorFieldExpr, VectorFieldExpr, VectorFieldExpr]:
    return drift_expr(field.potential), channel_expr(field.n, "u"), channel_expr(field.n, "v")
