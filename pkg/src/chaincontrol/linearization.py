"""Flat coordinates, feedback-linearizing terms and flatness-based steering.

The coordinates are iterated Lie derivatives along the drift of one position
coordinate per channel::

    n = 2l     : y_1 = q_l,     z_1 = q_{l+1},  lengths (n, n)
    n = 2l + 1 : y_1 = q_{l+1}, z_1 = q_{l+2},  lengths (n + 1, n - 1)

In these coordinates ``y_j' = y_{j+1}`` and ``z_j' = z_{j+1}`` below the top of
each chain, and the top derivatives are affine in the controls.  A single
particle is handled as one chain ``(q_1, p_1)`` driven by ``u``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import dual
from .chain import (
    ChainState,
    ControlAffineField,
    ControlSignal,
    PotentialModel,
    Trajectory,
    as_vector,
    control_direction,
    drift,
    integrate,
    simulate,
    time_grid,
)

log = logging.getLogger(__name__)


class ChartInversionError(RuntimeError):
    pass


class DegenerateFeedbackError(ArithmeticError):
    """A control coefficient of the normal form vanished."""


@dataclass(frozen=True)
class KroneckerIndices:
    k1: int
    k2: int


def kronecker_indices(n: int) -> KroneckerIndices:
    if n < 2:
        raise ValueError("controllability indices need n >= 2; a single particle has one effective channel")
    if n % 2 == 0:
        return KroneckerIndices(n, n)
    return KroneckerIndices(n + 1, n - 1)


def _layout(n: int) -> list[tuple[int, int]]:
    """(seed q-index, chain length) for the y chain and, if present, the z chain."""
    if n == 1:
        return [(0, 2)]
    idx = kronecker_indices(n)
    ell = n // 2
    if n % 2 == 0:
        return [(ell - 1, idx.k1), (ell, idx.k2)]
    return [(ell, idx.k1), (ell + 1, idx.k2)]


def _lie_derivatives(seed: int, count: int, potential: PotentialModel) -> list[Callable]:
    """[h_1, ..., h_count] with h_1 = q_seed and h_{j+1} = L_f h_j."""
    funcs: list[Callable] = [lambda x, i=seed: x[i]]
    for _ in range(count - 1):
        prev = funcs[-1]
        funcs.append(lambda x, h=prev: dual.jvp(h, x, drift(x, potential)))
    return funcs


class FlatChart:
    """The map x -> (y, z) for an ``n``-particle chain and its derivatives."""

    def __init__(self, n: int, potential: PotentialModel):
        self.n = n
        self.potential = potential
        self.layout = _layout(n)
        self.chains = [_lie_derivatives(seed, length, potential) for seed, length in self.layout]
        self.lengths = [length for _, length in self.layout]

    def _top(self, x):
        """Top-chain coordinates as scalar functions of a (possibly dual) state."""
        return [fns[-1] for fns in self.chains]

    def coordinates(self, X):
        """Flat coordinates of a state or batch; returns ``[y, z]`` arrays of shape (k, ...)."""
        X = as_vector(X)
        return [np.stack([np.asarray(h(X)) for h in fns]) for fns in self.chains]

    def __call__(self, X) -> np.ndarray:
        return np.concatenate(self.coordinates(X), axis=0)

    def jacobian(self, X) -> np.ndarray:
        """Jacobian of the chart: shape (2n, 2n) for one state, (B, 2n, 2n) for a batch."""
        X = as_vector(X)
        single = X.ndim == 1
        Xb = X[:, None] if single else X
        dim, B = Xb.shape
        reps = np.repeat(Xb, dim, axis=1)
        dirs = np.tile(np.eye(dim), (1, B))
        rows = []
        for fns in self.chains:
            for h in fns:
                rows.append(np.asarray(dual.jvp(h, reps, dirs)).reshape(B, dim))
        jac = np.stack(rows, axis=1)
        return jac[0] if single else jac

    def top_derivatives(self, X):
        """For each chain top h: (L_f h, L_{g^u} h, L_{g^v} h), batched over columns of X."""
        X = as_vector(X)
        single = X.ndim == 1
        Xb = X[:, None] if single else X
        dim, B = Xb.shape
        n = dim // 2
        f = np.asarray(drift(Xb, self.potential))
        dirs = np.concatenate([f, np.tile(control_direction(n, "u")[:, None], (1, B)),
                               np.tile(control_direction(n, "v")[:, None], (1, B))], axis=1)
        reps = np.tile(Xb, (1, 3))
        out = []
        for fns in self.chains:
            d = np.asarray(dual.jvp(fns[-1], reps, dirs)).reshape(3, B)
            out.append(d[:, 0] if single else d)
        return out


def flat_coordinates(x, potential: PotentialModel):
    """``(y, z)`` at a state; for a single particle ``z`` is empty."""
    x = as_vector(x)
    chart = FlatChart(x.shape[0] // 2, potential)
    parts = chart.coordinates(x)
    if len(parts) == 1:
        return parts[0], np.zeros((0,) + parts[0].shape[1:])
    return parts[0], parts[1]


@dataclass
class ChartJacobian:
    matrix: np.ndarray
    singular_values: np.ndarray
    nonsingular: bool

    @property
    def condition_number(self) -> float:
        s = self.singular_values
        return float(s[0] / s[-1]) if s[-1] > 0 else math.inf


def chart_jacobian(x, potential: PotentialModel, tol: float = 1e-10) -> ChartJacobian:
    x = as_vector(x)
    jac = FlatChart(x.shape[0] // 2, potential).jacobian(x)
    s = np.linalg.svd(jac, compute_uv=False)
    return ChartJacobian(jac, s, bool(s[-1] > tol * s[0]))


# ---------------------------------------------------------------------------
# feedback terms


@dataclass
class FeedbackTerms:
    """Top-level normal form ``y_k' = Y + y_u u + y_v v``, ``z_k' = Z + z_u u + z_v v``.

    For even n the conventional names are ``lam = y_u`` and ``mu = z_v``; for odd
    n they are ``alpha = y_u``, ``beta = y_v`` and ``gamma = z_v``.
    """

    n: int
    Y: np.ndarray
    Z: np.ndarray
    y_u: np.ndarray
    y_v: np.ndarray
    z_u: np.ndarray
    z_v: np.ndarray

    @property
    def even(self) -> bool:
        return self.n % 2 == 0

    @property
    def lam(self):
        return self.y_u

    @property
    def mu(self):
        return self.z_v

    alpha = lam
    gamma = mu

    @property
    def beta(self):
        return self.y_v

    @property
    def nondegeneracy(self):
        """lam * mu (even n) or alpha * gamma (odd n)."""
        return self.y_u * self.z_v

    def solve_controls(self, ubar, vbar):
        """Invert the feedback transformation: first v from the z chain, then u."""
        if np.any(self.z_v == 0) or np.any(self.y_u == 0):
            raise DegenerateFeedbackError("vanishing control coefficient in the normal form")
        v = (vbar - self.Z - self.z_u * 0.0) / self.z_v
        u = (ubar - self.Y - self.y_v * v) / self.y_u
        return u, v


def feedback_terms(x, potential: PotentialModel) -> FeedbackTerms:
    x = as_vector(x)
    n = x.shape[0] // 2
    if n < 2:
        raise ValueError("feedback terms are defined for n >= 2")
    top_y, top_z = FlatChart(n, potential).top_derivatives(x)
    return FeedbackTerms(n, top_y[0], top_z[0], top_y[1], top_y[2], top_z[1], top_z[2])


# ---------------------------------------------------------------------------
# normal-form audit


@dataclass
class NormalFormReport:
    chain_residual: float
    top_residual: float
    min_abs_nondegeneracy: float
    points_used: int


def verify_normal_form(traj: Trajectory, potential: PotentialModel, breakpoints=(), window: float | None = None) -> NormalFormReport:
    """Finite-difference check of the normal form along a simulated trajectory.

    Central differences on the (uniform) trajectory grid; grid points within
    ``window`` (default two steps) of a control breakpoint are excluded.
    """
    n = traj.n
    chart = FlatChart(n, potential)
    X = traj.x.T
    t = traj.t
    h = float(np.median(np.diff(t)))
    window = 2 * h if window is None else window
    coords = chart.coordinates(X)
    tops = chart.top_derivatives(X)
    u, v = traj.controls[:, 0], traj.controls[:, 1]

    keep = np.zeros(len(t), dtype=bool)
    keep[1:-1] = True
    bps = np.asarray(breakpoints, dtype=float)
    for b in bps:
        keep &= np.abs(t - b) > window + 1e-12

    chain_res, top_res = 0.0, 0.0
    for c, (Yc, cu, cv) in zip(coords, tops):
        deriv = np.gradient(c, t, axis=1)
        if c.shape[0] > 1:
            chain_res = max(chain_res, float(np.max(np.abs(deriv[:-1] - c[1:])[:, keep], initial=0.0)))
        predicted = Yc + cu * u + cv * v
        top_res = max(top_res, float(np.max(np.abs(deriv[-1] - predicted)[keep], initial=0.0)))

    if n >= 2:
        nondeg = np.abs(tops[0][1] * tops[1][2])
    else:
        nondeg = np.abs(tops[0][1])
    return NormalFormReport(chain_res, top_res, float(np.min(nondeg)), int(keep.sum()))


# ---------------------------------------------------------------------------
# flat trajectories


def hermite_coefficients(start, end) -> np.ndarray:
    """Monomial coefficients in s on [0, 1] matching derivatives 0..k-1 at both ends."""
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    k = start.size
    deg = 2 * k
    M = np.zeros((deg, deg))
    for i in range(k):
        M[i, i] = math.factorial(i)
        for j in range(i, deg):
            M[k + i, j] = math.factorial(j) / math.factorial(j - i)
    return np.linalg.solve(M, np.concatenate([start, end]))


@dataclass
class FlatTrajectory:
    """Polynomial flat outputs on [0, T]; coefficients are in normalized time s = t / T."""

    coefficients: list[np.ndarray]
    T: float

    @classmethod
    def fit(cls, start: list[np.ndarray], end: list[np.ndarray], T: float) -> "FlatTrajectory":
        coefs = []
        for a, b in zip(start, end):
            scale = T ** np.arange(len(a))
            coefs.append(hermite_coefficients(np.asarray(a) * scale, np.asarray(b) * scale))
        return cls(coefs, T)

    def derivative(self, chain: int, order: int, t) -> np.ndarray:
        c = np.polynomial.polynomial.polyder(self.coefficients[chain], order) if order else self.coefficients[chain]
        s = np.asarray(t, dtype=float) / self.T
        return np.polynomial.polynomial.polyval(s, c) / self.T**order

    def flat_state(self, t) -> np.ndarray:
        """Stacked (y_1..y_k1, z_1..z_k2) along t, shape (2n, len(t))."""
        rows = []
        for chain, coef in enumerate(self.coefficients):
            k = coef.size // 2
            rows.extend(self.derivative(chain, j, t) for j in range(k))
        return np.array(rows)

    def top_inputs(self, t) -> list[np.ndarray]:
        """Highest derivatives y_1^(k1), z_1^(k2) that act as the linear inputs."""
        return [self.derivative(chain, coef.size // 2, t) for chain, coef in enumerate(self.coefficients)]


# ---------------------------------------------------------------------------
# chart inversion


def invert_chart(
    chart: FlatChart,
    targets: np.ndarray,
    seeds: np.ndarray,
    tol: float = 1e-12,
    max_iter: int = 40,
    stall_tol: float = 1e-9,
) -> np.ndarray:
    """Damped Newton for chart(x) = target, column by column in a batch.

    A column converges when its relative residual is below ``tol``, or when
    Newton stalls at rounding level with a residual below ``stall_tol``.
    """
    X = np.array(seeds, dtype=float)
    T = np.asarray(targets, dtype=float)
    scale = 1.0 + np.abs(T).max(axis=0)

    def resid(Xc, cols):
        with np.errstate(over="ignore", invalid="ignore"):
            r = chart(Xc) - T[:, cols]
        return r, np.max(np.abs(r), axis=0) / scale[cols]

    cols = np.arange(X.shape[1])
    r, err = resid(X, cols)
    active = err > tol
    for _ in range(max_iter):
        if not np.any(active):
            return X
        idx = cols[active]
        Xa = X[:, idx]
        J = chart.jacobian(Xa)
        try:
            step = np.linalg.solve(J, r[:, active].T[..., None])[..., 0].T
        except np.linalg.LinAlgError:
            raise ChartInversionError("singular chart Jacobian during inversion") from None
        damp = np.ones(idx.size)
        e_old = err[active]
        for _ in range(30):
            trial = Xa - step * damp
            r_new, e_new = resid(trial, idx)
            worse = ~(e_new < e_old) & (e_new > tol)
            if not np.any(worse):
                break
            damp = np.where(worse, damp * 0.5, damp)
        X[:, idx] = trial
        r[:, idx] = r_new
        err[idx] = e_new
        # a step at rounding level means the residual has hit the floor set by conditioning
        stalled = np.zeros_like(active)
        stalled[idx] = (np.max(np.abs(step * damp), axis=0) <= 1e-14 * (1 + np.max(np.abs(trial), axis=0))) & (e_new <= stall_tol)
        active = (err > tol) & ~stalled
    if np.any(active):
        worst = float(np.max(err[active]))
        raise ChartInversionError(f"Newton did not converge at {int(active.sum())} points (residual {worst:.3g})")
    return X


def invert_along(chart: FlatChart, targets: np.ndarray, x_start: np.ndarray, coarse_every: int = 10) -> np.ndarray:
    """Invert the chart along an ordered sequence of targets by continuation.

    A coarse subsequence is solved point by point, each seeded with the
    previous solution; the remaining points are solved in one batch seeded
    by interpolating the coarse solutions.
    """
    N = targets.shape[1]
    coarse = np.unique(np.r_[np.arange(0, N, coarse_every), N - 1])
    seed = np.asarray(x_start, dtype=float)
    sol = np.empty((targets.shape[0], coarse.size))
    for j, i in enumerate(coarse):
        seed = invert_chart(chart, targets[:, i : i + 1], seed[:, None])[:, 0]
        sol[:, j] = seed
    param = np.arange(N)
    guesses = np.array([np.interp(param, coarse, row) for row in sol])
    return invert_chart(chart, targets, guesses)


# ---------------------------------------------------------------------------
# steering


@dataclass
class SteeringResult:
    T: float
    signal: ControlSignal
    trajectory: Trajectory
    flat: FlatTrajectory
    reference: np.ndarray  # chart-inverted states at the sample times, (2n, M)
    sample_times: np.ndarray
    u: np.ndarray
    v: np.ndarray
    endpoint_error: float
    attempts: int = 1

    @property
    def max_control_magnitude(self) -> float:
        return float(max(np.max(np.abs(self.u)), np.max(np.abs(self.v))))

    def report(self) -> dict:
        return {
            "T": self.T,
            "endpoint_error": self.endpoint_error,
            "max_control_magnitude": self.max_control_magnitude,
        }


def _steer_once(x0, x1, T, potential, step, coarse_every) -> SteeringResult:
    n = x0.size // 2
    chart = FlatChart(n, potential)
    field = ControlAffineField(n, potential)
    start = chart.coordinates(x0)
    end = chart.coordinates(x1)
    flat = FlatTrajectory.fit(start, end, T)

    steps = max(int(math.ceil(T / step - 1e-9)), 1)
    h = T / steps
    times = np.arange(2 * steps + 1) * (h / 2)
    times[-1] = T
    targets = flat.flat_state(times)
    ref = invert_along(chart, targets, x0, coarse_every)
    ref[:, 0] = x0
    ref[:, -1] = x1

    tops = chart.top_derivatives(ref)
    inputs = flat.top_inputs(times)
    if n == 1:
        Yc, cu, _ = tops[0]
        if np.any(cu == 0):
            raise DegenerateFeedbackError("vanishing control coefficient")
        u = (inputs[0] - Yc) / cu
        v = np.zeros_like(u)
    else:
        terms = FeedbackTerms(n, tops[0][0], tops[1][0], tops[0][1], tops[0][2], tops[1][1], tops[1][2])
        if np.min(np.abs(terms.nondegeneracy)) < 1e-12:
            raise DegenerateFeedbackError("normal-form control coefficients vanish along the path")
        u, v = terms.solve_controls(inputs[0], inputs[1])

    signal = ControlSignal.from_samples(times, u, v)
    traj = simulate(field, x0, signal, T=T, step=h)
    if traj.truncated:
        raise ChartInversionError(f"re-simulation of the steering controls diverged: {traj.diagnostic}")
    err = float(np.linalg.norm(traj.x[-1] - x1))
    return SteeringResult(T, signal, traj, flat, ref, times, u, v, err)


def steer_flat(
    x0,
    x1,
    T: float,
    potential: PotentialModel,
    step: float = 1e-2,
    retries: int = 1,
    coarse_every: int = 10,
) -> SteeringResult:
    """Steer ``x0`` to ``x1`` in time ``T`` along polynomial flat outputs.

    The controls are sampled at the RK4 stage times of the re-simulation, so
    the reported endpoint error measures the whole pipeline.  When the chart
    inversion loses track or the re-simulation diverges, ``T`` is doubled up
    to ``retries`` times.
    """
    x0 = as_vector(x0)
    x1 = as_vector(x1)
    if x0.shape != x1.shape:
        raise ValueError("endpoints have different dimensions")
    if not T > 0:
        raise ValueError("T must be positive")
    last_exc: Exception | None = None
    for attempt in range(retries + 1):
        try:
            res = _steer_once(x0, x1, T, potential, step, coarse_every)
            res.attempts = attempt + 1
            return res
        except ChartInversionError as exc:
            log.info("chart inversion failed at T=%g: %s", T, exc)
            last_exc = exc
            T *= 2
    raise ChartInversionError(
        f"could not keep the path inside a chart ({last_exc}); split the manoeuvre with waypoints"
    )


# ---------------------------------------------------------------------------
# constant rank of the input-to-endpoint map


def endpoint_map(field: ControlAffineField, x0, T: float, values: np.ndarray, step: float = 1e-2) -> np.ndarray:
    """x(T) under piecewise-constant controls; ``values`` has shape (segments, 2)."""
    values = np.asarray(values, dtype=float)
    breaks = np.linspace(0.0, T, values.shape[0] + 1)[:-1]
    signal = ControlSignal.piecewise_constant(breaks, values[:, 0], values[:, 1])
    return simulate(field, x0, signal, T=T, step=step).x[-1]


def endpoint_map_batch(field: ControlAffineField, x0, T: float, tables: np.ndarray, step: float = 1e-2) -> np.ndarray:
    """x(T) for a batch of piecewise-constant control tables of shape (B, segments, 2); returns (2n, B)."""
    tables = np.asarray(tables, dtype=float)
    B, segs, _ = tables.shape
    breaks = np.linspace(0.0, T, segs + 1)[1:-1]
    X0 = np.repeat(as_vector(x0)[:, None], B, axis=1)

    def rhs(t, X):
        j = int(np.searchsorted(breaks, t, side="right"))
        return field.rhs(X, tables[:, j, 0], tables[:, j, 1])

    xs, err = integrate(rhs, X0, time_grid(T, step), breaks)
    if err is not None:
        raise err
    return xs[-1]


def endpoint_jacobian(field: ControlAffineField, x0, T: float, values: np.ndarray, step: float = 1e-2, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of :func:`endpoint_map` w.r.t. the control samples.

    All perturbed control tables are integrated together as one batch.
    """
    values = np.asarray(values, dtype=float)
    m = values.size
    flat = np.repeat(values.reshape(1, -1), 2 * m, axis=0)
    flat[np.arange(m), np.arange(m)] += h
    flat[m + np.arange(m), np.arange(m)] -= h
    out = endpoint_map_batch(field, x0, T, flat.reshape((2 * m,) + values.shape), step)
    return (out[:, :m] - out[:, m:]) / (2 * h)
