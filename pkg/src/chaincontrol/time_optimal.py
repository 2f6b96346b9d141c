"""Minimum-time relocation with bounded controls.

Admissible controls live in the rectangle ``u in [-w, w]``, ``v in [-w, 0]``.
Candidates are bang-bang schedules; for a fixed switching structure the
switching times and the horizon solve ``x(T) = x1`` by a bounded nonlinear
least-squares method whose Jacobian comes from the variational equation.

A solution is certified as a Pontryagin extremal by recovering the adjoint:
``psi(T)`` spans the left null space of the switching-time sensitivities, and
``psi(t) = M(t)^{-T} M(T)^T psi(T)`` with ``M`` the fundamental matrix.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import CubicHermiteSpline
from scipy.optimize import brentq, least_squares, minimize

from .chain import (
    ControlAffineField,
    ControlSignal,
    PotentialModel,
    Trajectory,
    as_vector,
    control_direction,
    controlled,
    drift,
    integrate,
    simulate,
    time_grid,
)
from .lie import ad_chain, bracket, channel_expr, drift_expr

log = logging.getLogger(__name__)


class NoFeasibleScheduleError(RuntimeError):
    def __init__(self, message: str, T_hi: float | None = None):
        super().__init__(message)
        self.T_hi = T_hi


# ---------------------------------------------------------------------------
# schedules


def vertex_values(channel: str, omega: float) -> tuple[float, float]:
    """The two bang values of a channel."""
    if channel == "u":
        return omega, -omega
    if channel == "v":
        return 0.0, -omega
    raise ValueError(f"unknown channel {channel!r}")


@dataclass
class ChannelSchedule:
    initial: float
    switches: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.switches = np.asarray(self.switches, dtype=float)


@dataclass
class SwitchingSchedule:
    """Bang-bang controls on ``[0, T]``; a missing channel is held at zero."""

    omega: float
    T: float
    channels: dict[str, ChannelSchedule]

    def __post_init__(self):
        for name, ch in self.channels.items():
            vals = vertex_values(name, self.omega)
            if ch.initial not in vals:
                raise ValueError(f"channel {name} starts at {ch.initial}, not a vertex value {vals}")
            s = ch.switches
            if s.size and (np.any(np.diff(s) <= 0) or s[0] <= 0 or s[-1] >= self.T):
                raise ValueError(f"channel {name} switching times must be increasing inside (0, T)")

    def other(self, name: str, value: float) -> float:
        a, b = vertex_values(name, self.omega)
        return b if value == a else a

    def value(self, name: str, t: float) -> float:
        """Right-continuous channel value."""
        ch = self.channels.get(name)
        if ch is None:
            return 0.0
        k = int(np.searchsorted(ch.switches, t, side="right"))
        return ch.initial if k % 2 == 0 else self.other(name, ch.initial)

    def controls(self, t: float) -> tuple[float, float]:
        return self.value("u", t), self.value("v", t)

    @property
    def breakpoints(self) -> np.ndarray:
        parts = [ch.switches for ch in self.channels.values()]
        return np.unique(np.concatenate(parts)) if parts else np.zeros(0)

    @property
    def counts(self) -> dict[str, int]:
        return {name: int(ch.switches.size) for name, ch in self.channels.items()}

    def to_signal(self) -> ControlSignal:
        sig = ControlSignal(lambda t, x: self.controls(t), breakpoints=self.breakpoints)
        sig.bounds = {"u": (-self.omega, self.omega), "v": (-self.omega, 0.0)}
        return sig

    def to_json(self) -> dict:
        return {
            "T": self.T,
            "omega": self.omega,
            "initial_values": {k: ch.initial for k, ch in self.channels.items()},
            **{k: ch.switches.tolist() for k, ch in self.channels.items()},
        }


def bang_from_sign(sigma_u: float, sigma_v: float, omega: float, fallback=(None, None)) -> tuple[float, float]:
    """Maximizer of ``sigma_u u + sigma_v v`` over the control rectangle."""
    if sigma_u > 0:
        u = omega
    elif sigma_u < 0:
        u = -omega
    else:
        u = fallback[0]
    if sigma_v > 0:
        v = 0.0
    elif sigma_v < 0:
        v = -omega
    else:
        v = fallback[1]
    return u, v


# ---------------------------------------------------------------------------
# adjoint system


@dataclass
class AdjointState:
    psi_q: np.ndarray
    psi_p: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.psi_q, self.psi_p])

    @classmethod
    def from_vector(cls, psi) -> "AdjointState":
        psi = np.asarray(psi, dtype=float)
        n = psi.size // 2
        return cls(psi[:n].copy(), psi[n:].copy())


def _stiffness_apply(q, w, potential: PotentialModel):
    """``K(q) w`` for the symmetric tridiagonal force Jacobian ``K = d pdot / d q``."""
    n = q.shape[0]
    out = np.zeros_like(w, dtype=float)
    if n == 1:
        return out
    s = potential.phi2(q[:-1] - q[1:])
    s = s.reshape(s.shape + (1,) * (w.ndim - s.ndim))
    d = s * (w[:-1] - w[1:])
    out[:-1] -= d
    out[1:] += d
    return out


def pmp_hamiltonian(x, psi, u, v, potential: PotentialModel):
    """``<psi, f(x)> + psi_{p_1} u + psi_{p_n} v``; batch-aware along a trailing axis."""
    x = as_vector(x)
    psi = psi.as_vector() if isinstance(psi, AdjointState) else np.asarray(psi, dtype=float)
    n = x.shape[0] // 2
    return np.sum(psi * drift(x, potential), axis=0) + psi[n] * u + psi[2 * n - 1] * v


def adjoint_rate(x, psi, potential: PotentialModel):
    """``-J(x)^T psi``; ``J^T psi = (K psi_p, psi_q)`` because ``K`` is symmetric."""
    n = x.shape[0] // 2
    out = np.empty_like(psi, dtype=float)
    out[:n] = -_stiffness_apply(x[:n], psi[n:], potential)
    out[n:] = -psi[:n]
    return out


@dataclass
class Extremal:
    """State and adjoint along a bang-bang schedule, on a uniform grid."""

    t: np.ndarray
    x: np.ndarray  # (N, 2n)
    psi: np.ndarray  # (N, 2n)
    controls: np.ndarray  # (N, 2)
    schedule: SwitchingSchedule
    potential: PotentialModel
    diagnostic: str | None = None

    @property
    def n(self) -> int:
        return self.x.shape[1] // 2

    def pmp_values(self) -> np.ndarray:
        return pmp_hamiltonian(self.x.T, self.psi.T, self.controls[:, 0], self.controls[:, 1], self.potential)

    def trajectory(self) -> Trajectory:
        return Trajectory(self.t, self.x, self.controls, self.diagnostic)


def extremal_flow(x0, psi0, schedule: SwitchingSchedule, potential: PotentialModel, step: float = 1e-3) -> Extremal:
    """Integrate ``x' = dPi/dpsi``, ``psi' = -dPi/dx`` under the schedule's controls."""
    x0 = as_vector(x0)
    psi0 = psi0.as_vector() if isinstance(psi0, AdjointState) else np.asarray(psi0, dtype=float)
    n = x0.size // 2

    def rhs(t, z):
        x, psi = z[: 2 * n], z[2 * n :]
        u, v = schedule.controls(t)
        return np.concatenate([controlled(x, potential, u, v), adjoint_rate(x, psi, potential)])

    grid = time_grid(schedule.T, step)
    zs, err = integrate(rhs, np.concatenate([x0, psi0]), grid, schedule.breakpoints)
    grid = grid[: len(zs)]
    controls = np.array([schedule.controls(t) for t in grid])
    diag = None if err is None else f"integration stopped at t={grid[-1]:.6g}: {err}"
    return Extremal(grid, zs[:, : 2 * n], zs[:, 2 * n :], controls, schedule, potential, diag)


# ---------------------------------------------------------------------------
# switching functions


@dataclass
class SwitchingFunction:
    t: np.ndarray
    sigma: np.ndarray
    dsigma: np.ndarray
    zeros: np.ndarray

    def spline(self) -> CubicHermiteSpline:
        return CubicHermiteSpline(self.t, self.sigma, self.dsigma)


def switching_functions(ext: Extremal) -> dict[str, SwitchingFunction]:
    """``sigma^u = psi_{p_1}``, ``sigma^v = psi_{p_n}`` with their zeros.

    Since ``psi_{p_k}' = -psi_{q_k}`` the derivative is available exactly, and
    the zeros are located by bisection on the cubic Hermite interpolant.
    """
    n = ext.n
    out = {}
    for name, k in (("u", 0), ("v", n - 1)):
        sig = ext.psi[:, n + k]
        dsig = -ext.psi[:, k]
        out[name] = SwitchingFunction(ext.t, sig, dsig, _zeros(ext.t, sig, dsig))
    return out


def _zeros(t, sig, dsig) -> np.ndarray:
    spline = CubicHermiteSpline(t, sig, dsig)
    roots = []
    for i in np.nonzero(np.sign(sig[:-1]) * np.sign(sig[1:]) < 0)[0]:
        roots.append(brentq(spline, t[i], t[i + 1], xtol=1e-14, rtol=1e-14))
    # exact zeros on grid nodes, skipping the end points
    for i in np.nonzero(sig == 0)[0]:
        if 0 < i < len(t) - 1 and np.sign(sig[i - 1]) * np.sign(sig[i + 1]) < 0:
            roots.append(float(t[i]))
    return np.array(sorted(roots))


# ---------------------------------------------------------------------------
# certificates


@dataclass
class ExtremalCertificate:
    residual: float
    transversality: float
    hamiltonian_spread: float
    counts: dict[str, int]
    sign_violations: int
    sign_consistency: float
    longest_flat_window: float
    min_adjoint_norm: float
    passed: bool
    tol: float

    def to_json(self) -> dict:
        return {
            "residual": self.residual,
            "transversality": self.transversality,
            "hamiltonian_spread": self.hamiltonian_spread,
            "counts": self.counts,
            "sign_violations": self.sign_violations,
            "sign_consistency": self.sign_consistency,
            "longest_flat_window": self.longest_flat_window,
            "pass": self.passed,
        }


def _longest_run(mask: np.ndarray, t: np.ndarray) -> float:
    best, start = 0.0, None
    for i, m in enumerate(mask):
        if m and start is None:
            start = i
        if (not m or i == len(mask) - 1) and start is not None:
            end = i if m else i - 1
            best = max(best, float(t[end] - t[start]))
            start = None
    return best


def certify_extremal(
    ext: Extremal,
    channels: Sequence[str],
    tol: float = 1e-6,
    constancy_tol: float = 1e-5,
    flat_eps: float = 1e-9,
    flat_window: float | None = None,
) -> ExtremalCertificate:
    """Check the maximum condition, transversality and constancy of Pi."""
    omega = ext.schedule.omega
    sw = switching_functions(ext)
    su = sw["u"].sigma if "u" in channels else np.zeros_like(ext.t)
    sv = sw["v"].sigma if "v" in channels else np.zeros_like(ext.t)
    u, v = ext.controls[:, 0], ext.controls[:, 1]

    best = ("u" in channels) * omega * np.abs(su) + ("v" in channels) * np.maximum(0.0, -omega * sv)
    applied = su * u + sv * v
    gap = applied - best
    residual = float(np.min(gap))

    pi = ext.pmp_values()
    transversality = float(pi[-1])
    spread = float(np.max(pi) - np.min(pi))

    h = float(ext.t[1] - ext.t[0]) if len(ext.t) > 1 else 0.0
    near = np.zeros(len(ext.t), dtype=bool)
    for s in ext.schedule.breakpoints:
        near |= np.abs(ext.t - s) <= 2 * h
    violations = 0
    for name, sig, col in (("u", su, u), ("v", sv, v)):
        if name not in channels:
            continue
        hi, lo = vertex_values(name, omega)
        expected = np.where(sig > 0, hi, lo)
        bad = (expected != col) & ~near
        violations += int(bad.sum())
    total = len(ext.t) * len(channels)
    consistency = 1.0 - violations / max(total, 1)

    scale = np.max(np.abs(ext.psi))
    flat = 0.0
    for name, sig in (("u", su), ("v", sv)):
        if name in channels:
            flat = max(flat, _longest_run(np.abs(sig) < flat_eps * scale, ext.t))
    flat_window = 10 * h if flat_window is None else flat_window
    min_norm = float(np.min(np.linalg.norm(ext.psi, axis=1)))

    passed = (
        ext.diagnostic is None
        and abs(residual) <= tol
        and transversality >= -tol
        and spread <= constancy_tol
        and flat <= flat_window
        and min_norm > 0
    )
    return ExtremalCertificate(
        residual, transversality, spread, ext.schedule.counts, violations, consistency, flat, min_norm,
        bool(passed), tol,
    )


# ---------------------------------------------------------------------------
# sensitivities


@dataclass
class _Sensitivity:
    xT: np.ndarray
    xdot_T: np.ndarray
    columns: np.ndarray  # (2n, K): d x(T) / d t_i in the solver's switch order
    MT: np.ndarray


def _sensitivity(x0, schedule: SwitchingSchedule, order: list[tuple[str, int]], potential, steps: int) -> _Sensitivity:
    """State, fundamental matrix and switching-time derivatives of ``x(T)``."""
    n = x0.size // 2
    dim = 2 * n
    T = schedule.T
    switch_times = [schedule.channels[c].switches[i] for c, i in order]
    grid = np.unique(np.concatenate([np.linspace(0.0, T, steps + 1), switch_times]))

    def rhs(t, z):
        x = z[:dim]
        M = z[dim:].reshape(dim, dim)
        u, v = schedule.controls(t)
        dM = np.empty_like(M)
        dM[:n] = M[n:]
        dM[n:] = _stiffness_apply(x[:n], M[:n], potential)
        return np.concatenate([controlled(x, potential, u, v), dM.ravel()])

    z0 = np.concatenate([x0, np.eye(dim).ravel()])
    zs, err = integrate(rhs, z0, grid)
    if err is not None:
        raise FloatingPointError(str(err))
    MT = zs[-1, dim:].reshape(dim, dim)
    cols = np.empty((dim, len(order)))
    for j, ((c, i), ts) in enumerate(zip(order, switch_times)):
        idx = int(np.searchsorted(grid, ts))
        Mi = zs[idx, dim:].reshape(dim, dim)
        before = schedule.value(c, math.nextafter(ts, -math.inf))
        after = schedule.value(c, ts)
        g = control_direction(n, c) * (before - after)
        cols[:, j] = MT @ np.linalg.solve(Mi, g)
    xT = zs[-1, :dim]
    u, v = schedule.controls(math.nextafter(T, 0.0))
    return _Sensitivity(xT, controlled(xT.copy(), potential, u, v), cols, MT)


# ---------------------------------------------------------------------------
# solver


@dataclass
class MinTimeOptions:
    channels: tuple[str, ...] | None = None
    segments: int = 20  # per channel, coarse transcription
    substeps: int = 4  # RK4 steps per segment (even, for Simpson weights)
    steps: int = 400  # grid for the switching-time refinement
    endpoint_tol: float = 1e-8
    certify_tol: float = 1e-6
    seed: int = 0
    starts: int = 3
    T_guess: float | None = None
    audit_step: float | None = None
    max_switches: int | None = None  # per channel; default 4n


@dataclass
class MinTimeResult:
    schedule: SwitchingSchedule | None
    certificate: ExtremalCertificate | None
    extremal: Extremal | None
    T: float
    T_hi: float | None
    endpoint_error: float
    transcription_T: float | None = None

    def to_json(self) -> dict:
        sched = self.schedule
        return {
            "T": self.T,
            "T_hi": self.T_hi,
            "transcription_T": self.transcription_T,
            "endpoint_error": self.endpoint_error,
            "schedule": None if sched is None else {
                "initial_values": {k: ch.initial for k, ch in sched.channels.items()},
                **{k: ch.switches.tolist() for k, ch in sched.channels.items()},
            },
            "certificate": None if self.certificate is None else self.certificate.to_json(),
        }


def _segment_sensitivity(x0, T, values: dict[str, np.ndarray], channels, potential, m: int):
    """``x(T)`` and its Jacobian w.r.t. piecewise-constant control values and ``T``.

    With ``Phi(T, t) = M(T) M(t)^{-1}`` the derivative for segment ``j`` of a
    channel is the integral of ``Phi(T, t) g`` over the segment, and stretching
    all segments with ``T`` gives ``(1/T) int Phi(T, t) x'(t) dt``.  Both are
    evaluated by Simpson's rule on the RK4 nodes.
    """
    n = x0.size // 2
    dim = 2 * n
    N = len(next(iter(values.values())))
    h = T / (N * m)
    uu = values.get("u", np.zeros(N))
    vv = values.get("v", np.zeros(N))

    def rhs(x, M, u, v):
        dM = np.empty_like(M)
        dM[:n] = M[n:]
        dM[n:] = _stiffness_apply(x[:n], M[:n], potential)
        return controlled(x.copy(), potential, u, v), dM

    xs = np.empty((N * m + 1, dim))
    Ms = np.empty((N * m + 1, dim, dim))
    x, M = np.array(x0, dtype=float), np.eye(dim)
    xs[0], Ms[0] = x, M
    with np.errstate(over="raise", invalid="raise"):
        for j in range(N):
            u, v = uu[j], vv[j]
            for k in range(m):
                a = rhs(x, M, u, v)
                b = rhs(x + 0.5 * h * a[0], M + 0.5 * h * a[1], u, v)
                c = rhs(x + 0.5 * h * b[0], M + 0.5 * h * b[1], u, v)
                d = rhs(x + h * c[0], M + h * c[1], u, v)
                x = x + (h / 6) * (a[0] + 2 * b[0] + 2 * c[0] + d[0])
                M = M + (h / 6) * (a[1] + 2 * b[1] + 2 * c[1] + d[1])
                xs[j * m + k + 1], Ms[j * m + k + 1] = x, M
    Phi = Ms[-1] @ np.linalg.inv(Ms)
    w = np.ones(m + 1)
    w[1:-1:2], w[2:-1:2] = 4.0, 2.0
    w *= h / 3
    cols = []
    dT = np.zeros(dim)
    for c in channels:
        idx = n if c == "u" else 2 * n - 1
        for j in range(N):
            cols.append(w @ Phi[j * m : (j + 1) * m + 1, :, idx])
    for j in range(N):
        sl = slice(j * m, (j + 1) * m + 1)
        xd = np.array([controlled(xi.copy(), potential, uu[j], vv[j]) for xi in xs[sl]])
        dT += np.einsum("k,kij,kj->i", w, Phi[sl], xd)
    jac = np.column_stack(cols + [dT / T])
    return xs[-1], jac


def transcription(x0, x1, omega, potential, channels, T0, segments=20, substeps=4, init=None, maxiter=400):
    """Coarse minimum-time problem over piecewise-constant controls (SLSQP).

    Returns ``(T, values)`` with values per channel, or ``None`` on failure.
    """
    N = segments
    nc = len(channels)
    cache: dict = {}

    def unpack(z):
        return {c: z[i * N : (i + 1) * N] for i, c in enumerate(channels)}, z[-1]

    def ev(z):
        key = z.tobytes()
        if key not in cache:
            vals, T = unpack(z)
            cache.clear()
            try:
                cache[key] = _segment_sensitivity(x0, T, vals, channels, potential, substeps)
            except FloatingPointError:
                cache[key] = (np.full(x0.size, 1e6), np.zeros((x0.size, z.size)))
        return cache[key]

    bounds = []
    for c in channels:
        hi, lo = vertex_values(c, omega)
        bounds += [(lo, hi)] * N
    bounds.append((1e-6 * T0, 20.0 * T0))
    if init is None:
        z0 = np.concatenate([np.full(N, 0.5 * sum(vertex_values(c, omega))) for c in channels] + [[T0]])
    else:
        z0 = np.asarray(init, dtype=float)
    lo_b = np.array([b[0] for b in bounds[:-1]])
    hi_b = np.array([b[1] for b in bounds[:-1]])
    z0[:-1] = np.clip(z0[:-1], lo_b, hi_b)
    if np.max(np.abs(ev(z0)[0] - x1)) > 1e-9:
        # feasibility phase at fixed T; starting SLSQP infeasible lets it shrink T and stall
        fit = least_squares(
            lambda c: ev(np.r_[c, z0[-1]])[0] - x1,
            z0[:-1],
            jac=lambda c: ev(np.r_[c, z0[-1]])[1][:, :-1],
            bounds=(lo_b, hi_b),
            xtol=1e-14,
            ftol=1e-14,
            gtol=1e-14,
            max_nfev=200,
        )
        z0 = np.r_[fit.x, z0[-1]]
    grad_T = np.zeros(nc * N + 1)
    grad_T[-1] = 1.0
    res = minimize(
        lambda z: z[-1],
        z0,
        jac=lambda z: grad_T,
        method="SLSQP",
        bounds=bounds,
        constraints=[{"type": "eq", "fun": lambda z: ev(z)[0] - x1, "jac": lambda z: ev(z)[1]}],
        options={"ftol": 1e-12, "maxiter": maxiter},
    )
    feas = np.max(np.abs(ev(res.x)[0] - x1))
    if not np.isfinite(feas) or feas > 1e-6 * (1 + np.max(np.abs(x1))):
        return None
    vals, T = unpack(res.x)
    return float(T), {c: v.copy() for c, v in vals.items()}


def schedule_from_segments(values: dict[str, np.ndarray], T: float, omega: float, tol: float = 1e-3) -> SwitchingSchedule:
    """Bang-bang schedule whose time share of each vertex value matches every segment.

    A segment with an intermediate value is split in two; the part adjacent to
    the previous segment keeps the previous value, which avoids spurious pairs.
    """
    chans = {}
    for c, vals in values.items():
        hi, lo = vertex_values(c, omega)
        N = len(vals)
        dt = T / N
        share = np.clip((np.asarray(vals) - lo) / (hi - lo), 0.0, 1.0)
        pieces: list[tuple[float, float]] = []  # (value, duration)
        prev = hi if share[0] >= 0.5 else lo
        for j, r in enumerate(share):
            if r >= 1 - tol:
                pieces.append((hi, dt))
            elif r <= tol:
                pieces.append((lo, dt))
            else:
                first = prev
                frac = r if first == hi else 1 - r
                pieces.append((first, frac * dt))
                pieces.append((hi if first == lo else lo, (1 - frac) * dt))
            prev = pieces[-1][0]
        switches, t = [], 0.0
        current = pieces[0][0]
        for val, dur in pieces:
            if val != current:
                switches.append(t)
                current = val
            t += dur
        chans[c] = ChannelSchedule(pieces[0][0], np.array(switches))
    return _clean_schedule(omega, T, chans)


def _clean_schedule(omega, T, chans, gap: float = 1e-9) -> SwitchingSchedule:
    """Drop switches at the ends of ``[0, T]`` and merge coincident pairs."""
    out = {}
    for c, ch in chans.items():
        init = ch.initial
        keep: list[float] = []
        for t in np.sort(ch.switches):
            if t <= gap * T:
                init = vertex_values(c, omega)[1] if init == vertex_values(c, omega)[0] else vertex_values(c, omega)[0]
                continue
            if t >= T * (1 - gap):
                continue
            if keep and t - keep[-1] <= gap * T:
                keep.pop()
                continue
            keep.append(float(t))
        out[c] = ChannelSchedule(init, np.array(keep))
    return SwitchingSchedule(omega, T, out)


def refine_schedule(x0, x1, schedule: SwitchingSchedule, potential, steps: int = 400, merge: float = 1e-6, rounds: int = 4):
    """Minimize ``T`` over switching times at fixed structure subject to ``x(T) = x1``.

    Switches that collide, or run into the ends of the horizon, are removed and
    the problem is solved again.
    """
    for _ in range(rounds):
        names = list(schedule.channels)
        order = [(c, i) for c in names for i in range(schedule.channels[c].switches.size)]
        K = len(order)
        inits = {c: schedule.channels[c].initial for c in names}
        omega = schedule.omega
        cache: dict = {}

        def ev(z):
            key = z.tobytes()
            if key in cache:
                return cache[key]
            T = float(z[-1])
            eps = 1e-12 * T
            chans, pos = {}, 0
            for c in names:
                k = schedule.channels[c].switches.size
                ts = np.clip(z[pos : pos + k], eps, T - eps)
                ts = np.maximum.accumulate(ts) + eps * np.arange(k)
                chans[c] = ChannelSchedule(inits[c], ts)
                pos += k
            cache.clear()
            try:
                sched = SwitchingSchedule(omega, T, chans)
                sens = _sensitivity(x0, sched, order, potential, steps)
                cache[key] = (sens.xT - x1, np.column_stack([sens.columns, sens.xdot_T]))
            except (FloatingPointError, ValueError):
                cache[key] = (np.full(x0.size, 1e6), np.zeros((x0.size, K + 1)))
            return cache[key]

        z0 = np.concatenate([schedule.channels[c].switches for c in names] + [[schedule.T]])
        # ordering: 0 <= t_1 <= ... <= t_k <= T per channel
        rows = []
        pos = 0
        for c in names:
            k = schedule.channels[c].switches.size
            for i in range(k + 1):
                r = np.zeros(K + 1)
                if i < k:
                    r[pos + i] += 1.0
                else:
                    r[-1] += 1.0
                if i > 0:
                    r[pos + i - 1] -= 1.0
                rows.append(r)
            pos += k
        A = np.array(rows)
        grad_T = np.zeros(K + 1)
        grad_T[-1] = 1.0
        res = minimize(
            lambda z: z[-1],
            z0,
            jac=lambda z: grad_T,
            method="SLSQP",
            constraints=[
                {"type": "eq", "fun": lambda z: ev(z)[0], "jac": lambda z: ev(z)[1]},
                {"type": "ineq", "fun": lambda z: A @ z, "jac": lambda z: A},
            ],
            options={"ftol": 1e-14, "maxiter": 200},
        )
        z = res.x
        chans, pos = {}, 0
        for c in names:
            k = schedule.channels[c].switches.size
            chans[c] = ChannelSchedule(inits[c], np.sort(z[pos : pos + k]))
            pos += k
        cleaned = _clean_schedule(omega, float(z[-1]), chans, gap=merge)
        if cleaned.counts == {c: chans[c].switches.size for c in names}:
            return _polish(x0, x1, cleaned, potential, steps)
        schedule = cleaned
    return _polish(x0, x1, schedule, potential, steps)


def _polish(x0, x1, schedule: SwitchingSchedule, potential, steps: int) -> SwitchingSchedule:
    """Newton-type cleanup of the endpoint residual at fixed structure."""
    names = list(schedule.channels)
    order = [(c, i) for c in names for i in range(schedule.channels[c].switches.size)]
    inits = {c: schedule.channels[c].initial for c in names}

    def build(z):
        chans, pos = {}, 0
        for c in names:
            k = schedule.channels[c].switches.size
            chans[c] = ChannelSchedule(inits[c], z[pos : pos + k])
            pos += k
        return SwitchingSchedule(schedule.omega, float(z[-1]), chans)

    z = np.concatenate([schedule.channels[c].switches for c in names] + [[schedule.T]])
    for _ in range(8):
        try:
            sens = _sensitivity(x0, build(z), order, potential, steps)
        except (FloatingPointError, ValueError):
            break
        r = sens.xT - x1
        if np.max(np.abs(r)) <= 1e-13 * (1 + np.max(np.abs(x1))):
            break
        J = np.column_stack([sens.columns, sens.xdot_T])
        dz = np.linalg.lstsq(J, r, rcond=None)[0]
        trial = z - dz
        try:
            build(trial)
        except ValueError:
            break
        z = trial
    return build(z)


def recover_adjoint(x0, schedule: SwitchingSchedule, potential, steps: int = 400):
    """``psi(0)`` from the switching-time sensitivities of ``x(T)``.

    ``psi(T)`` is the left singular vector of the sensitivity matrix with the
    smallest singular value; with fewer than ``2n - 1`` switches the null space
    is larger and the direction of largest ``Pi(T)`` inside it is used.  The
    overall sign is left to the caller.
    """
    order = [(c, i) for c, ch in schedule.channels.items() for i in range(ch.switches.size)]
    sens = _sensitivity(as_vector(x0), schedule, order, potential, steps)
    dim = sens.xT.size
    if len(order) >= dim - 1:
        U, _, _ = np.linalg.svd(sens.columns, full_matrices=True)
        psiT = U[:, -1] if len(order) < dim else U[:, dim - 1]
    else:
        if order:
            U, _, _ = np.linalg.svd(sens.columns, full_matrices=True)
            null = U[:, len(order) :]
        else:
            null = np.eye(dim)
        psiT = null @ (null.T @ sens.xdot_T)
        if np.linalg.norm(psiT) == 0:
            psiT = null[:, 0]
    psiT = psiT / np.linalg.norm(psiT)
    return sens.MT.T @ psiT, sens


def certify_schedule(x0, schedule, potential, channels, steps=400, audit_step=None, tol=1e-6):
    """Best of the two adjoint signs; returns ``(certificate, extremal)``."""
    psi0, _ = recover_adjoint(x0, schedule, potential, steps)
    step = audit_step or schedule.T / steps
    candidates = []
    for sign in (1.0, -1.0):
        ext = extremal_flow(x0, sign * psi0, schedule, potential, step)
        candidates.append((certify_extremal(ext, channels, tol), ext))
    candidates.sort(key=lambda ce: (not ce[0].passed, ce[0].sign_violations, -ce[0].residual))
    return candidates[0]


def _flat_upper_bound(x0, x1, omega, potential) -> float | None:
    """Admissible horizon of a flatness steering, if one is found."""
    from .controllability import _plan_segment

    seg = _plan_segment(x0, x1, potential, omega, 1.0, 256.0, 1e-2, 1e-6, refine=4)
    return None if seg is None else float(seg.T)


def solve_min_time(x0, x1, omega: float, potential: PotentialModel, options: MinTimeOptions | None = None) -> MinTimeResult:
    """Minimum-time bang-bang relocation from ``x0`` to ``x1``.

    A flatness steering with admissible controls supplies an upper bound
    ``T_hi``.  A coarse transcription over piecewise-constant controls gives
    the switching structure, the switching times are then optimized exactly,
    and the result is certified against the maximum principle.
    """
    opts = options or MinTimeOptions()
    x0 = as_vector(x0)
    x1 = as_vector(x1)
    n = x0.size // 2
    channels = tuple(opts.channels or (("u",) if n == 1 else ("u", "v")))
    if np.array_equal(x0, x1):
        sched = SwitchingSchedule(omega, 0.0, {c: ChannelSchedule(vertex_values(c, omega)[0]) for c in channels})
        return MinTimeResult(sched, None, None, 0.0, 0.0, 0.0)

    T_hi = opts.T_guess if opts.T_guess is not None else _flat_upper_bound(x0, x1, omega, potential)
    rng = np.random.default_rng(opts.seed)
    guesses = [T_hi] if T_hi is not None else [1.0, 4.0]
    cap = opts.max_switches if opts.max_switches is not None else 4 * n

    best: MinTimeResult | None = None
    for attempt in range(opts.starts):
        T0 = guesses[attempt % len(guesses)] * (1.0 if attempt == 0 else float(rng.uniform(0.6, 1.2)))
        init = None
        if attempt:
            init = np.concatenate(
                [rng.uniform(*sorted(vertex_values(c, omega)), opts.segments) for c in channels] + [[T0]]
            )
        coarse = transcription(x0, x1, omega, potential, channels, T0, opts.segments, opts.substeps, init)
        if coarse is None:
            continue
        T_c, values = coarse
        guess = schedule_from_segments(values, T_c, omega)
        if any(k > cap for k in guess.counts.values()):
            continue
        sched = refine_schedule(x0, x1, guess, potential, opts.steps)
        T = sched.T
        audit_step = opts.audit_step or T / opts.steps
        cert, ext = certify_schedule(x0, sched, potential, channels, opts.steps, audit_step, opts.certify_tol)
        sim = simulate(ControlAffineField(n, potential), x0, sched.to_signal(), T=T, step=T / opts.steps)
        err = float(np.linalg.norm(sim.x[-1] - x1)) if not sim.truncated else math.inf
        result = MinTimeResult(sched, cert, ext, T, T_hi, err, T_c)
        feasible = err <= 1e-6 * (1 + np.max(np.abs(x1)))
        if not feasible:
            continue
        if cert.passed:
            return result
        if best is None or result.T < best.T:
            best = result
    if best is None:
        raise NoFeasibleScheduleError("no bang-bang schedule reached the target", T_hi)
    return best


# ---------------------------------------------------------------------------
# audits


@dataclass
class SwitchingAudit:
    channel: str
    sigma: np.ndarray  # (K+1, N): sigma_k along the grid
    coefficients: np.ndarray  # (N, K, K) least-squares a_kj, lower triangular
    span_residual: float
    row_residuals: np.ndarray  # per k, max |sigma_k' - (sum_j a_kj sigma_j + sigma_{k+1})|
    zeros: np.ndarray
    max_zeros_per_window: int
    window: float
    longest_flat_window: float


def _five_point(y, h):
    d = np.full_like(y, np.nan)
    d[..., 2:-2] = (y[..., :-4] - 8 * y[..., 1:-3] + 8 * y[..., 3:-1] - y[..., 4:]) / (12 * h)
    return d


def max_zeros_in_window(zeros: np.ndarray, window: float) -> int:
    zeros = np.sort(np.asarray(zeros))
    best = 0
    for i, z in enumerate(zeros):
        best = max(best, int(np.searchsorted(zeros, z + window, side="right") - i))
    return best


def switching_system_audit(ext: Extremal, channel: str, window: float = 0.5, depth: int | None = None) -> SwitchingAudit:
    """Audit ``sigma_k = <psi, ad^k f g>`` against its quasitriangular ODE system.

    Along the extremal ``sigma_k' = sigma_{k+1} + u <psi, [g^u, ad^k f g]> +
    v <psi, [g^v, ad^k f g]>``.  Each bracket with a control field is expanded
    on ``ad^j f g, j <= k`` by least squares, giving the coefficients ``a_kj``.
    """
    n = ext.n
    K = depth if depth is not None else 2 * n - 1
    pot = ext.potential
    X = ext.x.T
    f = drift_expr(pot)
    g = channel_expr(n, channel)
    fields = ad_chain(f, g, X, K + 2, max_depth=K + 2)  # ad^0..ad^{K+1}, each (2n, N)
    psi = ext.psi.T
    sigma = np.array([np.sum(psi * F, axis=0) for F in fields])

    gu, gv = channel_expr(n, "u"), channel_expr(n, "v")
    exprs = [g]
    for _ in range(K):
        exprs.append(bracket(f, exprs[-1]))
    N = X.shape[1]
    coef = np.zeros((N, K + 1, K + 1))
    span_res = 0.0
    u, v = ext.controls[:, 0], ext.controls[:, 1]
    for k in range(K + 1):
        basis = np.stack(fields[: k + 1], axis=0).transpose(2, 1, 0)  # (N, 2n, k+1)
        for ctrl, gc in ((u, gu), (v, gv)):
            br = bracket(gc, exprs[k])(X).T  # (N, 2n)
            sol = _batched_lstsq(basis, br)
            resid = np.einsum("nij,nj->ni", basis, sol) - br
            span_res = max(span_res, float(np.max(np.linalg.norm(resid, axis=1) / (1 + np.linalg.norm(br, axis=1)))))
            coef[:, k, : k + 1] += ctrl[:, None] * sol

    h = float(ext.t[1] - ext.t[0])
    dsig = _five_point(sigma, h)
    keep = np.isfinite(dsig[0])
    for s in ext.schedule.breakpoints:
        keep &= np.abs(ext.t - s) > 3 * h
    rows = np.zeros(K + 1)
    for k in range(K + 1):
        pred = sigma[k + 1] + np.einsum("nj,jn->n", coef[:, k, : k + 1], sigma[: k + 1])
        rows[k] = float(np.max(np.abs(dsig[k] - pred)[keep], initial=0.0))

    zeros = switching_functions(ext)[channel].zeros
    scale = np.max(np.abs(sigma[0])) or 1.0
    flat = _longest_run(np.abs(sigma[0]) < 1e-9 * scale, ext.t)
    return SwitchingAudit(channel, sigma, coef, span_res, rows, zeros, max_zeros_in_window(zeros, window), window, flat)


def _batched_lstsq(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Least-squares solutions for a stack of small systems ``A[i] x = b[i]``."""
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    cutoff = 1e-12 * s[:, :1]
    inv = np.where(s > cutoff, 1.0 / np.where(s > cutoff, s, 1.0), 0.0)
    return np.einsum("nji,nj,nkj,nk->ni", Vt, inv, U, b)


@dataclass
class SwitchingCountReport:
    max_counts: dict[str, int]
    alarms: list[int]
    all_certified: bool
    max_zeros_per_window: dict[str, int]


def switching_count_audit(results: Sequence[MinTimeResult], alarm: int | None = None, window: float = 0.5) -> SwitchingCountReport:
    """Largest switching count per channel over a batch of solved instances."""
    max_counts: dict[str, int] = {}
    max_win: dict[str, int] = {}
    alarms = []
    certified = True
    for idx, res in enumerate(results):
        if res.schedule is None:
            continue
        for c, k in res.schedule.counts.items():
            max_counts[c] = max(max_counts.get(c, 0), k)
            if alarm is not None and k > alarm:
                alarms.append(idx)
        certified &= bool(res.certificate is None or res.certificate.passed)
        if res.extremal is not None:
            for c, sw in switching_functions(res.extremal).items():
                if c in res.schedule.channels:
                    max_win[c] = max(max_win.get(c, 0), max_zeros_in_window(sw.zeros, window))
    return SwitchingCountReport(max_counts, sorted(set(alarms)), certified, max_win)
