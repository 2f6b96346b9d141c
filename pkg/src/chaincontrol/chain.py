"""Particle chain on a line: states, potentials, vector fields and simulation.

States are stored as ``x = (q_1..q_n, p_1..p_n)``.  Every field function in
this module accepts either a single state of shape ``(2n,)`` or a batch of
shape ``(2n, B)``, and works on plain ndarrays as well as on
:class:`chaincontrol.dual.Dual` values.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import dual

log = logging.getLogger(__name__)


class ChainOverflowError(FloatingPointError):
    """The interaction force could not be evaluated at some gap."""

    def __init__(self, index: int, gap: float):
        self.index = index
        self.gap = gap
        super().__init__(
            f"non-finite interaction force at gap q{index + 1} - q{index + 2} = {gap:.6g}"
        )


class PotentialError(ValueError):
    pass


@dataclass(frozen=True)
class ChainState:
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=float).reshape(-1)
        p = np.array(self.p, dtype=float).reshape(-1)
        if q.size == 0 or q.shape != p.shape:
            raise ValueError(f"q and p must be nonempty and equally long, got {q.size} and {p.size}")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
            raise ValueError("state entries must be finite")
        q.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)

    @property
    def n(self) -> int:
        return self.q.size

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.p])

    @classmethod
    def from_vector(cls, x) -> "ChainState":
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.size % 2:
            raise ValueError("state vector must have even length")
        n = x.size // 2
        return cls(x[:n], x[n:])

    @classmethod
    def at_rest(cls, q) -> "ChainState":
        q = np.asarray(q, dtype=float)
        return cls(q, np.zeros_like(q))

    def to_json(self) -> dict:
        return {"q": self.q.tolist(), "p": self.p.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "ChainState":
        try:
            return cls(obj["q"], obj["p"])
        except KeyError as exc:
            raise ValueError(f"state literal is missing key {exc}") from None


def as_vector(x) -> np.ndarray:
    if isinstance(x, ChainState):
        return x.as_vector()
    return np.asarray(x, dtype=float)


# ---------------------------------------------------------------------------
# potentials


@dataclass(frozen=True)
class PotentialModel:
    """Pair potential Phi with force phi = Phi' and its derivative phi'.

    The three callables must be written with numpy ufuncs so that they can
    be differentiated by :mod:`chaincontrol.dual`.
    """

    name: str
    phi0: Callable
    phi1: Callable
    phi2: Callable
    lower_bound: float = 0.0
    asserts_nonvanishing_phi2: bool = False

    def check(self, grid=None, h: float = 1e-5, tol: float = 1e-6) -> None:
        """Finite-difference consistency of (Phi, phi, phi') on a grid."""
        if grid is None:
            grid = np.linspace(-4.0, 4.0, 81)
        y = np.asarray(grid, dtype=float)
        for lo, hi, label in ((self.phi0, self.phi1, "phi"), (self.phi1, self.phi2, "phi'")):
            fd = (lo(y + h) - lo(y - h)) / (2 * h)
            exact = hi(y)
            bad = np.abs(fd - exact) > tol * (1 + np.abs(exact))
            if np.any(bad):
                y_bad = y[np.argmax(bad)]
                raise PotentialError(f"{self.name}: {label} inconsistent with its antiderivative at y={y_bad:.4g}")
        if -self.lower_bound > np.min(self.phi0(y)) + tol:
            raise PotentialError(f"{self.name}: Phi drops below the declared lower bound -{self.lower_bound}")
        if self.asserts_nonvanishing_phi2 and np.any(self.phi2(y) == 0):
            raise PotentialError(f"{self.name}: phi' vanishes on the grid")


def toda() -> PotentialModel:
    return PotentialModel("toda", np.exp, np.exp, np.exp, lower_bound=0.0, asserts_nonvanishing_phi2=True)


def _sigmoid(y):
    return 1.0 / (1.0 + np.exp(-y))


def softplus(c: float = 1.0) -> PotentialModel:
    """Phi(y) = c log(1 + e^y); a gentler stress-test potential."""

    def phi0(y):
        return c * np.logaddexp(0.0, y)

    def phi1(y):
        return c * _sigmoid(y)

    def phi2(y):
        s = _sigmoid(y)
        return c * s * (1.0 - s)

    return PotentialModel(f"softplus({c:g})", phi0, phi1, phi2, lower_bound=0.0, asserts_nonvanishing_phi2=True)


def gated_cubic() -> PotentialModel:
    """Phi(y) = max(y, 0)^4 / 4.

    phi' vanishes identically for y <= 0, so this potential violates the
    nonvanishing-phi' assumption and is used to exercise rank-drop detection.
    """

    def phi0(y):
        return 0.25 * np.maximum(y, 0.0) ** 4

    def phi1(y):
        return np.maximum(y, 0.0) ** 3

    def phi2(y):
        return 3.0 * np.maximum(y, 0.0) ** 2

    return PotentialModel("gated-cubic", phi0, phi1, phi2, lower_bound=0.0)


POTENTIALS: dict[str, Callable[[], PotentialModel]] = {
    "toda": toda,
    "softplus": softplus,
    "gated-cubic": gated_cubic,
}


def get_potential(name: str | PotentialModel) -> PotentialModel:
    if isinstance(name, PotentialModel):
        return name
    try:
        return POTENTIALS[name]()
    except KeyError:
        raise PotentialError(f"unknown potential {name!r}; choose from {sorted(POTENTIALS)}") from None


# ---------------------------------------------------------------------------
# vector fields on raw state arrays


def _split_state(x):
    n = len(x) // 2
    return n, x[:n], x[n:]


def _forces(q, potential: PotentialModel):
    gaps = q[:-1] - q[1:]
    with np.errstate(over="ignore", invalid="ignore"):
        force = potential.phi1(gaps)
    fp = dual.primal(force)
    if not np.all(np.isfinite(fp)):
        bad = np.argwhere(~np.isfinite(fp))[0]
        raise ChainOverflowError(int(bad[0]), float(dual.primal(gaps)[tuple(bad)]))
    return force


def momentum_rates(q, potential: PotentialModel):
    """pdot_k = phi(q_{k-1} - q_k) - phi(q_k - q_{k+1}) with free ends."""
    if len(q) == 1:
        return dual.zeros_like(q)
    force = _forces(q, potential)
    zero = dual.zeros_like(force[:1])
    return dual.concatenate([zero, force]) - dual.concatenate([force, zero])


def drift(x, potential: PotentialModel):
    if isinstance(x, np.ndarray):
        return _drift_array(x, potential)
    n, q, p = _split_state(x)
    return dual.concatenate([p, momentum_rates(q, potential)])


def _drift_array(x: np.ndarray, potential: PotentialModel) -> np.ndarray:
    n = x.shape[0] // 2
    out = np.empty_like(x, dtype=float)
    out[:n] = x[n:]
    out[n:] = 0.0
    if n > 1:
        gaps = x[: n - 1] - x[1:n]
        force = potential.phi1(gaps)
        if not math.isfinite(force.sum()):
            bad = np.argwhere(~np.isfinite(force))[0]
            raise ChainOverflowError(int(bad[0]), float(gaps[tuple(bad)]))
        out[n : 2 * n - 1] -= force
        out[n + 1 :] += force
    return out


def control_direction(n: int, channel: str) -> np.ndarray:
    """Constant control field: unit vector along p_1 (channel u) or p_n (channel v)."""
    e = np.zeros(2 * n)
    if channel == "u":
        e[n] = 1.0
    elif channel == "v":
        e[2 * n - 1] = 1.0
    else:
        raise ValueError(f"unknown channel {channel!r}")
    return e


def controlled(x, potential: PotentialModel, u, v):
    n = len(x) // 2
    rhs = drift(x, potential)
    if isinstance(rhs, np.ndarray):
        rhs[n] += u
        rhs[2 * n - 1] += v
        return rhs
    push = np.zeros((2 * n,) + np.shape(dual.primal(x))[1:])
    push[n] = push[n] + u
    push[2 * n - 1] = push[2 * n - 1] + v
    return rhs + push


def drift_jacobian(x: np.ndarray, potential: PotentialModel) -> np.ndarray:
    """Analytic Jacobian of the drift, using phi' directly (single state)."""
    x = np.asarray(x, dtype=float)
    n = x.size // 2
    jac = np.zeros((2 * n, 2 * n))
    jac[:n, n:] = np.eye(n)
    if n > 1:
        gaps = x[: n - 1] - x[1:n]
        k = potential.phi2(gaps)
        stiff = np.zeros((n, n))
        idx = np.arange(n - 1)
        # d pdot_k / d q_j for the tridiagonal chain
        stiff[idx, idx] -= k
        stiff[idx, idx + 1] += k
        stiff[idx + 1, idx] += k
        stiff[idx + 1, idx + 1] -= k
        jac[n:, :n] = stiff
    return jac


def total_energy(state, potential: PotentialModel):
    """H(q, p); a float for one state, an array for a batch of shape (2n, B)."""
    x = as_vector(state)
    return kinetic_energy(x) + potential_energy(x, potential)


def kinetic_energy(x):
    x = np.asarray(x, dtype=float)
    n, q, p = _split_state(x)
    out = 0.5 * np.sum(p * p, axis=0)
    return float(out) if x.ndim == 1 else out


def potential_energy(x, potential: PotentialModel):
    x = np.asarray(x, dtype=float)
    n, q, p = _split_state(x)
    if n == 1:
        return 0.0 if x.ndim == 1 else np.zeros(x.shape[1:])
    gaps = q[:-1] - q[1:]
    with np.errstate(over="ignore"):
        vals = potential.phi0(gaps)
    if not np.all(np.isfinite(vals)):
        bad = np.argwhere(~np.isfinite(vals))[0]
        raise ChainOverflowError(int(bad[0]), float(gaps[tuple(bad)]))
    out = np.sum(vals, axis=0)
    return float(out) if x.ndim == 1 else out


@dataclass(frozen=True)
class ControlAffineField:
    n: int
    potential: PotentialModel = field(default_factory=toda)
    channels: tuple[str, ...] = ("u", "v")

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("need at least one particle")
        if not set(self.channels) <= {"u", "v"}:
            raise ValueError(f"channels must be drawn from ('u', 'v'), got {self.channels}")

    def f(self, x):
        return drift(x, self.potential)

    def g(self, channel: str) -> np.ndarray:
        return control_direction(self.n, channel)

    def rhs(self, x, u=0.0, v=0.0):
        if "u" not in self.channels:
            u = 0.0
        if "v" not in self.channels:
            v = 0.0
        return controlled(x, self.potential, u, v)

    def jacobian(self, x) -> np.ndarray:
        return drift_jacobian(x, self.potential)


def drift_field(state, potential: PotentialModel) -> np.ndarray:
    return np.asarray(drift(as_vector(state), potential))


def controlled_field(state, potential: PotentialModel, u: float, v: float) -> np.ndarray:
    return np.asarray(controlled(as_vector(state), potential, u, v))


# ---------------------------------------------------------------------------
# control signals


class ControlSignal:
    """Two-channel control ``(u, v) = signal(t, x)``.

    ``breakpoints`` lists times where the signal may jump; integrators split
    their steps there.  ``bounds`` maps a channel to its admissible interval.
    """

    def __init__(self, fn: Callable, breakpoints: Sequence[float] = (), bounds: dict | None = None):
        self._fn = fn
        self.breakpoints = np.asarray(sorted(breakpoints), dtype=float)
        self.bounds = dict(bounds or {})

    def __call__(self, t: float, x=None):
        return self._fn(t, x)

    @classmethod
    def zero(cls) -> "ControlSignal":
        return cls(lambda t, x: (0.0, 0.0))

    @classmethod
    def constant(cls, u: float, v: float) -> "ControlSignal":
        return cls(lambda t, x: (u, v))

    @classmethod
    def feedback(cls, fn: Callable, bounds: dict | None = None) -> "ControlSignal":
        return cls(fn, bounds=bounds)

    @classmethod
    def piecewise_constant(cls, breaks, u_values, v_values, bounds: dict | None = None) -> "ControlSignal":
        """Values ``u_values[i]`` hold on ``[breaks[i], breaks[i+1])``; the last one holds afterwards."""
        breaks = np.asarray(breaks, dtype=float)
        u_values = np.asarray(u_values, dtype=float)
        v_values = np.asarray(v_values, dtype=float)
        if not (len(breaks) == len(u_values) == len(v_values)):
            raise ValueError("breaks and values must have equal length")

        def fn(t, x):
            i = max(int(np.searchsorted(breaks, t, side="right")) - 1, 0)
            return float(u_values[i]), float(v_values[i])

        sig = cls(fn, breakpoints=breaks[1:], bounds=bounds)
        sig.segments = (breaks, u_values, v_values)
        return sig

    @classmethod
    def from_samples(cls, times, u_values, v_values, bounds: dict | None = None) -> "ControlSignal":
        """Linear interpolation between samples; exact at the sample times."""
        times = np.asarray(times, dtype=float)
        u_values = np.asarray(u_values, dtype=float)
        v_values = np.asarray(v_values, dtype=float)

        def fn(t, x):
            return float(np.interp(t, times, u_values)), float(np.interp(t, times, v_values))

        sig = cls(fn, bounds=bounds)
        sig.samples = (times, u_values, v_values)
        return sig

    def violations(self, times, tol: float = 0.0) -> int:
        """Count sample times at which a declared bound is violated."""
        count = 0
        for t in times:
            u, v = self(t)
            for name, val in (("u", u), ("v", v)):
                if name in self.bounds:
                    lo, hi = self.bounds[name]
                    if val < lo - tol or val > hi + tol:
                        count += 1
        return count


# ---------------------------------------------------------------------------
# integration


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray  # (N, 2n)
    controls: np.ndarray  # (N, 2)
    diagnostic: str | None = None

    @property
    def n(self) -> int:
        return self.x.shape[1] // 2

    @property
    def q(self) -> np.ndarray:
        return self.x[:, : self.n]

    @property
    def p(self) -> np.ndarray:
        return self.x[:, self.n :]

    @property
    def truncated(self) -> bool:
        return self.diagnostic is not None

    def final_state(self) -> ChainState:
        return ChainState.from_vector(self.x[-1])

    def to_csv(self, path) -> None:
        n = self.n
        header = ["t"] + [f"q{k}" for k in range(1, n + 1)] + [f"p{k}" for k in range(1, n + 1)] + ["u", "v"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t, x, c in zip(self.t, self.x, self.controls):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in x] + [repr(float(v)) for v in c])


def time_grid(T: float, step: float) -> np.ndarray:
    """Uniform grid ``0, step, 2 step, ...`` ending exactly at ``T``."""
    if not T > 0:
        raise ValueError("T must be positive")
    if not step > 0:
        raise ValueError("step must be positive")
    count = max(int(math.ceil(T / step - 1e-9)), 1)
    grid = np.arange(count + 1) * step
    grid[-1] = T
    return grid


def rk4_step(rhs: Callable, t: float, x, h: float, t_end: float | None = None):
    """One classical RK4 step; ``t_end`` overrides the time of the last stage."""
    k1 = rhs(t, x)
    k2 = rhs(t + 0.5 * h, x + 0.5 * h * k1)
    k3 = rhs(t + 0.5 * h, x + 0.5 * h * k2)
    k4 = rhs(t + h if t_end is None else t_end, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(rhs: Callable, x0, grid: np.ndarray, breakpoints=()):
    """Fixed-step RK4 over ``grid``; steps containing a breakpoint are split there.

    Returns the states on the grid and, when a step fails, the index of the
    last good state together with the exception.
    """
    x = np.array(x0, dtype=float)
    out = np.empty((len(grid),) + x.shape)
    out[0] = x
    bps = np.asarray(breakpoints, dtype=float)
    if bps.size:
        # a breakpoint within rounding of a node replaces it, so no step straddles the jump
        grid = np.array(grid, dtype=float)
        idx = np.clip(np.searchsorted(grid, bps), 1, len(grid) - 1)
        for i, b in zip(idx, bps):
            for j in (i - 1, i):
                if 0 < j < len(grid) - 1 and abs(grid[j] - b) <= 1e-14 * max(1.0, abs(b)):
                    grid[j] = b
    with np.errstate(over="ignore", invalid="ignore"):
        return _integrate_loop(rhs, x, out, grid, bps)


def _integrate_loop(rhs, x, out, grid, bps):
    for i in range(len(grid) - 1):
        t0, t1 = grid[i], grid[i + 1]
        cuts = bps[(bps > t0 + 1e-14) & (bps < t1 - 1e-14)] if bps.size else ()
        try:
            ta = t0
            for tb in list(cuts) + [t1]:
                # last stage sees the left limit, so a jump at tb belongs to the next step
                x = rk4_step(rhs, ta, x, tb - ta, math.nextafter(tb, ta))
                ta = tb
            if not math.isfinite(x.sum()):
                raise FloatingPointError(f"non-finite state at t={t1:.6g}")
        except FloatingPointError as exc:
            return out[: i + 1], exc
        out[i + 1] = x
    return out, None


def leapfrog(potential: PotentialModel, x0, grid: np.ndarray):
    """Kick-drift-kick splitting for the uncontrolled, separable Hamiltonian flow."""
    x = np.array(x0, dtype=float)
    n = x.shape[0] // 2
    out = np.empty((len(grid),) + x.shape)
    out[0] = x
    q, p = x[:n].copy(), x[n:].copy()
    for i in range(len(grid) - 1):
        h = grid[i + 1] - grid[i]
        p = p + 0.5 * h * momentum_rates(q, potential)
        q = q + h * p
        p = p + 0.5 * h * momentum_rates(q, potential)
        out[i + 1, :n] = q
        out[i + 1, n:] = p
    return out


def simulate(
    field: ControlAffineField,
    x0,
    signal: ControlSignal | None = None,
    T: float = 1.0,
    step: float = 1e-3,
    method: str = "rk4",
) -> Trajectory:
    """Integrate the controlled chain from ``x0`` on the grid ``0:step:T``."""
    grid = time_grid(T, step)
    x0 = as_vector(x0)
    if x0.size != 2 * field.n:
        raise ValueError(f"state has dimension {x0.size}, field expects {2 * field.n}")
    signal = signal or ControlSignal.zero()

    if method == "leapfrog":
        if signal.breakpoints.size or signal(0.0, x0) != (0.0, 0.0):
            raise ValueError("the splitting integrator only handles the uncontrolled flow")
        try:
            xs = leapfrog(field.potential, x0, grid)
        except ChainOverflowError as exc:
            raise ChainOverflowError(exc.index, exc.gap) from None
        return Trajectory(grid, xs, np.zeros((len(grid), 2)))
    if method != "rk4":
        raise ValueError(f"unknown method {method!r}")

    def rhs(t, x):
        u, v = signal(t, x)
        return field.rhs(x, u, v)

    xs, err = integrate(rhs, x0, grid, signal.breakpoints)
    controls = np.array([signal(t, x) for t, x in zip(grid, xs)], dtype=float).reshape(len(xs), 2)
    if "u" not in field.channels:
        controls[:, 0] = 0.0
    if "v" not in field.channels:
        controls[:, 1] = 0.0
    diagnostic = None
    if err is not None:
        diagnostic = f"integration stopped at t={grid[len(xs) - 1]:.6g}: {err}"
        log.warning(diagnostic)
    return Trajectory(grid[: len(xs)], xs, controls, diagnostic)


def simulate_batch(field: ControlAffineField, X0: np.ndarray, feedback: Callable | None, T: float, step: float):
    """RK4 for a batch of initial states ``X0`` of shape ``(2n, B)``.

    ``feedback(t, X)`` returns per-column arrays ``(u, v)``; ``None`` means zero control.
    """
    grid = time_grid(T, step)

    def rhs(t, X):
        if feedback is None:
            return field.f(X)
        u, v = feedback(t, X)
        return field.rhs(X, u, v)

    xs, err = integrate(rhs, X0, grid)
    if err is not None:
        raise err
    return grid, xs
