"""Confining feedback, energy boxes and constrained steering demonstrations.

With ``u = u_f(q_1) + u_o`` and ``v = v_f(q_n)`` where ``u_f = -U_f'`` and
``v_f = -V_f'``, the closed loop at ``u_o = 0`` is Hamiltonian with energy
``H + U_f(q_1) + V_f(q_n)``.  The branches used here are

    U_f(q) = (w/2) (sqrt(1 + q^2) - q),   V_f(q) = (w/2) (sqrt(1 + q^2) + q)

which are smooth, positive, grow linearly on the confining side and have
slopes in ``[-w, 0]`` and ``[0, w]``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .chain import (
    ChainState,
    ControlAffineField,
    ControlSignal,
    PotentialModel,
    Trajectory,
    as_vector,
    potential_energy,
    simulate,
    total_energy,
)
from .linearization import ChartInversionError, DegenerateFeedbackError, SteeringResult, steer_flat

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConfiningFeedback:
    omega: float
    lower_bound: float = 0.0  # both branches are positive

    def __post_init__(self):
        if not self.omega > 0:
            raise ValueError("omega must be positive")

    def U_f(self, q):
        return 0.5 * self.omega * (np.hypot(1.0, q) - q)

    def V_f(self, q):
        return 0.5 * self.omega * (np.hypot(1.0, q) + q)

    def u_f(self, q):
        return 0.5 * self.omega * (1.0 - q / np.hypot(1.0, q))

    def v_f(self, q):
        return -0.5 * self.omega * (1.0 + q / np.hypot(1.0, q))

    def closed_loop(self, u_o=None) -> ControlSignal:
        """Signal ``(u_f(q_1) + u_o(t), v_f(q_n))``; ``u_o`` defaults to zero."""

        def fn(t, x):
            n = x.shape[0] // 2
            extra = 0.0 if u_o is None else u_o(t)
            return self.u_f(x[0]) + extra, self.v_f(x[n - 1])

        return ControlSignal.feedback(fn)


def make_confining_feedback(omega: float) -> ConfiningFeedback:
    return ConfiningFeedback(float(omega))


def modified_hamiltonian(x, potential: PotentialModel, feedback: ConfiningFeedback):
    x = as_vector(x)
    n = x.shape[0] // 2
    return total_energy(x, potential) + feedback.U_f(x[0]) + feedback.V_f(x[n - 1])


def _tail_root(fn, level: float, start: float = 0.0) -> float:
    """Largest-side crossing of an eventually increasing ``fn`` with ``level``.

    Returns ``s`` with ``fn(s) = level`` such that ``fn > level`` beyond it, found
    by doubling a bracket to the right of ``start`` and then bisecting.
    """
    lo = start
    if fn(lo) > level:
        # walk left until the function drops below the level
        step = 1.0
        while fn(lo) > level:
            lo -= step
            step *= 2
            if step > 1e12:
                raise ArithmeticError("no crossing found to the left")
    hi = max(lo, 0.0) + 1.0
    step = 1.0
    while fn(hi) <= level:
        hi += step
        step *= 2
        if step > 1e12:
            raise ArithmeticError("function does not grow past the level")
    return float(brentq(lambda s: fn(s) - level, lo, hi, xtol=1e-13, rtol=1e-13))


@dataclass
class EnergyBox:
    n: int
    c: float
    b: float
    B: float
    empty: bool = False

    @property
    def momentum_bound(self) -> float:
        """Bound on ``|p|^2`` over the sublevel set: ``|p|^2 / 2 <= c + B``."""
        return 2.0 * (self.c + self.B)

    @property
    def intervals(self) -> np.ndarray:
        k = np.arange(1, self.n + 1)
        return np.stack([-k * self.b, (self.n + 1 - k) * self.b], axis=1)

    def contains(self, x, tol: float = 0.0) -> np.ndarray:
        """Position-box membership for a state or a batch of rows (N, 2n)."""
        X = np.atleast_2d(np.asarray(x, dtype=float))
        q = X[:, : self.n]
        box = self.intervals
        return np.all((q >= box[:, 0] - tol) & (q <= box[:, 1] + tol), axis=1)

    def to_json(self) -> dict:
        return {
            "c": self.c,
            "b": self.b,
            "B": self.B,
            "empty": self.empty,
            "momentum_bound": self.momentum_bound,
            "box": self.intervals.tolist(),
        }


def energy_box(c: float, n: int, potential: PotentialModel, feedback: ConfiningFeedback) -> EnergyBox:
    """Position box containing ``{H_f <= c}`` for an ``n``-particle chain.

    Each term of the potential part is bounded below, so on the sublevel set
    each one is at most ``c`` minus the lower bounds of the others.  The gap
    bound ``b`` is the largest of the tail crossings of the individual terms.
    """
    phi_lb = potential.lower_bound
    fb_lb = feedback.lower_bound
    total_lb = (n - 1) * phi_lb + 2 * fb_lb
    B = 0.0 if total_lb >= 0 else -total_lb
    # the infimum of each term is not attained, so the level at the bound is empty
    if c <= total_lb:
        return EnergyBox(n, float(c), 0.0, B, empty=True)
    b = 0.0
    if n >= 2:
        level = c - (total_lb - phi_lb)
        b = max(b, _tail_root(lambda s: float(potential.phi0(s)), level))
    level_f = c - (total_lb - fb_lb)
    b = max(b, _tail_root(lambda s: float(feedback.U_f(-s)), level_f))
    b = max(b, _tail_root(lambda s: float(feedback.V_f(s)), level_f))
    return EnergyBox(n, float(c), b, B)


# ---------------------------------------------------------------------------
# constrained steering


def within_bounds(u, v, omega: float, tol: float = 0.0) -> bool:
    u = np.asarray(u)
    v = np.asarray(v)
    return bool(np.all(np.abs(u) <= omega + tol) and np.all(v <= tol) and np.all(v >= -omega - tol))


@dataclass
class ControllabilityReport:
    success: bool
    omega: float
    T_total: float
    endpoint_error: float
    segments: list[SteeringResult] = field(default_factory=list)
    signal: ControlSignal | None = None
    trajectory: Trajectory | None = None
    max_u: float = 0.0
    min_v: float = 0.0
    max_v: float = 0.0
    violations: int = 0
    box: EnergyBox | None = None
    message: str = ""

    @property
    def constraints_respected(self) -> bool:
        return self.violations == 0

    def to_json(self) -> dict:
        return {
            "success": self.success,
            "omega": self.omega,
            "T_total": self.T_total,
            "endpoint_error": self.endpoint_error,
            "max_u": self.max_u,
            "min_v": self.min_v,
            "constraints_respected": self.constraints_respected,
            "segments": len(self.segments),
            "box": None if self.box is None else self.box.to_json(),
            "message": self.message,
        }


def _admissible_segment(x0, x1, T, potential, omega, step, endpoint_tol):
    try:
        res = steer_flat(x0, x1, T, potential, step=step, retries=0)
    except (ChartInversionError, DegenerateFeedbackError, FloatingPointError) as exc:
        return None, str(exc)
    if not within_bounds(res.u, res.v, omega):
        return None, "bounds"
    if not res.endpoint_error <= endpoint_tol:
        return None, "endpoint"
    return res, ""


def _plan_segment(x0, x1, potential, omega, T_start, T_max, step, endpoint_tol, refine):
    """Shortest admissible horizon found by doubling then bisecting."""
    T = T_start
    best = None
    failed_T = 0.0
    while T <= T_max:
        res, why = _admissible_segment(x0, x1, T, potential, omega, step, endpoint_tol)
        if res is not None:
            best = res
            break
        failed_T = T
        T *= 2
    if best is None:
        return None
    lo, hi = failed_T, best.T
    for _ in range(refine):
        if lo <= 0 or hi - lo < 1e-3 * hi:
            break
        mid = 0.5 * (lo + hi)
        res, _ = _admissible_segment(x0, x1, mid, potential, omega, step, endpoint_tol)
        if res is None:
            lo = mid
        else:
            best, hi = res, mid
    return best


def concatenate_signals(segments: list[SteeringResult]) -> ControlSignal:
    """Run sampled segment signals back to back; joints become breakpoints."""
    starts = np.cumsum([0.0] + [s.T for s in segments])
    joints = starts[1:-1]

    def fn(t, x):
        i = int(np.searchsorted(joints, t, side="right"))
        i = min(i, len(segments) - 1)
        return segments[i].signal(t - starts[i], x)

    sig = ControlSignal(fn, breakpoints=joints)
    times = np.concatenate([s.sample_times + starts[i] for i, s in enumerate(segments)])
    sig.samples = (
        times,
        np.concatenate([s.u for s in segments]),
        np.concatenate([s.v for s in segments]),
    )
    return sig


def demonstrate_controllability(
    x0,
    x1,
    omega: float,
    potential: PotentialModel,
    budget: float = 500.0,
    waypoints: int = 1,
    step: float = 1e-2,
    endpoint_tol: float = 1e-5,
    T_start: float = 1.0,
    refine: int = 6,
    max_splits: int = 3,
) -> ControllabilityReport:
    """Steer ``x0`` to ``x1`` with ``|u| <= omega`` and ``-omega <= v <= 0``.

    The path is cut at straight-line waypoints in state space.  Each segment
    is a flatness steering whose horizon is stretched until the sampled
    controls satisfy the bounds.  A segment that cannot be planned is split in
    two, at most ``max_splits`` times.  Success means the controls of the
    concatenated signal are admissible and the re-simulated endpoint error is
    within ``endpoint_tol``.
    """
    x0 = as_vector(x0)
    x1 = as_vector(x1)
    n = x0.size // 2
    fb = make_confining_feedback(omega)
    box = energy_box(float(modified_hamiltonian(x0, potential, fb)), n, potential, fb)
    if np.array_equal(x0, x1):
        return ControllabilityReport(True, omega, 0.0, 0.0, box=box, message="endpoints coincide")

    nodes = [x0 + (x1 - x0) * s for s in np.linspace(0.0, 1.0, waypoints + 1)]
    pending = list(zip(nodes[:-1], nodes[1:], [0] * waypoints))
    segments: list[SteeringResult] = []
    T_used = 0.0
    while pending:
        a, b, depth = pending.pop(0)
        seg = _plan_segment(a, b, potential, omega, T_start, budget - T_used, step, endpoint_tol, refine)
        if seg is None:
            if depth < max_splits:
                mid = 0.5 * (a + b)
                pending[:0] = [(a, mid, depth + 1), (mid, b, depth + 1)]
                continue
            gap = float(np.linalg.norm(a - x1))
            return ControllabilityReport(False, omega, T_used, gap, segments, box=box,
                                         message="budget exhausted; best endpoint gap reported")
        segments.append(seg)
        T_used += seg.T

    signal = concatenate_signals(segments)
    signal.bounds = {"u": (-omega, omega), "v": (-omega, 0.0)}
    field_ = ControlAffineField(n, potential)
    h = min(s.trajectory.t[1] - s.trajectory.t[0] for s in segments)
    traj = simulate(field_, x0, signal, T=T_used, step=h)
    err = float(np.linalg.norm(traj.x[-1] - x1)) if not traj.truncated else math.inf
    _, us, vs = signal.samples
    violations = int(np.sum(np.abs(us) > omega) + np.sum(vs > 0) + np.sum(vs < -omega))
    violations += int(np.sum(np.abs(traj.controls[:, 0]) > omega) + np.sum(traj.controls[:, 1] > 0)
                      + np.sum(traj.controls[:, 1] < -omega))
    return ControllabilityReport(
        success=bool(err <= endpoint_tol and violations == 0),
        omega=omega,
        T_total=T_used,
        endpoint_error=err,
        segments=segments,
        signal=signal,
        trajectory=traj,
        max_u=float(np.max(np.abs(us))),
        min_v=float(np.min(vs)),
        max_v=float(np.max(vs)),
        violations=violations,
        box=box,
    )


def feedback_decomposition(report: ControllabilityReport, feedback: ConfiningFeedback) -> dict:
    """Split the applied controls into ``u_f(q_1) + u_o`` and compare ``v`` with ``v_f(q_n)``."""
    traj = report.trajectory
    if traj is None:
        return {}
    n = traj.n
    uf = feedback.u_f(traj.q[:, 0])
    vf = feedback.v_f(traj.q[:, n - 1])
    return {
        "t": traj.t,
        "u_f": uf,
        "u_o": traj.controls[:, 0] - uf,
        "v_f": vf,
        "v_minus_v_f": traj.controls[:, 1] - vf,
    }
