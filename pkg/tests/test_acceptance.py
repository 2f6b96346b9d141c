"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line."""
import time

import numpy as np
import pytest

from chaincontrol.chain import ControlAffineField, ControlSignal, simulate, toda
from chaincontrol.controllability import (
    demonstrate_controllability,
    energy_box,
    make_confining_feedback,
    modified_hamiltonian,
    within_bounds,
)
from chaincontrol.lie import ad_chain, channel_expr, drift_expr, equilibrate, leading_coefficient, mu, rank_profiles
from chaincontrol.linearization import FlatChart, endpoint_jacobian, steer_flat, verify_normal_form
from chaincontrol.time_optimal import max_zeros_in_window, solve_min_time, switching_functions, switching_system_audit
from oracles import double_integrator_min_time

POT = toda()

N2_INSTANCES = [
    (np.zeros(4), np.array([0.2, 0.2, 0.0, 0.0]), 2.0),
    (np.zeros(4), np.array([0.1, 0.0, 0.0, 0.0]), 2.0),
    (np.array([0.0, 1.0, 0.0, 0.0]), np.array([0.2, 1.2, 0.0, 0.0]), 1.0),
]
N1_GRID = [(d, w) for d in (0.1, 1.0, 10.0) for w in (0.5, 1.0, 2.0)]


@pytest.fixture(scope="module")
def n1_results():
    t0 = time.perf_counter()
    out = [solve_min_time(np.zeros(2), np.array([d, 0.0]), w, POT) for d, w in N1_GRID]
    return out, time.perf_counter() - t0


@pytest.fixture(scope="module")
def n2_results():
    return [solve_min_time(a, b, w, POT) for a, b, w in N2_INSTANCES]


def test_ac01_rank_profiles(verdict):
    t0 = time.perf_counter()
    exceptions = 0
    for n in (2, 3, 4, 5):
        X = np.random.default_rng(100 + n).standard_normal((2 * n, 100))
        prof = rank_profiles(X, POT, tol=1e-8)
        m = np.arange(1, 2 * n + 1)
        exceptions += int(np.sum(np.any(prof["Lambda"] != m, axis=1)))
        exceptions += int(np.sum(np.any(prof["Xi"] != m, axis=1)))
        even = (m % 2 == 0) & (m >= n)
        exceptions += int(np.sum(np.any(prof["Delta"][:, even] != 2 * n, axis=1)))
    elapsed = time.perf_counter() - t0
    verdict("AC1", exceptions == 0 and elapsed <= 60, f"{exceptions} rank exceptions over 400 states in {elapsed:.1f}s (limit 60s)")


def _pair_coefficients(n, X):
    """Per state and k: AD coefficient of generator number 2k-1 on d/dp_k modulo the previous 2k-2 generators."""
    out = np.zeros((X.shape[1], n))
    f, g = drift_expr(POT), channel_expr(n, "u")
    for j, x in enumerate(X.T):
        vals = ad_chain(f, g, x, 2 * n - 1)
        for k in range(1, n + 1):
            out[j, k - 1] = leading_coefficient(vals[2 * k - 2], vals[: 2 * k - 2], n + k - 1)
    return out


def test_ac02_closed_form_brackets(verdict):
    # generators are numbered from 1, so number 2k-1 is ad^{2k-2} f g^u
    worst, bad, total, bad_k = 0.0, 0, 0, set()
    for n in range(1, 6):
        X = np.random.default_rng(200 + n).standard_normal((2 * n, 20))
        got = _pair_coefficients(n, X)
        for k in range(1, n + 1):
            expect = (-1) ** (k - 1) * mu(X[:n], k - 1, POT)
            rel = np.abs(got[:, k - 1] - expect) / np.abs(expect)
            worst = max(worst, float(rel.max()))
            bad += int(np.sum(rel > 1e-6))
            total += rel.size
            if np.any(rel > 1e-6):
                bad_k.add(k)
    verdict("AC2", bad == 0, f"{bad}/{total} coefficients off (-1)^(k-1) mu_(k-1) beyond 1e-6 (k in {sorted(bad_k)}), worst rel {worst:.2e}")


def test_ac02_companion_unsigned_closed_form(verdict):
    worst = 0.0
    for n in range(1, 6):
        X = np.random.default_rng(200 + n).standard_normal((2 * n, 20))
        got = _pair_coefficients(n, X)
        for k in range(1, n + 1):
            expect = mu(X[:n], k - 1, POT)
            worst = max(worst, float(np.max(np.abs(got[:, k - 1] - expect) / np.abs(expect))))
    verdict("AC2*", worst <= 1e-6, f"coefficient equals +mu_(k-1) for all k, worst rel {worst:.2e} (limit 1e-6)")


def test_ac03_normal_form_residuals(verdict):
    worst_chain, worst_nd = 0.0, np.inf
    for n in (2, 3, 4):
        rng = np.random.default_rng(300 + n)
        breaks = np.arange(5.0)
        sig = ControlSignal.piecewise_constant(breaks, rng.uniform(-0.5, 0.5, 5), rng.uniform(-0.5, 0.0, 5))
        x0 = 0.3 * rng.standard_normal(2 * n)
        traj = simulate(ControlAffineField(n, POT), x0, sig, T=5.0, step=1e-3)
        rep = verify_normal_form(traj, POT, breakpoints=sig.breakpoints)
        worst_chain = max(worst_chain, rep.chain_residual)
        worst_nd = min(worst_nd, rep.min_abs_nondegeneracy)
    ok = worst_chain <= 1e-4 and worst_nd > 1e-12
    verdict("AC3", ok, f"max |dy_j/dt - y_(j+1)| = {worst_chain:.2e} (limit 1e-4), min |lam*mu|,|alpha*gamma| = {worst_nd:.3g}")


def test_ac04_chart_nonsingular(verdict):
    worst = np.inf
    for n in (2, 3, 4, 5):
        X = np.random.default_rng(400 + n).standard_normal((2 * n, 100))
        s = np.linalg.svd(FlatChart(n, POT).jacobian(X), compute_uv=False)
        worst = min(worst, float(np.min(s[:, -1] / s[:, 0])))
    verdict("AC4", worst > 1e-10, f"min singular value ratio {worst:.3e} over 400 states (limit 1e-10)")


def test_ac04_companion_scale_invariant(verdict):
    # diagonal row/column scaling keeps (non)singularity but removes the units of the coordinates
    worst = np.inf
    for n in (2, 3, 4, 5):
        X = np.random.default_rng(400 + n).standard_normal((2 * n, 100))
        for J in FlatChart(n, POT).jacobian(X):
            s = np.linalg.svd(equilibrate(J), compute_uv=False)
            worst = min(worst, float(s[-1] / s[0]))
    verdict("AC4*", worst > 1e-10, f"min singular value ratio after equilibration {worst:.3e} over the same states (limit 1e-10)")


def test_ac05_flatness_steering(verdict):
    summary, ok = [], True
    for n in (2, 3):
        rng = np.random.default_rng(500 + n)
        good = 0
        for _ in range(10):
            x0 = 0.5 * rng.standard_normal(2 * n)
            d = rng.standard_normal(2 * n)
            x1 = x0 + rng.uniform(0.0, 1.0) * d / np.linalg.norm(d)
            try:
                res = steer_flat(x0, x1, 5.0, POT, retries=1)
                good += res.endpoint_error <= 1e-6
            except Exception:
                pass
        ok &= good >= 9
        summary.append(f"n={n}: {good}/10")
    verdict("AC5", ok, f"endpoint error <= 1e-6 in {', '.join(summary)} (need 9/10)")


def test_ac06_constant_rank(verdict):
    rng = np.random.default_rng(600)
    field = ControlAffineField(2, POT)
    ranks = []
    for _ in range(50):
        x0 = 0.5 * rng.standard_normal(4)
        J = endpoint_jacobian(field, x0, 2.0, rng.uniform(-1.0, 1.0, (20, 2)))
        s = np.linalg.svd(J, compute_uv=False)
        ranks.append(int(np.sum(s > 1e-6 * s[0])))
    ok = all(r == 4 for r in ranks)
    verdict("AC6", ok, f"endpoint-map Jacobian ranks {sorted(set(ranks))} over 50 controls (expected 4)")


def test_ac07_confining_feedback(verdict):
    fb = make_confining_feedback(1.0)
    x0 = 0.5 * np.random.default_rng(700).standard_normal(6)
    traj = simulate(ControlAffineField(3, POT), x0, fb.closed_loop(), T=100.0, step=1e-3)
    Hf = modified_hamiltonian(traj.x.T, POT, fb)
    drift = float(np.max(np.abs(Hf - Hf[0])))
    box = energy_box(float(Hf[0]), 3, POT, fb)
    excursions = int(np.sum(~box.contains(traj.x))) + int(np.sum(np.sum(traj.p**2, axis=1) > box.momentum_bound))
    ok = not traj.truncated and drift <= 1e-5 * (1 + abs(Hf[0])) and excursions == 0
    verdict("AC7", ok, f"|H_f - H_f(0)| <= {drift:.2e} (limit {1e-5 * (1 + abs(Hf[0])):.2e}), {excursions} box excursions")


def test_ac08_double_integrator_oracle(verdict, n1_results):
    results, elapsed = n1_results
    worst, counts = 0.0, set()
    for (d, w), res in zip(N1_GRID, results):
        T, _ = double_integrator_min_time(d, w)
        worst = max(worst, abs(res.T - T) / T)
        counts.add(sum(res.schedule.counts.values()))
    ok = worst <= 1e-3 and counts == {1} and elapsed <= 30
    verdict("AC8", ok, f"worst rel error {worst:.2e} (limit 1e-3), switch counts {sorted(counts)}, {elapsed:.1f}s (limit 30s)")


def test_ac09_extremal_certification(verdict, n1_results, n2_results):
    certified = [r for r in list(n1_results[0]) + list(n2_results) if r.certificate is not None and r.certificate.passed]
    bad = [
        r for r in certified
        if not (r.certificate.residual <= 1e-6 and r.certificate.transversality >= -1e-6 and r.certificate.hamiltonian_spread <= 1e-5)
    ]
    n2_cert = sum(r.certificate is not None and r.certificate.passed for r in n2_results)
    worst = max((r.certificate.hamiltonian_spread for r in certified), default=np.nan)
    ok = not bad and n2_cert > 0
    verdict("AC9", ok, f"{len(certified)} certified schedules ({n2_cert} with n=2), {len(bad)} violations, worst Pi spread {worst:.1e}")


def test_ac10_switching_audits(verdict, n2_results):
    certified = [r for r in n2_results if r.certificate is not None and r.certificate.passed]
    max_zeros, worst_row = 0, 0.0
    for res in certified:
        sw = switching_functions(res.extremal)
        for ch in ("u", "v"):
            max_zeros = max(max_zeros, max_zeros_in_window(sw[ch].zeros, 0.5))
            worst_row = max(worst_row, float(switching_system_audit(res.extremal, ch, window=0.5).row_residuals[0]))
    ok = bool(certified) and max_zeros <= 3 and worst_row <= 1e-5
    verdict("AC10", ok, f"{len(certified)} instances: max zeros per 0.5 window {max_zeros} (limit 3), k=0 residual {worst_row:.1e} (limit 1e-5)")


def test_ac11_constraint_compliance(verdict):
    demos = [
        (np.zeros(4), np.array([1.0, 1.0, 0.0, 0.0]), 2.0),
        (np.array([0.0, 1.0, 0.0, 0.0]), np.array([1.0, 2.0, 0.0, 0.0]), 0.5),
        (np.array([0.0, 1.0, 2.0, 0.0, 0.0, 0.0]), np.array([0.5, 1.5, 2.5, 0.0, 0.0, 0.0]), 1.0),
    ]
    violations, emitted = 0, 0
    for x0, x1, w in demos:
        rep = demonstrate_controllability(x0, x1, w, POT)
        if rep.signal is None:
            continue
        emitted += 1
        t = np.linspace(0.0, rep.T_total, 20001)
        uv = np.array([rep.signal(s) for s in t])
        violations += int(np.sum(~((np.abs(uv[:, 0]) <= w) & (uv[:, 1] <= 0.0) & (uv[:, 1] >= -w))))
        violations += int(not within_bounds(rep.trajectory.controls[:, 0], rep.trajectory.controls[:, 1], w))
        for seg in rep.segments:
            violations += int(not within_bounds(seg.u, seg.v, w))
        violations += rep.violations
    ok = emitted == len(demos) and violations == 0
    verdict("AC11", ok, f"{emitted} demo signals checked pointwise, {violations} bound violations")
