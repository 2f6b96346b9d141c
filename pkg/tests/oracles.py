"""Independent reference computations used to produce frozen test values.

Nothing here imports the package: the chain dynamics, brackets and the
minimum-time transcription are re-derived with plain numpy, finite
differences and brute-force search.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.optimize import least_squares


def toda_drift(x):
    """Drift of the free-end Toda chain, batch-aware along a trailing axis."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0] // 2
    q, p = x[:n], x[n:]
    out = np.zeros_like(x)
    out[:n] = p
    for k in range(n):
        if k > 0:
            out[n + k] += np.exp(q[k - 1] - q[k])
        if k < n - 1:
            out[n + k] -= np.exp(q[k] - q[k + 1])
    return out


def fd_jacobian(fn, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((fn(x + e) - fn(x - e)) / (2 * h))
    return np.array(cols).T


def fd_bracket(F, G, h=1e-5):
    """[F, G] = DG F - DF G with central-difference Jacobians, as a new function."""

    def br(x):
        return fd_jacobian(G, x, h) @ F(x) - fd_jacobian(F, x, h) @ G(x)

    return br


def unit(n, kind, index):
    e = np.zeros(2 * n)
    e[(index - 1) + (n if kind == "p" else 0)] = 1.0
    return e


# ---------------------------------------------------------------------------
# double integrator


def double_integrator_min_time(d, omega):
    """Rest-to-rest distance d with |u| <= omega: bang-bang with one switch at T/2."""
    T = 2.0 * math.sqrt(abs(d) / omega)
    return T, T / 2


def cubic_rest_to_rest_peak(d, T):
    """Peak |u| of the minimal-degree (cubic) rest-to-rest position profile."""
    # q(t) = d (3 s^2 - 2 s^3), s = t / T, so q'' = d (6 - 12 s) / T^2
    return 6.0 * abs(d) / T**2


# ---------------------------------------------------------------------------
# brute-force transcription for minimum time


def _rk4_piecewise(x0, T, U, V, substeps=6):
    """x(T) for a batch of piecewise-constant control tables U, V of shape (N, B)."""
    N, B = U.shape
    n = x0.size // 2
    h = T / (N * substeps)
    X = np.repeat(x0[:, None], B, axis=1)

    def rhs(X, u, v):
        out = toda_drift(X)
        out[n] += u
        out[2 * n - 1] += v
        return out

    for j in range(N):
        u, v = U[j], V[j]
        for _ in range(substeps):
            k1 = rhs(X, u, v)
            k2 = rhs(X + 0.5 * h * k1, u, v)
            k3 = rhs(X + 0.5 * h * k2, u, v)
            k4 = rhs(X + h * k3, u, v)
            X = X + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
    return X


def _best_residual(x0, x1, T, omega, N, z0, fd=1e-7):
    def unpack(z):
        return z[:N], z[N:]

    def fun(z):
        u, v = unpack(z)
        return _rk4_piecewise(x0, T, u[:, None], v[:, None])[:, 0] - x1

    def jac(z):
        # all perturbed control tables integrated together as one batch
        m = z.size
        Z = np.repeat(z[:, None], 2 * m, axis=1)
        Z[np.arange(m), np.arange(m)] += fd
        Z[np.arange(m), m + np.arange(m)] -= fd
        out = _rk4_piecewise(x0, T, Z[:N], Z[N:])
        return (out[:, :m] - out[:, m:]) / (2 * fd)

    lb = np.r_[np.full(N, -omega), np.full(N, -omega)]
    ub = np.r_[np.full(N, omega), np.zeros(N)]
    z0 = np.clip(z0, lb + 1e-12, ub - 1e-12)
    sol = least_squares(fun, z0, jac=jac, bounds=(lb, ub), xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=200)
    return float(np.linalg.norm(sol.fun)), sol.x


def transcription_min_time(x0, x1, omega, T_lo, T_hi, N=24, tol=1e-9, iters=22):
    """Smallest T in [T_lo, T_hi] for which piecewise-constant controls reach x1.

    Bisection on T; feasibility is a bounded least-squares solve of the
    endpoint equations over 2N control values.
    """
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    z = np.r_[np.zeros(N), np.full(N, -0.5 * omega)]
    res, z_hi = _best_residual(x0, x1, T_hi, omega, N, z)
    if res > tol:
        raise ValueError("upper horizon is not feasible")
    lo, hi = T_lo, T_hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        res, z_mid = _best_residual(x0, x1, mid, omega, N, z_hi)
        if res <= tol:
            hi, z_hi = mid, z_mid
        else:
            lo = mid
    return hi, z_hi
