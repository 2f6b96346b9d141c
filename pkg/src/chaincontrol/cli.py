"""Command-line entry point: ``chaincontrol <command> [options]``.

Reports are JSON on stdout (and in ``--out`` when given); time series go to
CSV.  Exit codes: 0 success, 1 usage or validation error, 2 numerical
failure, 3 certification failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import controllability as ctl
from . import lie
from . import linearization as lin
from . import time_optimal as topt
from .chain import (
    ChainOverflowError,
    ChainState,
    ControlAffineField,
    ControlSignal,
    get_potential,
    simulate,
    total_energy,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_CERT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive(kind):
    def conv(text):
        val = kind(text)
        if not val > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return val

    return conv


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--n", type=_positive(int), default=None, help="number of particles")
    common.add_argument("--potential", default=None, help="toda, softplus or gated-cubic")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="write the JSON report here as well")
    common.add_argument("--tol", type=_positive(float), default=None)
    common.add_argument("--config", default=None, help="JSON file of defaults; flags override it")

    p = _Parser(prog="chaincontrol", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="integrate the chain")
    s.add_argument("--T", type=_positive(float), required=True)
    s.add_argument("--step", type=_positive(float), default=None)
    s.add_argument("--steps", type=_positive(int), default=None)
    s.add_argument("--state", default=None, help="initial state JSON {q, p}; random if omitted")
    s.add_argument("--u", type=float, default=0.0)
    s.add_argument("--v", type=float, default=0.0)
    s.add_argument("--method", choices=("rk4", "leapfrog"), default="rk4")
    s.add_argument("--csv", default=None)

    r = sub.add_parser("rank", parents=[common], help="distribution rank profiles")
    r.add_argument("--samples", type=_positive(int), default=100)
    r.add_argument("--scale", type=_positive(float), default=1.0)

    li = sub.add_parser("linearize", parents=[common], help="flat coordinates and feedback terms")
    li.add_argument("--state", default=None)

    st = sub.add_parser("steer", parents=[common], help="flatness-based two-point steering")
    st.add_argument("--from", dest="src", required=True)
    st.add_argument("--to", dest="dst", required=True)
    st.add_argument("--T", type=_positive(float), required=True)
    st.add_argument("--step", type=_positive(float), default=1e-2)
    st.add_argument("--retries", type=int, default=1)
    st.add_argument("--csv", default=None)

    c = sub.add_parser("controllability", parents=[common], help="constrained steering demonstration")
    c.add_argument("--omega", type=_positive(float), required=True)
    c.add_argument("--from", dest="src", default=None)
    c.add_argument("--to", dest="dst", default=None)
    c.add_argument("--shift", type=float, default=1.0, help="rest-to-rest translation when --to is omitted")
    c.add_argument("--budget", type=_positive(float), default=500.0)
    c.add_argument("--csv", default=None)

    for name, helptext in (("mintime", "minimum-time relocation"), ("audit", "switching-function audits")):
        m = sub.add_parser(name, parents=[common], help=helptext)
        m.add_argument("--omega", type=_positive(float), required=True)
        m.add_argument("--d", type=float, default=None, help="rest-to-rest translation distance")
        m.add_argument("--from", dest="src", default=None)
        m.add_argument("--to", dest="dst", default=None)
        m.add_argument("--segments", type=_positive(int), default=20)
        m.add_argument("--csv", default=None)
        if name == "audit":
            m.add_argument("--window", type=_positive(float), default=0.5)
    return p


DEFAULTS = {"n": 2, "potential": "toda", "seed": 0, "tol": 1e-8}


def _apply_config(args):
    conf = {}
    if args.config:
        try:
            conf = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    for key, val in conf.items():
        key = key.replace("-", "_")
        if getattr(args, key, None) is None:
            setattr(args, key, val)
    for key, val in DEFAULTS.items():
        if getattr(args, key, None) is None:
            setattr(args, key, val)
    return args


def _load_state(path, n):
    try:
        state = ChainState.from_json(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot read state {path}: {exc}") from None
    if state.n != n:
        raise UsageError(f"state {path} has {state.n} particles, expected --n {n}")
    return state


def _random_state(n, rng, scale=1.0):
    return ChainState.from_vector(rng.normal(scale=scale, size=2 * n))


def _rest_pair(n, d):
    x0 = np.zeros(2 * n)
    x1 = x0.copy()
    x1[:n] = d
    return x0, x1


def _endpoints(args, default_shift):
    n = args.n
    if args.src or args.dst:
        if not (args.src and args.dst):
            raise UsageError("--from and --to go together")
        return _load_state(args.src, n).as_vector(), _load_state(args.dst, n).as_vector()
    return _rest_pair(n, default_shift)


def _clean(obj):
    """JSON-safe copy: numpy scalars and arrays become Python values, non-finite floats strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        val = float(obj)
        return val if math.isfinite(val) else repr(val)
    return obj


def _emit(report, args):
    text = json.dumps(_clean(report), indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args, pot, rng):
    n = args.n
    x0 = _load_state(args.state, n) if args.state else _random_state(n, rng, 0.5)
    if args.steps is not None:
        step = args.T / args.steps
    else:
        step = args.step or 1e-3
    field = ControlAffineField(n, pot)
    signal = None if args.u == 0 and args.v == 0 else ControlSignal.constant(args.u, args.v)
    traj = simulate(field, x0, signal, T=args.T, step=step, method=args.method)
    if args.csv:
        traj.to_csv(args.csv)
    with np.errstate(over="ignore", invalid="ignore"):
        H = total_energy(traj.x.T, pot)
        drift_H = float(np.max(np.abs(H - H[0])))
    report = {
        "command": "simulate",
        "n": n,
        "potential": pot.name,
        "T": float(traj.t[-1]),
        "step": step,
        "steps": len(traj.t) - 1,
        "energy_initial": float(H[0]),
        "energy_drift": drift_H if signal is None else None,
        "final_state": traj.final_state().to_json(),
        "truncated": traj.truncated,
        "diagnostic": traj.diagnostic,
    }
    return report, EXIT_NUMERIC if traj.truncated else EXIT_OK


def cmd_rank(args, pot, rng):
    n = args.n
    X = rng.normal(scale=args.scale, size=(2 * n, args.samples))
    profiles = lie.rank_profiles(X, pot, tol=args.tol)
    predicted = lie.predicted_dims(n)
    table = {}
    ok = True
    for label, ranks in profiles.items():
        expect = np.asarray(predicted[label])
        bad = int(np.sum(np.any(ranks != expect, axis=1)))
        ok &= bad == 0
        table[label] = {
            "predicted": expect.tolist(),
            "min": ranks.min(axis=0).tolist(),
            "max": ranks.max(axis=0).tolist(),
            "exceptions": bad,
        }
    report = {"command": "rank", "n": n, "potential": pot.name, "samples": args.samples, "profiles": table, "pass": ok}
    return report, EXIT_OK if ok else EXIT_CERT


def cmd_linearize(args, pot, rng):
    n = args.n
    if n < 2:
        raise UsageError("linearize needs --n >= 2")
    x = _load_state(args.state, n) if args.state else _random_state(n, rng, 0.5)
    idx = lin.kronecker_indices(n)
    y, z = lin.flat_coordinates(x, pot)
    cj = lin.chart_jacobian(x, pot)
    ft = lin.feedback_terms(x, pot)
    terms = {"Y": ft.Y, "Z": ft.Z}
    if ft.even:
        terms.update(lam=ft.lam, mu=ft.mu)
    else:
        terms.update(alpha=ft.alpha, beta=ft.beta, gamma=ft.gamma)
    report = {
        "command": "linearize",
        "n": n,
        "state": x.to_json(),
        "kronecker": [idx.k1, idx.k2],
        "y": y,
        "z": z,
        "condition_number": cj.condition_number,
        "nonsingular": cj.nonsingular,
        "feedback": terms,
        "nondegeneracy": ft.nondegeneracy,
    }
    return report, EXIT_OK if cj.nonsingular and ft.nondegeneracy != 0 else EXIT_CERT


def cmd_steer(args, pot, rng):
    n = args.n
    x0 = _load_state(args.src, n).as_vector()
    x1 = _load_state(args.dst, n).as_vector()
    res = lin.steer_flat(x0, x1, args.T, pot, step=args.step, retries=args.retries)
    if args.csv:
        res.trajectory.to_csv(args.csv)
    report = {"command": "steer", **res.report(), "attempts": res.attempts}
    return report, EXIT_OK if res.endpoint_error <= 1e-6 else EXIT_NUMERIC


def cmd_controllability(args, pot, rng):
    x0, x1 = _endpoints(args, args.shift)
    rep = ctl.demonstrate_controllability(x0, x1, args.omega, pot, budget=args.budget)
    if args.csv and rep.trajectory is not None:
        rep.trajectory.to_csv(args.csv)
    report = {"command": "controllability", **rep.to_json()}
    return report, EXIT_OK if rep.success else EXIT_NUMERIC


def _mintime(args, pot):
    x0, x1 = _endpoints(args, 1.0 if args.d is None else args.d)
    opts = topt.MinTimeOptions(seed=args.seed, segments=args.segments)
    return x0, x1, topt.solve_min_time(x0, x1, args.omega, pot, opts)


def cmd_mintime(args, pot, rng):
    x0, x1, res = _mintime(args, pot)
    if args.csv and res.extremal is not None:
        res.extremal.trajectory().to_csv(args.csv)
    report = {"command": "mintime", "omega": args.omega, **res.to_json()}
    certified = res.certificate is None or res.certificate.passed
    return report, EXIT_OK if certified else EXIT_CERT


def cmd_audit(args, pot, rng):
    x0, x1, res = _mintime(args, pot)
    if res.extremal is None:
        return {"command": "audit", "T": 0.0, "channels": {}}, EXIT_OK
    if args.csv:
        res.extremal.trajectory().to_csv(args.csv)
    channels = {}
    ok = res.certificate.passed
    limit = 2 * args.n - 1
    for ch in res.schedule.channels:
        a = topt.switching_system_audit(res.extremal, ch, window=args.window)
        channels[ch] = {
            "zeros": a.zeros,
            "max_zeros_per_window": a.max_zeros_per_window,
            "zero_bound": limit,
            "row_residuals": a.row_residuals,
            "span_residual": a.span_residual,
            "longest_flat_window": a.longest_flat_window,
        }
        ok &= a.max_zeros_per_window <= limit
    report = {"command": "audit", "omega": args.omega, "T": res.T, "window": args.window,
              "certificate": res.certificate.to_json(), "channels": channels, "pass": ok}
    return report, EXIT_OK if ok else EXIT_CERT


COMMANDS = {
    "simulate": cmd_simulate,
    "rank": cmd_rank,
    "linearize": cmd_linearize,
    "steer": cmd_steer,
    "controllability": cmd_controllability,
    "mintime": cmd_mintime,
    "audit": cmd_audit,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _apply_config(args)
        try:
            pot = get_potential(args.potential)
        except (KeyError, ValueError) as exc:
            raise UsageError(str(exc)) from None
        rng = np.random.default_rng(args.seed)
        report, code = COMMANDS[args.command](args, pot, rng)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"chaincontrol: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ChainOverflowError, FloatingPointError, ArithmeticError, lin.ChartInversionError,
            topt.NoFeasibleScheduleError, np.linalg.LinAlgError) as exc:
        print(f"chaincontrol: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    _emit(report, args)
    return code


if __name__ == "__main__":
    sys.exit(main())
