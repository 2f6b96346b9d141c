import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chaincontrol import dual
from chaincontrol.chain import gated_cubic
from chaincontrol.lie import (
    BracketDepthError,
    NonFiniteBracketError,
    VectorFieldExpr,
    ad_chain,
    bracket,
    channel_expr,
    closed_form_ad,
    coordinate_expr,
    distribution_rank,
    drift_expr,
    equilibrate,
    involutivity_check,
    leading_coefficient,
    lie_bracket,
    mu,
    predicted_dims,
    rank_profiles,
)
from conftest import random_states
from oracles import fd_bracket, toda_drift, unit

E = math.e


def test_first_brackets_at_origin(pot):
    # frozen from the nested finite-difference oracle
    vals = ad_chain(drift_expr(pot), channel_expr(2, "u"), np.zeros(4), 3)
    assert np.allclose(vals[0], [0, 0, 1, 0])
    assert np.allclose(vals[1], [-1, 0, 0, 0])
    assert np.allclose(vals[2], [0, 0, -1, 1])


def test_second_bracket_coefficient_is_plus_e(pot):
    x = np.array([0.0, -1.0, 0.3, 0.2, -0.5, 0.7])
    vals = ad_chain(drift_expr(pot), channel_expr(3, "u"), x, 3)
    assert np.allclose(vals[1], [-1, 0, 0, 0, 0, 0])
    assert np.allclose(vals[2], [0, 0, 0, -E, E, 0], rtol=1e-14)
    cf = closed_form_ad(2, x, pot, "u", "p")
    assert cf.coefficient == pytest.approx(E) and cf.direction == ("p", 2) and cf.power == 2


@pytest.mark.parametrize("n", [2, 3])
@pytest.mark.parametrize("channel", ["u", "v"])
def test_brackets_match_finite_differences(n, channel, pot):
    x = random_states(n, 1, seed=n + 7, scale=0.5)[:, 0]
    g = (lambda z: unit(n, "p", 1)) if channel == "u" else (lambda z: unit(n, "p", n))
    ad1 = fd_bracket(toda_drift, g)
    ad2 = fd_bracket(toda_drift, ad1, h=1e-4)
    vals = ad_chain(drift_expr(pot), channel_expr(n, channel), x, 3)
    assert np.allclose(vals[1], ad1(x), atol=1e-8)
    assert np.allclose(vals[2], ad2(x), atol=1e-5)


@pytest.mark.parametrize("s", [1, 2, 3])
def test_bracket_with_momentum_direction(s, pot):
    x = random_states(3, 1, seed=s)[:, 0]
    out = lie_bracket(drift_expr(pot), coordinate_expr(3, "p", s), x)
    assert np.allclose(out, -unit(3, "q", s), atol=1e-15)


def test_bracket_with_first_position_direction(pot):
    x = np.array([0.4, -0.3, 1.0, 0.0, 0.5, 2.0])
    out = lie_bracket(drift_expr(pot), coordinate_expr(3, "q", 1), x)
    c = math.exp(0.7)
    assert np.allclose(out, c * (unit(3, "p", 1) - unit(3, "p", 2)))


@pytest.mark.parametrize("n", [2, 3, 4, 5])
@pytest.mark.parametrize("channel", ["u", "v"])
def test_closed_forms_match_ad(n, channel, pot):
    X = random_states(n, 5, seed=10 * n)
    f, g = drift_expr(pot), channel_expr(n, channel)
    for col in X.T:
        vals = ad_chain(f, g, col, 2 * n)
        for k in range(1, n + 1):
            for kind in ("p", "q"):
                cf = closed_form_ad(k, col, pot, channel, kind)
                kd, s = cf.direction
                idx = (s - 1) + (n if kd == "p" else 0)
                got = leading_coefficient(vals[cf.power], vals[: cf.power], idx)
                assert got == pytest.approx(cf.coefficient, rel=1e-9)


def test_mu_mirrors_for_v(pot):
    q = np.array([0.1, -0.2, 0.4, 0.0])
    assert mu(q, 2, pot, "u") == pytest.approx(math.exp(0.3) * math.exp(-0.6))
    assert mu(q, 2, pot, "v") == pytest.approx(math.exp(0.4) * math.exp(-0.6))
    assert mu(q, 0, pot) == 1.0


def test_predicted_dims_n3():
    d = predicted_dims(3)
    assert d["Lambda"] == [1, 2, 3, 4, 5, 6]
    assert d["Delta"] == [2, 4, 5, 6, 6, 6]


@pytest.mark.parametrize("n", [2, 3, 4])
def test_rank_profiles_match_prediction(n, pot):
    prof = rank_profiles(random_states(n, 10, seed=n), pot)
    pred = predicted_dims(n)
    for label in ("Lambda", "Xi", "Delta"):
        assert np.all(prof[label] == np.array(pred[label]))


def test_rank_drops_without_nonvanishing_force_derivative():
    # all gaps negative: the gated potential exerts no force and brackets stall
    x = np.array([0.0, 1.0, 2.0, 0.1, 0.0, -0.1])
    prof = rank_profiles(x, gated_cubic())
    assert prof["Lambda"][0, -1] < 6
    assert prof["Delta"][0, -1] < 6


def test_involutivity_textbook_pairs():
    # fields are written with arithmetic only so that tangents propagate
    def g2(x):
        zero = 0.0 * x[0]
        return dual.stack([zero, x[0], zero, zero])

    def g3(x):
        zero = 0.0 * x[0]
        return dual.stack([zero + 1.0, zero, x[1], zero])

    x = np.array([0.7, 0.2, 0.0, 0.0])
    assert involutivity_check([coordinate_expr(2, "q", 1), VectorFieldExpr(g2)], x)
    assert not involutivity_check([VectorFieldExpr(g3), coordinate_expr(2, "q", 2)], x)


def test_drift_and_control_not_involutive(pot):
    assert not involutivity_check([drift_expr(pot), channel_expr(2, "u")], np.zeros(4))


@pytest.mark.parametrize("seed", range(3))
def test_jacobi_identity(seed, pot):
    x = random_states(2, 1, seed=seed, scale=0.5)[:, 0]
    f, g, h = drift_expr(pot), channel_expr(2, "u"), coordinate_expr(2, "q", 2)
    lhs = bracket(f, bracket(g, h))(x)
    rhs = bracket(bracket(f, g), h)(x) + bracket(g, bracket(f, h))(x)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_depth_cap_and_nonfinite(pot):
    with pytest.raises(BracketDepthError):
        ad_chain(drift_expr(pot), channel_expr(2, "u"), np.zeros(4), 8, max_depth=4)
    with pytest.raises((NonFiniteBracketError, FloatingPointError)):
        ad_chain(drift_expr(pot), channel_expr(2, "u"), np.array([705.0, 0.0, 0.0, 0.0]), 4)


@given(st.integers(1, 5), st.integers(0, 2**31))
def test_equilibration_preserves_rank(r, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((6, r)) @ rng.standard_normal((r, 6))
    A *= np.logspace(-4, 4, 6)[:, None]
    assert distribution_rank(list(A)) == r
    assert np.linalg.matrix_rank(equilibrate(A), tol=1e-8 * np.linalg.norm(equilibrate(A), 2)) == r
