import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chaincontrol.chain import ControlAffineField, simulate, total_energy
from chaincontrol.controllability import (
    ConfiningFeedback,
    concatenate_signals,
    demonstrate_controllability,
    energy_box,
    feedback_decomposition,
    make_confining_feedback,
    modified_hamiltonian,
    within_bounds,
)
from chaincontrol.linearization import steer_flat
from conftest import random_states

omegas = st.floats(0.1, 10.0)


@given(omegas)
def test_feedback_values_at_origin(omega):
    fb = make_confining_feedback(omega)
    assert fb.u_f(0.0) == pytest.approx(omega / 2)
    assert fb.v_f(0.0) == pytest.approx(-omega / 2)


@pytest.mark.parametrize("omega", [0.5, 1.0, 3.0])
def test_feedback_grid_audit(omega):
    fb = make_confining_feedback(omega)
    q = np.linspace(-1e3, 1e3, 200001)
    u, v = fb.u_f(q), fb.v_f(q)
    assert np.all((u > 0) & (u < omega)) and np.all((v < 0) & (v > -omega))
    assert within_bounds(u, v, omega)
    assert np.all(np.diff(fb.V_f(q)) > 0)
    # the forces are the negative slopes of the branches
    h = 1e-6
    qs = np.linspace(-5, 5, 11)
    assert np.allclose(-(fb.U_f(qs + h) - fb.U_f(qs - h)) / (2 * h), fb.u_f(qs), atol=1e-8)
    assert np.allclose(-(fb.V_f(qs + h) - fb.V_f(qs - h)) / (2 * h), fb.v_f(qs), atol=1e-8)


def test_feedback_rejects_nonpositive_omega():
    with pytest.raises(ValueError):
        ConfiningFeedback(0.0)


@pytest.mark.parametrize("n", [1, 2, 3, 5])
def test_modified_hamiltonian_at_rest_origin(n, pot):
    # n - 1 unit pair energies plus U_f(0) + V_f(0) = omega
    assert modified_hamiltonian(np.zeros(2 * n), pot, make_confining_feedback(1.0)) == pytest.approx(n)


def test_modified_hamiltonian_adds_branches(pot):
    fb = make_confining_feedback(2.0)
    x = random_states(3, 1, seed=3)[:, 0]
    extra = modified_hamiltonian(x, pot, fb) - total_energy(x, pot)
    assert extra == pytest.approx(fb.U_f(x[0]) + fb.V_f(x[2]))


def test_closed_loop_conserves_modified_energy(pot):
    fb = make_confining_feedback(1.5)
    x0 = random_states(3, 1, seed=17)[:, 0]
    traj = simulate(ControlAffineField(3, pot), x0, fb.closed_loop(), T=20.0, step=1e-3)
    H = np.array([modified_hamiltonian(x, pot, fb) for x in traj.x[::50]])
    assert np.max(np.abs(H - H[0])) <= 1e-6 * (1 + abs(H[0]))
    box = energy_box(float(H[0]), 3, pot, fb)
    assert np.all(box.contains(traj.x))
    assert np.all(np.sum(traj.p**2, axis=1) <= box.momentum_bound)


@pytest.mark.parametrize("n", [2, 3, 4])
@given(c=st.floats(2.0, 50.0), extra=st.floats(0.1, 20.0))
def test_energy_box_grows_with_level(n, c, extra, pot):
    fb = make_confining_feedback(1.0)
    small, large = energy_box(c, n, pot, fb), energy_box(c + extra, n, pot, fb)
    assert not small.empty and large.b >= small.b


def test_energy_box_single_particle(pot):
    fb = make_confining_feedback(1.0)
    box = energy_box(3.0, 1, pot, fb)
    assert np.allclose(box.intervals, [[-box.b, box.b]])
    # U_f or V_f alone reaches the level at the bound
    assert max(fb.U_f(-box.b), fb.V_f(box.b)) == pytest.approx(3.0, rel=1e-6)


def test_energy_box_empty_below_infimum(pot):
    fb = make_confining_feedback(1.0)
    assert energy_box(0.0, 2, pot, fb).empty
    assert energy_box(-1.0, 3, pot, fb).empty


def test_energy_box_json(pot):
    box = energy_box(5.0, 2, pot, make_confining_feedback(1.0))
    js = box.to_json()
    assert js["B"] == 0.0 and js["momentum_bound"] == pytest.approx(10.0) and len(js["box"]) == 2


def test_demo_trivial(pot):
    x = np.array([0.0, 1.0, 0.0, 0.0])
    rep = demonstrate_controllability(x, x, 1.0, pot)
    assert rep.success and rep.T_total == 0.0 and not rep.segments


def test_demo_translation(pot):
    rep = demonstrate_controllability([0.0, 0.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0], 2.0, pot)
    assert rep.success and rep.constraints_respected and rep.endpoint_error <= 1e-5
    assert rep.max_u <= 2.0 and -2.0 <= rep.min_v and rep.max_v <= 0.0
    fb = make_confining_feedback(2.0)
    dec = feedback_decomposition(rep, fb)
    assert np.allclose(dec["u_f"] + dec["u_o"], rep.trajectory.controls[:, 0])
    assert np.all(dec["v_f"] < 0)


def test_demo_tighter_bound_takes_longer(pot):
    # rest gap -1: the end forces exp(-1) stay below both bounds
    x0, x1 = np.array([0.0, 1.0, 0.0, 0.0]), np.array([1.0, 2.0, 0.0, 0.0])
    wide = demonstrate_controllability(x0, x1, 2.0, pot)
    tight = demonstrate_controllability(x0, x1, 0.5, pot)
    assert wide.success and tight.success
    assert tight.T_total > wide.T_total


def test_concatenated_signal_is_continuous_in_time(pot):
    a = steer_flat([0.0, 0.0], [0.5, 0.0], 1.0, pot)
    b = steer_flat([0.5, 0.0], [1.0, 0.0], 2.0, pot)
    sig = concatenate_signals([a, b])
    assert sig(0.5) == a.signal(0.5)
    assert sig(2.0) == pytest.approx(b.signal(1.0))
