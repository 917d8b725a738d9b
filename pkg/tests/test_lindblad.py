import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_model, qubit_model
from flagcontrol.errors import DegeneratePostSelection
from flagcontrol.grape import closed_objective
from flagcontrol.hilbert import E, G, HilbertSpace, dagger, fock_annihilation, ket2dm, pauli
from flagcontrol.lindblad import (
    BASELINE_CHI,
    BASELINE_RATES,
    TWO_PI,
    Constraint,
    LogicalTarget,
    ObjectiveSpec,
    PulseSchedule,
    bloch_coefficients,
    build_baseline_model,
    evaluate,
    infidelity_post,
    infidelity_pre,
    liouvillian,
    logical_infidelity,
    post_select,
    propagate_master,
    propagate_unitary,
)


def test_baseline_constants():
    assert BASELINE_CHI == pytest.approx(2 * math.pi * 2.59e6)
    np.testing.assert_allclose(BASELINE_RATES, 2 * math.pi * np.array([275.0, 810.0, 8250.0]))


def test_baseline_model_structure():
    d_c = 5
    m = build_baseline_model(d_c=d_c)
    a = fock_annihilation(d_c)
    space = HilbertSpace(d_c)
    np.testing.assert_allclose(m.drift, 0.5 * BASELINE_CHI * np.kron(dagger(a) @ a, pauli("Z")))
    expected_controls = [
        np.kron(np.eye(d_c), pauli("X")),
        np.kron(np.eye(d_c), pauli("Y")),
        np.kron(a + dagger(a), np.eye(2)),
        np.kron(1j * (a - dagger(a)), np.eye(2)),
    ]
    for got, want in zip(m.controls, expected_controls):
        np.testing.assert_allclose(got, want)
    np.testing.assert_allclose(m.jumps[0].operator, space.cavity_op(a))
    np.testing.assert_allclose(m.jumps[1].operator, space.qubit_op(pauli("minus")))
    np.testing.assert_allclose(m.jumps[2].operator, space.qubit_op(pauli("Z")))
    np.testing.assert_allclose(m.rates, BASELINE_RATES)
    np.testing.assert_allclose(m.projector, np.kron(np.eye(d_c), np.diag([1, 0])))


def test_baseline_model_d10_controls_hermitian():
    m = build_baseline_model(d_c=10)
    assert m.n_controls == 4
    for h in m.controls:
        np.testing.assert_allclose(h, dagger(h))


def test_baseline_model_rejects_negative_rates():
    with pytest.raises(ValueError):
        build_baseline_model(rates=(1.0, -1.0, 0.0))
    with pytest.raises(ValueError):
        build_baseline_model(rates=(1.0, 1.0))


def test_model_validation():
    space = HilbertSpace(2)
    with pytest.raises(ValueError, match="Hermitian"):
        make_model(space, drift=np.triu(np.ones((4, 4))))
    with pytest.raises(ValueError, match="idempotent"):
        make_model(space, projector=0.5 * np.eye(4))
    with pytest.raises(ValueError, match="shape"):
        make_model(space, controls=[np.eye(3)])
    with pytest.raises(ValueError):
        make_model(space, jumps=[(np.eye(4), -1.0)])


def test_pulse_schedule_invariants():
    p = PulseSchedule(np.ones((10, 2)), 1e-9)
    assert p.steps == 10 and p.channels == 2
    assert p.duration == pytest.approx(1e-8)
    with pytest.raises(ValueError):
        p.amplitudes[0, 0] = 3.0
    for bad in (np.ones(3), np.ones((0, 2)), np.ones((2, 0))):
        with pytest.raises(ValueError):
            PulseSchedule(bad, 1e-9)
    with pytest.raises(ValueError):
        PulseSchedule(np.ones((2, 2)), 0.0)


def test_propagate_rejects_bad_inputs(small_model):
    rho = ket2dm(small_model.space.basis(0))
    with pytest.raises(ValueError, match="channels"):
        propagate_master(rho, PulseSchedule(np.zeros((3, 2)), 1e-9), small_model)
    bad = np.zeros((3, 4))
    bad[1, 2] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        propagate_master(rho, PulseSchedule(bad, 1e-9), small_model)
    with pytest.raises(ValueError, match="shape"):
        propagate_master(np.eye(3), PulseSchedule(np.zeros((3, 4)), 1e-9), small_model)
    with pytest.raises(ValueError, match="method"):
        propagate_master(rho, PulseSchedule(np.zeros((3, 4)), 1e-9), small_model, method="euler")


# analytic single-channel solutions


@pytest.mark.parametrize("method", ["exact", "dense", "rk4"])
def test_amplitude_damping(method):
    space = HilbertSpace(3)
    gamma, t = 2.0e5, 0.5e-6  # gamma T = 0.1
    model = make_model(space, jumps=[(space.cavity_op(fock_annihilation(3)), gamma)])
    rho = propagate_master(ket2dm(space.basis(1)), PulseSchedule.zeros(100, 1, t), model, method=method)
    assert np.real(rho[2, 2]) == pytest.approx(math.exp(-0.1), abs=1e-6)
    assert np.real(rho[2, 2]) == pytest.approx(0.904837, abs=1e-6)
    assert np.real(rho[0, 0]) == pytest.approx(1 - math.exp(-0.1), abs=1e-6)


def test_dephasing_coherence():
    gamma, t = 3.0e4, 2e-6
    model = qubit_model(jumps=[("Z", gamma)])
    plus = (np.eye(4)[0] + np.eye(4)[1]) / math.sqrt(2)
    rho = propagate_master(ket2dm(plus), PulseSchedule.zeros(50, 1, t), model)
    assert abs(rho[0, 1]) == pytest.approx(0.5 * math.exp(-2 * gamma * t), abs=1e-9)


def test_rabi_population():
    u, t = TWO_PI * 3e6, 0.1e-6
    model = qubit_model()
    rho = propagate_master(ket2dm(np.eye(4)[0]), PulseSchedule(np.full((40, 1), u), t / 40), model)
    assert np.real(rho[1, 1]) == pytest.approx(math.sin(u * t) ** 2, abs=1e-8)


def test_zero_rates_stay_pure(small_model, random_pulses):
    closed = small_model.closed()
    rho = propagate_master(ket2dm(closed.space.basis(0)), random_pulses(60, 4), closed)
    assert np.real(np.trace(rho @ rho)) == pytest.approx(1.0, abs=1e-9)


def test_integrators_agree_at_baseline_n1000(small_model, random_pulses):
    pulses = random_pulses(1000, 4)
    rho0 = ket2dm(small_model.space.basis(0))
    exact = propagate_master(rho0, pulses, small_model, method="exact")
    rk4 = propagate_master(rho0, pulses, small_model, method="rk4")
    trace_distance = 0.5 * np.sum(np.abs(np.linalg.eigvalsh(exact - rk4)))
    assert trace_distance < 1e-6


def test_exact_matches_dense_superoperator(small_model, random_pulses):
    pulses = random_pulses(30, 4)
    rho0 = ket2dm(small_model.space.basis(1, E))
    exact = propagate_master(rho0, pulses, small_model.scaled(1e3))
    dense = propagate_master(rho0, pulses, small_model.scaled(1e3), method="dense")
    assert np.max(np.abs(exact - dense)) < 1e-12


def test_liouvillian_vectorization(small_model, rng):
    d = small_model.dim
    h = small_model.drift + 1e6 * small_model.controls[2]
    rho = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    lvec = liouvillian(h, small_model) @ rho.reshape(-1)
    direct = -1j * (h @ rho - rho @ h)
    for c in small_model.jumps:
        op = c.operator
        direct += c.rate * (op @ rho @ dagger(op) - 0.5 * (dagger(op) @ op @ rho + rho @ dagger(op) @ op))
    np.testing.assert_allclose(lvec.reshape(d, d), direct, atol=1e-6 * np.max(np.abs(direct)))


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31), gamma_scale=st.floats(0.0, 300.0))
def test_trace_and_positivity(seed, gamma_scale):
    model = build_baseline_model(d_c=3).scaled(gamma_scale)
    r = np.random.default_rng(seed)
    pulses = PulseSchedule(r.uniform(-1, 1, size=(20, 4)) * TWO_PI * 20e6, 5e-9)
    psi = r.normal(size=6) + 1j * r.normal(size=6)
    psi /= np.linalg.norm(psi)
    rho = propagate_master(ket2dm(psi), pulses, model)
    assert abs(np.trace(rho) - 1) < 1e-8
    np.testing.assert_allclose(rho, dagger(rho), atol=1e-10)
    assert np.linalg.eigvalsh(rho).min() >= -1e-9


def test_no_recycling_is_no_jump_branch(small_model, random_pulses):
    pulses = random_pulses(25, 4)
    psi0 = small_model.space.basis(0)
    model = small_model.scaled(100)
    rho = propagate_master(ket2dm(psi0), pulses, model, recycling=False)
    heff = model.hamiltonians(pulses.amplitudes) - 0.5j * model.decay_operator()
    psi = psi0
    from scipy.linalg import expm

    for h in heff:
        psi = expm(-1j * pulses.dt * h) @ psi
    np.testing.assert_allclose(rho, np.outer(psi, psi.conj()), atol=1e-12)


# post-selection and infidelities


def test_post_select_examples(small_model):
    space = small_model.space
    g0 = ket2dm(space.basis(0, G))
    e0 = ket2dm(space.basis(0, E))
    rho_f, p0 = post_select(g0, small_model)
    assert p0 == pytest.approx(1.0)
    np.testing.assert_allclose(rho_f, g0)
    with pytest.raises(DegeneratePostSelection) as info:
        post_select(e0, small_model)
    assert info.value.p0 == 0.0
    rho_f, p0 = post_select(0.5 * g0 + 0.5 * e0, small_model)
    assert p0 == pytest.approx(0.5)
    np.testing.assert_allclose(rho_f, g0)
    assert np.trace(rho_f) == pytest.approx(1.0, abs=1e-10)


def test_infidelity_pre_examples(small_model):
    psi = small_model.space.basis(1)
    assert infidelity_pre(ket2dm(psi), psi) == pytest.approx(0.0, abs=1e-15)
    assert infidelity_pre(ket2dm(small_model.space.basis(2)), psi) == pytest.approx(1.0)


def test_infidelity_post_renormalizes(small_model):
    space = small_model.space
    target = space.basis(1, G)
    rho = 0.6 * ket2dm(target) + 0.3 * ket2dm(space.basis(1, E)) + 0.1 * ket2dm(space.basis(0, G))
    f, p0 = infidelity_post(rho, target, small_model)
    assert p0 == pytest.approx(0.7)
    assert f == pytest.approx(1 - 0.6 / 0.7)
    rho_f, _ = post_select(rho, small_model)
    assert f == pytest.approx(infidelity_pre(rho_f, target), abs=1e-12)


def test_closed_system_post_equals_pre(small_model, random_pulses):
    closed = small_model.closed()
    pulses = random_pulses(30, 4)
    psi0 = closed.space.basis(0)
    psi_t = propagate_unitary(psi0, pulses, closed)
    # a target in the kept subspace and a final state there too: drive only the cavity
    cav_only = PulseSchedule(np.column_stack([np.zeros((30, 2)), pulses.amplitudes[:, 2:]]), pulses.dt)
    rho = propagate_master(ket2dm(psi0), cav_only, closed)
    target = closed.space.basis(1)
    f_post, p0 = infidelity_post(rho, target, closed)
    assert p0 == pytest.approx(1.0, abs=1e-10)
    assert f_post == pytest.approx(infidelity_pre(rho, target), abs=1e-10)
    assert np.linalg.norm(psi_t) == pytest.approx(1.0)


def test_zero_rate_f_pre_matches_closed_objective(small_model, random_pulses):
    closed = small_model.closed()
    pulses = random_pulses(40, 4)
    target = closed.kept_state(np.array([1, np.exp(-0.25j * np.pi), 0, 0]))
    objective = ObjectiveSpec.state_transfer(closed.space.basis(0), target)
    oracle = evaluate(pulses, closed, objective)
    assert oracle.f_pre == pytest.approx(closed_objective(pulses, closed, objective), abs=1e-9)


def test_logical_infidelity_examples(rng):
    psi = rng.normal(size=2) + 1j * rng.normal(size=2)
    psi /= np.linalg.norm(psi)
    paulis = (pauli("X"), pauli("Y"), pauli("Z"))
    eps = bloch_coefficients(psi)
    assert logical_infidelity(ket2dm(psi), paulis, eps) == pytest.approx(0.0, abs=1e-14)
    assert logical_infidelity(np.eye(2) / 2, paulis, eps) == pytest.approx(0.5)


def test_logical_infidelity_matches_state_infidelity(rng):
    psi = rng.normal(size=2) + 1j * rng.normal(size=2)
    psi /= np.linalg.norm(psi)
    rho = ket2dm(rng.normal(size=2) + 1j * rng.normal(size=2))
    rho /= np.trace(rho)
    paulis = (pauli("X"), pauli("Y"), pauli("Z"))
    assert logical_infidelity(rho, paulis, bloch_coefficients(psi)) == pytest.approx(infidelity_pre(rho, psi))


def test_objective_validation(small_model):
    psi = small_model.space.basis(0)
    with pytest.raises(ValueError):
        Constraint(2 * psi, psi)
    with pytest.raises(ValueError):
        LogicalTarget((pauli("X"), pauli("Y"), pauli("Z")), (1.0, 0.5, 0.0))
    with pytest.raises(ValueError):
        LogicalTarget((pauli("minus"), pauli("Y"), pauli("Z")), (1.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        ObjectiveSpec("logical_post_selected", (Constraint(psi, psi),))
    with pytest.raises(ValueError):
        ObjectiveSpec("weird", (Constraint(psi, psi),))
    spec = ObjectiveSpec.state_transfer(3 * psi, psi)
    assert np.linalg.norm(spec.targets[0].initial) == pytest.approx(1.0)


def test_evaluate_counts_kept_population(small_model, random_pulses):
    pulses = random_pulses(50, 4)
    model = small_model.scaled(50)
    target = model.kept_state(np.array([1, 1j, 0, 0]))
    objective = ObjectiveSpec("post_selected", (Constraint(model.space.basis(0), target),))
    r = evaluate(pulses, model, objective)
    rho = propagate_master(ket2dm(model.space.basis(0)), pulses, model)
    assert r.p0 == pytest.approx(np.real(np.trace(model.projector @ rho)))
    assert r.f_pre == pytest.approx(infidelity_pre(rho, target))
    assert 0 <= r.p0 <= 1
