import numpy as np
import pytest

from flagcontrol.hilbert import HilbertSpace, pauli
from flagcontrol.lindblad import JumpChannel, PulseSchedule, SystemModel, build_baseline_model

# filled by tests/test_acceptance.py, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def make_model(space, drift=None, controls=None, jumps=(), projector=None):
    d = space.total_dim
    drift = np.zeros((d, d), dtype=complex) if drift is None else drift
    controls = (np.zeros((d, d), dtype=complex),) if controls is None else tuple(controls)
    projector = np.eye(d, dtype=complex) if projector is None else projector
    return SystemModel(space, drift, controls, tuple(JumpChannel(op, r) for op, r in jumps), projector)


def qubit_model(controls=("X",), jumps=()):
    """Two-level toy on a d_c=2 cavity factor frozen in |0>; only the qubit moves."""
    space = HilbertSpace(2)
    g_proj = space.qubit_op(np.diag([1.0, 0.0]).astype(complex))
    return make_model(
        space,
        controls=[space.qubit_op(pauli(c)) for c in controls],
        jumps=[(space.qubit_op(pauli(op)), r) for op, r in jumps],
        projector=g_proj,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_model():
    return build_baseline_model(d_c=4)


@pytest.fixture
def random_pulses(rng):
    def factory(steps, channels, duration=1e-7, scale=2 * np.pi * 10e6):
        return PulseSchedule(rng.uniform(-scale, scale, size=(steps, channels)), duration / steps)

    return factory
