"""System models and the exact open-system oracle.

All frequencies and rates are angular (rad/s); times are in seconds.  Values
quoted as ``X/2pi = v`` are stored as ``2*pi*v``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import DegeneratePostSelection
from .hilbert import (
    G,
    HilbertSpace,
    dagger,
    fock_annihilation,
    is_hermitian,
    ket2dm,
    matrix_exponential,
    normalize,
    pauli,
)

TWO_PI = 2 * math.pi
BASELINE_CHI = TWO_PI * 2.59e6
BASELINE_RATES = (TWO_PI * 275.0, TWO_PI * 810.0, TWO_PI * 8250.0)
P0_FLOOR = 1e-12


@dataclass(frozen=True)
class JumpChannel:
    operator: np.ndarray
    rate: float

    def __post_init__(self):
        if not self.rate >= 0:
            raise ValueError(f"jump rate must be non-negative, got {self.rate}")


@dataclass(frozen=True, eq=False)
class SystemModel:
    """Drift, controls, jump channels and the kept-outcome projector ``M0``."""

    space: HilbertSpace
    drift: np.ndarray
    controls: tuple[np.ndarray, ...]
    jumps: tuple[JumpChannel, ...]
    projector: np.ndarray

    def __post_init__(self):
        d = self.space.total_dim
        ops = [self.drift, *self.controls, self.projector, *(c.operator for c in self.jumps)]
        for op in ops:
            if op.shape != (d, d):
                raise ValueError(f"operator of shape {op.shape} does not match dim {d}")
        for op in (self.drift, *self.controls):
            if not is_hermitian(op):
                raise ValueError("drift and control Hamiltonians must be Hermitian")
        m = self.projector
        if not (is_hermitian(m) and np.max(np.abs(m @ m - m)) <= 1e-10):
            raise ValueError("projector must be Hermitian and idempotent")

    @property
    def dim(self) -> int:
        return self.space.total_dim

    @property
    def n_controls(self) -> int:
        return len(self.controls)

    @property
    def rates(self) -> np.ndarray:
        return np.array([c.rate for c in self.jumps])

    def with_rates(self, rates: Sequence[float]) -> "SystemModel":
        if len(rates) != len(self.jumps):
            raise ValueError("one rate per jump channel required")
        jumps = tuple(JumpChannel(c.operator, float(r)) for c, r in zip(self.jumps, rates))
        return replace(self, jumps=jumps)

    def scaled(self, factor: float) -> "SystemModel":
        """Copy with every rate multiplied by ``factor``."""
        return self.with_rates(self.rates * factor)

    def closed(self) -> "SystemModel":
        return self.with_rates(np.zeros(len(self.jumps)))

    def hamiltonians(self, amplitudes: np.ndarray) -> np.ndarray:
        """Stack of piecewise-constant Hamiltonians, shape ``(N, d, d)``."""
        amplitudes = np.asarray(amplitudes, dtype=float)
        return self.drift + np.tensordot(amplitudes, np.array(self.controls), axes=(1, 0))

    def decay_operator(self) -> np.ndarray:
        """``sum_mu gamma_mu c^dag c``; ``H_eff = H - i/2 * decay_operator``."""
        out = np.zeros((self.dim, self.dim), dtype=complex)
        for c in self.jumps:
            out += c.rate * (dagger(c.operator) @ c.operator)
        return out

    def kept_state(self, cavity_state: np.ndarray) -> np.ndarray:
        """Normalized ``|psi> (x) |g>``."""
        return normalize(self.space.product(cavity_state, G))


@dataclass(frozen=True)
class PulseSchedule:
    """Piecewise-constant amplitudes ``u[k, j]`` (rad/s) on ``N`` steps of width ``dt`` (s)."""

    amplitudes: np.ndarray
    dt: float

    def __post_init__(self):
        amps = np.array(self.amplitudes, dtype=float)
        if amps.ndim != 2 or amps.shape[0] < 1 or amps.shape[1] < 1:
            raise ValueError(f"amplitudes must be an (N, J) array, got shape {amps.shape}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def zeros(cls, steps: int, channels: int, duration: float) -> "PulseSchedule":
        return cls(np.zeros((steps, channels)), duration / steps)

    @property
    def steps(self) -> int:
        return self.amplitudes.shape[0]

    @property
    def channels(self) -> int:
        return self.amplitudes.shape[1]

    @property
    def duration(self) -> float:
        return self.steps * self.dt

    def with_amplitudes(self, amplitudes: np.ndarray) -> "PulseSchedule":
        return PulseSchedule(amplitudes, self.dt)


@dataclass(frozen=True)
class LogicalTarget:
    """Decoded tomography operators ``(X_L, Y_L, Z_L)`` with target Bloch coefficients."""

    operators: tuple[np.ndarray, np.ndarray, np.ndarray]
    coefficients: tuple[float, float, float]

    def __post_init__(self):
        for op in self.operators:
            if not is_hermitian(op):
                raise ValueError("tomography operators must be Hermitian")
        if sum(e * e for e in self.coefficients) > 1 + 1e-10:
            raise ValueError("target Bloch vector longer than 1")


@dataclass(frozen=True)
class Constraint:
    initial: np.ndarray
    target: np.ndarray | LogicalTarget

    def __post_init__(self):
        if abs(np.linalg.norm(self.initial) - 1) > 1e-10:
            raise ValueError("initial state must be normalized")
        if not isinstance(self.target, LogicalTarget):
            if abs(np.linalg.norm(self.target) - 1) > 1e-10:
                raise ValueError("target state must be normalized")


@dataclass(frozen=True)
class ObjectiveSpec:
    """Which figure of merit to optimize and the constraints it sums over.

    ``kind`` is one of ``conventional``, ``post_selected`` or
    ``logical_post_selected``.
    """

    kind: str
    targets: tuple[Constraint, ...]
    weights: tuple[float, ...] | None = field(default=None)

    def __post_init__(self):
        if self.kind not in ("conventional", "post_selected", "logical_post_selected"):
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if not self.targets:
            raise ValueError("at least one constraint required")
        logical = [isinstance(c.target, LogicalTarget) for c in self.targets]
        if self.kind == "logical_post_selected" and not all(logical):
            raise ValueError("logical objective needs LogicalTarget descriptors")
        if self.weights is not None and len(self.weights) != len(self.targets):
            raise ValueError("one weight per constraint")

    @classmethod
    def state_transfer(cls, initial, target, kind="conventional") -> "ObjectiveSpec":
        return cls(kind, (Constraint(normalize(initial), normalize(target)),))

    def weight(self, i: int) -> float:
        return 1.0 if self.weights is None else float(self.weights[i])


def build_baseline_model(
    chi: float = BASELINE_CHI,
    d_c: int = 8,
    rates: Sequence[float] = BASELINE_RATES,
) -> SystemModel:
    """Dispersively coupled cavity and transmon with the three dominant decay channels.

    Drift ``(chi/2) a^dag a sigma_z``; controls ``sigma_x``, ``sigma_y``,
    ``a + a^dag``, ``i(a - a^dag)``; jumps cavity loss ``a``, qubit decay
    ``sigma_-`` and qubit dephasing ``sigma_z``; post-selection on ``|g>``.
    """
    if len(rates) != 3:
        raise ValueError("three rates (cavity loss, qubit decay, qubit dephasing) required")
    if any(r < 0 for r in rates):
        raise ValueError(f"rates must be non-negative, got {rates}")
    space = HilbertSpace(d_c)
    a = fock_annihilation(d_c)
    ad = dagger(a)
    drift = 0.5 * chi * np.kron(ad @ a, pauli("Z"))
    controls = (
        space.qubit_op(pauli("X")),
        space.qubit_op(pauli("Y")),
        space.cavity_op(a + ad),
        space.cavity_op(1j * (a - ad)),
    )
    jumps = (
        JumpChannel(space.cavity_op(a), float(rates[0])),
        JumpChannel(space.qubit_op(pauli("minus")), float(rates[1])),
        JumpChannel(space.qubit_op(pauli("Z")), float(rates[2])),
    )
    g_proj = np.diag([1.0, 0.0]).astype(complex)
    return SystemModel(space, drift, controls, jumps, space.qubit_op(g_proj))


# -- master-equation propagation ------------------------------------------------


def _check_pulses(pulses: PulseSchedule, model: SystemModel):
    if pulses.channels != model.n_controls:
        raise ValueError(
            f"pulse schedule has {pulses.channels} channels, model has {model.n_controls} controls"
        )
    if not np.all(np.isfinite(pulses.amplitudes)):
        raise ValueError("non-finite pulse amplitudes")


def _one_norm(a: np.ndarray) -> float:
    return float(np.max(np.sum(np.abs(a), axis=0)))


def liouvillian(h: np.ndarray, model: SystemModel, recycling: bool = True) -> np.ndarray:
    """Superoperator on row-major ``vec(rho)``: ``vec(A rho B) = (A kron B^T) vec(rho)``."""
    d = h.shape[0]
    eye = np.eye(d)
    heff = h - 0.5j * model.decay_operator()
    sup = -1j * np.kron(heff, eye) + 1j * np.kron(eye, heff.conj())
    if recycling:
        for c in model.jumps:
            if c.rate:
                sup += c.rate * np.kron(c.operator, c.operator.conj())
    return sup


def _taylor_step(rho, heff, heff_dag, sq_jumps, h):
    """``exp(h L) rho`` by a truncated Taylor series on the matrix-shaped state."""
    total = rho
    term = rho
    k = 0
    while True:
        k += 1
        nxt = -1j * (heff @ term - term @ heff_dag)
        for c, cd in sq_jumps:
            nxt = nxt + c @ term @ cd
        term = nxt * (h / k)
        total = total + term
        if np.max(np.abs(term)) <= 1e-17 * max(1.0, np.max(np.abs(total))) or k > 60:
            return total


def _rk4_step(rho, heff, heff_dag, sq_jumps, h):
    def rhs(r):
        out = -1j * (heff @ r - r @ heff_dag)
        for c, cd in sq_jumps:
            out = out + c @ r @ cd
        return out

    k1 = rhs(rho)
    k2 = rhs(rho + 0.5 * h * k1)
    k3 = rhs(rho + 0.5 * h * k2)
    k4 = rhs(rho + h * k3)
    return rho + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)


def propagate_master(
    rho0: np.ndarray,
    pulses: PulseSchedule,
    model: SystemModel,
    method: str = "exact",
    recycling: bool = True,
    max_substep_norm: float | None = None,
) -> np.ndarray:
    """Integrate the Lindblad equation over a piecewise-constant schedule.

    Args:
        rho0: initial density matrix.
        pulses: control amplitudes.
        model: system model supplying drift, controls and jump channels.
        method: ``"exact"`` applies the exact per-step exponential of the
            Liouvillian to the state (Taylor series with norm-based
            substepping, accurate to round-off); ``"dense"`` forms
            ``exp(L dt)`` as a ``d^2 x d^2`` matrix, cached per distinct
            step; ``"rk4"`` uses fixed-substep Runge-Kutta.
        recycling: when False the ``c rho c^dag`` terms are dropped, which
            yields the unnormalized no-jump density matrix.
        max_substep_norm: bound on ``h * ||L||`` per substep. Defaults to
            0.5 for ``exact`` and 0.05 for ``rk4``.

    Returns:
        The density matrix at the end of the schedule.
    """
    _check_pulses(pulses, model)
    rho = np.array(rho0, dtype=complex)
    d = model.dim
    if rho.shape != (d, d):
        raise ValueError(f"density matrix shape {rho.shape} does not match dim {d}")
    hams = model.hamiltonians(pulses.amplitudes)
    dt = pulses.dt

    if method == "dense":
        cache: dict[bytes, np.ndarray] = {}
        vec = rho.reshape(-1)
        for k in range(pulses.steps):
            key = pulses.amplitudes[k].tobytes()
            prop = cache.get(key)
            if prop is None:
                prop = matrix_exponential(liouvillian(hams[k], model, recycling) * dt)
                cache[key] = prop
            vec = prop @ vec
        return vec.reshape(d, d)

    if method not in ("exact", "rk4"):
        raise ValueError(f"unknown integration method {method!r}")
    step = _taylor_step if method == "exact" else _rk4_step
    bound = max_substep_norm or (0.5 if method == "exact" else 0.05)
    decay = model.decay_operator()
    sq_jumps = []
    jump_norm = 0.0
    if recycling:
        for c in model.jumps:
            if c.rate:
                sq_jumps.append((c.rate * c.operator, dagger(c.operator)))
                jump_norm += c.rate * _one_norm(c.operator) ** 2
    for k in range(pulses.steps):
        heff = hams[k] - 0.5j * decay
        heff_dag = dagger(heff)
        lnorm = 2 * _one_norm(heff) + jump_norm
        n_sub = max(1, math.ceil(lnorm * dt / bound))
        h = dt / n_sub
        for _ in range(n_sub):
            rho = step(rho, heff, heff_dag, sq_jumps, h)
    return rho


def propagate_unitary(psi0: np.ndarray, pulses: PulseSchedule, model: SystemModel) -> np.ndarray:
    """Closed-system evolution of a pure state (jump channels ignored)."""
    _check_pulses(pulses, model)
    props = matrix_exponential(-1j * pulses.dt * model.hamiltonians(pulses.amplitudes))
    psi = np.asarray(psi0, dtype=complex)
    for u in props:
        psi = u @ psi
    return psi


# -- post-selection and figures of merit ---------------------------------------


def post_select(rho_t: np.ndarray, model: SystemModel) -> tuple[np.ndarray, float]:
    """Project onto the kept ancilla outcome; returns ``(rho_f, p0)``."""
    m = model.projector
    p0 = float(np.real(np.trace(m @ rho_t)))
    if p0 < P0_FLOOR:
        raise DegeneratePostSelection(p0, P0_FLOOR)
    return m @ rho_t @ m / p0, p0


def infidelity_pre(rho_t: np.ndarray, target: np.ndarray) -> float:
    target = np.asarray(target, dtype=complex)
    return 1.0 - float(np.real(target.conj() @ rho_t @ target))


def infidelity_post(rho_t: np.ndarray, target: np.ndarray, model: SystemModel) -> tuple[float, float]:
    """Infidelity after post-selection together with the success probability."""
    p0 = float(np.real(np.trace(model.projector @ rho_t)))
    if p0 < P0_FLOOR:
        raise DegeneratePostSelection(p0, P0_FLOOR)
    target = np.asarray(target, dtype=complex)
    overlap = float(np.real(target.conj() @ rho_t @ target))
    return 1.0 - overlap / p0, p0


def logical_infidelity(rho_f: np.ndarray, tomography, coefficients) -> float:
    """``1/2 - 1/2 sum_j eps_j Tr[rho_f O_j]`` for decoded logical operators ``O_j``."""
    total = sum(e * np.real(np.trace(rho_f @ op)) for e, op in zip(coefficients, tomography))
    return 0.5 - 0.5 * float(total)


def lift_logical(target: LogicalTarget, model: SystemModel) -> LogicalTarget:
    """Lift cavity-space tomography operators to ``M0 (O (x) I) M0`` on the composite space."""
    m = model.projector
    d = model.dim
    ops = []
    for op in target.operators:
        if op.shape != (d, d):
            op = model.space.cavity_op(op)
        ops.append(m @ op @ m)
    return LogicalTarget(tuple(ops), target.coefficients)


def bloch_coefficients(psi: np.ndarray) -> tuple[float, float, float]:
    """``<psi|sigma_j|psi>`` for a normalized two-component state."""
    psi = normalize(psi)
    return tuple(float(np.real(psi.conj() @ pauli(p) @ psi)) for p in ("X", "Y", "Z"))


@dataclass(frozen=True)
class OracleResult:
    f_pre: float
    f_post: float
    p0: float


def evaluate(pulses: PulseSchedule, model: SystemModel, objective: ObjectiveSpec, method="exact") -> OracleResult:
    """Master-equation figures of merit, averaged over the objective's constraints.

    For logical targets the infidelities are the decoded ones: ``f_pre`` uses
    the lifted operators on ``rho(T)`` without renormalization, ``f_post`` on
    the post-selected state.
    """
    f_pre = f_post = p0_sum = 0.0
    for c in objective.targets:
        rho_t = propagate_master(ket2dm(c.initial), pulses, model, method=method)
        p0 = float(np.real(np.trace(model.projector @ rho_t)))
        if isinstance(c.target, LogicalTarget):
            full = LogicalTarget(
                tuple(model.space.cavity_op(o) if o.shape[0] != model.dim else o for o in c.target.operators),
                c.target.coefficients,
            )
            f_pre += logical_infidelity(rho_t, full.operators, full.coefficients)
            lifted = lift_logical(c.target, model)
            if p0 < P0_FLOOR:
                raise DegeneratePostSelection(p0, P0_FLOOR)
            f_post += logical_infidelity(rho_t / p0, lifted.operators, lifted.coefficients)
        else:
            f_pre += infidelity_pre(rho_t, c.target)
            f_post += infidelity_post(rho_t, c.target, model)[0]
        p0_sum += p0
    n = len(objective.targets)
    return OracleResult(f_pre / n, f_post / n, p0_sum / n)
