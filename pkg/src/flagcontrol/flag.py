"""Flag-GRAPE: post-selected objectives estimated and differentiated along trajectories.

Within one evaluation the sampled jump locations and importance weights are
frozen; the objective is then a deterministic function of the pulses,

    Phi(u) = sum_i (1 - num_i(u) / p0_i(u)),

with ``num_i`` and ``p0_i`` weighted sums of path expectations of the target
projector and of ``M0``.  Its gradient follows from the quotient rule and the
chain-insertion gradients of :mod:`flagcontrol.chain`.  Logical objectives
replace the target projector by ``M0 O_j M0`` for decoded tomography
operators ``O_j``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chain import StepDerivativeMap, propagate_paths, weighted_gradient
from .errors import DegeneratePostSelection
from .hilbert import ket2dm
from .lindblad import P0_FLOOR, LogicalTarget, ObjectiveSpec, PulseSchedule, SystemModel, lift_logical
from .trajectories import (
    StepPropagatorChain,
    TrajectoryEnsemble,
    assemble_expectation,
    build_chain,
    build_ensemble,
    exhaustive_expectation,
    jump_kraus,
    run_no_jump,
)


def _observables(constraint, model: SystemModel) -> tuple[np.ndarray, tuple[float, ...] | None]:
    """Observables per constraint; the last one is always ``M0``."""
    if isinstance(constraint.target, LogicalTarget):
        lifted = lift_logical(constraint.target, model)
        return np.array([*lifted.operators, model.projector]), lifted.coefficients
    return np.array([ket2dm(constraint.target), model.projector]), None


def _constraint_seeds(seed, count):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def sample_ensembles(
    pulses: PulseSchedule,
    model: SystemModel,
    objective: ObjectiveSpec,
    n_trajectories: int,
    seed=None,
    sampling: str = "iid",
    chain: StepPropagatorChain | None = None,
) -> list[TrajectoryEnsemble]:
    """One trajectory ensemble per constraint, seeded independently from ``seed``."""
    chain = chain if chain is not None else build_chain(pulses, model)
    seeds = _constraint_seeds(seed, len(objective.targets))
    return [
        build_ensemble(c.initial, chain, model, n_trajectories, s, sampling)
        for c, s in zip(objective.targets, seeds)
    ]


def estimate_numerator_and_p0(
    pulses: PulseSchedule,
    model: SystemModel,
    objective: ObjectiveSpec,
    n_trajectories: int,
    seed=None,
    sampling: str = "iid",
) -> tuple[np.ndarray, np.ndarray, list[TrajectoryEnsemble]]:
    """Trajectory estimates of the fidelity numerator and ``p0`` for every constraint.

    For logical constraints the numerator is ``sum_j eps_j Tr[rho M0 O_j M0]``.
    """
    ensembles = sample_ensembles(pulses, model, objective, n_trajectories, seed, sampling)
    nums, p0s = [], []
    for c, ens in zip(objective.targets, ensembles):
        obs, coeffs = _observables(c, model)
        vals = [assemble_expectation(ens, o) for o in obs]
        p0s.append(vals[-1])
        nums.append(vals[0] if coeffs is None else float(np.dot(coeffs, vals[:3])))
    return np.array(nums), np.array(p0s), ensembles


def flag_objective(numerator, p0, weights=None) -> float:
    """``sum_i (1 - num_i / p0_i)``."""
    numerator = np.atleast_1d(np.asarray(numerator, dtype=float))
    p0 = np.atleast_1d(np.asarray(p0, dtype=float))
    if np.any(p0 < P0_FLOOR):
        raise DegeneratePostSelection(float(p0.min()), P0_FLOOR)
    w = np.ones_like(numerator) if weights is None else np.asarray(weights, dtype=float)
    return float(np.sum(w * (1.0 - numerator / p0)))


def logical_objective(expectations, coefficients, p0) -> float:
    """``1/2 - (1 / 2 p0) sum_j eps_j <M0 O_j M0>``."""
    if p0 < P0_FLOOR:
        raise DegeneratePostSelection(p0, P0_FLOOR)
    return 0.5 - 0.5 * float(np.dot(coefficients, expectations)) / p0


@dataclass
class FrozenEvaluation:
    value: float
    gradient: np.ndarray | None
    numerators: np.ndarray
    p0: np.ndarray


def frozen_evaluation(
    pulses: PulseSchedule,
    model: SystemModel,
    objective: ObjectiveSpec,
    ensembles: list[TrajectoryEnsemble],
    scheme: str = "exact",
    with_gradient: bool = True,
) -> FrozenEvaluation:
    """Objective (and gradient) at ``pulses`` with the ensembles' jump locations and weights held fixed.

    The paths are re-propagated at ``pulses``; only ``(step, channel)`` and the
    importance weights are taken from ``ensembles``.  The gradient is one
    backward sweep per constraint with the observable ``sum_o (df/dv_o) O_o``.
    """
    chain = build_chain(pulses, model)
    derivs = None
    if with_gradient:
        derivs = StepDerivativeMap(chain.effective, np.array(model.controls), chain.dt, scheme, chain.propagators)
    value = 0.0
    grad = np.zeros(pulses.amplitudes.shape) if with_gradient else None
    nums, p0s = [], []
    for i, (c, ens) in enumerate(zip(objective.targets, ensembles)):
        w_i = objective.weight(i)
        obs, coeffs = _observables(c, model)
        paths = [None] + [(s, jump_kraus(model, mu, chain.dt)) for s, mu in ens.jump_locations]
        states = propagate_paths(c.initial, chain.propagators, paths)
        weights = ens.weights
        final = states[-1]
        vals = weights @ np.real(np.einsum("sa,oab,sb->so", final.conj(), obs, final))
        p0 = vals[-1]
        if p0 < P0_FLOOR:
            raise DegeneratePostSelection(float(p0), P0_FLOOR)
        if coeffs is None:
            num, scale, num_obs = vals[0], 1.0, obs[0]
        else:
            num, scale = float(np.dot(coeffs, vals[:3])), 0.5
            num_obs = np.tensordot(np.asarray(coeffs), obs[:3], axes=1)
        value += w_i * scale * (1.0 - num / p0)
        if with_gradient:
            # d(num/p0) = dnum/p0 - num dp0/p0^2
            effective = -w_i * scale * (num_obs / p0 - num * obs[-1] / p0**2)
            grad += weighted_gradient(states, chain.propagators, derivs, paths, effective, weights)[1]
        nums.append(num)
        p0s.append(p0)
    return FrozenEvaluation(float(value), grad, np.array(nums), np.array(p0s))


def single_jump_objective(pulses: PulseSchedule, model: SystemModel, objective: ObjectiveSpec) -> float:
    """Post-selected objective with every single-jump path summed instead of sampled.

    Deterministic, so it is suited to ranking iterates of a stochastic run.
    """
    chain = build_chain(pulses, model)
    value = 0.0
    for i, c in enumerate(objective.targets):
        obs, coeffs = _observables(c, model)
        vals = exhaustive_expectation(run_no_jump(c.initial, chain, model), chain, model, obs)
        p0 = vals[-1]
        if coeffs is None:
            value += objective.weight(i) * flag_objective(vals[0], p0)
        else:
            value += objective.weight(i) * logical_objective(vals[:3], coeffs, p0)
    return float(value)


def flag_gradient(
    pulses: PulseSchedule,
    model: SystemModel,
    objective: ObjectiveSpec,
    ensembles: list[TrajectoryEnsemble],
    scheme: str = "first_order",
) -> np.ndarray:
    """Gradient of the post-selected objective with the ensembles frozen."""
    return frozen_evaluation(pulses, model, objective, ensembles, scheme).gradient


def logical_objective_and_gradient(
    pulses: PulseSchedule,
    model: SystemModel,
    objective: ObjectiveSpec,
    ensembles: list[TrajectoryEnsemble],
    scheme: str = "first_order",
) -> tuple[float, np.ndarray]:
    if objective.kind != "logical_post_selected":
        raise ValueError("logical objective requires kind 'logical_post_selected'")
    ev = frozen_evaluation(pulses, model, objective, ensembles, scheme)
    return ev.value, ev.gradient


class FlagProblem:
    """Stochastic post-selected objective for :func:`flagcontrol.grape.optimize`.

    Every call draws a fresh ensemble (seeded from ``seed`` and a call
    counter); the matching :meth:`gradient` call reuses it.
    :meth:`selection_value` is the deterministic counterpart used to rank
    iterates.
    """

    def __init__(
        self,
        model: SystemModel,
        objective: ObjectiveSpec,
        n_trajectories: int = 50,
        seed: int = 0,
        scheme: str = "exact",
        sampling: str = "iid",
    ):
        if objective.kind == "conventional":
            raise ValueError("Flag-GRAPE needs a post-selected objective")
        self.model = model
        self.objective = objective
        self.n_trajectories = n_trajectories
        self.seed = seed
        self.scheme = scheme
        self.sampling = sampling
        self.calls = 0
        self.last_p0 = None
        self._key = None
        self._grad = None

    def __call__(self, pulses: PulseSchedule) -> float:
        ensembles = sample_ensembles(
            pulses, self.model, self.objective, self.n_trajectories, (self.seed, self.calls), self.sampling
        )
        self.calls += 1
        ev = frozen_evaluation(pulses, self.model, self.objective, ensembles, self.scheme)
        self._key = pulses.amplitudes.tobytes()
        self._grad = ev.gradient
        self.last_p0 = float(np.mean(ev.p0))
        return ev.value

    def gradient(self, pulses: PulseSchedule) -> np.ndarray:
        if pulses.amplitudes.tobytes() != self._key:
            self(pulses)
        return self._grad

    def p0(self) -> float | None:
        return self.last_p0

    def selection_value(self, pulses: PulseSchedule) -> float:
        return single_jump_objective(pulses, self.model, self.objective)
