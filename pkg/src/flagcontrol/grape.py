"""Closed-system GRAPE and the optimizer loop shared with Flag-GRAPE."""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.optimize

from .chain import StepDerivativeMap, propagate_paths, weighted_gradient
from .errors import OptimizationDiverged
from .hilbert import ket2dm, matrix_exponential
from .lindblad import (
    TWO_PI,
    ObjectiveSpec,
    PulseSchedule,
    SystemModel,
    _check_pulses,
    infidelity_pre,
    propagate_master,
)

STEP_RULES = ("fixed_rate", "adaptive_moment", "quasi_newton")


@dataclass(frozen=True)
class OptimizerConfig:
    """Optimizer hyperparameters.

    The optimizer works on amplitudes normalized by ``amplitude_bound``, so
    ``learning_rate`` and ``gradient_tolerance`` are dimensionless.
    Convergence requires both ``|grad| <= gradient_tolerance`` and
    ``objective <= objective_tolerance``.  ``selection_interval`` sets how
    often a ``selection_fn`` passed to :func:`optimize` is evaluated.
    """

    max_iterations: int = 500
    step_rule: str = "adaptive_moment"
    learning_rate: float = 0.01
    gradient_tolerance: float = 1e-8
    objective_tolerance: float = 1e-9
    amplitude_bound: float = TWO_PI * 50e6
    init_scale: float = TWO_PI * 10e6
    seed: int = 0
    derivative: str = "exact"
    learning_rate_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    selection_interval: int = 25

    def __post_init__(self):
        if self.step_rule not in STEP_RULES:
            raise ValueError(f"unknown step rule {self.step_rule!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not self.amplitude_bound > 0:
            raise ValueError("amplitude_bound must be positive")
        if self.gradient_tolerance < 0 or self.objective_tolerance < 0:
            raise ValueError("tolerances must be non-negative")
        if self.selection_interval < 1:
            raise ValueError("selection_interval must be at least 1")
        if self.derivative not in ("exact", "first_order"):
            raise ValueError(f"unknown derivative scheme {self.derivative!r}")


@dataclass
class ConvergenceTrace:
    objective: list[float] = field(default_factory=list)
    gradient_norm: list[float] = field(default_factory=list)
    p0: list[float | None] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.objective)

    def append(self, value, gnorm, p0, wall):
        self.objective.append(float(value))
        self.gradient_norm.append(float(gnorm))
        self.p0.append(None if p0 is None else float(p0))
        self.wall_time.append(float(wall))


def random_init(config: OptimizerConfig, steps: int, channels: int, dt: float) -> PulseSchedule:
    rng = np.random.default_rng(config.seed)
    amps = rng.uniform(-config.init_scale, config.init_scale, size=(steps, channels))
    return PulseSchedule(amps, dt)


# -- closed-system objective --------------------------------------------------


def _require_states(objective: ObjectiveSpec):
    if objective.kind != "conventional":
        raise ValueError(f"closed objective needs kind 'conventional', got {objective.kind!r}")


def closed_value_and_gradient(
    pulses: PulseSchedule, model: SystemModel, objective: ObjectiveSpec, scheme: str = "exact"
) -> tuple[float, np.ndarray]:
    """``sum_i w_i (1 - |<psi_t|U|psi_0>|^2)`` and its gradient, jump channels ignored."""
    _require_states(objective)
    _check_pulses(pulses, model)
    hams = model.hamiltonians(pulses.amplitudes)
    props = None if scheme == "exact" else matrix_exponential(-1j * pulses.dt * hams)
    derivs = StepDerivativeMap(hams, np.array(model.controls), pulses.dt, scheme, props, hermitian=True)
    props = derivs.propagators
    value = 0.0
    grad = np.zeros(pulses.amplitudes.shape)
    for i, c in enumerate(objective.targets):
        w = objective.weight(i)
        states = propagate_paths(c.initial, props, [None])
        overlap, dover = weighted_gradient(states, props, derivs, [None], ket2dm(c.target), np.ones(1))
        value += w * (1.0 - overlap)
        grad -= w * dover
    return value, grad


def closed_objective(
    pulses: PulseSchedule, model: SystemModel, objective: ObjectiveSpec, open_system: bool = False
) -> float:
    """Conventional objective: sum of pre-selection infidelities.

    With ``open_system=False`` the jump channels are ignored and the states
    evolve unitarily; otherwise each constraint is evaluated with the master
    equation.
    """
    _require_states(objective)
    _check_pulses(pulses, model)
    if open_system:
        return sum(
            objective.weight(i) * infidelity_pre(propagate_master(ket2dm(c.initial), pulses, model), c.target)
            for i, c in enumerate(objective.targets)
        )
    props = matrix_exponential(-1j * pulses.dt * model.hamiltonians(pulses.amplitudes))
    total = 0.0
    for i, c in enumerate(objective.targets):
        psi = c.initial
        for u in props:
            psi = u @ psi
        total += objective.weight(i) * (1.0 - abs(np.vdot(c.target, psi)) ** 2)
    return float(total)


def closed_gradient(
    pulses: PulseSchedule, model: SystemModel, objective: ObjectiveSpec, scheme: str = "first_order"
) -> np.ndarray:
    return closed_value_and_gradient(pulses, model, objective, scheme)[1]


class ClosedProblem:
    """Callable objective/gradient pair for :func:`optimize` that shares one evaluation."""

    def __init__(self, model: SystemModel, objective: ObjectiveSpec, scheme: str = "exact"):
        self.model = model.closed()
        self.objective = objective
        self.scheme = scheme
        self._key = None
        self._cached = None

    def _evaluate(self, pulses):
        key = pulses.amplitudes.tobytes()
        if key != self._key:
            self._cached = closed_value_and_gradient(pulses, self.model, self.objective, self.scheme)
            self._key = key
        return self._cached

    def __call__(self, pulses: PulseSchedule) -> float:
        return self._evaluate(pulses)[0]

    def gradient(self, pulses: PulseSchedule) -> np.ndarray:
        return self._evaluate(pulses)[1]


# -- optimizer loop ------------------------------------------------------------


def _finite(value, grad):
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise OptimizationDiverged(f"non-finite objective or gradient (objective={value})")


def optimize(
    initial: PulseSchedule,
    objective_fn: Callable[[PulseSchedule], float],
    gradient_fn: Callable[[PulseSchedule], np.ndarray],
    config: OptimizerConfig,
    p0_fn: Callable[[], float | None] | None = None,
    selection_fn: Callable[[PulseSchedule], float] | None = None,
) -> tuple[PulseSchedule, ConvergenceTrace]:
    """Minimize ``objective_fn`` over amplitudes in ``[-bound, bound]``.

    ``objective_fn`` is always called before ``gradient_fn`` at the same
    point, so stochastic objectives may draw their samples in the former and
    reuse them in the latter.  Returns the best pulses seen (never worse than
    ``initial``) and the per-iteration trace.

    "Best" is judged by ``objective_fn`` unless ``selection_fn`` is given.  In
    that case the first-order rules score the initial point, every
    ``config.selection_interval``-th iterate and the last iterate with
    ``selection_fn``.  A noisy estimate makes a poor ranking criterion, since its
    minimum favours lucky samples.
    """
    bound = config.amplitude_bound
    dt = initial.dt
    shape = initial.amplitudes.shape
    trace = ConvergenceTrace()
    start = time.perf_counter()
    best = {"value": np.inf, "x": None}

    def consider(x, value):
        if value < best["value"]:
            best["value"] = value
            best["x"] = x.copy()

    def evaluate(x, track=True):
        pulses = PulseSchedule(x.reshape(shape) * bound, dt)
        value = float(objective_fn(pulses))
        grad = np.asarray(gradient_fn(pulses), dtype=float) * bound
        _finite(value, grad)
        if track:
            consider(x, value)
        return value, grad.ravel()

    def select(x):
        consider(x, float(selection_fn(PulseSchedule(x.reshape(shape) * bound, dt))))

    def converged(value, gnorm):
        return gnorm <= config.gradient_tolerance and value <= config.objective_tolerance

    x = np.clip(initial.amplitudes / bound, -1.0, 1.0).ravel()
    if config.step_rule == "quasi_newton":
        last = {}

        def fun(xx):
            v, g = evaluate(xx)
            last.update(value=v, grad=g, x=xx.copy())
            return v, g

        def callback(intermediate_result):
            v, g = last["value"], last["grad"]
            if not np.array_equal(last["x"], intermediate_result.x):
                v, g = fun(intermediate_result.x)
            gnorm = float(np.linalg.norm(g))
            trace.append(v, gnorm, p0_fn() if p0_fn else None, time.perf_counter() - start)
            if converged(v, gnorm) or len(trace) >= config.max_iterations:
                raise StopIteration

        v0, g0 = fun(x)
        trace.append(v0, np.linalg.norm(g0), p0_fn() if p0_fn else None, time.perf_counter() - start)
        if not converged(v0, np.linalg.norm(g0)) and config.max_iterations > 1:
            scipy.optimize.minimize(
                fun,
                x,
                jac=True,
                method="L-BFGS-B",
                bounds=[(-1.0, 1.0)] * x.size,
                callback=callback,
                options={"maxiter": config.max_iterations, "ftol": 0.0, "gtol": 0.0, "maxcor": 20},
            )
    else:
        m = np.zeros_like(x)
        v = np.zeros_like(x)
        for it in range(config.max_iterations):
            value, grad = evaluate(x, track=selection_fn is None)
            gnorm = float(np.linalg.norm(grad))
            trace.append(value, gnorm, p0_fn() if p0_fn else None, time.perf_counter() - start)
            stop = converged(value, gnorm) or it == config.max_iterations - 1
            if selection_fn is not None and (stop or it % config.selection_interval == 0):
                select(x)
            if stop:
                break
            lr = config.learning_rate / (1.0 + config.learning_rate_decay * it)
            if config.step_rule == "fixed_rate":
                step = lr * grad
            else:
                m = config.beta1 * m + (1 - config.beta1) * grad
                v = config.beta2 * v + (1 - config.beta2) * grad**2
                m_hat = m / (1 - config.beta1 ** (it + 1))
                v_hat = v / (1 - config.beta2 ** (it + 1))
                step = lr * m_hat / (np.sqrt(v_hat) + 1e-12)
            x = np.clip(x - step, -1.0, 1.0)

    best_amps = np.clip(best["x"].reshape(shape) * bound, -bound, bound)
    return PulseSchedule(best_amps, dt), trace


# -- pulse files ----------------------------------------------------------------


def model_hash(model: SystemModel) -> str:
    h = hashlib.sha256()
    for op in (model.drift, *model.controls, model.projector, *(c.operator for c in model.jumps)):
        h.update(np.ascontiguousarray(op, dtype=complex).tobytes())
    h.update(np.asarray(model.rates, dtype=float).tobytes())
    return h.hexdigest()[:16]


def save_pulses(path, pulses: PulseSchedule, metadata: dict | None = None) -> Path:
    """Write ``step,u1,...,uJ`` (rad/s) plus a ``.meta.json`` sidecar.

    Floats are written with ``repr`` so the round trip is bit-exact.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step"] + [f"u{j + 1}" for j in range(pulses.channels)])
        for k, row in enumerate(pulses.amplitudes):
            writer.writerow([k] + [repr(float(u)) for u in row])
    meta = {"dt": pulses.dt, "T": pulses.duration, "steps": pulses.steps, "units": "rad/s"}
    meta.update(metadata or {})
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_pulses(path) -> tuple[PulseSchedule, dict]:
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text())
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[0] != "step" or header[1:] != [f"u{j + 1}" for j in range(len(header) - 1)]:
            raise ValueError(f"unexpected pulse-file header {header}")
        rows = [[float(x) for x in r[1:]] for r in reader]
    return PulseSchedule(np.array(rows), float(meta["dt"])), meta


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".meta.json")


def config_dict(config: OptimizerConfig) -> dict:
    return asdict(config)
