"""State-preparation tasks: model, objectives for both stages, and the reported figure of merit."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..catcode import CatCodeParams, cat_logical_target, logical_target
from ..lindblad import TWO_PI, Constraint, ObjectiveSpec, SystemModel, build_baseline_model
from .config import ExperimentConfig


@dataclass(frozen=True, eq=False)
class Task:
    """Everything an ensemble run needs besides optimizer settings.

    ``closed`` is the conventional objective of the first stage, ``flag`` the
    post-selected objective of the second, and ``report`` the objective whose
    oracle values are recorded (the decoded logical one for encoded targets).
    """

    name: str
    model: SystemModel
    closed: ObjectiveSpec
    flag: ObjectiveSpec
    report: ObjectiveSpec
    duration: float
    steps: int

    @property
    def dt(self) -> float:
        return self.duration / self.steps

    def with_model(self, model: SystemModel) -> "Task":
        return Task(self.name, model, self.closed, self.flag, self.report, self.duration, self.steps)


def fock_target(d_c: int, theta: float = -math.pi / 4) -> np.ndarray:
    """Cavity state ``(|0> + e^{i theta}|1>) / sqrt(2)``."""
    cav = np.zeros(d_c, dtype=complex)
    cav[0] = 1.0
    cav[1] = np.exp(1j * theta)
    return cav / math.sqrt(2)


def build_model(config: ExperimentConfig) -> SystemModel:
    m = config.model
    return build_baseline_model(TWO_PI * m.chi_hz, m.d_c, tuple(TWO_PI * g for g in m.gamma_hz))


def build_task(config: ExperimentConfig) -> Task:
    model = build_model(config)
    psi0 = model.space.basis(0)
    if config.task == "fock_state_prep":
        target = model.kept_state(fock_target(config.model.d_c))
        constraint = (Constraint(psi0, target),)
        closed = ObjectiveSpec("conventional", constraint)
        flag = ObjectiveSpec("post_selected", constraint)
        report = flag
    else:
        params = CatCodeParams(config.cat.alpha, config.model.d_c)
        params.require_adequate()
        target = model.kept_state(logical_target(params, config.cat.theta))
        closed = ObjectiveSpec("conventional", (Constraint(psi0, target),))
        flag = ObjectiveSpec("logical_post_selected", (Constraint(psi0, cat_logical_target(params, config.cat.theta)),))
        report = flag
    return Task(config.task, model, closed, flag, report, config.pulses.duration_s, config.pulses.steps)
