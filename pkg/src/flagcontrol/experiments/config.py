"""Experiment configuration: a TOML file with fixed nested sections.

Grammar (every key optional; defaults are the desk-scale Fock task)::

    task = "fock_state_prep"          # or "cat_state_prep"
    output_dir = "runs/fock"

    [model]
    chi_hz = 2.59e6                   # chi / 2pi
    gamma_hz = [275.0, 810.0, 8250.0] # cavity loss, qubit decay, qubit dephasing, each / 2pi
    d_c = 8

    [pulses]
    duration_s = 1e-7
    steps = 250

    [optimizer.closed]                # any OptimizerConfig field; frequencies in Hz
    [optimizer.flag]

    [ensemble]
    size = 20
    seed = 0
    trajectories = 50                 # M, including the no-jump path
    sampling = "iid"                  # iid | stratified | systematic
    record_timing = false             # write wall_ms into records.csv

    [cat]
    alpha = 2.5
    theta = -0.7853981633974483

    [sweeps]
    gamma_factors = [0.25, 0.5, 1.0, 1.5, 2.0]
    cavity_factors = []               # 2D grid, both empty to skip
    qubit_factors = []
    durations_s = [5e-8, 1e-7, 1.5e-7, 2e-7]
    frontier_method = "quantile"      # quantile | hull
    frontier_quantile = 0.05

Unknown keys at any level raise :class:`~flagcontrol.errors.ConfigError`.
Frequencies are written as ``value / 2pi`` in Hz and converted to rad/s on use.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli
import tomli_w

from ..errors import ConfigError
from ..grape import STEP_RULES, OptimizerConfig
from ..lindblad import TWO_PI
from ..trajectories import SAMPLING_MODES

TASKS = ("fock_state_prep", "cat_state_prep")
FRONTIER_METHODS = ("quantile", "hull")


@dataclass(frozen=True)
class ModelSection:
    chi_hz: float = 2.59e6
    gamma_hz: tuple[float, float, float] = (275.0, 810.0, 8250.0)
    d_c: int = 8

    def validate(self):
        if len(self.gamma_hz) != 3 or any(g < 0 for g in self.gamma_hz):
            raise ConfigError("model.gamma_hz needs three non-negative rates")
        if self.d_c < 2:
            raise ConfigError("model.d_c must be at least 2")


@dataclass(frozen=True)
class PulseSection:
    duration_s: float = 1e-7
    steps: int = 250

    def validate(self):
        if not self.duration_s > 0 or self.steps < 1:
            raise ConfigError("pulses need a positive duration and at least one step")


@dataclass(frozen=True)
class StageSection:
    """Optimizer settings for one stage; amplitudes in Hz (``/2pi``)."""

    max_iterations: int = 1000
    step_rule: str = "adaptive_moment"
    learning_rate: float = 1e-3
    gradient_tolerance: float = 1e-8
    objective_tolerance: float = 1e-9
    amplitude_bound_hz: float = 50e6
    init_scale_hz: float = 10e6
    derivative: str = "exact"
    learning_rate_decay: float = 0.0
    selection_interval: int = 25

    def validate(self):
        if self.step_rule not in STEP_RULES:
            raise ConfigError(f"unknown step_rule {self.step_rule!r}")
        try:
            self.optimizer_config(0)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def optimizer_config(self, seed: int) -> OptimizerConfig:
        return OptimizerConfig(
            max_iterations=self.max_iterations,
            step_rule=self.step_rule,
            learning_rate=self.learning_rate,
            gradient_tolerance=self.gradient_tolerance,
            objective_tolerance=self.objective_tolerance,
            amplitude_bound=TWO_PI * self.amplitude_bound_hz,
            init_scale=TWO_PI * self.init_scale_hz,
            seed=seed,
            derivative=self.derivative,
            learning_rate_decay=self.learning_rate_decay,
            selection_interval=self.selection_interval,
        )


def _closed_defaults() -> StageSection:
    return StageSection(
        max_iterations=2000, step_rule="quasi_newton", gradient_tolerance=1e-6, objective_tolerance=1e-10
    )


@dataclass(frozen=True)
class OptimizerSection:
    closed: StageSection = field(default_factory=_closed_defaults)
    flag: StageSection = field(default_factory=StageSection)

    def validate(self):
        self.closed.validate()
        self.flag.validate()


@dataclass(frozen=True)
class EnsembleSection:
    size: int = 20
    seed: int = 0
    trajectories: int = 50
    sampling: str = "iid"
    record_timing: bool = False

    def validate(self):
        if self.size < 1:
            raise ConfigError("ensemble.size must be at least 1")
        if self.trajectories < 1:
            raise ConfigError("ensemble.trajectories must be at least 1")
        if self.sampling not in SAMPLING_MODES:
            raise ConfigError(f"unknown ensemble.sampling {self.sampling!r}")
        if self.seed < 0:
            raise ConfigError("ensemble.seed must be non-negative")


@dataclass(frozen=True)
class CatSection:
    alpha: float = 2.5
    theta: float = -math.pi / 4

    def validate(self):
        if not self.alpha > 0:
            raise ConfigError("cat.alpha must be positive")


@dataclass(frozen=True)
class SweepSection:
    gamma_factors: tuple[float, ...] = (0.25, 0.5, 1.0, 1.5, 2.0)
    cavity_factors: tuple[float, ...] = ()
    qubit_factors: tuple[float, ...] = ()
    durations_s: tuple[float, ...] = (5e-8, 1e-7, 1.5e-7, 2e-7)
    frontier_method: str = "quantile"
    frontier_quantile: float = 0.05

    def validate(self):
        for name in ("gamma_factors", "cavity_factors", "qubit_factors", "durations_s"):
            if any(not v > 0 for v in getattr(self, name)):
                raise ConfigError(f"sweeps.{name} values must be positive")
        if bool(self.cavity_factors) != bool(self.qubit_factors):
            raise ConfigError("sweeps.cavity_factors and sweeps.qubit_factors must both be set or both empty")
        if self.frontier_method not in FRONTIER_METHODS:
            raise ConfigError(f"unknown sweeps.frontier_method {self.frontier_method!r}")
        if not 0 < self.frontier_quantile < 1:
            raise ConfigError("sweeps.frontier_quantile must lie in (0, 1)")


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "fock_state_prep"
    output_dir: str = "runs"
    model: ModelSection = field(default_factory=ModelSection)
    pulses: PulseSection = field(default_factory=PulseSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    cat: CatSection = field(default_factory=CatSection)
    sweeps: SweepSection = field(default_factory=SweepSection)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        for section in (self.model, self.pulses, self.optimizer, self.ensemble, self.cat, self.sweeps):
            section.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """Replace fields of nested sections, e.g. ``with_overrides(ensemble={"size": 3})``."""
        updates = {}
        for name, value in sections.items():
            current = getattr(self, name)
            if isinstance(value, dict):
                updates[name] = _merge(type(current), value, name, current)
            else:
                updates[name] = value
        return replace(self, **updates)

    def full_scale(self) -> "ExperimentConfig":
        """Full-scale ensemble size and time grid (500 pulses, 1000 steps per 0.1 us)."""
        steps = max(1, round(1000 * self.pulses.duration_s / 1e-7))
        return self.with_overrides(ensemble={"size": 500}, pulses={"steps": steps})


def _merge(cls, table: dict, path: str, base):
    """Copy of ``base`` with the keys of ``table`` applied, recursing into sections."""
    if not isinstance(table, dict):
        raise ConfigError(f"[{path}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(table) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{path or 'top level'}]: {', '.join(unknown)}")
    kwargs = {}
    for name, value in table.items():
        current = getattr(base, name)
        if hasattr(current, "__dataclass_fields__"):
            kwargs[name] = _merge(type(current), value, f"{path}.{name}" if path else name, current)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return replace(base, **kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{path or 'top level'}]: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    return _merge(ExperimentConfig, data, "", ExperimentConfig())


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    with path.open("rb") as fh:
        try:
            data = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def dump_config(config: ExperimentConfig) -> str:
    header = "# frequencies in Hz (value / 2pi); times in seconds\n"
    return header + tomli_w.dumps(_plain(config.to_dict()))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj
