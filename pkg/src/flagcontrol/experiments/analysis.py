"""Noise-scaling fits, the success-probability frontier, duration scans and ensemble statistics."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import scipy.optimize
import scipy.stats

from ..grape import ClosedProblem, OptimizerConfig, closed_objective, optimize, random_init
from ..lindblad import ObjectiveSpec, PulseSchedule, SystemModel, evaluate
from .runner import RunRecord, member_seed, paired
from .tasks import Task


@dataclass(frozen=True)
class FitResult:
    slope: float
    intercept: float
    residual_norm: float
    r_squared: float

    def __post_init__(self):
        if not 0.0 <= self.r_squared <= 1.0:
            raise ValueError(f"r_squared={self.r_squared} outside [0, 1]")

    def __call__(self, x):
        return self.intercept + self.slope * np.asarray(x)


def fit_linear(x: Sequence[float], y: Sequence[float]) -> FitResult:
    """Least-squares ``y = slope * x + intercept``; the input order does not matter."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2 or np.ptp(x) == 0:
        raise ValueError("need at least two distinct x values")
    order = np.lexsort((y, x))
    x, y = x[order], y[order]
    design = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - (slope * x + intercept)
    ss_res = float(resid @ resid)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else min(max(1.0 - ss_res / ss_tot, 0.0), 1.0)
    return FitResult(float(slope), float(intercept), math.sqrt(ss_res), r2)


# -- noise scaling ----------------------------------------------------------------


def _scaled_model(model: SystemModel, cavity: float, qubit: float) -> SystemModel:
    rates = model.rates * np.array([cavity, qubit, qubit])
    return model.with_rates(rates)


@dataclass
class NoiseSweepResult:
    rows: list[dict]  # family, pulse, gamma, f_pre, f_post, p0
    fits: dict[str, list[FitResult]]  # per pulse, f_post vs gamma
    family_fits: dict[str, FitResult]  # fit of the family-mean f_post
    grid: list[dict]  # cavity, qubit, closed, flag, improvement (2D mode only)

    def mean_slope(self, family: str) -> float:
        return float(np.mean([f.slope for f in self.fits[family]]))


def noise_sweep(
    task: Task,
    pulses: dict[str, list[PulseSchedule]],
    gamma_factors: Sequence[float],
    cavity_factors: Sequence[float] = (),
    qubit_factors: Sequence[float] = (),
) -> NoiseSweepResult:
    """Oracle re-evaluation of fixed pulses with every rate scaled by ``gamma``.

    ``pulses`` maps a family name (``"closed"``, ``"flag"``) to its pulses.
    In the 2D mode the cavity rate and the two qubit rates are scaled
    independently and the relative improvement ``1 - flag / closed`` of the
    family-mean ``f_post`` is reported per cell.
    """
    gammas = [float(g) for g in gamma_factors]
    rows = []
    fits: dict[str, list[FitResult]] = {}
    family_fits = {}
    for family, plist in pulses.items():
        fits[family] = []
        per_gamma = np.zeros((len(plist), len(gammas)))
        for p_idx, p in enumerate(plist):
            for g_idx, g in enumerate(gammas):
                r = evaluate(p, task.model.scaled(g), task.report)
                per_gamma[p_idx, g_idx] = r.f_post
                rows.append({"family": family, "pulse": p_idx, "gamma": g, "f_pre": r.f_pre, "f_post": r.f_post, "p0": r.p0})
            if len(set(gammas)) >= 2:
                fits[family].append(fit_linear(gammas, per_gamma[p_idx]))
        if plist and len(set(gammas)) >= 2:
            family_fits[family] = fit_linear(gammas, per_gamma.mean(axis=0))
    grid = []
    if cavity_factors and qubit_factors:
        for cav in cavity_factors:
            for qub in qubit_factors:
                model = _scaled_model(task.model, float(cav), float(qub))
                means = {
                    fam: float(np.mean([evaluate(p, model, task.report).f_post for p in plist]))
                    for fam, plist in pulses.items()
                }
                closed, flag = means.get("closed", np.nan), means.get("flag", np.nan)
                grid.append(
                    {"cavity": float(cav), "qubit": float(qub), "closed": closed, "flag": flag, "improvement": 1 - flag / closed}
                )
    return NoiseSweepResult(rows, fits, family_fits, grid)


# -- frontier -------------------------------------------------------------------------


@dataclass(frozen=True)
class FrontierResult:
    points: np.ndarray  # (n, 2) columns p0, f_post
    slope: float
    intercept: float
    method: str

    @property
    def extrapolated(self) -> float:
        """Boundary value at ``p0 = 1``."""
        return self.intercept + self.slope


def _quantile_line(x, y, q):
    """Linear quantile regression as a linear program (pinball loss)."""
    n = x.size
    c = np.concatenate([[0.0, 0.0], np.full(n, q), np.full(n, 1 - q)])
    a_eq = np.hstack([np.column_stack([np.ones(n), x]), np.eye(n), -np.eye(n)])
    bounds = [(None, None)] * 2 + [(0, None)] * (2 * n)
    res = scipy.optimize.linprog(c, A_eq=a_eq, b_eq=y, bounds=bounds, method="highs")
    if not res.success:
        raise RuntimeError(f"quantile regression failed: {res.message}")
    return float(res.x[1]), float(res.x[0])


def _hull_line(x, y):
    """Lower convex hull edge spanning the median ``x``."""
    order = np.lexsort((y, x))
    hull = []
    for i in order:
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = (x[hull[-2]], y[hull[-2]]), (x[hull[-1]], y[hull[-1]])
            if (x2 - x1) * (y[i] - y1) - (y2 - y1) * (x[i] - x1) <= 0:
                hull.pop()
            else:
                break
        hull.append(i)
    hull = [h for k, h in enumerate(hull) if k == 0 or x[h] != x[hull[k - 1]]]
    if len(hull) < 2:
        raise ValueError("frontier needs at least two distinct p0 values")
    xm = float(np.median(x))
    for a, b in zip(hull, hull[1:]):
        if x[a] <= xm <= x[b]:
            break
    slope = (y[b] - y[a]) / (x[b] - x[a])
    return float(slope), float(y[a] - slope * x[a])


def frontier_scan(
    records: Sequence[RunRecord], method: str = "quantile", quantile: float = 0.05, stage: str = "flag"
) -> FrontierResult:
    """Scatter of ``(p0, f_post)`` for one stage and a linear lower boundary.

    ``method="quantile"`` fits the ``quantile``-th conditional quantile;
    ``method="hull"`` takes the lower convex-hull edge over the median ``p0``.
    """
    pts = np.array([(r.p0, r.f_post) for r in records if r.stage == stage], dtype=float).reshape(-1, 2)
    if len(pts) < 5:
        raise ValueError(f"frontier needs at least 5 {stage}-stage records, got {len(pts)}")
    x, y = pts[:, 0], pts[:, 1]
    if method == "quantile":
        slope, intercept = _quantile_line(x, y, quantile)
    elif method == "hull":
        slope, intercept = _hull_line(x, y)
    else:
        raise ValueError(f"unknown frontier method {method!r}")
    return FrontierResult(pts, slope, intercept, method)


# -- duration scan --------------------------------------------------------------------


@dataclass(frozen=True)
class DurationRow:
    duration: float
    steps: int
    best_closed: float  # closed-system infidelity
    median_closed: float
    best_f_post: float  # oracle, with noise
    median_f_post: float


@dataclass
class DurationScan:
    rows: list[DurationRow]
    threshold: float

    @property
    def knee(self) -> float | None:
        """Shortest duration whose best closed-system infidelity is below ``threshold``."""
        for row in self.rows:
            if row.best_closed <= self.threshold:
                return row.duration
        return None


def minimum_time_scan(
    model: SystemModel,
    closed: ObjectiveSpec,
    report: ObjectiveSpec,
    durations: Sequence[float],
    dt: float,
    config: OptimizerConfig,
    seeds: Sequence[int],
    threshold: float = 1e-4,
) -> DurationScan:
    """Closed-GRAPE at each duration (step width ``dt`` kept fixed) over several seeds."""
    rows = []
    closed_model = model.closed()
    for duration in sorted(float(t) for t in durations):
        steps = max(1, round(duration / dt))
        step_dt = duration / steps
        closed_vals, post_vals = [], []
        for seed in seeds:
            cfg = replace(config, seed=int(seed))
            problem = ClosedProblem(model, closed, cfg.derivative)
            pulses, _ = optimize(random_init(cfg, steps, model.n_controls, step_dt), problem, problem.gradient, cfg)
            closed_vals.append(closed_objective(pulses, closed_model, closed))
            post_vals.append(evaluate(pulses, model, report).f_post)
        rows.append(
            DurationRow(
                duration, steps, float(np.min(closed_vals)), float(np.median(closed_vals)),
                float(np.min(post_vals)), float(np.median(post_vals)),
            )
        )
    return DurationScan(rows, threshold)


def duration_sweep(config, durations: Sequence[float] | None = None, seeds: int = 5, threshold: float = 1e-4) -> DurationScan:
    """Closed-stage minimum-time scan for the configured task."""
    from .tasks import build_task

    task = build_task(config)
    durations = config.sweeps.durations_s if durations is None else durations
    cfg = config.optimizer.closed.optimizer_config(0)
    member_seeds = [member_seed(config.ensemble.seed, i) for i in range(seeds)]
    return minimum_time_scan(task.model, task.closed, task.report, durations, task.dt, cfg, member_seeds, threshold)


# -- statistics -----------------------------------------------------------------------


def _stage_stats(values: np.ndarray, p0: np.ndarray) -> dict:
    n = len(values)
    return {
        "n": n,
        "mean": float(np.mean(values)) if n else math.nan,
        "stderr": float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else math.nan,
        "median": float(np.median(values)) if n else math.nan,
        "best": float(np.min(values)) if n else math.nan,
        "mean_p0": float(np.mean(p0)) if n else math.nan,
        "min_p0": float(np.min(p0)) if n else math.nan,
    }


def summarize(records: Sequence[RunRecord], unencoded_best: float | None = None) -> dict:
    """Per-stage statistics of ``f_post`` and the flag-over-closed improvements.

    ``improvement_mean = 1 - mean_flag / mean_closed`` and
    ``improvement_best = 1 - best_flag / best_closed``.  ``p_value`` is a
    one-sided paired t-test of closed > flag over members with both stages.
    With ``unencoded_best`` the fraction of flag pulses below it is reported.
    """
    report: dict = {}
    for stage in ("closed", "flag"):
        sel = [r for r in records if r.stage == stage]
        report[stage] = _stage_stats(np.array([r.f_post for r in sel]), np.array([r.p0 for r in sel]))
    c, f = report["closed"], report["flag"]
    report["improvement_mean"] = 1 - f["mean"] / c["mean"] if c["n"] and f["n"] else math.nan
    report["improvement_best"] = 1 - f["best"] / c["best"] if c["n"] and f["n"] else math.nan
    closed_vals, flag_vals = paired(list(records))
    p_value = math.nan
    if len(closed_vals) > 1 and np.any(closed_vals != flag_vals):
        p_value = float(scipy.stats.ttest_rel(closed_vals, flag_vals, alternative="greater").pvalue)
    report["paired_n"] = len(closed_vals)
    report["p_value"] = p_value
    if unencoded_best is not None:
        flags = np.array([r.f_post for r in records if r.stage == "flag"])
        report["fraction_below_unencoded_best"] = float(np.mean(flags < unencoded_best)) if flags.size else math.nan
    return report
