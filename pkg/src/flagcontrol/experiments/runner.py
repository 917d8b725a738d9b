"""Ensemble runs: Closed-GRAPE from random pulses, then Flag-GRAPE warm-started from the result.

Output directory layout::

    config.toml            snapshot of the configuration used
    records.csv            one row per (run, stage), fixed column order
    records.json           the same records plus failures and unit notes
    pulses/run_<id>.csv    pulse file (+ .meta.json sidecar) per record
    runs/run_<id>.json     per-run result, written by the worker; used to resume

Run ids are ``<index>-<stage>`` with a zero-padded index.  The seed of ensemble
member ``i`` is the first 63 bits of ``sha256("<master_seed>:<i>")``.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..flag import FlagProblem, single_jump_objective
from ..grape import ClosedProblem, closed_objective, load_pulses, model_hash, optimize, random_init, save_pulses
from ..lindblad import PulseSchedule, evaluate
from .config import ExperimentConfig, dump_config
from .tasks import Task, build_task

log = logging.getLogger(__name__)

CSV_COLUMNS = ("run_id", "stage", "seed", "f_pre", "f_post", "p0", "iterations", "objective", "wall_ms", "pulse_path")
STAGES = ("closed", "flag")
UNITS = "f_pre, f_post, p0 dimensionless; wall_ms milliseconds; pulse amplitudes rad/s; config frequencies Hz (value / 2pi)"
_RANGE_SLACK = 1e-9


@dataclass(frozen=True)
class RunRecord:
    run_id: str
    stage: str
    seed: int
    f_pre: float
    f_post: float
    p0: float
    iterations: int
    objective: float
    wall_ms: float
    pulse_path: str

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        for name in ("f_pre", "f_post", "p0"):
            v = getattr(self, name)
            if not -_RANGE_SLACK <= v <= 1 + _RANGE_SLACK:
                raise ValueError(f"{name}={v} outside [0, 1]")
            # oracle round-off can leave values a hair outside [0, 1]
            object.__setattr__(self, name, float(min(max(v, 0.0), 1.0)))

    @property
    def index(self) -> int:
        return int(self.run_id.split("-")[0])

    def row(self) -> list[str]:
        return [_fmt(getattr(self, c)) for c in CSV_COLUMNS]


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def member_seed(master_seed: int, index: int) -> int:
    digest = hashlib.sha256(f"{master_seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def run_id(index: int, stage: str) -> str:
    return f"{index:04d}-{stage}"


def _config_fingerprint(config: ExperimentConfig) -> str:
    body = json.dumps({k: v for k, v in config.to_dict().items() if k != "output_dir"}, sort_keys=True)
    return hashlib.sha256(body.encode()).hexdigest()[:16]


def _result_path(out: Path, rid: str) -> Path:
    return out / "runs" / f"run_{rid}.json"


def _pulse_path(out: Path, rid: str) -> Path:
    return out / "pulses" / f"run_{rid}.csv"


def _load_done(out: Path, rid: str, fingerprint: str) -> dict | None:
    path = _result_path(out, rid)
    if not path.exists():
        return None
    data = json.loads(path.read_text())
    if data.get("fingerprint") != fingerprint or not _pulse_path(out, rid).exists():
        return None
    return data


def _finish_stage(out, task, rid, seed, stage, pulses, trace, objective, wall, fingerprint) -> dict:
    oracle = evaluate(pulses, task.model, task.report)
    rel = _pulse_path(out, rid).relative_to(out).as_posix()
    save_pulses(
        _pulse_path(out, rid),
        pulses,
        {"model_hash": model_hash(task.model), "seed": seed, "stage": stage, "task": task.name},
    )
    record = RunRecord(rid, stage, seed, oracle.f_pre, oracle.f_post, oracle.p0, len(trace), objective, wall, rel)
    data = {
        "fingerprint": fingerprint,
        "record": asdict(record),
        "trace": {"objective": trace.objective, "gradient_norm": trace.gradient_norm, "p0": trace.p0},
    }
    path = _result_path(out, rid)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data) + "\n")
    return data


def run_member(config: ExperimentConfig, index: int, out_dir) -> list[dict]:
    """Both stages of ensemble member ``index``; completed stages are reloaded, not rerun."""
    out = Path(out_dir)
    task = build_task(config)
    fingerprint = _config_fingerprint(config)
    seed = member_seed(config.ensemble.seed, index)
    results = []

    rid = run_id(index, "closed")
    done = _load_done(out, rid, fingerprint)
    if done is None:
        cfg = config.optimizer.closed.optimizer_config(seed)
        problem = ClosedProblem(task.model, task.closed, cfg.derivative)
        start = time.perf_counter()
        initial = random_init(cfg, task.steps, task.model.n_controls, task.dt)
        pulses, trace = optimize(initial, problem, problem.gradient, cfg)
        wall = 1e3 * (time.perf_counter() - start)
        objective = closed_objective(pulses, task.model.closed(), task.closed)
        done = _finish_stage(out, task, rid, seed, "closed", pulses, trace, objective, wall, fingerprint)
    results.append(done)
    closed_pulses, _ = load_pulses(out / done["record"]["pulse_path"])

    rid = run_id(index, "flag")
    done = _load_done(out, rid, fingerprint)
    if done is None:
        cfg = config.optimizer.flag.optimizer_config(seed)
        problem = FlagProblem(
            task.model, task.flag, config.ensemble.trajectories, seed, cfg.derivative, config.ensemble.sampling
        )
        start = time.perf_counter()
        pulses, trace = optimize(
            closed_pulses, problem, problem.gradient, cfg, p0_fn=problem.p0, selection_fn=problem.selection_value
        )
        wall = 1e3 * (time.perf_counter() - start)
        objective = single_jump_objective(pulses, task.model, task.flag)
        done = _finish_stage(out, task, rid, seed, "flag", pulses, trace, objective, wall, fingerprint)
    results.append(done)
    return results


def _guarded(args) -> tuple[int, list[dict] | None, str | None]:
    config, index, out_dir = args
    try:
        return index, run_member(config, index, out_dir), None
    except Exception:  # a failed member is recorded, never fatal to the ensemble
        return index, None, traceback.format_exc()


def run_ensemble(config: ExperimentConfig, out_dir=None, workers: int = 1) -> list[RunRecord]:
    """Run (or resume) the ensemble and write the aggregate files.

    Every recorded ``f_pre``, ``f_post`` and ``p0`` comes from the master
    equation; trajectory estimates only drive the optimization.
    """
    out = Path(out_dir if out_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(dump_config(config))
    jobs = [(config, i, str(out)) for i in range(config.ensemble.size)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_guarded, jobs))
    else:
        outcomes = [_guarded(job) for job in jobs]
    records, failures = [], []
    for index, results, error in sorted(outcomes, key=lambda o: o[0]):
        if error is not None:
            log.warning("ensemble member %d failed:\n%s", index, error)
            failures.append({"index": index, "seed": member_seed(config.ensemble.seed, index), "error": error})
            continue
        for data in results:
            rec = dict(data["record"])
            if not config.ensemble.record_timing:
                rec["wall_ms"] = 0.0
            records.append(RunRecord(**rec))
    write_records(out, records, failures)
    return records


def records_csv(records: list[RunRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow(r.row())
    return buf.getvalue()


def write_records(out: Path, records: list[RunRecord], failures: list[dict] | None = None):
    out = Path(out)
    (out / "records.csv").write_text(records_csv(records))
    payload = {
        "units": UNITS,
        "columns": list(CSV_COLUMNS),
        "records": [asdict(r) for r in records],
        "failures": failures or [],
    }
    (out / "records.json").write_text(json.dumps(payload, indent=1) + "\n")


def read_records(path) -> list[RunRecord]:
    """Records from ``records.csv`` (or a directory containing it)."""
    path = Path(path)
    if path.is_dir():
        path = path / "records.csv"
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected records header {reader.fieldnames}")
        out = []
        for row in reader:
            out.append(
                RunRecord(
                    row["run_id"],
                    row["stage"],
                    int(row["seed"]),
                    float(row["f_pre"]),
                    float(row["f_post"]),
                    float(row["p0"]),
                    int(row["iterations"]),
                    float(row["objective"]),
                    float(row["wall_ms"]),
                    row["pulse_path"],
                )
            )
    return out


def stage_pulses(out_dir, records: list[RunRecord], stage: str) -> list[tuple[RunRecord, PulseSchedule]]:
    out = Path(out_dir)
    return [(r, load_pulses(out / r.pulse_path)[0]) for r in records if r.stage == stage]


def oracle_record(task: Task, pulses: PulseSchedule) -> dict:
    r = evaluate(pulses, task.model, task.report)
    return {"f_pre": r.f_pre, "f_post": r.f_post, "p0": r.p0}


def paired(records: list[RunRecord]) -> tuple[np.ndarray, np.ndarray]:
    """``(closed, flag)`` f_post arrays over members that completed both stages."""
    by_stage = {s: {r.index: r for r in records if r.stage == s} for s in STAGES}
    common = sorted(set(by_stage["closed"]) & set(by_stage["flag"]))
    return (
        np.array([by_stage["closed"][i].f_post for i in common]),
        np.array([by_stage["flag"][i].f_post for i in common]),
    )
