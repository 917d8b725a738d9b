import json
import math
import shutil

import numpy as np
import pytest
from click.testing import CliRunner
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_model
from flagcontrol.errors import ConfigError
from flagcontrol.flag import single_jump_objective
from flagcontrol.experiments.analysis import (
    fit_linear,
    frontier_scan,
    minimum_time_scan,
    noise_sweep,
    summarize,
)
from flagcontrol.experiments.cli import main
from flagcontrol.experiments.config import ExperimentConfig, config_from_dict, dump_config, load_config
from flagcontrol.experiments.runner import (
    CSV_COLUMNS,
    RunRecord,
    member_seed,
    read_records,
    run_ensemble,
    run_id,
    stage_pulses,
)
from flagcontrol.experiments.tasks import build_task, fock_target
from flagcontrol.grape import OptimizerConfig, closed_objective
from flagcontrol.hilbert import HilbertSpace, pauli
from flagcontrol.lindblad import TWO_PI, Constraint, ObjectiveSpec, PulseSchedule

TINY = {
    "model": {"d_c": 3},
    "pulses": {"duration_s": 2e-8, "steps": 8},
    "optimizer": {
        "closed": {"max_iterations": 6},
        "flag": {"max_iterations": 4, "selection_interval": 2},
    },
    "ensemble": {"size": 2, "seed": 17, "trajectories": 4},
}


@pytest.fixture
def tiny_config():
    return config_from_dict(TINY)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("ensemble")
    config = config_from_dict(TINY)
    records = run_ensemble(config, out)
    return config, out, records


# -- config ------------------------------------------------------------------------


def test_defaults_are_desk_scale():
    config = ExperimentConfig()
    assert config.ensemble.size == 20 and config.ensemble.trajectories == 50
    assert config.pulses.steps == 250 and config.pulses.duration_s == pytest.approx(1e-7)
    assert config.optimizer.closed.step_rule == "quasi_newton"
    assert config.optimizer.flag.step_rule == "adaptive_moment"


def test_full_scale_override():
    config = ExperimentConfig().full_scale()
    assert config.ensemble.size == 500 and config.pulses.steps == 1000


@pytest.mark.parametrize(
    "data",
    [
        {"modle": {}},
        {"model": {"chi": 1.0}},
        {"optimizer": {"closed": {"learning_rat": 0.1}}},
        {"ensemble": {"size": 0}},
        {"ensemble": {"sampling": "lhs"}},
        {"task": "ghz"},
        {"model": 3},
        {"sweeps": {"frontier_quantile": 1.5}},
    ],
)
def test_config_rejects_bad_input(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_config_round_trips_through_toml(tmp_path, tiny_config):
    path = tmp_path / "c.toml"
    path.write_text(dump_config(tiny_config))
    assert load_config(path) == tiny_config


def test_malformed_toml_is_config_error(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[model\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_stage_config_converts_hz():
    stage = ExperimentConfig().optimizer.flag
    cfg = stage.optimizer_config(seed=9)
    assert cfg.amplitude_bound == pytest.approx(TWO_PI * stage.amplitude_bound_hz)
    assert cfg.init_scale == pytest.approx(TWO_PI * stage.init_scale_hz)
    assert cfg.seed == 9


def test_task_model_uses_angular_rates(tiny_config):
    task = build_task(tiny_config)
    assert task.model.rates == pytest.approx([TWO_PI * g for g in tiny_config.model.gamma_hz])
    assert task.dt == pytest.approx(2e-8 / 8)
    assert np.linalg.norm(fock_target(5)) == pytest.approx(1.0)


def test_cat_task_builds_logical_objective():
    config = config_from_dict({"task": "cat_state_prep", "model": {"d_c": 24}, "pulses": {"duration_s": 2e-7}})
    task = build_task(config)
    assert task.flag.kind == "logical_post_selected"
    assert task.closed.kind == "conventional"
    with pytest.raises(ValueError):
        build_task(config.with_overrides(model={"d_c": 12}))


# -- seeds and records ---------------------------------------------------------------


def test_member_seeds_are_stable_and_distinct():
    seeds = [member_seed(0, i) for i in range(50)]
    assert len(set(seeds)) == 50
    assert all(0 <= s < 2**63 for s in seeds)
    assert member_seed(0, 3) == member_seed(0, 3) != member_seed(1, 3)


def test_run_ids():
    assert run_id(7, "flag") == "0007-flag"


@pytest.mark.parametrize("field,value", [("f_post", 1.5), ("p0", -0.1), ("stage", "open")])
def test_run_record_validation(field, value):
    base = dict(run_id="0000-closed", stage="closed", seed=1, f_pre=0.1, f_post=0.1, p0=0.9,
                iterations=3, objective=0.1, wall_ms=0.0, pulse_path="p.csv")
    base[field] = value
    with pytest.raises(ValueError):
        RunRecord(**base)


def test_run_record_clips_round_off():
    r = RunRecord("0000-closed", "closed", 1, -1e-12, 0.1, 1 + 1e-12, 3, 0.1, 0.0, "p.csv")
    assert r.f_pre == 0.0 and r.p0 == 1.0


# -- ensemble runs -----------------------------------------------------------------------


def test_ensemble_layout(tiny_run):
    config, out, records = tiny_run
    assert [r.run_id for r in records] == ["0000-closed", "0000-flag", "0001-closed", "0001-flag"]
    assert (out / "records.csv").read_text().splitlines()[0] == ",".join(CSV_COLUMNS)
    payload = json.loads((out / "records.json").read_text())
    assert payload["failures"] == [] and len(payload["records"]) == 4
    assert load_config(out / "config.toml") == config
    for r in records:
        assert (out / r.pulse_path).exists()
        assert r.wall_ms == 0.0
    assert read_records(out) == records


def test_flag_stage_never_worse_on_its_selection_objective(tiny_run):
    config, out, records = tiny_run
    task = build_task(config)
    flags = {r.index: r for r in records if r.stage == "flag"}
    for record, pulses in stage_pulses(out, records, "closed"):
        assert flags[record.index].objective <= single_jump_objective(pulses, task.model, task.flag) + 1e-15


def test_ensemble_is_byte_identical(tiny_run, tmp_path):
    config, out, _ = tiny_run
    run_ensemble(config, tmp_path)
    assert (tmp_path / "records.csv").read_bytes() == (out / "records.csv").read_bytes()
    for name in ("0000-closed", "0001-flag"):
        assert (tmp_path / f"pulses/run_{name}.csv").read_bytes() == (out / f"pulses/run_{name}.csv").read_bytes()


def test_resume_skips_finished_runs(tiny_run, tmp_path, monkeypatch):
    config, out, _ = tiny_run
    shutil.copytree(out, tmp_path / "copy")
    import flagcontrol.experiments.runner as runner

    def boom(*args, **kwargs):
        raise RuntimeError("optimizer called")

    monkeypatch.setattr(runner, "optimize", boom)
    run_ensemble(config, tmp_path / "copy")
    assert (tmp_path / "copy/records.csv").read_bytes() == (out / "records.csv").read_bytes()


def test_changed_config_invalidates_resume(tiny_run, tmp_path, monkeypatch):
    config, out, _ = tiny_run
    shutil.copytree(out, tmp_path / "copy")
    import flagcontrol.experiments.runner as runner

    def boom(*args, **kwargs):
        raise RuntimeError("optimizer called")

    monkeypatch.setattr(runner, "optimize", boom)
    changed = config.with_overrides(optimizer={"closed": {"max_iterations": 7}})
    records = run_ensemble(changed, tmp_path / "copy")
    payload = json.loads((tmp_path / "copy/records.json").read_text())
    assert records == []
    assert [f["index"] for f in payload["failures"]] == [0, 1]
    assert "optimizer called" in payload["failures"][0]["error"]


def test_record_timing_keeps_wall_time(tmp_path):
    config = config_from_dict({**TINY, "ensemble": {**TINY["ensemble"], "size": 1, "record_timing": True}})
    records = run_ensemble(config, tmp_path)
    assert all(r.wall_ms > 0 for r in records)


def test_zero_noise_closed_stage_reaches_target(tmp_path):
    config = config_from_dict(
        {
            "model": {"d_c": 4, "gamma_hz": [0.0, 0.0, 0.0]},
            "pulses": {"duration_s": 1e-7, "steps": 50},
            "optimizer": {"closed": {"max_iterations": 400}, "flag": {"max_iterations": 1}},
            "ensemble": {"size": 10, "seed": 3, "trajectories": 2},
        }
    )
    closed = [r for r in run_ensemble(config, tmp_path) if r.stage == "closed"]
    assert len(closed) == 10
    assert sum(r.f_pre < 1e-4 for r in closed) >= 9


# -- analysis --------------------------------------------------------------------------


def test_fit_recovers_exact_line():
    fit = fit_linear([0.25, 0.5, 1.0, 2.0], [1.0 + 2.5 * g for g in (0.25, 0.5, 1.0, 2.0)])
    assert fit.slope == pytest.approx(2.5) and fit.intercept == pytest.approx(1.0)
    assert fit.r_squared == pytest.approx(1.0) and fit.residual_norm < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=3, max_size=12), st.randoms())
def test_fit_is_order_invariant_and_bounded(points, shuffler):
    xs = [p[0] for p in points]
    if np.ptp(xs) < 1e-3:
        return
    shuffled = list(points)
    shuffler.shuffle(shuffled)
    a = fit_linear(*zip(*points))
    b = fit_linear(*zip(*shuffled))
    assert a == b
    assert 0.0 <= a.r_squared <= 1.0


def test_fit_needs_two_distinct_x():
    with pytest.raises(ValueError):
        fit_linear([1.0, 1.0], [0.0, 1.0])


def synthetic_records(rows):
    out = []
    for i, (stage, p0, f) in enumerate(rows):
        out.append(RunRecord(run_id(i // 2, stage), stage, i, f, f, p0, 1, f, 0.0, "x.csv"))
    return out


@pytest.mark.parametrize("method", ["quantile", "hull"])
def test_frontier_recovers_lower_line(method):
    rng = np.random.default_rng(2)
    p0 = rng.uniform(0.9, 1.0, 60)
    boundary = 0.02 - 0.015 * p0
    f_post = boundary + np.where(np.arange(60) % 4 == 0, 0.0, rng.uniform(1e-4, 2e-3, 60))
    records = [RunRecord(run_id(i, "flag"), "flag", i, 0.1, f, p, 1, f, 0.0, "x.csv") for i, (p, f) in enumerate(zip(p0, f_post))]
    result = frontier_scan(records, method, quantile=0.05)
    assert result.slope == pytest.approx(-0.015, abs=2e-3)
    assert result.extrapolated == pytest.approx(0.005, abs=2e-4)


def test_frontier_needs_five_points():
    records = synthetic_records([("flag", 0.9, 0.01)] * 4)
    with pytest.raises(ValueError):
        frontier_scan(records)


def test_summarize_equal_stages_gives_zero_improvement():
    rows = []
    for f in (1e-3, 2e-3, 3e-3):
        rows += [("closed", 0.99, f), ("flag", 0.99, f)]
    report = summarize(synthetic_records(rows))
    assert report["improvement_mean"] == 0.0 and report["improvement_best"] == 0.0
    assert math.isnan(report["p_value"])
    assert report["paired_n"] == 3


def test_summarize_statistics():
    rows = []
    for c, f in [(2e-3, 1e-3), (4e-3, 1e-3), (3e-3, 2e-3), (5e-3, 2e-3)]:
        rows += [("closed", 0.99, c), ("flag", 0.95, f)]
    report = summarize(synthetic_records(rows), unencoded_best=1.5e-3)
    assert report["closed"]["mean"] == pytest.approx(3.5e-3)
    assert report["improvement_mean"] == pytest.approx(1 - 1.5 / 3.5)
    assert report["improvement_best"] == pytest.approx(0.5)
    assert report["p_value"] < 0.05
    assert report["fraction_below_unencoded_best"] == pytest.approx(0.5)
    assert report["flag"]["mean_p0"] == pytest.approx(0.95)


def test_noise_sweep_zero_noise_and_linearity(tiny_config):
    task = build_task(tiny_config)
    rng = np.random.default_rng(0)
    pulses = {"closed": [PulseSchedule(rng.uniform(-1, 1, (8, 4)) * TWO_PI * 10e6, task.dt)]}
    result = noise_sweep(task, pulses, [0.0, 0.5, 1.0], cavity_factors=[0.0, 1.0], qubit_factors=[1.0])
    rows = result.rows
    # no noise: the oracle reduces to unitary evolution
    assert rows[0]["gamma"] == 0.0
    assert rows[0]["f_pre"] == pytest.approx(closed_objective(pulses["closed"][0], task.model, task.closed), abs=1e-10)
    assert result.fits["closed"][0].r_squared > 0.99
    assert len(result.grid) == 2


def test_duration_knee_matches_speed_limit():
    # |g> -> |e> under u sigma_x with |u| <= B needs T >= pi / (2 B)
    space = HilbertSpace(2)
    model = make_model(space, controls=[space.qubit_op(pauli("X"))])
    objective = ObjectiveSpec("conventional", (Constraint(space.basis(0), space.product(np.eye(2)[0], 1)),))
    bound = TWO_PI * 10e6
    cfg = OptimizerConfig(
        max_iterations=200, step_rule="quasi_newton", amplitude_bound=bound, init_scale=0.3 * bound,
        gradient_tolerance=1e-9, objective_tolerance=1e-12,
    )
    t_min = math.pi / (2 * bound)
    durations = [0.8 * t_min, 0.96 * t_min, 1.04 * t_min, 1.2 * t_min]
    scan = minimum_time_scan(model, objective, objective, durations, t_min / 25, cfg, seeds=[1, 2], threshold=1e-4)
    assert scan.knee == pytest.approx(1.04 * t_min)
    assert scan.rows[1].best_closed == pytest.approx(math.cos(0.96 * math.pi / 2) ** 2, rel=1e-3)


# -- CLI ------------------------------------------------------------------------------


@pytest.fixture
def cli_dir(tiny_run, tmp_path):
    config, out, _ = tiny_run
    target = tmp_path / "exp"
    shutil.copytree(out, target)
    cfg = tmp_path / "c.toml"
    cfg.write_text(dump_config(config))
    return cfg, target


def test_cli_optimize_resumes_and_summarizes(cli_dir):
    cfg, out = cli_dir
    result = CliRunner().invoke(main, ["optimize", "--config", str(cfg), "--out", str(out)])
    assert result.exit_code == 0, result.output
    summary = json.loads((out / "summary.json").read_text())
    assert summary["paired_n"] == 2


def test_cli_summarize_and_evaluate(cli_dir):
    cfg, out = cli_dir
    runner = CliRunner()
    result = runner.invoke(main, ["summarize", "--config", str(cfg), "--out", str(out), "--unencoded-best", "0.5"])
    assert result.exit_code == 0, result.output
    assert "fraction_below_unencoded_best" in json.loads(result.output)
    result = runner.invoke(main, ["evaluate", "--config", str(cfg), str(out / "pulses/run_0000-flag.csv")])
    assert result.exit_code == 0, result.output
    record = read_records(out)[1]
    assert json.loads(result.output)["f_post"] == pytest.approx(record.f_post, abs=1e-12)


def test_cli_sweep_noise(cli_dir):
    cfg, out = cli_dir
    result = CliRunner().invoke(main, ["sweep-noise", "--config", str(cfg), "--out", str(out), "--count", "1"])
    assert result.exit_code == 0, result.output
    assert (out / "noise_sweep.csv").exists() and (out / "noise_fits.csv").exists()


def test_cli_rejects_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[ensemble]\nsiz = 3\n")
    result = CliRunner().invoke(main, ["summarize", "--config", str(cfg), "--out", str(tmp_path)])
    assert result.exit_code != 0
    assert "siz" in str(result.exception) or "siz" in result.output


def test_cli_help_lists_subcommands():
    result = CliRunner().invoke(main, ["--help"])
    for name in ("optimize", "sweep-noise", "sweep-duration", "frontier", "summarize", "evaluate"):
        assert name in result.output
