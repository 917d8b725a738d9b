"""Command-line interface: ``flagcontrol <subcommand> [--config c.toml] [--out dir] ...``."""
from __future__ import annotations

import csv
import functools
import json
import logging
import sys
from pathlib import Path

import click

from ..grape import load_pulses
from ..lindblad import evaluate
from .analysis import duration_sweep, frontier_scan, noise_sweep, summarize
from .config import ExperimentConfig, load_config
from .runner import read_records, run_ensemble, stage_pulses
from .tasks import build_task


def _common(func):
    @click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="TOML config file.")
    @click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Experiment directory.")
    @click.option("--workers", type=click.IntRange(min=1), default=1, show_default=True, help="Worker processes.")
    @click.option("--seed", type=click.IntRange(min=0, max=2**64 - 1), help="Master seed (overrides the config).")
    @click.option("--full-scale", is_flag=True, help="500-member ensembles on the full time grid.")
    @functools.wraps(func)
    def wrapper(config_path, out_dir, workers, seed, full_scale, **kwargs):
        config = load_config(config_path) if config_path else ExperimentConfig()
        if seed is not None:
            config = config.with_overrides(ensemble={"seed": seed})
        if full_scale:
            config = config.full_scale()
        out = Path(out_dir if out_dir is not None else config.output_dir)
        return func(config=config, out=out, workers=workers, **kwargs)

    return wrapper


def _write_table(path: Path, rows: list[dict]):
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _echo_json(data):
    click.echo(json.dumps(data, indent=2, sort_keys=True))


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Closed- and Flag-GRAPE ensembles, sweeps and statistics."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, stream=sys.stderr)


@main.command()
@_common
def optimize(config, out, workers):
    """Run (or resume) the two-stage ensemble and print its summary."""
    records = run_ensemble(config, out, workers)
    report = summarize(records)
    (out / "summary.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _echo_json(report)


@main.command("sweep-noise")
@_common
@click.option("--count", type=int, default=None, help="Pulses per family (default: all).")
def sweep_noise(config, out, workers, count):
    """Oracle infidelity of saved pulses versus the noise scale factor."""
    task = build_task(config)
    records = read_records(out)
    pulses = {
        stage: [p for _, p in stage_pulses(out, records, stage)][:count] for stage in ("closed", "flag")
    }
    sw = config.sweeps
    result = noise_sweep(task, pulses, sw.gamma_factors, sw.cavity_factors, sw.qubit_factors)
    _write_table(out / "noise_sweep.csv", result.rows)
    fit_rows = [
        {"family": fam, "pulse": i, "slope": f.slope, "intercept": f.intercept, "r_squared": f.r_squared}
        for fam, fits in result.fits.items()
        for i, f in enumerate(fits)
    ]
    _write_table(out / "noise_fits.csv", fit_rows)
    if result.grid:
        _write_table(out / "noise_grid.csv", result.grid)
    _echo_json(
        {fam: {"mean_slope": result.mean_slope(fam), "family_intercept": result.family_fits[fam].intercept}
         for fam in result.fits if result.fits[fam]}
    )


@main.command("sweep-duration")
@_common
@click.option("--seeds", type=click.IntRange(min=1), default=5, show_default=True)
@click.option("--threshold", type=float, default=1e-4, show_default=True, help="Closed-system infidelity deemed feasible.")
def sweep_duration(config, out, workers, seeds, threshold):
    """Closed-stage best/median infidelity versus gate duration."""
    scan = duration_sweep(config, seeds=seeds, threshold=threshold)
    rows = [vars(r) for r in scan.rows]
    _write_table(out / "duration_sweep.csv", rows)
    _echo_json({"knee": scan.knee, "rows": rows})


@main.command()
@_common
@click.option("--stage", type=click.Choice(["closed", "flag"]), default="flag", show_default=True)
def frontier(config, out, workers, stage):
    """Scatter of (p0, f_post) and its lower boundary fit."""
    records = read_records(out)
    result = frontier_scan(records, config.sweeps.frontier_method, config.sweeps.frontier_quantile, stage)
    _write_table(out / f"frontier_{stage}.csv", [{"p0": p, "f_post": f} for p, f in result.points])
    _echo_json(
        {"method": result.method, "slope": result.slope, "intercept": result.intercept, "at_p0_1": result.extrapolated}
    )


@main.command("summarize")
@_common
@click.option("--unencoded-best", type=float, default=None, help="Best unencoded f_post to compare against.")
def summarize_cmd(config, out, workers, unencoded_best):
    """Means, medians, best values and improvements of a finished ensemble."""
    report = summarize(read_records(out), unencoded_best)
    _echo_json(report)


@main.command("evaluate")
@_common
@click.argument("pulse_file", type=click.Path(exists=True, dir_okay=False))
def evaluate_cmd(config, out, workers, pulse_file):
    """Master-equation f_pre, f_post and p0 of a pulse file under the configured model."""
    task = build_task(config)
    pulses, _ = load_pulses(pulse_file)
    r = evaluate(pulses, task.model, task.report)
    _echo_json({"f_pre": r.f_pre, "f_post": r.f_post, "p0": r.p0})


if __name__ == "__main__":
    main()
