"""Command-line front end.

Four subcommands: ``simulate`` (one trial, human-readable estimates),
``sweep`` (Monte Carlo campaign to results/summary CSV), ``bcrb`` (print the
position bound for a scenario), and ``plot`` (render a summary metric to
SVG + gnuplot data).  Exit codes: 0 success, 1 usage error, 2 runtime error.

Physical-layer defaults baked into the scenario (overridable in the
``[scenario]`` config section): 240 kHz subcarrier spacing and a 28 GHz
carrier (wavelength ~1.07 cm, half-wavelength RIS element spacing).
"""

from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np

from .bcrb import position_bound
from .geometry import (channel_truth, delta_for_snr, random_profile,
                       scenario_with, synthesize)
from .grid import build_dictionary, build_grid
from .harness import (ALGORITHMS, SWEEP_AXES, ExperimentSpec, UsageError,
                      desk_scenario, emit_plot, load_config, run_sweep,
                      summarize, trial_seed)
from .vbi import run_jcle

CONFIG_HELP = ("INI file with [scenario] (positions p_a/p_r/p_u_true, RIS size m/n, "
               "subcarriers l, snapshots t, delta_f [Hz, default 240e3], wavelength "
               "[m, default c/28 GHz], element spacing d [default wavelength/2], "
               "pilot power p_w, noise variance delta, field_mode far|near, grid "
               "sizes p/q) and [experiment] (sweep_axis, sweep_values, trials, "
               "algorithms, master_seed, on_grid_truth, output_dir, snr_db, "
               "user_range_m, workers, tol, max_iter, pso_particles, pso_iterations) "
               "sections")


@click.group(name="risloc")
def cli():
    """Simulation and estimation for a RIS-aided OFDM localization link."""


def _base_spec(config: str | None) -> ExperimentSpec:
    if config is not None:
        return load_config(config)
    return ExperimentSpec(base=desk_scenario())


@cli.command()
@click.option("--config", type=str, default=None, help=CONFIG_HELP)
@click.option("--seed", type=int, default=0, show_default=True,
              help="Master seed for the trial (scene, profile, noise, init).")
@click.option("--snr", type=float, default=15.0, show_default=True,
              help="Target SNR in dB (mean signal power over noise variance).")
def simulate(config, seed, snr):
    """Run one seeded trial of the variational estimator and print estimates."""
    spec = _base_spec(config)
    spec.master_seed = seed
    spec.snr_db = snr
    from .harness import run_trial
    spec.algorithms = ("JCLE",)
    spec.sweep_axis = "SNR_dB"
    records = run_trial(spec, snr, 0)
    rec = records[0]
    click.echo(f"seed:             {rec.seed}")
    click.echo(f"snr_db:           {snr:g}")
    if np.isnan(rec.pos_error_m):
        click.echo("status:           FAILED (no reliable estimate)")
    else:
        click.echo(f"position error:   {rec.pos_error_m:.6g} m")
        click.echo(f"coefficient err:  {rec.delta_err:.6g} (relative)")
        click.echo(f"support correct:  {rec.support_correct}")
        click.echo(f"angle err psi:    {rec.angle_err_psi:.6g} rad")
        click.echo(f"angle err phi:    {rec.angle_err_phi:.6g} rad")
    click.echo(f"iterations:       {rec.iterations}")


@cli.command()
@click.option("--config", type=str, default=None, help=CONFIG_HELP)
@click.option("--axis", type=click.Choice(SWEEP_AXES), default=None,
              help="Sweep axis (overrides the config).")
@click.option("--values", type=str, default=None,
              help="Comma-separated sweep values (overrides the config).")
@click.option("--trials", type=int, default=None,
              help="Monte Carlo trials per sweep point (overrides the config).")
@click.option("--algorithms", type=str, default=None,
              help=f"Comma-separated subset of {','.join(ALGORITHMS)} (overrides the config).")
@click.option("--master-seed", type=int, default=None,
              help="Master seed; per-cell seeds are hashed from it (overrides the config).")
@click.option("--output-dir", type=str, default=None,
              help="Directory for results.csv and summary.csv (overrides the config).")
@click.option("--workers", type=int, default=None,
              help="Process count; output is byte-identical for any value (overrides the config).")
def sweep(config, axis, values, trials, algorithms, master_seed, output_dir, workers):
    """Run a Monte Carlo sweep and write results.csv plus summary.csv."""
    spec = _base_spec(config)
    if axis is not None:
        spec.sweep_axis = axis
    if values is not None:
        spec.sweep_values = tuple(float(v) for v in values.replace(",", " ").split())
    if trials is not None:
        spec.trials = trials
    if algorithms is not None:
        spec.algorithms = tuple(a for a in algorithms.replace(",", " ").split())
    if master_seed is not None:
        spec.master_seed = master_seed
    if output_dir is not None:
        spec.output_dir = Path(output_dir)
    if workers is not None:
        spec.workers = workers
    spec.__post_init__()  # re-validate after overrides
    records, results_path, summary_path = run_sweep(spec)
    click.echo(f"wrote {len(records)} records to {results_path}")
    for row in summarize(records):
        click.echo(f"  {row['algo']:>5} @ {row['sweep_value']:g}: "
                   f"rmse={row['rmse_pos_m']:.4g} m, median={row['median_pos_m']:.4g} m, "
                   f"failures={row['failures']}/{row['trials']}")
    click.echo(f"wrote summary to {summary_path}")


@cli.command()
@click.option("--config", type=str, default=None, help=CONFIG_HELP)
@click.option("--snr", type=float, default=15.0, show_default=True,
              help="SNR in dB at which to evaluate the bound.")
@click.option("--seed", type=int, default=0, show_default=True,
              help="Seed for the RIS profile draw.")
def bcrb(config, snr, seed):
    """Print the position error bound for the configured scenario."""
    spec = _base_spec(config)
    cfg = spec.base
    rng = np.random.default_rng(trial_seed(seed, snr, 0))
    profile = random_profile(cfg, rng)
    truth = channel_truth(cfg, 0.2 + 0.2j, 0.5 + 0.5j)  # prior-mean gains
    cfg = scenario_with(cfg, delta=delta_for_snr(cfg, snr))
    bound = position_bound(cfg, truth, profile)
    click.echo(f"position bound at {snr:g} dB: {bound:.6g} m")


@cli.command()
@click.option("--summary", type=str, required=True,
              help="summary.csv produced by the sweep subcommand.")
@click.option("--metric", type=str, default="rmse_pos_m", show_default=True,
              help="Column to plot: rmse_pos_m, median_pos_m, or failure_rate.")
@click.option("--out", type=str, default="sweep.svg", show_default=True,
              help="Output SVG path (a gnuplot .dat table lands next to it).")
def plot(summary, metric, out):
    """Render a sweep summary as a vector-graphics figure."""
    svg_path, dat_path = emit_plot(Path(summary), metric, Path(out))
    click.echo(f"wrote {svg_path} and {dat_path}")


def main(argv=None) -> int:
    """Entry point with the documented exit-code contract."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as e:
        return int(e.exit_code)
    except click.Abort:
        return 1
    except (UsageError, click.UsageError) as e:
        click.echo(f"error: {e}", err=True)
        return 1
    except Exception as e:  # noqa: BLE001 - boundary of the CLI
        click.echo(f"runtime error: {e}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
