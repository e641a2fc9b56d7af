"""Seeded Monte Carlo sweeps over SNR, snapshot count, or RIS size.

Every (sweep value, trial) cell derives its own 64-bit seed from a stable
hash of (master seed, value, trial index), so results are reproducible and
independent of execution order or parallelism.  All algorithms of a trial
share one synthesized snapshot set.  Records land in ``results.csv`` and
per-cell aggregates in ``summary.csv``; wall-clock times are kept on the
in-memory records only, so repeated runs produce byte-identical CSV files.
"""

from __future__ import annotations

import csv
import hashlib
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .baselines import PsoConfig, ml_localize, pso_localize
from .bcrb import position_bound
from .geometry import (FieldMode, ScenarioConfig, channel_truth, delta_for_snr,
                       random_profile, scenario_with, synthesize)
from .grid import build_dictionary, build_grid, nearest_index
from .vbi import DivergenceError, default_priors, run_jcle

ALGORITHMS = ("JCLE", "PSO", "ML", "BCRB")
SWEEP_AXES = ("SNR_dB", "Snapshots", "RisElements")

RESULTS_COLUMNS = ["run_id", "algo", "sweep_axis", "sweep_value", "seed",
                   "pos_error_m", "delta_err", "support_correct",
                   "angle_err_psi", "angle_err_phi", "iterations"]
SUMMARY_COLUMNS = ["algo", "sweep_value", "trials", "failures", "failure_rate",
                   "rmse_pos_m", "median_pos_m"]

# truth directions are drawn away from the polar axis and the grid edge,
# where the azimuth is ill-determined and half the beam leaves the grid span
TRUTH_PSI_RANGE = (-1.25, 1.25)
TRUTH_PHI_RANGE = (0.30, 1.35)
DEFAULT_FAR_RANGE_M = 20.0
DEFAULT_NEAR_RANGE_WAVELENGTHS = 50.0
INIT_POSITION_STD_M = 5.0  # initial guess = truth + N(0, 25 I)
PSO_BOX_HALFWIDTH_M = 15.0


class UsageError(ValueError):
    """Bad user-supplied arguments (maps to CLI exit code 1)."""


@dataclass
class ExperimentSpec:
    """One sweep campaign: scenario template, axis, values, trial count."""

    base: ScenarioConfig
    sweep_axis: str = "SNR_dB"
    sweep_values: tuple = (5.0, 10.0, 15.0, 20.0, 25.0)
    trials: int = 50
    algorithms: tuple = ALGORITHMS
    master_seed: int = 0
    on_grid_truth: bool = True
    output_dir: Path = Path("runs")
    snr_db: Optional[float] = 15.0  # base SNR for non-SNR axes; None keeps cfg.delta
    user_range_m: Optional[float] = None
    workers: int = 1
    tol: float = 1e-6
    max_iter: int = 50
    pso_particles: int = 200
    pso_iterations: int = 100

    def __post_init__(self):
        if self.sweep_axis not in SWEEP_AXES:
            raise UsageError(f"unknown sweep axis '{self.sweep_axis}'; "
                             f"choose from {', '.join(SWEEP_AXES)}")
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad:
            raise UsageError(f"unknown algorithm(s) {bad}; choose from {ALGORITHMS}")
        if self.trials < 1:
            raise UsageError("trials must be >= 1")
        if not self.sweep_values:
            raise UsageError("sweep_values must be non-empty")
        self.output_dir = Path(self.output_dir)
        self.sweep_values = tuple(self.sweep_values)
        self.algorithms = tuple(self.algorithms)


@dataclass
class TrialRecord:
    """Flat per-(trial, algorithm) outcome row."""

    run_id: str
    algo: str
    sweep_axis: str
    sweep_value: float
    seed: int
    pos_error_m: float
    delta_err: float
    support_correct: bool
    angle_err_psi: float
    angle_err_phi: float
    iterations: int
    wall_ms: float = field(default=0.0, compare=False)  # not serialized

    def __post_init__(self):
        if np.isfinite(self.pos_error_m) and self.pos_error_m < 0:
            raise ValueError("pos_error_m must be non-negative")


def trial_seed(master_seed: int, sweep_value, trial_index: int) -> int:
    """Stable 64-bit seed for one Monte Carlo cell."""
    key = f"{master_seed}|{float(sweep_value)!r}|{int(trial_index)}".encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def apply_sweep(base: ScenarioConfig, axis: str, value) -> ScenarioConfig:
    """Scenario for one sweep point (SNR is applied later via the noise level)."""
    if axis == "SNR_dB":
        return base
    if axis == "Snapshots":
        return scenario_with(base, T=int(value))
    if axis == "RisElements":
        return scenario_with(base, M=int(value), N=int(value))
    raise UsageError(f"unknown sweep axis '{axis}'")


def _default_range(cfg: ScenarioConfig, spec: ExperimentSpec) -> float:
    if spec.user_range_m is not None:
        return float(spec.user_range_m)
    if cfg.field_mode is FieldMode.NEAR:
        return DEFAULT_NEAR_RANGE_WAVELENGTHS * cfg.wavelength
    return DEFAULT_FAR_RANGE_M


def draw_truth(cfg: ScenarioConfig, spec: ExperimentSpec, rng: np.random.Generator):
    """Random user placement plus prior-drawn path gains.

    On-grid mode picks a dictionary grid direction (restricted away from the
    polar axis); otherwise the direction is uniform in the same angular box.
    The baselines only ever see the prior means, so drawing the true gains
    from the priors reproduces the intended model mismatch.
    """
    g = build_grid(cfg.P, cfg.Q)
    if spec.on_grid_truth:
        oks = [(p, q) for p in range(cfg.P) for q in range(cfg.Q)
               if TRUTH_PSI_RANGE[0] <= g.psi_points[p] <= TRUTH_PSI_RANGE[1]
               and TRUTH_PHI_RANGE[0] <= g.phi_points[q] <= TRUTH_PHI_RANGE[1]]
        if not oks:
            raise UsageError("grid too coarse: no grid direction inside the truth box")
        p, q = oks[int(rng.integers(len(oks)))]
        psi, phi = float(g.psi_points[p]), float(g.phi_points[q])
    else:
        psi = float(rng.uniform(*TRUTH_PSI_RANGE))
        phi = float(rng.uniform(*TRUTH_PHI_RANGE))
    rho = _default_range(cfg, spec)
    u = np.array([np.sin(phi) * np.cos(psi), np.sin(phi) * np.sin(psi), np.cos(phi)])
    cfg = scenario_with(cfg, p_u_true=cfg.p_r + rho * u)
    # gains drawn from the same priors the estimators assume
    alpha_au = (0.2 + 0.2j) + np.sqrt(0.01 / 2) * (rng.standard_normal() + 1j * rng.standard_normal())
    slab_var = 1.0 / 100.0  # prior mean precision a*b
    alpha_ru = (0.5 + 0.5j) + np.sqrt(slab_var / 2) * (rng.standard_normal() + 1j * rng.standard_normal())
    return cfg, channel_truth(cfg, alpha_au, alpha_ru)


def _failed_record(run_id, algo, spec, value, seed, iterations=0, wall_ms=0.0):
    return TrialRecord(run_id=run_id, algo=algo, sweep_axis=spec.sweep_axis,
                       sweep_value=float(value), seed=seed, pos_error_m=float("nan"),
                       delta_err=float("nan"), support_correct=False,
                       angle_err_psi=float("nan"), angle_err_phi=float("nan"),
                       iterations=iterations, wall_ms=wall_ms)


def run_trial(spec: ExperimentSpec, sweep_value, trial_index: int) -> list:
    """All requested algorithms on one shared synthesized scene."""
    seed = trial_seed(spec.master_seed, sweep_value, trial_index)
    streams = np.random.SeedSequence(seed).spawn(5)
    rng_truth, rng_prof, rng_noise, rng_init, rng_pso = map(np.random.default_rng, streams)

    cfg = apply_sweep(spec.base, spec.sweep_axis, sweep_value)
    cfg, truth = draw_truth(cfg, spec, rng_truth)
    profile = random_profile(cfg, rng_prof)
    if spec.sweep_axis == "SNR_dB":
        cfg = scenario_with(cfg, delta=delta_for_snr(cfg, float(sweep_value)))
    elif spec.snr_db is not None:
        cfg = scenario_with(cfg, delta=delta_for_snr(cfg, spec.snr_db))
    snap = synthesize(cfg, truth, profile, rng_noise)

    p_init = cfg.p_u_true + rng_init.normal(0.0, INIT_POSITION_STD_M, 3)
    g = build_grid(cfg.P, cfg.Q)
    init_range = float(np.linalg.norm(p_init - cfg.p_r))
    dic = build_dictionary(cfg, g, range_m=init_range if cfg.field_mode is FieldMode.NEAR else None)
    k_true = nearest_index(g, truth.psi, truth.phi)
    delta_true = np.zeros(cfg.P * cfg.Q, dtype=complex)
    delta_true[k_true] = truth.alpha_ru
    run_id = f"{spec.sweep_axis}={sweep_value}:trial={trial_index}"

    def metrics(result, delta_hat, iterations, wall_ms, algo):
        if result.failure_flag or not np.all(np.isfinite(result.p_u_hat)):
            return _failed_record(run_id, algo, spec, sweep_value, seed, iterations, wall_ms)
        return TrialRecord(
            run_id=run_id, algo=algo, sweep_axis=spec.sweep_axis,
            sweep_value=float(sweep_value), seed=seed,
            pos_error_m=float(np.linalg.norm(result.p_u_hat - cfg.p_u_true)),
            delta_err=float(np.linalg.norm(delta_hat - delta_true)
                            / np.linalg.norm(delta_true)),
            support_correct=bool(result.support_index == k_true),
            angle_err_psi=float(abs(result.psi_hat - truth.psi)),
            angle_err_phi=float(abs(result.phi_hat - truth.phi)),
            iterations=iterations, wall_ms=wall_ms)

    records = []
    for algo in spec.algorithms:
        t0 = time.perf_counter()
        if algo == "JCLE":
            try:
                result, state, report = run_jcle(cfg, snap, dic, p_init,
                                                 tol=spec.tol, max_iter=spec.max_iter)
                wall = (time.perf_counter() - t0) * 1e3
                records.append(metrics(result, state.mu_delta, report.iterations_run,
                                       wall, algo))
            except DivergenceError as e:
                wall = (time.perf_counter() - t0) * 1e3
                records.append(_failed_record(run_id, algo, spec, sweep_value, seed,
                                              e.iteration, wall))
        elif algo == "PSO":
            priors = default_priors(cfg, p_init)
            box = (p_init - PSO_BOX_HALFWIDTH_M, p_init + PSO_BOX_HALFWIDTH_M)
            pso = PsoConfig(particles=spec.pso_particles,
                            iterations=spec.pso_iterations, search_box=box)
            result = pso_localize(cfg, snap, dic, pso,
                                  (priors.mu_alpha_au, priors.mu_delta_slab), rng_pso)
            wall = (time.perf_counter() - t0) * 1e3
            delta_hat = np.zeros_like(delta_true)
            if result.support_index >= 0:
                delta_hat[result.support_index] = priors.mu_delta_slab
            records.append(metrics(result, delta_hat, spec.pso_iterations, wall, algo))
        elif algo == "ML":
            result = ml_localize(cfg, snap, dic)
            wall = (time.perf_counter() - t0) * 1e3
            delta_hat = np.zeros_like(delta_true)
            if result.support_index >= 0:
                delta_hat[result.support_index] = result.alpha_ru_hat
            records.append(metrics(result, delta_hat, 1, wall, algo))
        elif algo == "BCRB":
            bound = position_bound(cfg, truth, profile)
            wall = (time.perf_counter() - t0) * 1e3
            records.append(TrialRecord(
                run_id=run_id, algo=algo, sweep_axis=spec.sweep_axis,
                sweep_value=float(sweep_value), seed=seed, pos_error_m=bound,
                delta_err=float("nan"), support_correct=False,
                angle_err_psi=float("nan"), angle_err_phi=float("nan"),
                iterations=0, wall_ms=wall))
    return records


def _trial_cell(args):
    spec, value, trial = args
    return run_trial(spec, value, trial)


def run_sweep(spec: ExperimentSpec) -> tuple:
    """Execute every (value, trial) cell and write results/summary CSV files.

    Returns (records, results_path, summary_path).  With ``workers > 1`` the
    cells run in a process pool; the pre-assigned per-cell seeds and a final
    deterministic sort keep the output identical to a sequential run.
    """
    cells = [(spec, v, t) for v in spec.sweep_values for t in range(spec.trials)]
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            chunks = list(pool.map(_trial_cell, cells))
    else:
        chunks = [_trial_cell(c) for c in cells]
    records = [r for chunk in chunks for r in chunk]
    order = {float(v): i for i, v in enumerate(spec.sweep_values)}
    records.sort(key=lambda r: (order[float(r.sweep_value)], r.run_id, r.algo))
    spec.output_dir.mkdir(parents=True, exist_ok=True)
    results_path = spec.output_dir / "results.csv"
    summary_path = spec.output_dir / "summary.csv"
    write_results_csv(records, results_path)
    write_summary_csv(summarize(records), summary_path)
    return records, results_path, summary_path


# ---------------------------------------------------------------------------
# aggregation and serialization
# ---------------------------------------------------------------------------

def summarize(records) -> list:
    """Per-(algo, sweep_value) aggregates: RMSE/median position error over the
    non-failed trials plus the failure rate."""
    cells = {}
    for r in records:
        cells.setdefault((r.algo, float(r.sweep_value)), []).append(r)
    rows = []
    for (algo, value), rs in sorted(cells.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        errs = np.array([r.pos_error_m for r in rs], dtype=float)
        ok = np.isfinite(errs)
        failures = int(np.sum(~ok))
        rmse = float(np.sqrt(np.mean(errs[ok] ** 2))) if ok.any() else float("nan")
        med = float(np.median(errs[ok])) if ok.any() else float("nan")
        rows.append({"algo": algo, "sweep_value": value, "trials": len(rs),
                     "failures": failures, "failure_rate": failures / len(rs),
                     "rmse_pos_m": rmse, "median_pos_m": med})
    return rows


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def write_results_csv(records, path: Path):
    path = Path(path)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(RESULTS_COLUMNS)
            for r in records:
                writer.writerow([_fmt(getattr(r, c)) for c in RESULTS_COLUMNS])
    except OSError as e:
        raise OSError(f"cannot write results file {path}: {e}") from e


def write_summary_csv(rows, path: Path):
    path = Path(path)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(SUMMARY_COLUMNS)
            for row in rows:
                writer.writerow([_fmt(row[c]) for c in SUMMARY_COLUMNS])
    except OSError as e:
        raise OSError(f"cannot write summary file {path}: {e}") from e


def read_summary_csv(path: Path) -> list:
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != SUMMARY_COLUMNS:
                raise UsageError(f"{path} is not a summary file "
                                 f"(columns {reader.fieldnames})")
            rows = []
            for row in reader:
                rows.append({"algo": row["algo"],
                             "sweep_value": float(row["sweep_value"]),
                             "trials": int(row["trials"]),
                             "failures": int(row["failures"]),
                             "failure_rate": float(row["failure_rate"]),
                             "rmse_pos_m": float(row["rmse_pos_m"]),
                             "median_pos_m": float(row["median_pos_m"])})
            return rows
    except OSError as e:
        raise OSError(f"cannot read summary file {path}: {e}") from e


# ---------------------------------------------------------------------------
# plotting
# ---------------------------------------------------------------------------

PLOT_METRICS = ("rmse_pos_m", "median_pos_m", "failure_rate")


def emit_plot(summary_path: Path, metric: str, out_path: Path) -> tuple:
    """Render one metric of a summary file as a self-contained SVG plus a
    gnuplot-compatible text table next to it.  Error metrics use a log y-axis.
    """
    if metric not in PLOT_METRICS:
        raise UsageError(f"unknown metric '{metric}'; choose from {PLOT_METRICS}")
    rows = read_summary_csv(summary_path)
    if not rows:
        raise UsageError(f"summary file {summary_path} has no data rows")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_path = Path(out_path)
    if out_path.suffix.lower() != ".svg":
        out_path = out_path.with_suffix(".svg")
    algos = sorted({row["algo"] for row in rows})
    values = sorted({row["sweep_value"] for row in rows})
    axis = "sweep value"
    series = {}
    for algo in algos:
        pts = {row["sweep_value"]: row[metric] for row in rows if row["algo"] == algo}
        series[algo] = [pts.get(v, float("nan")) for v in values]
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    for algo in algos:
        ax.plot(values, series[algo], marker="o", label=algo)
    if metric != "failure_rate":
        ax.set_yscale("log")
    ax.set_xlabel(axis)
    ax.set_ylabel(metric)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    try:
        fig.savefig(out_path, format="svg")
    except OSError as e:
        raise OSError(f"cannot write plot file {out_path}: {e}") from e
    finally:
        plt.close(fig)
    dat_path = out_path.with_suffix(".dat")
    try:
        with open(dat_path, "w", encoding="utf-8") as fh:
            fh.write("# " + " ".join(["sweep_value"] + algos) + "\n")
            for i, v in enumerate(values):
                cells = [repr(float(v))] + [_fmt(float(series[a][i])) for a in algos]
                fh.write(" ".join(cells) + "\n")
    except OSError as e:
        raise OSError(f"cannot write plot data file {dat_path}: {e}") from e
    return out_path, dat_path


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

_SCENARIO_KEYS = {
    "p_a": "vec", "p_r": "vec", "p_u_true": "vec", "m": "int", "n": "int",
    "l": "int", "t": "int", "delta_f": "float", "wavelength": "float",
    "d": "float", "p_w": "float", "delta": "float", "c": "float",
    "field_mode": "str", "rng_seed": "int", "p": "int", "q": "int",
}
_EXPERIMENT_KEYS = {
    "sweep_axis": "str", "sweep_values": "floats", "trials": "int",
    "algorithms": "strs", "master_seed": "int", "on_grid_truth": "bool",
    "output_dir": "path", "snr_db": "float", "user_range_m": "float",
    "workers": "int", "tol": "float", "max_iter": "int",
    "pso_particles": "int", "pso_iterations": "int",
}
_FIELD_CASE = {"m": "M", "n": "N", "l": "L", "t": "T", "p": "P", "q": "Q",
               "p_w": "P_w"}


def _convert(raw: str, kind: str):
    raw = raw.strip()
    if raw == "":
        return None
    if kind == "vec":
        return np.array([float(x) for x in raw.replace(",", " ").split()])
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"not a boolean: '{raw}'")
    if kind == "floats":
        return tuple(float(x) for x in raw.replace(",", " ").split())
    if kind == "strs":
        return tuple(x for x in raw.replace(",", " ").split())
    if kind == "path":
        return Path(raw)
    return raw


def load_config(path) -> ExperimentSpec:
    """Parse an INI experiment file with [scenario] and [experiment] sections.

    Unknown keys raise :class:`UsageError` (they are usually typos); missing
    sections fall back to the desk-scale defaults.
    """
    import configparser

    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise UsageError(f"cannot parse config file {path}: {e}") from e
    scen_kwargs = {}
    if cp.has_section("scenario"):
        for key, raw in cp.items("scenario"):
            if key not in _SCENARIO_KEYS:
                raise UsageError(f"unknown scenario key '{key}' in {path}")
            val = _convert(raw, _SCENARIO_KEYS[key])
            if val is not None:
                scen_kwargs[_FIELD_CASE.get(key, key)] = val
    exp_kwargs = {}
    if cp.has_section("experiment"):
        for key, raw in cp.items("experiment"):
            if key not in _EXPERIMENT_KEYS:
                raise UsageError(f"unknown experiment key '{key}' in {path}")
            val = _convert(raw, _EXPERIMENT_KEYS[key])
            if val is not None:
                exp_kwargs[key] = val
    try:
        base = ScenarioConfig(**scen_kwargs)
        return ExperimentSpec(base=base, **exp_kwargs)
    except (ValueError, TypeError) as e:
        if isinstance(e, UsageError):
            raise
        raise UsageError(f"invalid configuration in {path}: {e}") from e


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def table1_scenario(**overrides) -> ScenarioConfig:
    """Full-scale reference scenario (20 x 20 RIS, L = 128, T = 80)."""
    return ScenarioConfig(**overrides)


def desk_scenario(**overrides) -> ScenarioConfig:
    """Reduced scenario for fast runs: 10 x 10 RIS, L = 64, T = 40."""
    params = dict(M=10, N=10, L=64, T=40)
    params.update(overrides)
    return ScenarioConfig(**params)
