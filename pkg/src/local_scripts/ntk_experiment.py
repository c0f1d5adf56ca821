#!/usr/bin/env python
"""
command line front end of the NTK experiments

    ntk-experiment [global flags] <command> [command flags]

commands: edr, sphere-modes, flow, train, compare, cv
Each command writes into <output_dir>/<command>/ the result tables, the fully
resolved parameters (config_used.yaml) and a run summary (run_info.json).
Exit codes: 0 success, 1 numerical failure, 2 usage or invalid parameters.
"""
import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import yaml
from attrs import asdict, fields_dict

import local_env_variables.env_variables as env
from local_config.experiment_parameters import SPHERE_PROFILES, ExperimentParams
from local_kernel_training import kernel_flow_regression as kfr
from local_kernel_training import mirrored_network as mn
from local_ntk_spectra import ntk_kernels, spectral_estimator, sphere_harmonics
from local_ntk_utils.errors import NumericalFailure, TrainingDiverged
from local_ntk_utils.general_utils import (
    derived_seed,
    header_from_meta,
    save_config_yaml,
    save_info_json,
    substream,
    write_csv,
    write_plot_data,
)
from local_ntk_utils.log_utils import setup_logging

FILES = env.experiment_files
logger = logging.getLogger(__name__)

# command name -> section of ExperimentParams
SECTIONS = {
    "edr": "edr",
    "sphere-modes": "sphere_modes",
    "flow": "flow",
    "train": "train",
    "compare": "compare",
    "cv": "cv",
}
GLOBAL_FLAGS = ["seed", "output_dir", "n_workers", "log_level", "plot_data"]


def load_config(config_file: str | None) -> ExperimentParams:
    if config_file is None:
        return ExperimentParams()
    with open(config_file, 'r') as f:
        config_dict = yaml.safe_load(f)
    return ExperimentParams.from_dict(config_dict or {})


def resolve_params(args: argparse.Namespace) -> ExperimentParams:
    """config file values, overridden by whichever flags were given on the command line"""
    config_dict = asdict(load_config(args.config))
    given = vars(args)
    for k in GLOBAL_FLAGS:
        if k in given:
            config_dict[k] = given[k]
    section = SECTIONS[args.command]
    for k in fields_dict(type(getattr(ExperimentParams(), section))):
        if k in given:
            config_dict[section][k] = given[k]
    return ExperimentParams.from_dict(config_dict)


def _plot(params: ExperimentParams, output_dir: Path, name: str, x, y, x_name: str, y_name: str, files: list):
    if params.plot_data:
        files.append(write_plot_data(x, y, output_dir / FILES.plot_template.format(name=name), x_name, y_name))


def _synthetic_data(conf, seed: int, purpose: str):
    """shared by `flow` and `cv`: target, training task and holdout task"""
    dist = spectral_estimator.make_distribution(conf.distribution, conf.d)
    kernel = ntk_kernels.ntk_kernel(ntk_kernels.NtkDescriptor(L=conf.L))
    rng = substream(seed, purpose, "target")
    s = getattr(conf, "s", 1.0)
    f_star = kfr.spectral_target(kernel, spectral_estimator.sample(dist, conf.n_centers, rng=rng), s=s, rng=rng)
    task = kfr.make_regression_task(f_star, dist, conf.n, conf.noise_sigma, substream(seed, purpose, "train"))
    hold = kfr.make_regression_task(f_star, dist, conf.n_holdout, conf.noise_sigma, substream(seed, purpose, "holdout"))
    return dist, kernel, f_star, task, hold


# ==============================================================================
# // commands
# ==============================================================================

def cmd_edr(params: ExperimentParams, output_dir: Path) -> dict:
    conf = params.edr
    table, spectra = spectral_estimator.edr_experiment(
        distributions=conf.distributions,
        dims=conf.dims,
        layers=conf.layers,
        n=conf.n,
        window=conf.window,
        n_seeds=conf.n_seeds,
        root_seed=params.seed,
        n_workers=params.n_workers,
    )
    files = [write_csv(table, output_dir / FILES.edr_table)]
    for cell, spectrum in spectra.items():
        index = np.arange(1, len(spectrum) + 1)
        df = pd.DataFrame({"i": index, "lambda_i": spectrum})
        meta = {"cell": cell, "n": conf.n, "seeds": conf.n_seeds, "root_seed": params.seed}
        files.append(
            write_csv(df, output_dir / FILES.spectrum_template.format(cell=cell), header_lines=header_from_meta(meta))
        )
        _plot(params, output_dir, cell, np.log(index), np.log(spectrum), "log_i", "log_lambda", files)
    print(table.to_markdown(index=False))
    return {"cells": len(table), "files": [str(f) for f in files]}


def _sphere_profile(conf):
    if conf.profile == "ntk":
        desc = ntk_kernels.NtkDescriptor(L=conf.L, variant="homogeneous")
        return lambda u: ntk_kernels.ntk_profile(desc, u)
    if conf.profile == "constant":
        return lambda u: np.ones_like(np.asarray(u, dtype=float))
    if conf.profile == "kappa0":
        return ntk_kernels.kappa0
    return ntk_kernels.kappa1


def cmd_sphere_modes(params: ExperimentParams, output_dir: Path) -> dict:
    conf = params.sphere_modes
    geometry = sphere_harmonics.SphereGeometry(conf.d)
    profile = _sphere_profile(conf)
    spectrum = sphere_harmonics.funk_hecke_modes(profile, geometry, conf.n_max, quad_order=conf.quad_order, rule=conf.rule)
    files = [spectrum.to_csv(output_dir / FILES.mode_spectrum)]
    mu = spectrum.mu
    nonzero = np.flatnonzero(np.abs(mu) > 1e-10 * np.max(np.abs(mu)))
    info = {
        "profile": conf.profile,
        "n_max": conf.n_max,
        "nonzero_modes": int(len(nonzero)),
        "negative_modes": [int(n) for n in spectrum.negative_modes()],
        "trace": float(spectrum.trace()),
        "profile_at_one": float(np.asarray(profile(np.array([1.0])))[0]),
        "slope": None,
    }
    lo, hi = conf.window
    if hi <= conf.n_max and np.all(mu[lo : hi + 1] > 0):
        fit = spectral_estimator.fit_mode_decay(spectrum, conf.window)
        info["slope"] = fit.slope
        info["r2"] = fit.r2
    else:
        logger.info("no decay fit: window has vanishing modes or exceeds n_max", extra={"window": list(conf.window)})
    positive = np.flatnonzero(mu > 0)
    positive = positive[positive > 0]
    _plot(params, output_dir, "modes", np.log(positive), np.log(mu[positive]), "log_n", "log_mu", files)
    print(spectrum.to_frame().head(12).to_markdown(index=False))
    info["files"] = [str(f) for f in files]
    return info


def cmd_flow(params: ExperimentParams, output_dir: Path) -> dict:
    conf = params.flow
    dist, kernel, f_star, task, hold = _synthetic_data(conf, params.seed, "flow")
    t_op = kfr.optimal_stopping_time(conf.n, conf.d, conf.s, conf.c)
    pred = kfr.FlowPredictor.from_task(kernel, task)
    times = sorted(set(conf.times) | {t_op})
    curve = kfr.risk_curve(pred, times, hold.X, hold.y, f_star=f_star, dist=dist, n_mc=conf.n_mc, seed=params.seed)
    files = [write_csv(curve, output_dir / FILES.risk_curve)]
    _plot(params, output_dir, "risk_curve", np.log10(curve["t"]), curve["l2_risk"], "log10_t", "l2_risk", files)
    print(curve.to_markdown(index=False))
    best = curve.loc[curve["holdout_risk"].idxmin()]
    y_norm = float(np.linalg.norm(task.y))
    return {
        "t_op": t_op,
        "lambda_min": pred.lambda_min,
        "best_t_holdout": float(best["t"]),
        "final_train_residual": float(curve["train_residual"].iloc[-1]),
        "y_norm": y_norm,
        "l2_risk_at_t_op": float(curve.loc[curve["t"] == t_op, "l2_risk"].iloc[0]),
        "files": [str(f) for f in files],
    }


def cmd_train(params: ExperimentParams, output_dir: Path) -> dict:
    conf = params.train
    desc = ntk_kernels.NtkDescriptor(L=conf.L)
    task = mn.make_training_task(conf.d, conf.n, desc, noise_sigma=conf.noise_sigma, seed=params.seed)
    state = mn.init_network(conf.d, conf.L, conf.width, seed=derived_seed(params.seed, "train", "network"))
    step_size = conf.step_size
    if step_size is None:
        step_size = mn.stable_step_size(state, task.X)
    grid = mn.probe_grid(conf.d)
    flow = kfr.FlowPredictor.from_task(desc, task)
    probe = mn.ProbeConfig(log_every=conf.log_every, grid=grid, ntk=desc, flow=flow)
    trace = mn.train(state, task, step_size, conf.n_steps, probe)
    df = trace.to_frame()
    files = [
        write_csv(df, output_dir / FILES.train_trace),
        mn.save_checkpoint(state, output_dir / FILES.checkpoint),
    ]
    _plot(params, output_dir, "train_residual", df["t"], df["residual"], "t", "residual", files)
    print(df.to_markdown(index=False))
    return {
        "step_size": step_size,
        "t_max": conf.n_steps * step_size,
        "final_residual": trace.train_residuals[-1],
        "uniform_gap": mn.uniform_gap(trace, flow, grid),
        "files": [str(f) for f in files],
    }


def cmd_compare(params: ExperimentParams, output_dir: Path) -> dict:
    conf = params.compare
    by_seed = mn.width_sweep(
        d=conf.d,
        L=conf.L,
        widths=conf.widths,
        n_seeds=conf.n_seeds,
        n=conf.n,
        n_steps=conf.n_steps,
        step_fraction=conf.step_fraction,
        noise_sigma=conf.noise_sigma,
        log_every=conf.log_every,
        root_seed=params.seed,
        n_workers=params.n_workers,
    )
    summary = (
        by_seed.groupby("width")
        .agg(
            init_kernel_gap=("init_kernel_gap", "median"),
            predictor_gap=("max_predictor_gap", "median"),
            scaled_drift=("max_scaled_drift", "median"),
            final_residual=("final_residual", "median"),
            n_seeds=("seed", "count"),
        )
        .reset_index()
    )
    files = [
        write_csv(summary, output_dir / FILES.gap_vs_width),
        write_csv(by_seed, output_dir / FILES.gap_vs_width_by_seed),
    ]
    _plot(params, output_dir, "gap_vs_width", np.log(summary["width"]), np.log(summary["predictor_gap"]), "log_m", "log_gap", files)
    print(summary.to_markdown(index=False))
    return {"widths": list(conf.widths), "files": [str(f) for f in files]}


def cmd_cv(params: ExperimentParams, output_dir: Path) -> dict:
    conf = params.cv
    dist, kernel, f_star, task, hold = _synthetic_data(conf, params.seed, "cv")
    M = conf.M
    if M is None:
        M = float(np.max(np.abs(np.concatenate([task.y, hold.y]))))
    pred = kfr.FlowPredictor.from_task(kernel, task)
    candidates = kfr.candidate_stopping_times(conf.n, conf.Q)
    selection = kfr.cv_select_stopping(pred, candidates, hold.X, hold.y, M)
    risks = selection.risks.copy()
    risks["l2_risk"] = [
        kfr.l2_risk(kfr.TruncatedPredictor(pred.at(t), M), f_star, dist, n_mc=conf.n_mc, seed=params.seed)
        for t in risks["t"]
    ]
    best = float(risks["l2_risk"].min())
    selected = float(risks.loc[risks["t"] == selection.t_cv, "l2_risk"].iloc[0])
    bound = kfr.cv_guarantee_bound(best, M, len(candidates), conf.n_holdout, conf.delta)
    result = {
        "t_cv": selection.t_cv,
        "M": M,
        "n_candidates": len(candidates),
        "selected_l2_risk": selected,
        "best_l2_risk": best,
        "bound": bound,
        "bound_holds": bool(selected <= bound),
    }
    files = [write_csv(risks, output_dir / FILES.cv_risks)]
    save_info_json(result, output_dir / FILES.cv_selection)
    files.append(output_dir / FILES.cv_selection)
    _plot(params, output_dir, "cv_risks", np.log2(risks["t"]), risks["holdout_risk"], "log2_t", "holdout_risk", files)
    print(risks.to_markdown(index=False))
    return {**result, "files": [str(f) for f in files]}


COMMANDS = {
    "edr": cmd_edr,
    "sphere-modes": cmd_sphere_modes,
    "flow": cmd_flow,
    "train": cmd_train,
    "compare": cmd_compare,
    "cv": cmd_cv,
}


# ==============================================================================
# // argument parsing
# ==============================================================================

def build_parser() -> argparse.ArgumentParser:
    # flags default to SUPPRESS so that only the given ones override the config file
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(
        description=__doc__,
        formatter_class=argparse.RawTextHelpFormatter,
    )
    parser.add_argument('-c', '--config', type=str, metavar='<file>', default=None, help='yaml config file')
    parser.add_argument('--output_dir', type=str, metavar='<dir>', default=S, help=f'output root (default: {env.NTK_OUTPUT_DIR})')
    parser.add_argument('--seed', type=int, metavar='<int>', default=S, help='root seed of all random streams')
    parser.add_argument('--n_workers', type=int, metavar='<int>', default=S, help='worker processes for the edr grid and the width sweep')
    parser.add_argument('--log_level', type=str, metavar='<str>', default=S, help='DEBUG, INFO, WARNING, ...')
    parser.add_argument('--plot-data', dest='plot_data', action='store_true', default=S, help='also write (x, y) pairs for plotting')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('edr', help='eigenvalue decay rates of the NTK over distribution × d × L')
    p.add_argument('--dist', dest='distributions', nargs='+', choices=list(spectral_estimator.DISTRIBUTIONS), default=S)
    p.add_argument('--d', dest='dims', nargs='+', type=int, metavar='<int>', default=S)
    p.add_argument('--L', dest='layers', nargs='+', type=int, metavar='<int>', default=S)
    p.add_argument('--n', type=int, metavar='<int>', default=S)
    p.add_argument('--window', nargs=2, type=int, metavar=('<lo>', '<hi>'), default=S)
    p.add_argument('--n_seeds', type=int, metavar='<int>', default=S)

    p = sub.add_parser('sphere-modes', help='Funk-Hecke modes of a dot-product kernel on the sphere')
    p.add_argument('--profile', choices=SPHERE_PROFILES, default=S)
    p.add_argument('--d', type=int, metavar='<int>', default=S)
    p.add_argument('--L', type=int, metavar='<int>', default=S)
    p.add_argument('--n_max', type=int, metavar='<int>', default=S)
    p.add_argument('--quad_order', type=int, metavar='<int>', default=S)
    p.add_argument('--rule', choices=sphere_harmonics.QUADRATURE_RULES, default=S)
    p.add_argument('--window', nargs=2, type=int, metavar=('<lo>', '<hi>'), default=S)

    p = sub.add_parser('flow', help='risk curve of the NTK gradient flow')
    p.add_argument('--dist', dest='distribution', choices=list(spectral_estimator.DISTRIBUTIONS), default=S)
    p.add_argument('--d', type=int, metavar='<int>', default=S)
    p.add_argument('--L', type=int, metavar='<int>', default=S)
    p.add_argument('--n', type=int, metavar='<int>', default=S)
    p.add_argument('--n_holdout', type=int, metavar='<int>', default=S)
    p.add_argument('--noise_sigma', type=float, metavar='<float>', default=S)
    p.add_argument('--s', type=float, metavar='<float>', default=S)
    p.add_argument('--c', type=float, metavar='<float>', default=S)
    p.add_argument('--times', nargs='+', type=float, metavar='<float>', default=S)
    p.add_argument('--n_mc', type=int, metavar='<int>', default=S)

    p = sub.add_parser('train', help='gradient descent on one mirrored network')
    p.add_argument('--d', type=int, metavar='<int>', default=S)
    p.add_argument('--L', type=int, metavar='<int>', default=S)
    p.add_argument('--width', type=int, metavar='<int>', default=S)
    p.add_argument('--n', type=int, metavar='<int>', default=S)
    p.add_argument('--noise_sigma', type=float, metavar='<float>', default=S)
    p.add_argument('--step_size', type=float, metavar='<float>', default=S)
    p.add_argument('--n_steps', type=int, metavar='<int>', default=S)
    p.add_argument('--log_every', type=int, metavar='<int>', default=S)

    p = sub.add_parser('compare', help='network vs NTK flow across widths')
    p.add_argument('--widths', nargs='+', type=int, metavar='<int>', default=S)
    p.add_argument('--n_seeds', type=int, metavar='<int>', default=S)
    p.add_argument('--d', type=int, metavar='<int>', default=S)
    p.add_argument('--L', type=int, metavar='<int>', default=S)
    p.add_argument('--n', type=int, metavar='<int>', default=S)
    p.add_argument('--n_steps', type=int, metavar='<int>', default=S)
    p.add_argument('--step_fraction', type=float, metavar='<float>', default=S)
    p.add_argument('--log_every', type=int, metavar='<int>', default=S)

    p = sub.add_parser('cv', help='cross-validated stopping time')
    p.add_argument('--dist', dest='distribution', choices=list(spectral_estimator.DISTRIBUTIONS), default=S)
    p.add_argument('--d', type=int, metavar='<int>', default=S)
    p.add_argument('--L', type=int, metavar='<int>', default=S)
    p.add_argument('--n', type=int, metavar='<int>', default=S)
    p.add_argument('--n_holdout', type=int, metavar='<int>', default=S)
    p.add_argument('--noise_sigma', type=float, metavar='<float>', default=S)
    p.add_argument('--Q', type=float, metavar='<float>', default=S)
    p.add_argument('--M', type=float, metavar='<float>', default=S)
    p.add_argument('--delta', type=float, metavar='<float>', default=S)
    p.add_argument('--n_mc', type=int, metavar='<int>', default=S)
    return parser


def _write_failure(output_dir: Path, command: str, err: Exception):
    failure = {"command": command, "error_type": type(err).__name__, "error": str(err)}
    if isinstance(err, TrainingDiverged):
        failure["diagnostics"] = err.diagnostics
    failure_file = output_dir / FILES.failures_dir / f"{SECTIONS[command]}_failure.json"
    save_info_json(failure, failure_file)
    return failure_file


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code is None else int(e.code)
    try:
        params = resolve_params(args)
    except (ValueError, TypeError) as e:
        print(f"invalid parameters: {e}", file=sys.stderr)
        return 2
    log = setup_logging(params.log_level)
    output_dir = env.output_folder(SECTIONS[args.command], params.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    save_config_yaml(asdict(params), output_dir / FILES.config_used)
    log.info("starting command", extra={"command": args.command, "output_dir": str(output_dir)})
    try:
        info = COMMANDS[args.command](params, output_dir)
    except NumericalFailure as e:
        failure_file = _write_failure(output_dir, args.command, e)
        log.error("numerical failure", extra={"error": str(e), "failure_file": str(failure_file)})
        return 1
    except ValueError as e:
        failure_file = _write_failure(output_dir, args.command, e)
        log.error("invalid request", extra={"error": str(e), "failure_file": str(failure_file)})
        return 2
    save_info_json({"command": args.command, **info}, output_dir / FILES.run_info)
    log.info("finished command", extra={"command": args.command, "run_info": str(output_dir / FILES.run_info)})
    return 0


if __name__ == "__main__":
    sys.exit(main())
