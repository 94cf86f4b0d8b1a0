"""Command-line front end: simulate, fit, select, eval-bic.

All randomness flows from the --seed flag (no wall-clock seeding), so any
command rerun with the same inputs produces byte-identical primary outputs.
Wall-clock timings go to a separate timing.json that is excluded from that
guarantee.  Configuration can come from a JSON file (--config); explicit
command-line flags override file values.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io as nio
from .likelihood import ISConfig, evaluate_bic, loglik_is, bic as bic_value, support_of
from .model import standardize_covariates
from .pso import PSOConfig, grid_search, pso_select
from .sapg import Penalty, SAPGConfig, sapg_run
from .simulate import default_scenario, simulate_dataset
from .structural import TwoCompartmentModel

logger = logging.getLogger(__name__)


class CliError(Exception):
    """User-facing configuration or validation problem (exit code 2)."""


def _load_config(path):
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise CliError(f"config {path} must hold a JSON object")
    return cfg


def _section(cfg, name):
    section = cfg.get(name, {})
    if not isinstance(section, dict):
        raise CliError(f"config section {name!r} must be an object")
    return dict(section)


def _build(cls, section, overrides, what):
    params = dict(section)
    params.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**params)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid {what} settings: {exc}") from exc


def _out_dir(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _thread_count(args):
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("NLME_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise CliError(f"NLME_THREADS={env!r} is not an integer") from exc
    return 1


def _load_data(args):
    if args.data is None:
        raise CliError("--data is required")
    try:
        dataset = nio.read_dataset(args.data, args.covariates)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot load data: {exc}") from exc
    if getattr(args, "standardize", False):
        dataset = standardize_covariates(dataset)
    return dataset


def _parse_mu0(value):
    if value is None:
        return None
    try:
        mu = [float(v) for v in value.split(",")]
    except ValueError as exc:
        raise CliError(f"--mu0 must be comma-separated numbers, got {value!r}") from exc
    if len(mu) != 4:
        raise CliError("--mu0 needs exactly 4 values (vc, vp, q, cl intercepts)")
    return np.array(mu)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(args, cfg):
    out = _out_dir(args)
    section = _section(cfg, "scenario")
    overrides = {
        "n_subjects": args.n_subjects,
        "n_covariates": args.n_covariates,
        "covariate_structure": args.structure,
        "seed": args.seed,
    }
    section.update({k: v for k, v in overrides.items() if v is not None})
    if "effects" in section and isinstance(section["effects"], list):
        section["effects"] = {(int(l), int(k)): float(v) for l, k, v in section["effects"]}
    try:
        scenario = default_scenario(**section)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid scenario: {exc}") from exc

    dataset, truth = simulate_dataset(scenario)
    nio.write_dataset_csv(out / "data.csv", dataset)
    nio.write_covariates_csv(out / "covariates.csv", dataset)
    nio.write_ground_truth_json(out / "truth.json", truth)
    n_rows = sum(s.n_obs for s in dataset.subjects)
    print(f"simulated {dataset.n_subjects} subjects, {n_rows} observations, "
          f"{dataset.n_covariates} covariates -> {out}")
    return 0


def _sapg_config(args, cfg):
    overrides = {
        "n_iterations": args.iterations,
        "step_mode": args.step_mode,
        "step_size": getattr(args, "step_size", None),
        "mcmc_period": getattr(args, "mcmc_period", None),
        "mcmc_sweeps": getattr(args, "mcmc_sweeps", None),
    }
    return _build(SAPGConfig, _section(cfg, "sapg"), overrides, "solver")


def _is_config(args, cfg, default_samples=None):
    section = _section(cfg, "is")
    overrides = {"n_samples": getattr(args, "is_samples", None)}
    if default_samples is not None and "n_samples" not in section and overrides["n_samples"] is None:
        overrides["n_samples"] = default_samples
    return _build(ISConfig, section, overrides, "importance-sampling")


def cmd_fit(args, cfg):
    out = _out_dir(args)
    dataset = _load_data(args)
    model = TwoCompartmentModel()
    sapg_cfg = _sapg_config(args, cfg)
    is_cfg = _is_config(args, cfg)
    fit_section = _section(cfg, "fit")
    lam_beta = args.lambda_beta if args.lambda_beta is not None else fit_section.get("lambda_beta")
    lam_gamma = args.lambda_gamma if args.lambda_gamma is not None else fit_section.get("lambda_gamma")
    if lam_beta is None or lam_gamma is None:
        raise CliError("--lambda-beta and --lambda-gamma are required (flag or config)")
    mu0 = _parse_mu0(args.mu0)

    t0 = time.perf_counter()
    result = sapg_run(
        dataset, model, Penalty(float(lam_beta), float(lam_gamma)), sapg_cfg,
        seed=args.seed, intercepts0=mu0, sigma0=args.sigma0,
    )
    t_fit = time.perf_counter() - t0

    t0 = time.perf_counter()
    report = evaluate_bic(
        result.theta, dataset, model, sapg_cfg, is_cfg,
        seed=np.random.SeedSequence(args.seed).spawn(2)[1],
        s_sa=result.s_sa, refit_iterations=args.refit_iterations,
    )
    t_score = time.perf_counter() - t0

    nio.write_theta_json(out / "theta.json", result.theta)
    nio.write_theta_json(out / "theta_refit.json", report.theta_refit)
    nio.write_trace_csv(out / "trace.csv", result.trace)
    nio.write_report_json(out / "bic.json", {
        "lambda_beta": float(lam_beta),
        "lambda_gamma": float(lam_gamma),
        "bic": report.bic,
        "loglik": report.loglik.value,
        "loglik_mc_se": report.loglik.mc_se,
        "is_samples": report.loglik.n_samples,
        "support": nio.support_to_dict(report.support),
    })
    nio.write_report_json(out / "timing.json", {
        "fit_seconds": t_fit, "score_seconds": t_score,
    })
    n_beta, n_gamma = report.support.counts()
    print(f"fit done: BIC={report.bic:.2f}, support {n_beta} covariate effects, "
          f"{n_gamma} correlations -> {out}")
    return 0


def _run_selection(args, cfg, dataset, model, mode, seed, map_fn):
    sapg_cfg = _sapg_config(args, cfg)
    is_cfg = _is_config(args, cfg, default_samples=1000)
    mu0 = _parse_mu0(args.mu0)
    lambda_max = tuple(args.lambda_max) if args.lambda_max else None

    if mode == "pso":
        overrides = {
            "n_particles": args.particles,
            "n_iterations": args.pso_iterations,
            "lambda_max": lambda_max,
        }
        pso_cfg = _build(PSOConfig, _section(cfg, "pso"), overrides, "swarm")
        result = pso_select(
            dataset, model, pso_cfg, sapg_cfg, is_config=is_cfg,
            warm_restart=not args.no_warm_restart,
            refit_iterations=args.refit_iterations,
            intercepts0=mu0, sigma0=args.sigma0, seed=seed, map_fn=map_fn,
        )
        return result.best_lambda, result.best_bic, result.best_theta, result.history
    if lambda_max is None:
        grid_section = _section(cfg, "grid")
        lambda_max = grid_section.get("lambda_max")
        if lambda_max is None:
            raise CliError("grid mode needs --lambda-max (or config grid.lambda_max)")
    nb, ng = args.grid_points
    axes = [np.linspace(lambda_max[0] / nb, lambda_max[0], nb),
            np.linspace(lambda_max[1] / ng, lambda_max[1], ng)]
    grid = [np.array([a, b]) for a in axes[0] for b in axes[1]]
    result = grid_search(
        dataset, model, grid, sapg_cfg, is_config=is_cfg,
        refit_iterations=args.refit_iterations,
        intercepts0=mu0, sigma0=args.sigma0, seed=seed, map_fn=map_fn,
    )
    return result.best_lambda, result.best_bic, result.best_theta, result.table


def cmd_select(args, cfg):
    out = _out_dir(args)
    dataset = _load_data(args)
    model = TwoCompartmentModel()
    threads = _thread_count(args)
    replicates = max(1, args.replicates)

    executor = None
    map_fn = None
    if threads > 1:
        executor = ProcessPoolExecutor(max_workers=threads)
        map_fn = executor.map
    try:
        runs = []
        seeds = np.random.SeedSequence(args.seed).spawn(replicates)
        for r in range(replicates):
            t0 = time.perf_counter()
            best_lambda, best_bic, best_theta, history = _run_selection(
                args, cfg, dataset, model, args.mode, seeds[r], map_fn,
            )
            runs.append({
                "best_lambda": best_lambda, "best_bic": best_bic,
                "best_theta": best_theta, "history": history,
                "seconds": time.perf_counter() - t0,
            })
    finally:
        if executor is not None:
            executor.shutdown()

    first = runs[0]
    table_name = "history.csv" if args.mode == "pso" else "table.csv"
    nio.write_history_csv(out / table_name, first["history"])
    if first["best_theta"] is not None:
        nio.write_theta_json(out / "theta_selected.json", first["best_theta"])
    nio.write_report_json(out / "report.json", {
        "mode": args.mode,
        "warm_restart": not args.no_warm_restart,
        "lambda_beta": float(first["best_lambda"][0]),
        "lambda_gamma": float(first["best_lambda"][1]),
        "bic": first["best_bic"],
        "evaluations": len(first["history"]),
    })

    times = [r["seconds"] for r in runs]
    bics = [r["best_bic"] for r in runs]
    timing = {"replicates": replicates, "threads": threads,
              "seconds": times[0], "bic": bics[0]}
    if replicates > 1:
        timing.update({
            "seconds_median": statistics.median(times),
            "seconds_iqr": _iqr(times),
            "bic_median": statistics.median(bics),
            "bic_iqr": _iqr(bics),
        })
    nio.write_report_json(out / "timing.json", timing)
    print(f"selection done ({args.mode}): lambda=({first['best_lambda'][0]:.4g}, "
          f"{first['best_lambda'][1]:.4g}), BIC={first['best_bic']:.2f}, "
          f"{len(first['history'])} evaluations -> {out}")
    return 0


def _iqr(values):
    q1, q3 = np.percentile(np.asarray(values, dtype=float), [25, 75])
    return [float(q1), float(q3)]


def cmd_eval_bic(args, cfg):
    out = _out_dir(args)
    dataset = _load_data(args)
    model = TwoCompartmentModel()
    theta = nio.read_theta_json(args.theta)
    is_cfg = _is_config(args, cfg)
    if args.refit:
        sapg_cfg = _sapg_config(args, cfg)
        report = evaluate_bic(theta, dataset, model, sapg_cfg, is_cfg, seed=args.seed)
        payload = {
            "bic": report.bic,
            "loglik": report.loglik.value,
            "loglik_mc_se": report.loglik.mc_se,
            "refit": True,
            "support": nio.support_to_dict(report.support),
        }
    else:
        est = loglik_is(theta, dataset, model, config=is_cfg, seed=args.seed)
        support = support_of(theta)
        payload = {
            "bic": bic_value(est.value, dataset, support),
            "loglik": est.value,
            "loglik_mc_se": est.mc_se,
            "refit": False,
            "support": nio.support_to_dict(support),
        }
    nio.write_report_json(out / "bic.json", payload)
    print(f"BIC = {payload['bic']:.2f} (loglik {payload['loglik']:.2f} "
          f"+/- {payload['loglik_mc_se']:.3f}) -> {out}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_common(p, seed_required):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--out-dir", default=".", help="output directory")
    p.add_argument("--seed", type=int, required=seed_required,
                   default=None if seed_required else 0,
                   help="root RNG seed (all randomness derives from it)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker processes (fallback: NLME_THREADS env var)")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_data_args(p):
    p.add_argument("--data", help="observations CSV (id,time,dv,amt_bolus,rate,t_inf)")
    p.add_argument("--covariates", help="covariates CSV (id,x1,...,xK)")
    p.add_argument("--standardize", action="store_true",
                   help="center/scale covariates before fitting")
    p.add_argument("--mu0", help="comma-separated starting intercepts (vc,vp,q,cl)")
    p.add_argument("--sigma0", type=float, default=None,
                   help="coarse starting residual sd (default: pooled sd of dv)")


def _add_solver_args(p):
    p.add_argument("--iterations", type=int, default=None, help="solver iterations per run")
    p.add_argument("--refit-iterations", type=int, default=None,
                   help="iterations of the unpenalized support refit")
    p.add_argument("--step-mode", choices=["css", "mss", "ass"], default=None)
    p.add_argument("--step-size", type=float, default=None)
    p.add_argument("--mcmc-period", type=int, default=None)
    p.add_argument("--mcmc-sweeps", type=int, default=None)
    p.add_argument("--is-samples", type=int, default=None,
                   help="importance-sampling draws per subject")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nlmeselect",
        description="Covariate/correlation selection for nonlinear mixed-effects models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset with known truth")
    _add_common(p, seed_required=False)
    p.add_argument("--n-subjects", type=int, default=None)
    p.add_argument("--n-covariates", type=int, default=None)
    p.add_argument("--structure", choices=["independent", "toeplitz"], default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="solve the penalized problem for one penalty value")
    _add_common(p, seed_required=True)
    _add_data_args(p)
    _add_solver_args(p)
    p.add_argument("--lambda-beta", type=float, default=None)
    p.add_argument("--lambda-gamma", type=float, default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="calibrate the penalties by swarm or grid search")
    _add_common(p, seed_required=True)
    _add_data_args(p)
    _add_solver_args(p)
    p.add_argument("--mode", choices=["pso", "grid"], default="pso")
    p.add_argument("--no-warm-restart", action="store_true",
                   help="restart every solver run from the shared initial point")
    p.add_argument("--particles", type=int, default=None)
    p.add_argument("--pso-iterations", type=int, default=None)
    p.add_argument("--lambda-max", type=float, nargs=2, default=None,
                   metavar=("BETA", "GAMMA"))
    p.add_argument("--grid-points", type=int, nargs=2, default=(5, 5),
                   metavar=("N_BETA", "N_GAMMA"))
    p.add_argument("--replicates", type=int, default=1,
                   help="repeat the selection with derived seeds; timing.json "
                        "reports median/IQR")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("eval-bic", help="score a saved parameter vector")
    _add_common(p, seed_required=True)
    _add_data_args(p)
    _add_solver_args(p)
    p.add_argument("--theta", required=True, help="theta JSON to score")
    p.add_argument("--refit", action="store_true",
                   help="refit the support without penalty before scoring")
    p.set_defaults(func=cmd_eval_bic)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _load_config(args.config)
        return args.func(args, cfg)
    except CliError as exc:
        json.dump({"error": {"type": "config", "message": str(exc)}}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    except Exception as exc:  # solver/runtime failures
        json.dump({"error": {"type": type(exc).__name__, "message": str(exc)}}, sys.stderr)
        sys.stderr.write("\n")
        logger.debug("traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
