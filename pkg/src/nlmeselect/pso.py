"""Calibration of the two penalty strengths by swarm search or grid search.

The selection criterion (BIC of the two-step refit) has no usable gradient
in the penalty parameters, so the search is zero-order.  A swarm of
candidate penalty points moves under inertia plus attraction toward each
particle's own best and the swarm-wide best; velocities are clamped to a
fifth of the search box per axis and positions to the box itself.

Warm restart threads each particle's fitted parameters and smoothed
statistics into its next solver call, and keeps the statistic-smoothing
schedule decreasing across calls, so short runs per evaluation still
converge over the course of the search.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .likelihood import ISConfig, evaluate_bic, support_of
from .mcmc import as_seedseq
from .model import PenaltyWeights, ThetaParams, as_stacked
from .sapg import Penalty, SAPGConfig, default_theta, sapg_run
from .structural import StructuralModel

__all__ = [
    "PSOConfig",
    "EvalRecord",
    "SwarmResult",
    "GridResult",
    "inertia_weight",
    "velocity_position_update",
    "warm_restart_delta_schedule",
    "latin_hypercube_positions",
    "estimate_lambda_max",
    "pso_minimize",
    "pso_select",
    "grid_search",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PSOConfig:
    """Swarm settings.

    ``lambda_max`` bounds the search box per axis (covariate penalty,
    correlation penalty); None triggers an automatic pilot estimate.  The
    velocity bound is always lambda_max / 5.  ``first_iter_extra`` adds
    solver iterations to every evaluation of the first swarm iteration so
    the warm-restart payloads start from converged states; it defaults to
    twice the per-evaluation iteration count.
    """

    n_particles: int = 25
    n_iterations: int = 10
    c1: float = 2.0
    c2: float = 2.0
    inertia_start: float = 0.9
    inertia_end: float = 0.4
    lambda_max: Optional[tuple] = None
    first_iter_extra: Optional[int] = None

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("need at least one particle")
        if self.n_iterations < 1:
            raise ValueError("need at least one iteration")
        if self.lambda_max is not None:
            lm = np.asarray(self.lambda_max, dtype=float)
            if lm.shape != (2,) or np.any(lm <= 0):
                raise ValueError(f"lambda_max must be two positive bounds, got {self.lambda_max}")

    def velocity_max(self, lambda_max) -> np.ndarray:
        return np.asarray(lambda_max, dtype=float) / 5.0


@dataclass(frozen=True)
class EvalRecord:
    iteration: int
    particle: int
    lam_beta: float
    lam_gamma: float
    bic: float


@dataclass
class SwarmResult:
    best_lambda: np.ndarray
    best_bic: float
    best_theta: Optional[ThetaParams]
    history: list                      # EvalRecord per evaluation
    lambda_max: np.ndarray

    @property
    def n_evaluations(self) -> int:
        return len(self.history)


@dataclass
class GridResult:
    best_lambda: np.ndarray
    best_bic: float
    best_theta: Optional[ThetaParams]
    table: list                        # EvalRecord per grid point


def inertia_weight(iteration: int, n_iterations: int, u: float,
                   start: float = 0.9, end: float = 0.4) -> float:
    """Chaotically perturbed, linearly descending inertia weight."""
    if not (0 <= iteration <= n_iterations):
        raise ValueError(f"iteration {iteration} outside [0, {n_iterations}]")
    if not (0.0 <= u <= 1.0):
        raise ValueError(f"u must lie in [0, 1], got {u}")
    frac = (n_iterations - iteration) / n_iterations
    return (start - end) * frac + end * 4.0 * u * (1.0 - u)


def velocity_position_update(position, velocity, best_own, best_global,
                             omega, r1, r2, c1, c2, velocity_bound, position_bound):
    """One swarm move: inertia + attraction terms, then clamp speed and box.

    r1 and r2 scale the two attraction terms componentwise (Hadamard),
    velocities are clamped to [-velocity_bound, velocity_bound] per axis,
    positions to [0, position_bound] per axis.
    """
    position = np.asarray(position, dtype=float)
    velocity = np.asarray(velocity, dtype=float)
    r1 = np.asarray(r1, dtype=float)
    r2 = np.asarray(r2, dtype=float)
    new_v = (
        omega * velocity
        + c1 * (np.asarray(best_own, float) - position) * r1
        + c2 * (np.asarray(best_global, float) - position) * r2
    )
    bound = np.asarray(velocity_bound, dtype=float)
    new_v = np.clip(new_v, -bound, bound)
    new_p = np.clip(position + new_v, 0.0, np.asarray(position_bound, dtype=float))
    return new_p, new_v


def warm_restart_delta_schedule(pso_iteration: int, config: SAPGConfig,
                                n_updates: Optional[int] = None) -> np.ndarray:
    """Smoothing weights used by the solver runs of one swarm iteration.

    Update u of iteration l gets weight sa_step_init * (U*(l-1) + u)^(-sa_decay)
    with U = n_iterations/mcmc_period updates per run, so the concatenated
    schedule over iterations is one globally decreasing sequence.
    """
    if pso_iteration < 1:
        raise ValueError("pso_iteration must be >= 1")
    per_run = config.n_iterations // config.mcmc_period
    if n_updates is None:
        n_updates = per_run
    offset = per_run * (pso_iteration - 1)
    idx = offset + np.arange(1, n_updates + 1)
    return config.sa_step_init * idx.astype(float) ** (-config.sa_decay)


def latin_hypercube_positions(rng, n: int, lambda_max, low_factor: float = 1e-3) -> np.ndarray:
    """Log-uniform Latin hypercube over [low_factor * lambda_max, lambda_max]^2."""
    lm = np.asarray(lambda_max, dtype=float)
    out = np.empty((n, 2))
    for axis in range(2):
        lo, hi = math.log(low_factor * lm[axis]), math.log(lm[axis])
        strata = (rng.permutation(n) + rng.random(n)) / n
        out[:, axis] = np.exp(lo + strata * (hi - lo))
    return out


def estimate_lambda_max(
    data,
    model: StructuralModel,
    sapg_config: SAPGConfig,
    weights: Optional[PenaltyWeights] = None,
    theta0: Optional[ThetaParams] = None,
    seed=0,
    pilot_iterations: int = 400,
    initial: float = 1.0,
    max_doublings: int = 40,
) -> np.ndarray:
    """Smallest per-axis penalty that empties its block in a pilot run, x1.2.

    Doubles each axis independently until the corresponding block of the
    pilot solution is all zero, then adds 20% headroom.
    """
    stacked = as_stacked(data)
    cfg = replace(sapg_config, n_iterations=pilot_iterations)
    lam = np.array([initial, initial], dtype=float)
    ss = as_seedseq(seed)
    has_corr = model.n_latent > 1
    for child in ss.spawn(max_doublings):
        fit = sapg_run(
            stacked, model, Penalty(lam[0], lam[1]), cfg,
            weights=weights, theta0=theta0, seed=child,
        )
        n_beta, n_gamma = support_of(fit.theta).counts()
        if n_beta == 0 and (not has_corr or n_gamma == 0):
            return lam * 1.2
        if n_beta > 0:
            lam[0] *= 2.0
        if has_corr and n_gamma > 0:
            lam[1] *= 2.0
    logger.warning("lambda_max search hit the doubling cap; using %s", lam)
    return lam * 1.2


def pso_minimize(
    evaluate: Callable,
    config: PSOConfig,
    lambda_max,
    init_positions=None,
    seed=0,
) -> SwarmResult:
    """Generic swarm loop over the penalty box.

    ``evaluate(iteration, positions, payloads)`` scores a full iteration:
    it receives the (M, 2) positions and the per-particle payloads from the
    previous evaluation (None initially) and returns a list of
    ``(bic, payload, theta_or_None)`` triples in particle order.  Failed
    evaluations should come back as (inf, old_payload, None).

    Personal and global bests only move on strict improvement, so ties keep
    the earliest (lowest particle index) winner and the result does not
    depend on evaluation scheduling.
    """
    lm = np.asarray(lambda_max, dtype=float)
    if lm.shape != (2,) or np.any(lm <= 0):
        raise ValueError(f"lambda_max must be two positive bounds, got {lambda_max}")
    v_max = config.velocity_max(lm)
    rng = np.random.default_rng(as_seedseq(seed))

    m = config.n_particles
    if init_positions is None:
        positions = latin_hypercube_positions(rng, m, lm)
    else:
        positions = np.array(init_positions, dtype=float).reshape(m, 2)
        if np.any(positions < 0) or np.any(positions > lm):
            raise ValueError("initial positions must lie inside [0, lambda_max]^2")
    velocities = np.zeros((m, 2))
    payloads = [None] * m

    best_own = positions.copy()
    best_own_bic = np.full(m, np.inf)
    best_global = positions[0].copy()
    best_global_bic = np.inf
    best_theta = None
    history = []

    for iteration in range(1, config.n_iterations + 1):
        results = evaluate(iteration, positions.copy(), payloads)
        for i, (bic_value, payload, theta) in enumerate(results):
            payloads[i] = payload
            history.append(EvalRecord(
                iteration=iteration, particle=i,
                lam_beta=float(positions[i, 0]), lam_gamma=float(positions[i, 1]),
                bic=float(bic_value),
            ))
            if bic_value < best_own_bic[i]:
                best_own_bic[i] = bic_value
                best_own[i] = positions[i]
            if bic_value < best_global_bic:
                best_global_bic = bic_value
                best_global = positions[i].copy()
                best_theta = theta

        u = rng.random()
        omega = inertia_weight(iteration, config.n_iterations, u,
                               config.inertia_start, config.inertia_end)
        for i in range(m):
            r1 = rng.random(2)
            r2 = rng.random(2)
            positions[i], velocities[i] = velocity_position_update(
                positions[i], velocities[i], best_own[i], best_global,
                omega, r1, r2, config.c1, config.c2, v_max, lm,
            )

    return SwarmResult(
        best_lambda=best_global, best_bic=float(best_global_bic),
        best_theta=best_theta, history=history, lambda_max=lm,
    )


def _fit_and_score(data, model, lam, weights, fit_config, refit_config, is_config,
                   theta0, s_sa0, sa_offset, seed):
    """One penalty evaluation: solve, refit the support, estimate BIC."""
    ss = as_seedseq(seed)
    fit_seed, score_seed = ss.spawn(2)
    fit = sapg_run(
        data, model, Penalty.from_array(lam), fit_config,
        weights=weights, theta0=theta0, s_sa0=s_sa0,
        seed=fit_seed, sa_offset=sa_offset,
    )
    report = evaluate_bic(
        fit.theta, data, model, refit_config, is_config,
        seed=score_seed, s_sa=fit.s_sa,
    )
    return fit, report


def _particle_task(args):
    """Module-level task wrapper so iteration batches can run in worker pools."""
    (data, model, lam, weights, fit_config, refit_config, is_config,
     theta0, s_sa0, sa_offset, seed) = args
    try:
        fit, report = _fit_and_score(
            data, model, lam, weights, fit_config, refit_config, is_config,
            theta0, s_sa0, sa_offset, seed,
        )
    except Exception as exc:  # failed evaluations score +inf, search continues
        logger.warning("penalty evaluation at %s failed: %s", lam, exc)
        return math.inf, None, None
    payload = (fit.theta, fit.s_sa, sa_offset + fit.n_updates)
    return report.bic, payload, report.theta_refit


def pso_select(
    data,
    model: StructuralModel,
    pso_config: PSOConfig,
    sapg_config: SAPGConfig,
    is_config: ISConfig = ISConfig(n_samples=1000),
    weights: Optional[PenaltyWeights] = None,
    init_positions=None,
    warm_restart: bool = True,
    refit_iterations: Optional[int] = None,
    theta0: Optional[ThetaParams] = None,
    intercepts0=None,
    sigma0=None,
    seed=0,
    map_fn=None,
    progress: Optional[Callable] = None,
) -> SwarmResult:
    """Swarm-calibrated penalty selection over the full fit/refit/BIC pipeline.

    With ``warm_restart`` each particle's solver call continues from its own
    previous parameters and smoothed statistics; without it every call starts
    cold from the shared starting point (``theta0`` or the default built from
    ``intercepts0``/``sigma0``).  ``map_fn`` (signature of ``map``) lets
    callers spread the per-iteration particle evaluations over a worker pool;
    results are reduced in particle order either way.
    """
    stacked = as_stacked(data)
    ss = as_seedseq(seed)
    ss_search, ss_lmax, ss_evals = ss.spawn(3)

    if theta0 is None:
        theta0 = default_theta(stacked, intercepts=intercepts0,
                               n_latent=model.n_latent, sigma0=sigma0)
    if pso_config.lambda_max is not None:
        lambda_max = np.asarray(pso_config.lambda_max, dtype=float)
    else:
        lambda_max = estimate_lambda_max(
            stacked, model, sapg_config, weights=weights, seed=ss_lmax, theta0=theta0,
        )

    extra = pso_config.first_iter_extra
    if extra is None:
        extra = 2 * sapg_config.n_iterations
    refit_cfg = sapg_config if refit_iterations is None else replace(
        sapg_config, n_iterations=refit_iterations)

    eval_seeds = ss_evals.spawn(pso_config.n_iterations * pso_config.n_particles)
    run_map = map if map_fn is None else map_fn

    def evaluate(iteration, positions, payloads):
        cfg = sapg_config
        if iteration == 1:
            cfg = replace(sapg_config, n_iterations=sapg_config.n_iterations + extra)
        tasks = []
        for i in range(pso_config.n_particles):
            start_theta, s_sa0, sa_offset = theta0, None, 0
            if warm_restart and payloads[i] is not None:
                start_theta, s_sa0, sa_offset = payloads[i]
            tasks.append((
                stacked, model, positions[i], weights, cfg, refit_cfg, is_config,
                start_theta, s_sa0, sa_offset,
                eval_seeds[(iteration - 1) * pso_config.n_particles + i],
            ))
        results = list(run_map(_particle_task, tasks))
        if progress is not None:
            for i, (bic_value, _, _) in enumerate(results):
                progress(iteration, i, positions[i], bic_value)
        if not warm_restart:
            results = [(b, None, t) for (b, _, t) in results]
        return results

    return pso_minimize(evaluate, pso_config, lambda_max,
                        init_positions=init_positions, seed=ss_search)


def grid_search(
    data,
    model: StructuralModel,
    grid,
    sapg_config: SAPGConfig,
    is_config: ISConfig = ISConfig(n_samples=1000),
    weights: Optional[PenaltyWeights] = None,
    refit_iterations: Optional[int] = None,
    theta0: Optional[ThetaParams] = None,
    intercepts0=None,
    sigma0=None,
    seed=0,
    map_fn=None,
) -> GridResult:
    """Independent solver runs from one starting point over a fixed grid.

    Every grid point is fit cold, refit on its support and scored; failures
    are recorded with BIC = inf and excluded from the argmin.
    """
    grid = [np.asarray(g, dtype=float).reshape(2) for g in grid]
    if not grid:
        raise ValueError("grid must be nonempty")
    stacked = as_stacked(data)
    if theta0 is None:
        theta0 = default_theta(stacked, intercepts=intercepts0,
                               n_latent=model.n_latent, sigma0=sigma0)
    refit_cfg = sapg_config if refit_iterations is None else replace(
        sapg_config, n_iterations=refit_iterations)
    seeds = as_seedseq(seed).spawn(len(grid))
    tasks = [
        (stacked, model, lam, weights, sapg_config, refit_cfg, is_config,
         theta0, None, 0, seeds[i])
        for i, lam in enumerate(grid)
    ]
    run_map = map if map_fn is None else map_fn
    results = list(run_map(_particle_task, tasks))

    table = []
    best_idx = -1
    best_bic = np.inf
    best_theta = None
    for i, (bic_value, _, theta) in enumerate(results):
        table.append(EvalRecord(
            iteration=0, particle=i,
            lam_beta=float(grid[i][0]), lam_gamma=float(grid[i][1]),
            bic=float(bic_value),
        ))
        if bic_value < best_bic:
            best_bic = bic_value
            best_idx = i
            best_theta = theta
    if best_idx < 0:
        raise RuntimeError("every grid evaluation failed")
    return GridResult(
        best_lambda=grid[best_idx].copy(), best_bic=float(best_bic),
        best_theta=best_theta, table=table,
    )
