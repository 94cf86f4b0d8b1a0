"""Marginal-likelihood estimation, BIC, and the unpenalized support refit.

The marginal log likelihood has no closed form; it is estimated per subject
by importance sampling with a Gaussian proposal whose moments come from a
short Metropolis run under the parameters being scored.  Model comparison
uses BIC = -2 * loglik + log(N) * support size, where the support counts the
selected covariate coefficients and correlation entries (intercepts are in
every candidate model and are left out of the count, a constant offset that
cannot change which model wins).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from dataclasses import replace as _dc_replace

from .mcmc import as_seedseq, init_chain, mh_sweep
from .model import LOG_2PI, Dataset, ThetaParams, as_stacked, latent_to_natural
from .sapg import Penalty, SAPGConfig, SAPGResult, sapg_run
from .structural import StructuralModel

__all__ = [
    "SupportMask",
    "LogLikEstimate",
    "ISConfig",
    "support_of",
    "loglik_is",
    "bic",
    "refit_support",
    "BICReport",
    "evaluate_bic",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SupportMask:
    """Boolean masks of the retained coordinates.

    ``beta`` covers the full fixed-effect vector (intercepts always True);
    ``gamma`` covers the strictly-lower correlation entries, row-major.
    """

    n_latent: int
    beta: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=bool)
        gamma = np.asarray(self.gamma, dtype=bool)
        if beta.size % self.n_latent != 0:
            raise ValueError(f"beta mask length {beta.size} not a multiple of {self.n_latent}")
        stride = beta.size // self.n_latent
        if not np.all(beta[np.arange(self.n_latent) * stride]):
            raise ValueError("intercept positions must always be in the support")
        if gamma.size != self.n_latent * (self.n_latent - 1) // 2:
            raise ValueError("gamma mask has the wrong length")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "gamma", gamma)

    @classmethod
    def full(cls, n_latent: int, n_covariates: int) -> "SupportMask":
        return cls(
            n_latent=n_latent,
            beta=np.ones((n_covariates + 1) * n_latent, dtype=bool),
            gamma=np.ones(n_latent * (n_latent - 1) // 2, dtype=bool),
        )

    def counts(self):
        """(selected covariate coefficients, selected correlations)."""
        stride = self.beta.size // self.n_latent
        mask = self.beta.reshape(self.n_latent, stride)
        return int(mask[:, 1:].sum()), int(self.gamma.sum())

    @property
    def size(self) -> int:
        return sum(self.counts())


def support_of(theta: ThetaParams) -> SupportMask:
    """Support read off the exact zeros of a fitted parameter vector."""
    beta = theta.beta != 0.0
    beta[theta.intercept_positions()] = True
    return SupportMask(n_latent=theta.n_latent, beta=beta, gamma=theta.gamma_strict() != 0.0)


@dataclass(frozen=True)
class LogLikEstimate:
    value: float
    mc_se: float
    n_samples: int


@dataclass(frozen=True)
class ISConfig:
    """Importance-sampling settings.

    The proposal for each subject is Gaussian with the mean and covariance of
    a short conditional Metropolis run, covariance inflated by ``inflation``
    and floored at ``variance_floor * I``.
    """

    n_samples: int = 5000
    moment_sweeps: int = 500
    burn_sweeps: int = 200
    inflation: float = 1.5
    variance_floor: float = 1e-8

    def __post_init__(self):
        if self.n_samples < 100:
            raise ValueError(f"n_samples must be >= 100, got {self.n_samples}")
        if self.moment_sweeps < 1 or self.burn_sweeps < 0:
            raise ValueError("invalid sweep counts")
        if self.inflation < 1.0 or self.variance_floor <= 0:
            raise ValueError("inflation must be >= 1 and variance_floor positive")


def _proposal_moments(theta, stacked, model, config, seed):
    chain = init_chain(stacked, theta, seed)
    if config.burn_sweeps:
        mh_sweep(chain, theta, stacked, model, config.burn_sweeps, adapt=True)
    _, mom = mh_sweep(chain, theta, stacked, model, config.moment_sweeps, adapt=False)
    mean = mom.s1
    cov = mom.s2 - mean[:, :, None] * mean[:, None, :]
    n_latent = mean.shape[1]
    cov = config.inflation * cov + config.variance_floor * np.eye(n_latent)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        logger.warning("degenerate proposal covariance; falling back to diagonal")
        diag = np.maximum(np.diagonal(cov, axis1=1, axis2=2), config.variance_floor)
        cov = diag[:, :, None] * np.eye(n_latent)
        chol = np.sqrt(diag)[:, :, None] * np.eye(n_latent)
    return mean, cov, chol


def loglik_is(
    theta: ThetaParams,
    data,
    model: StructuralModel,
    config: ISConfig = ISConfig(),
    seed=0,
) -> LogLikEstimate:
    """Importance-sampling estimate of the marginal log likelihood.

    Per subject, M draws from the moment-matched Gaussian proposal are
    reweighted by p(y, eta)/q(eta); the log of the weight average is
    accumulated with log-sum-exp stabilization and a delta-method standard
    error of the log is propagated across subjects.
    """
    stacked = as_stacked(data)
    ss = as_seedseq(seed)
    chain_seed, draw_seed = ss.spawn(2)
    prop_mean, prop_cov, prop_chol = _proposal_moments(theta, stacked, model, config, chain_seed)

    n = stacked.n_subjects
    n_latent = theta.n_latent
    m = config.n_samples

    draws = np.empty((n, m, n_latent))
    for i, child in enumerate(draw_seed.spawn(n)):
        rng = np.random.default_rng(child)
        draws[i] = rng.standard_normal((m, n_latent))
    eta = prop_mean[:, None, :] + np.einsum("nlk,nmk->nml", prop_chol, draws)

    # log p(y | eta): masked residual sums against the structural model
    z = latent_to_natural(eta, model.transform)
    pred = model.predict(stacked.times[:, None, :], z[:, :, None, :], stacked.dosing_cols(2))
    with np.errstate(invalid="ignore"):
        sq = np.where(stacked.obs_mask[:, None, :], (stacked.obs[:, None, :] - pred) ** 2, 0.0)
        s3 = sq.sum(axis=2)
    s3 = np.where(np.isfinite(s3), s3, np.inf)
    n_obs = stacked.n_obs[:, None]
    log_cond = -0.5 * n_obs * LOG_2PI - n_obs * math.log(theta.sigma) - 0.5 * s3 / theta.sigma**2

    # log prior N(eta; X beta, Omega)
    omega_inv = np.linalg.inv(theta.omega())
    logdet_omega = 2.0 * float(np.sum(np.log(theta.delta)))
    resid = eta - stacked.latent_means(theta)[:, None, :]
    quad = np.einsum("nml,lk,nmk->nm", resid, omega_inv, resid)
    log_prior = -0.5 * (n_latent * LOG_2PI + logdet_omega + quad)

    # log proposal
    sign, logdet_cov = np.linalg.slogdet(prop_cov)
    if np.any(sign <= 0):
        raise ValueError("proposal covariance lost positive definiteness")
    quad_q = np.einsum("nml,nml->nm", draws, draws)
    log_q = -0.5 * (n_latent * LOG_2PI + logdet_cov[:, None] + quad_q)

    logw = log_cond + log_prior - log_q
    peak = logw.max(axis=1)
    if not np.all(np.isfinite(peak)):
        bad = [stacked.subject_ids[i] for i in np.nonzero(~np.isfinite(peak))[0]]
        raise ValueError(f"all importance weights vanished for subject(s) {bad}")
    w = np.exp(logw - peak[:, None])
    w_mean = w.mean(axis=1)
    values = peak + np.log(w_mean)
    se = w.std(axis=1, ddof=1) / (w_mean * math.sqrt(m))
    return LogLikEstimate(
        value=float(values.sum()),
        mc_se=float(np.sqrt(np.sum(se**2))),
        n_samples=m,
    )


def bic(loglik: float, data, support: SupportMask) -> float:
    """-2 * loglik + log(N) * support size (covariates + correlations)."""
    if isinstance(data, (int, np.integer)):
        n = int(data)
    elif isinstance(data, Dataset):
        n = data.n_subjects
    else:
        n = as_stacked(data).n_subjects
    if n < 1:
        raise ValueError("need at least one subject")
    return -2.0 * loglik + math.log(n) * support.size


def refit_support(
    theta_hat: ThetaParams,
    data,
    model: StructuralModel,
    config: SAPGConfig,
    seed=0,
    s_sa=None,
    n_iterations: Optional[int] = None,
) -> SAPGResult:
    """Unpenalized re-estimation on the support of ``theta_hat``.

    Removes the shrinkage bias of the penalty: coordinates outside the
    support stay frozen at exactly zero, everything else is refit with the
    penalty turned off, warm-started from ``theta_hat``.
    """
    support = support_of(theta_hat)
    cfg = config if n_iterations is None else _dc_replace(config, n_iterations=n_iterations)
    return sapg_run(
        data, model, Penalty(0.0, 0.0), cfg,
        theta0=theta_hat, s_sa0=s_sa, seed=seed, support=support,
    )


@dataclass(frozen=True)
class BICReport:
    bic: float
    loglik: LogLikEstimate
    support: SupportMask
    theta_refit: ThetaParams


def evaluate_bic(
    theta_hat: ThetaParams,
    data,
    model: StructuralModel,
    sapg_config: SAPGConfig,
    is_config: ISConfig,
    seed=0,
    s_sa=None,
    refit_iterations: Optional[int] = None,
) -> BICReport:
    """Two-step BIC of a penalized estimate: refit on its support, then score."""
    ss = as_seedseq(seed)
    refit_seed, is_seed = ss.spawn(2)
    refit = refit_support(
        theta_hat, data, model, sapg_config,
        seed=refit_seed, s_sa=s_sa, n_iterations=refit_iterations,
    )
    est = loglik_is(refit.theta, data, model, config=is_config, seed=is_seed)
    support = support_of(theta_hat)
    return BICReport(
        bic=bic(est.value, data, support),
        loglik=est,
        support=support,
        theta_refit=refit.theta,
    )
