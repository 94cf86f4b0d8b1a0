"""Componentwise random-walk Metropolis sampling of the latent parameters.

Each subject carries an independent chain on the Gaussian scale
eta_i = h(z_i) targeting the conditional distribution p(z_i | y_i; theta).
One "sweep" proposes an update of every coordinate in turn; all subjects are
advanced simultaneously with vectorized likelihood evaluations.  Per-subject
random streams make the results independent of subject evaluation order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .model import StackedData, ThetaParams, as_stacked, latent_to_natural, natural_to_latent
from .structural import StructuralModel

__all__ = ["SuffStats", "ChainState", "init_chain", "mh_sweep", "suffstats_from_sample", "as_seedseq"]

logger = logging.getLogger(__name__)


def as_seedseq(seed) -> np.random.SeedSequence:
    """Accept an int, None, or an existing SeedSequence."""
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


@dataclass
class SuffStats:
    """Per-subject sufficient statistics, stacked over subjects.

    s1[i] is h(z_i) (length L), s2[i] its outer product accumulated the same
    way (L x L), s3[i] the residual sum of squares.  Monte Carlo averages and
    their stochastic-approximation smoothing both live in this container.
    """

    s1: np.ndarray  # (N, L)
    s2: np.ndarray  # (N, L, L)
    s3: np.ndarray  # (N,)

    def copy(self) -> "SuffStats":
        return SuffStats(self.s1.copy(), self.s2.copy(), self.s3.copy())

    @classmethod
    def zeros(cls, n_subjects: int, n_latent: int) -> "SuffStats":
        return cls(
            np.zeros((n_subjects, n_latent)),
            np.zeros((n_subjects, n_latent, n_latent)),
            np.zeros(n_subjects),
        )


@dataclass
class ChainState:
    """Mutable state of the per-subject Metropolis chains."""

    eta: np.ndarray            # (N, L) current latent values, Gaussian scale
    proposal_sd: np.ndarray    # (N, L)
    accept_counts: np.ndarray  # (N, L) int
    propose_counts: np.ndarray # (N, L) int
    rngs: list                 # one Generator per subject

    def acceptance_rates(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return self.accept_counts / np.maximum(self.propose_counts, 1)


def init_chain(data, theta: ThetaParams, seed) -> ChainState:
    """Fresh chains started at the prior mean X_i beta.

    Initial proposal scales are half the prior standard deviations, a
    reasonable starting point for the acceptance-rate adaptation.
    """
    stacked = as_stacked(data)
    n = stacked.n_subjects
    eta = stacked.latent_means(theta)
    prior_sd = np.sqrt(np.diagonal(theta.omega()))
    proposal_sd = np.tile(0.5 * prior_sd, (n, 1))
    streams = as_seedseq(seed).spawn(n)
    return ChainState(
        eta=eta.copy(),
        proposal_sd=proposal_sd,
        accept_counts=np.zeros_like(eta, dtype=int),
        propose_counts=np.zeros_like(eta, dtype=int),
        rngs=[np.random.default_rng(s) for s in streams],
    )


def suffstats_from_sample(z, subject, model: StructuralModel):
    """Sufficient statistics of a single latent draw for one subject.

    Returns (s1, s2, s3) = (h(z), h(z) h(z)', sum of squared residuals).
    """
    z = np.asarray(z, dtype=float)
    s1 = natural_to_latent(z, model.transform)
    pred = np.asarray(model.predict(subject.times, z, subject.dosing), dtype=float)
    if not np.all(np.isfinite(pred)):
        bad = subject.times[~np.isfinite(pred)]
        raise ValueError(
            f"non-finite prediction for subject {subject.subject_id} at t={bad[0]:g}"
        )
    resid = subject.observations - pred
    return s1, np.outer(s1, s1), float(resid @ resid)


def _residual_ss(stacked: StackedData, model: StructuralModel, eta: np.ndarray) -> np.ndarray:
    """Masked residual sum of squares per subject; non-finite rows become +inf."""
    z = latent_to_natural(eta, model.transform)
    pred = model.predict(stacked.times, z[:, None, :], stacked.dosing_cols(1))
    with np.errstate(invalid="ignore"):
        sq = np.where(stacked.obs_mask, (stacked.obs - pred) ** 2, 0.0)
        s3 = sq.sum(axis=1)
    return np.where(np.isfinite(s3), s3, np.inf)


def mh_sweep(
    state: ChainState,
    theta: ThetaParams,
    data,
    model: StructuralModel,
    n_sweeps: int,
    adapt: bool = False,
    kappa: float = 0.05,
    target_accept: float = 0.4,
):
    """Advance all chains by ``n_sweeps`` full sweeps and average the statistics.

    Returns ``(state, means)`` where ``means`` holds the Monte Carlo averages
    of (s1, s2, s3) over the visited states, one entry per sweep.  ``state``
    is updated in place (and returned for convenience); chains continue from
    wherever the previous call left them.

    With ``adapt`` on, each proposal scale is multiplied by
    exp(kappa * (accepted - target_accept)) after its sweep, which
    equilibrates the per-coordinate acceptance rate at ``target_accept``.
    """
    if n_sweeps < 1:
        raise ValueError(f"n_sweeps must be >= 1, got {n_sweeps}")
    stacked = as_stacked(data)
    n, n_latent = state.eta.shape

    omega_inv = np.linalg.inv(theta.omega())
    means = stacked.latent_means(theta)
    inv_two_sigma2 = 0.5 / theta.sigma**2

    # One batch of randomness per subject stream keeps results identical no
    # matter how subjects are laid out or scheduled.
    normals = np.empty((n, n_sweeps, n_latent))
    unifs = np.empty((n, n_sweeps, n_latent))
    for i, rng in enumerate(state.rngs):
        normals[i] = rng.standard_normal((n_sweeps, n_latent))
        unifs[i] = rng.random((n_sweeps, n_latent))

    eta = state.eta
    s3_cur = _residual_ss(stacked, model, eta)
    resid = eta - means
    quad_cur = np.einsum("nl,lk,nk->n", resid, omega_inv, resid)
    logp_cur = -s3_cur * inv_two_sigma2 - 0.5 * quad_cur

    acc_s1 = np.zeros((n, n_latent))
    acc_s2 = np.zeros((n, n_latent, n_latent))
    acc_s3 = np.zeros(n)
    n_failures = 0

    for m in range(n_sweeps):
        accepted_sweep = np.zeros((n, n_latent))
        for l in range(n_latent):
            eta_prop = eta.copy()
            eta_prop[:, l] = eta[:, l] + state.proposal_sd[:, l] * normals[:, m, l]
            s3_prop = _residual_ss(stacked, model, eta_prop)
            n_failures += int(np.sum(np.isinf(s3_prop)))
            resid = eta_prop - means
            quad_prop = np.einsum("nl,lk,nk->n", resid, omega_inv, resid)
            logp_prop = -s3_prop * inv_two_sigma2 - 0.5 * quad_prop

            with np.errstate(divide="ignore", invalid="ignore"):
                accept = np.log(unifs[:, m, l]) < (logp_prop - logp_cur)
            accept &= np.isfinite(logp_prop)

            eta[:, l] = np.where(accept, eta_prop[:, l], eta[:, l])
            s3_cur = np.where(accept, s3_prop, s3_cur)
            logp_cur = np.where(accept, logp_prop, logp_cur)
            accepted_sweep[:, l] = accept
            state.accept_counts[:, l] += accept
            state.propose_counts[:, l] += 1

        acc_s1 += eta
        acc_s2 += eta[:, :, None] * eta[:, None, :]
        acc_s3 += s3_cur
        if adapt:
            state.proposal_sd *= np.exp(kappa * (accepted_sweep - target_accept))

    if n_failures:
        logger.warning(
            "%d structural-model failures over %d sweeps; proposals rejected",
            n_failures, n_sweeps,
        )

    means_out = SuffStats(acc_s1 / n_sweeps, acc_s2 / n_sweeps, acc_s3 / n_sweeps)
    return state, means_out
