"""Core data model: subjects, parameter vectors, design algebra, likelihoods.

Model structure
---------------
Observations for subject i follow ``y_ij = f(t_ij, z_i) + e_ij`` with iid
Gaussian noise ``e_ij ~ N(0, sigma^2)``.  The latent parameter vector obeys
``h(z_i) ~ N(X_i beta, Omega)`` where h is the componentwise log (or the
identity, per the structural model's ``transform``).  The subject design
matrix X_i is block diagonal with one row block ``(1, x_i^1, ..., x_i^K)``
per latent coordinate; it is never materialized in hot paths, only its
matrix-vector products are.

Parameter conventions
---------------------
* ``beta`` has length (K+1)*L in latent-major order: for each latent
  coordinate, first its intercept, then the K covariate coefficients.
* ``Omega = D G G' D`` where D = diag(delta) has positive entries and G
  (``gamma``) is lower triangular with unit diagonal.  ``gamma`` is stored
  as the full L x L matrix; the strictly-lower entries, read row by row,
  are the free correlation parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .structural import DosingRegimen, StructuralModel

__all__ = [
    "LOG_2PI",
    "ModelDims",
    "SubjectRecord",
    "Dataset",
    "ThetaParams",
    "PenaltyWeights",
    "StackedData",
    "as_stacked",
    "build_design_matrix",
    "design_matvec",
    "design_rmatvec",
    "assemble_omega",
    "decompose_omega",
    "gamma_from_strict",
    "strict_lower",
    "latent_to_natural",
    "natural_to_latent",
    "complete_loglik",
    "standardize_covariates",
]

LOG_2PI = math.log(2.0 * math.pi)


def _farray(x, name, ndim=None):
    arr = np.asarray(x, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must have {ndim} dimension(s), got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class ModelDims:
    """Problem sizes shared by all components of a fit."""

    n_latent: int
    n_covariates: int
    n_subjects: int
    n_obs: tuple

    def __post_init__(self):
        if self.n_latent < 1:
            raise ValueError(f"need at least one latent parameter, got {self.n_latent}")
        if self.n_covariates < 0:
            raise ValueError(f"negative covariate count {self.n_covariates}")
        if self.n_subjects < 1:
            raise ValueError(f"need at least one subject, got {self.n_subjects}")
        if len(self.n_obs) != self.n_subjects or any(j < 1 for j in self.n_obs):
            raise ValueError("n_obs must give a positive count per subject")

    @property
    def n_beta(self) -> int:
        return (self.n_covariates + 1) * self.n_latent

    @property
    def n_corr(self) -> int:
        return self.n_latent * (self.n_latent - 1) // 2

    @property
    def total_obs(self) -> int:
        return int(sum(self.n_obs))


@dataclass(frozen=True)
class SubjectRecord:
    """Longitudinal record of one subject.

    times must be strictly increasing and nonnegative; observations has the
    same length; covariates is the length-K vector shared by all latent
    coordinates of this subject.
    """

    subject_id: str
    times: np.ndarray
    observations: np.ndarray
    covariates: np.ndarray
    dosing: DosingRegimen = field(default_factory=DosingRegimen)

    def __post_init__(self):
        times = _farray(self.times, "times", 1)
        obs = _farray(self.observations, "observations", 1)
        cov = _farray(self.covariates, "covariates", 1)
        if times.size == 0:
            raise ValueError(f"subject {self.subject_id}: needs at least one observation")
        if times.shape != obs.shape:
            raise ValueError(
                f"subject {self.subject_id}: times {times.shape} and observations {obs.shape} differ"
            )
        if np.any(times < 0) or np.any(np.diff(times) <= 0):
            raise ValueError(f"subject {self.subject_id}: times must be nonnegative, strictly increasing")
        if not np.all(np.isfinite(cov)):
            raise ValueError(f"subject {self.subject_id}: non-finite covariate values")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "covariates", cov)

    @property
    def n_obs(self) -> int:
        return self.times.size


@dataclass(frozen=True)
class Dataset:
    """Collection of subjects with a common covariate layout.

    ``standardization`` records per-covariate (mean, sd) that were applied to
    the stored covariates, or None if they are raw.
    """

    subjects: tuple
    standardization: Optional[tuple] = None

    def __post_init__(self):
        subjects = tuple(self.subjects)
        if not subjects:
            raise ValueError("dataset needs at least one subject")
        k = subjects[0].covariates.size
        for s in subjects:
            if s.covariates.size != k:
                raise ValueError(
                    f"subject {s.subject_id} has {s.covariates.size} covariates, expected {k}"
                )
        object.__setattr__(self, "subjects", subjects)

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_covariates(self) -> int:
        return self.subjects[0].covariates.size

    def dims(self, n_latent: int) -> ModelDims:
        return ModelDims(
            n_latent=n_latent,
            n_covariates=self.n_covariates,
            n_subjects=self.n_subjects,
            n_obs=tuple(s.n_obs for s in self.subjects),
        )


def standardize_covariates(dataset: Dataset) -> Dataset:
    """Center and scale every covariate to empirical mean 0, sd 1."""
    x = np.array([s.covariates for s in dataset.subjects])
    if x.shape[1] == 0:
        return dataset
    means = x.mean(axis=0)
    sds = x.std(axis=0)
    if np.any(sds == 0):
        bad = np.nonzero(sds == 0)[0].tolist()
        raise ValueError(f"constant covariate column(s) {bad} cannot be standardized")
    scaled = (x - means) / sds
    subjects = tuple(
        replace(s, covariates=scaled[i]) for i, s in enumerate(dataset.subjects)
    )
    return Dataset(subjects=subjects, standardization=(means, sds))


# ---------------------------------------------------------------------------
# Parameter vector
# ---------------------------------------------------------------------------


def strict_lower(matrix: np.ndarray) -> np.ndarray:
    """Strictly-lower-triangular entries of a square matrix, row-major."""
    m = np.asarray(matrix)
    idx = np.tril_indices(m.shape[0], k=-1)
    return m[idx].copy()


def gamma_from_strict(values, n_latent: int) -> np.ndarray:
    """Unit-lower-triangular matrix from its strictly-lower entries (row-major)."""
    values = _farray(values, "gamma entries", 1)
    expected = n_latent * (n_latent - 1) // 2
    if values.size != expected:
        raise ValueError(f"expected {expected} strictly-lower entries, got {values.size}")
    g = np.eye(n_latent)
    g[np.tril_indices(n_latent, k=-1)] = values
    return g


@dataclass(frozen=True)
class ThetaParams:
    """Full parameter vector (beta, delta, gamma, sigma).

    Immutable; construction validates positivity of delta and sigma and the
    unit-lower-triangular structure of gamma.
    """

    beta: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray
    sigma: float

    def __post_init__(self):
        beta = _farray(self.beta, "beta", 1)
        delta = _farray(self.delta, "delta", 1)
        gamma = _farray(self.gamma, "gamma", 2)
        n_latent = delta.size
        if gamma.shape != (n_latent, n_latent):
            raise ValueError(f"gamma shape {gamma.shape} does not match {n_latent} latent parameters")
        if beta.size == 0 or beta.size % n_latent != 0:
            raise ValueError(
                f"beta length {beta.size} is not a multiple of the latent count {n_latent}"
            )
        if np.any(delta <= 0) or not np.all(np.isfinite(delta)):
            raise ValueError(f"delta entries must be finite and strictly positive, got {delta}")
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"sigma must be finite and strictly positive, got {self.sigma}")
        if np.any(np.diagonal(gamma) != 1.0):
            raise ValueError("gamma must have a unit diagonal")
        if np.any(np.triu(gamma, k=1) != 0.0):
            raise ValueError("gamma must be lower triangular")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "sigma", float(self.sigma))

    @property
    def n_latent(self) -> int:
        return self.delta.size

    @property
    def n_covariates(self) -> int:
        return self.beta.size // self.n_latent - 1

    def beta_matrix(self) -> np.ndarray:
        """beta reshaped to (n_latent, 1 + n_covariates); column 0 holds intercepts."""
        return self.beta.reshape(self.n_latent, -1)

    def intercepts(self) -> np.ndarray:
        return self.beta_matrix()[:, 0].copy()

    def gamma_strict(self) -> np.ndarray:
        return strict_lower(self.gamma)

    def omega(self) -> np.ndarray:
        return assemble_omega(self.delta, self.gamma)

    def intercept_positions(self) -> np.ndarray:
        return np.arange(self.n_latent) * (self.n_covariates + 1)


@dataclass(frozen=True)
class PenaltyWeights:
    """Per-coordinate multipliers of the L1 penalty.

    Intercept coordinates always carry weight zero: they stay in every model
    and are never shrunk.  All other weights are nonnegative; the default is
    a flat weight of one, and non-flat weights let prior information (e.g.
    reweighting by a first-pass estimate) enter the penalty.
    """

    n_latent: int
    beta_weights: np.ndarray
    gamma_weights: np.ndarray

    def __post_init__(self):
        bw = _farray(self.beta_weights, "beta_weights", 1)
        gw = _farray(self.gamma_weights, "gamma_weights", 1)
        if bw.size % self.n_latent != 0:
            raise ValueError(
                f"beta_weights length {bw.size} is not a multiple of {self.n_latent}"
            )
        expected = self.n_latent * (self.n_latent - 1) // 2
        if gw.size != expected:
            raise ValueError(f"gamma_weights must have {expected} entries, got {gw.size}")
        if np.any(bw < 0) or np.any(gw < 0):
            raise ValueError("penalty weights must be nonnegative")
        stride = bw.size // self.n_latent
        if np.any(bw[np.arange(self.n_latent) * stride] != 0.0):
            raise ValueError("intercept coordinates must have weight 0")
        object.__setattr__(self, "beta_weights", bw)
        object.__setattr__(self, "gamma_weights", gw)

    @classmethod
    def default(cls, n_latent: int, n_covariates: int) -> "PenaltyWeights":
        bw = np.ones((n_latent, n_covariates + 1))
        bw[:, 0] = 0.0
        gw = np.ones(n_latent * (n_latent - 1) // 2)
        return cls(n_latent=n_latent, beta_weights=bw.ravel(), gamma_weights=gw)


# ---------------------------------------------------------------------------
# Design algebra
# ---------------------------------------------------------------------------


def build_design_matrix(covariates, n_latent: int) -> np.ndarray:
    """Dense block-diagonal design matrix of one subject, shape (L, (K+1)L).

    Row block l is (1, x^1, ..., x^K) placed in columns [l*(K+1), (l+1)*(K+1)).
    Hot paths use :func:`design_matvec` / :func:`design_rmatvec` instead; this
    dense form exists for inspection and cross-checking.
    """
    x = _farray(covariates, "covariates", 1)
    if not np.all(np.isfinite(x)):
        raise ValueError("covariates must be finite")
    row = np.concatenate([[1.0], x])
    k1 = row.size
    out = np.zeros((n_latent, k1 * n_latent))
    for l in range(n_latent):
        out[l, l * k1 : (l + 1) * k1] = row
    return out


def design_matvec(covariates, beta, n_latent: int) -> np.ndarray:
    """X_i @ beta without forming X_i: returns the length-L latent mean."""
    x = _farray(covariates, "covariates", 1)
    beta = _farray(beta, "beta", 1)
    if beta.size != n_latent * (x.size + 1):
        raise ValueError(
            f"beta length {beta.size} does not match L={n_latent}, K={x.size}"
        )
    b = beta.reshape(n_latent, x.size + 1)
    return b[:, 0] + b[:, 1:] @ x


def design_rmatvec(covariates, v) -> np.ndarray:
    """X_i' @ v without forming X_i: block l is v_l * (1, x)."""
    x = _farray(covariates, "covariates", 1)
    v = _farray(v, "v", 1)
    row = np.concatenate([[1.0], x])
    return (v[:, None] * row[None, :]).ravel()


# ---------------------------------------------------------------------------
# Covariance factorization
# ---------------------------------------------------------------------------


def assemble_omega(delta, gamma) -> np.ndarray:
    """Covariance Omega = D G G' D from its variance/correlation factors."""
    delta = _farray(delta, "delta", 1)
    gamma = _farray(gamma, "gamma", 2)
    if np.any(delta <= 0):
        raise ValueError(f"delta entries must be strictly positive, got {delta}")
    t = delta[:, None] * gamma
    omega = t @ t.T
    return 0.5 * (omega + omega.T)


def decompose_omega(omega) -> tuple:
    """Inverse of :func:`assemble_omega`: recover (delta, gamma) from SPD Omega.

    The Cholesky factor C of Omega satisfies C = D G, so delta is its
    diagonal and gamma = D^{-1} C.
    """
    omega = _farray(omega, "omega", 2)
    if omega.shape[0] != omega.shape[1]:
        raise ValueError(f"omega must be square, got {omega.shape}")
    if not np.allclose(omega, omega.T, rtol=1e-10, atol=1e-12):
        raise ValueError("omega must be symmetric")
    try:
        chol = np.linalg.cholesky(omega)
    except np.linalg.LinAlgError as exc:
        raise ValueError("omega is not positive definite") from exc
    delta = np.diagonal(chol).copy()
    gamma = chol / delta[None, :]
    np.fill_diagonal(gamma, 1.0)
    gamma = np.tril(gamma)
    return delta, gamma


# ---------------------------------------------------------------------------
# Latent-scale transform
# ---------------------------------------------------------------------------


def latent_to_natural(eta, transform: str):
    """Map the Gaussian-scale latent vector to the natural parameter scale."""
    if transform == "log":
        return np.exp(eta)
    if transform == "identity":
        return np.asarray(eta, dtype=float)
    raise ValueError(f"unknown transform {transform!r} (expected 'log' or 'identity')")


def natural_to_latent(z, transform: str):
    if transform == "log":
        z = np.asarray(z, dtype=float)
        if np.any(z <= 0):
            raise ValueError("log transform requires strictly positive parameters")
        return np.log(z)
    if transform == "identity":
        return np.asarray(z, dtype=float)
    raise ValueError(f"unknown transform {transform!r} (expected 'log' or 'identity')")


# ---------------------------------------------------------------------------
# Complete-data log likelihood
# ---------------------------------------------------------------------------


def complete_loglik(theta: ThetaParams, z, subject: SubjectRecord, model: StructuralModel) -> float:
    """Exact joint log density log p(y_i, h(z_i); theta) for one subject.

    Includes all additive constants, so the value equals the sum of the
    Gaussian log densities of the residuals and of the transformed latent
    vector.  Depends on z only through the sufficient statistics
    (h(z), h(z) h(z)', residual sum of squares).
    """
    z = _farray(z, "z", 1)
    if not np.all(np.isfinite(z)):
        raise ValueError("latent vector must be finite")
    eta = natural_to_latent(z, model.transform)
    pred = np.asarray(model.predict(subject.times, z, subject.dosing), dtype=float)
    if not np.all(np.isfinite(pred)):
        raise ValueError(f"non-finite prediction for subject {subject.subject_id}")
    s3 = float(np.sum((subject.observations - pred) ** 2))

    n_latent = theta.n_latent
    mean = design_matvec(subject.covariates, theta.beta, n_latent)
    omega = theta.omega()
    omega_inv = np.linalg.inv(omega)
    logdet = 2.0 * float(np.sum(np.log(theta.delta)))
    resid = eta - mean
    quad = float(resid @ omega_inv @ resid)

    n_obs = subject.n_obs
    return (
        -0.5 * n_obs * LOG_2PI
        - n_obs * math.log(theta.sigma)
        - 0.5 * s3 / theta.sigma**2
        - 0.5 * n_latent * LOG_2PI
        - 0.5 * logdet
        - 0.5 * quad
    )


# ---------------------------------------------------------------------------
# Stacked (padded) arrays for vectorized work
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StackedData:
    """Per-subject arrays padded to the maximum observation count.

    Padded slots repeat each subject's last time point and are masked out of
    every sum, so unbalanced designs go through the same vectorized code as
    balanced ones.
    """

    x: np.ndarray           # (N, K) covariates
    aug: np.ndarray         # (N, K+1) = [1 | x]
    times: np.ndarray       # (N, Jmax)
    obs: np.ndarray         # (N, Jmax), zero-padded
    obs_mask: np.ndarray    # (N, Jmax) bool
    n_obs: np.ndarray       # (N,) int
    dose_bolus: np.ndarray  # (N,)
    dose_rate: np.ndarray   # (N,)
    dose_tinf: np.ndarray   # (N,)
    subject_ids: tuple

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "StackedData":
        subs = dataset.subjects
        n = len(subs)
        jmax = max(s.n_obs for s in subs)
        k = subs[0].covariates.size
        x = np.empty((n, k))
        times = np.empty((n, jmax))
        obs = np.zeros((n, jmax))
        mask = np.zeros((n, jmax), dtype=bool)
        n_obs = np.empty(n, dtype=int)
        bolus = np.empty(n)
        rate = np.empty(n)
        tinf = np.empty(n)
        for i, s in enumerate(subs):
            j = s.n_obs
            x[i] = s.covariates
            times[i, :j] = s.times
            times[i, j:] = s.times[-1]
            obs[i, :j] = s.observations
            mask[i, :j] = True
            n_obs[i] = j
            bolus[i] = s.dosing.bolus
            rate[i] = s.dosing.infusion_rate
            tinf[i] = s.dosing.infusion_duration
        aug = np.hstack([np.ones((n, 1)), x])
        return cls(
            x=x, aug=aug, times=times, obs=obs, obs_mask=mask, n_obs=n_obs,
            dose_bolus=bolus, dose_rate=rate, dose_tinf=tinf,
            subject_ids=tuple(s.subject_id for s in subs),
        )

    @property
    def n_subjects(self) -> int:
        return self.x.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.x.shape[1]

    @property
    def total_obs(self) -> int:
        return int(self.n_obs.sum())

    def latent_means(self, theta: ThetaParams) -> np.ndarray:
        """X_i beta for every subject at once, shape (N, L)."""
        return self.aug @ theta.beta_matrix().T

    def dosing_cols(self, extra_axes: int = 1):
        """Dosing arrays reshaped to broadcast against (N, ..., J) predictions."""
        shape = (self.n_subjects,) + (1,) * extra_axes
        return (
            self.dose_bolus.reshape(shape),
            self.dose_rate.reshape(shape),
            self.dose_tinf.reshape(shape),
        )

    def dims(self, n_latent: int) -> ModelDims:
        return ModelDims(
            n_latent=n_latent,
            n_covariates=self.n_covariates,
            n_subjects=self.n_subjects,
            n_obs=tuple(int(j) for j in self.n_obs),
        )


def as_stacked(data) -> StackedData:
    if isinstance(data, StackedData):
        return data
    if isinstance(data, Dataset):
        return StackedData.from_dataset(data)
    raise TypeError(f"expected Dataset or StackedData, got {type(data).__name__}")
