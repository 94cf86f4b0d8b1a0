"""Shared test models and oracle utilities."""

import numpy as np

from nlmeselect import StructuralModel, ThetaParams
from nlmeselect.model import gamma_from_strict


class ConstantModel(StructuralModel):
    """f(t, z) = z[0], Gaussian latent scale: the classic random-intercept model."""

    transform = "identity"
    n_latent = 1

    def predict(self, times, z, dosing):
        return np.asarray(z, float)[..., 0] * np.ones_like(np.asarray(times, float))


class ExpDecayModel(StructuralModel):
    """f(t, z) = z[0] * exp(-z[1] * t) with log-normal latents (amplitude, rate)."""

    transform = "log"
    n_latent = 2

    def predict(self, times, z, dosing):
        z = np.asarray(z, float)
        t = np.asarray(times, float)
        with np.errstate(all="ignore"):
            return z[..., 0] * np.exp(-z[..., 1] * t)


class ScaledDecayModel(StructuralModel):
    """f(t, z) = 100 * exp(-z[0] * t): one log-normal rate parameter."""

    transform = "log"
    n_latent = 1

    def predict(self, times, z, dosing):
        z = np.asarray(z, float)
        t = np.asarray(times, float)
        with np.errstate(all="ignore"):
            return 100.0 * np.exp(-z[..., 0] * t)


def pack_theta(theta):
    return np.concatenate([
        theta.beta,
        theta.gamma_strict(),
        theta.delta,
        [theta.sigma],
    ])


def unpack_theta(vec, n_latent, n_beta):
    n_corr = n_latent * (n_latent - 1) // 2
    beta = vec[:n_beta]
    gam = vec[n_beta:n_beta + n_corr]
    delta = vec[n_beta + n_corr:n_beta + n_corr + n_latent]
    return ThetaParams(
        beta=beta,
        delta=delta,
        gamma=gamma_from_strict(gam, n_latent),
        sigma=float(vec[-1]),
    )


def finite_diff_gradient(func, theta, rel_step=1e-6):
    """Central finite differences of a scalar function of ThetaParams."""
    v0 = pack_theta(theta)
    n_latent, n_beta = theta.n_latent, theta.beta.size
    grad = np.empty_like(v0)
    for i in range(v0.size):
        h = rel_step * max(1.0, abs(v0[i]))
        vp, vm = v0.copy(), v0.copy()
        vp[i] += h
        vm[i] -= h
        fp = func(unpack_theta(vp, n_latent, n_beta))
        fm = func(unpack_theta(vm, n_latent, n_beta))
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def split_blocks(vec, n_latent, n_beta):
    n_corr = n_latent * (n_latent - 1) // 2
    return (
        vec[:n_beta],
        vec[n_beta:n_beta + n_corr],
        vec[n_beta + n_corr:n_beta + n_corr + n_latent],
        float(vec[-1]),
    )


def random_spd(rng, n, jitter=0.1):
    a = rng.standard_normal((n, n))
    return a @ a.T + jitter * np.eye(n)


def batch_se(values):
    """Standard error of the mean of a sequence of (near) independent batches."""
    values = np.asarray(values, float)
    return values.std(ddof=1) / np.sqrt(values.size)
