"""Structural (regression) models mapping individual parameters to predictions.

The built-in model is a two-compartment drug disposition model with an
intravenous bolus at t=0 plus an optional constant-rate infusion over
[0, T_inf].  Drug amounts follow the linear system

    dA_c/dt = rate * 1{t <= T_inf} + (Q/Vp) A_p - (Q/Vc + Cl/Vc) A_c
    dA_p/dt = (Q/Vc) A_c - (Q/Vp) A_p

with A_c(0) = bolus, A_p(0) = 0, and the observed quantity is the central
concentration A_c/Vc.  The solver evaluates the matrix exponential of the
2x2 disposition matrix in closed form, so results are exact up to floating
point and there is no integration-step noise inside the inference loops.

Units used throughout: hours, milligrams, litres (concentrations mg/L).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DosingRegimen",
    "PKParams",
    "StructuralModel",
    "TwoCompartmentModel",
    "pk2_amounts",
    "pk2_concentration",
    "rk4_reference",
]

# Relative eigenvalue gap below which the repeated-root limit formula is used.
_DEGENERATE_GAP = 1e-12


@dataclass(frozen=True)
class DosingRegimen:
    """Single bolus plus optional zero-order infusion starting at t=0.

    Parameters
    ----------
    bolus : float
        Dose placed in the central compartment at t=0 (mg).
    infusion_rate : float
        Constant infusion rate into the central compartment (mg/h).
    infusion_duration : float
        Infusion length (h); zero means no infusion.
    """

    bolus: float = 0.0
    infusion_rate: float = 0.0
    infusion_duration: float = 0.0

    def __post_init__(self):
        vals = (self.bolus, self.infusion_rate, self.infusion_duration)
        if not all(math.isfinite(v) and v >= 0 for v in vals):
            raise ValueError(f"dosing quantities must be finite and nonnegative, got {vals}")
        if (self.infusion_rate > 0) != (self.infusion_duration > 0):
            raise ValueError(
                "an infusion requires both a positive rate and a positive duration "
                f"(got rate={self.infusion_rate}, duration={self.infusion_duration})"
            )

    @property
    def has_infusion(self) -> bool:
        return self.infusion_rate > 0 and self.infusion_duration > 0


@dataclass(frozen=True)
class PKParams:
    """Individual parameters of the two-compartment model.

    vc, vp are the central/peripheral volumes (L, both > 0); q is the
    inter-compartment clearance and cl the elimination clearance (L/h, >= 0).
    """

    vc: float
    vp: float
    q: float
    cl: float

    def __post_init__(self):
        vals = (self.vc, self.vp, self.q, self.cl)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"PK parameters must be finite, got {vals}")
        if self.vc <= 0 or self.vp <= 0:
            raise ValueError(f"volumes must be strictly positive, got vc={self.vc}, vp={self.vp}")
        if self.q < 0 or self.cl < 0:
            raise ValueError(f"clearances must be nonnegative, got q={self.q}, cl={self.cl}")

    def as_array(self) -> np.ndarray:
        return np.array([self.vc, self.vp, self.q, self.cl], dtype=float)


class StructuralModel:
    """Interface for the deterministic observation function.

    Subclasses provide ``predict(times, z, dosing)`` returning the model
    prediction for latent parameter vector(s) ``z`` (last axis of length
    ``n_latent``).  The components of ``z``, ``times`` and the dosing fields
    must be mutually broadcastable; callers insert axes as needed.

    ``transform`` names the scale on which the latent vector is Gaussian:
    ``"log"`` means z = exp(eta) for Gaussian eta, ``"identity"`` means
    z = eta.  Predictions must be deterministic and finite for valid input.
    """

    transform: str = "log"
    n_latent: int = 1

    def predict(self, times, z, dosing):
        raise NotImplementedError


def dose_arrays(dosing):
    """Normalize a dosing spec to (bolus, rate, duration) scalars or arrays."""
    if isinstance(dosing, DosingRegimen):
        return dosing.bolus, dosing.infusion_rate, dosing.infusion_duration
    bolus, rate, duration = dosing
    return np.asarray(bolus, float), np.asarray(rate, float), np.asarray(duration, float)


def _phi(lam, s):
    """(exp(lam*s) - 1)/lam with the lam -> 0 limit (= s)."""
    lam = np.asarray(lam, float)
    safe = np.where(lam == 0.0, 1.0, lam)
    return np.where(lam == 0.0, s, np.expm1(lam * s) / safe)


def _psi(lam, s):
    """Integral of tau*exp(lam*tau) over [0, s], stable near lam = 0."""
    x = lam * s
    small = np.abs(x) < 1e-4
    xs = np.where(small, 1.0, x)
    h2 = ((xs - 1.0) * np.exp(xs) + 1.0) / (xs * xs)
    series = 0.5 + x / 3.0 + x * x / 8.0 + x ** 3 / 30.0
    return s * s * np.where(small, series, h2)


def _propagator_coeffs(tau, gap, lam1, lam2, s, want_forcing):
    """Scalar coefficients (cb, ci[, db, di]) such that exp(B s) = cb*B + ci*I.

    Uses the two-eigenvalue spectral formula, switching to the repeated-root
    limit when the eigenvalue gap is below ``_DEGENERATE_GAP`` relative to the
    eigenvalue scale.  db/di are the analogous coefficients for the time
    integral of exp(B s) (needed for constant forcing).
    """
    scale = np.maximum(np.abs(lam1), np.abs(lam2))
    rep = gap <= _DEGENERATE_GAP * np.maximum(scale, 1.0)
    gs = np.where(rep, 1.0, gap)

    e1 = np.exp(lam1 * s)
    e2 = np.exp(lam2 * s)
    cb = (e1 - e2) / gs
    ci = (lam1 * e2 - lam2 * e1) / gs

    lam = 0.5 * tau
    el = np.exp(lam * s)
    cb = np.where(rep, s * el, cb)
    ci = np.where(rep, el * (1.0 - lam * s), ci)
    if not want_forcing:
        return cb, ci, None, None

    p1 = _phi(lam1, s)
    p2 = _phi(lam2, s)
    db = (p1 - p2) / gs
    di = (lam1 * p2 - lam2 * p1) / gs
    psi = _psi(lam, s)
    db = np.where(rep, psi, db)
    di = np.where(rep, _phi(lam, s) - lam * psi, di)
    return cb, ci, db, di


def _amounts_raw(vc, vp, q, cl, t, bolus, rate, t_inf):
    """Vectorized closed-form amounts; no input validation (nan-propagating)."""
    with np.errstate(all="ignore"):
        k10 = cl / vc
        k12 = q / vc
        k21 = q / vp
        b11 = -(k10 + k12)

        tau = b11 - k21
        disc = tau * tau - 4.0 * k10 * k21
        gap = np.sqrt(np.maximum(disc, 0.0))
        lam1 = 0.5 * (tau + gap)
        lam2 = 0.5 * (tau - gap)

        forced = np.any(np.asarray(rate) * np.asarray(t_inf) > 0)
        if forced:
            t1 = np.minimum(t, t_inf)
            t2 = t - t1
            cb, ci, db, di = _propagator_coeffs(tau, gap, lam1, lam2, t1, True)
            a1c = (cb * b11 + ci) * bolus + (db * b11 + di) * rate
            a1p = (cb * k12) * bolus + (db * k12) * rate
        else:
            t2 = t
            a1c = bolus
            a1p = np.zeros(())

        cb, ci, _, _ = _propagator_coeffs(tau, gap, lam1, lam2, t2, False)
        ac = (cb * b11 + ci) * a1c + (cb * k21) * a1p
        ap = (cb * k12) * a1c + (-cb * k21 + ci) * a1p
        return np.maximum(ac, 0.0), np.maximum(ap, 0.0)


def _unpack_params(z):
    if isinstance(z, PKParams):
        z = z.as_array()
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != 4:
        raise ValueError(f"expected 4 parameters (vc, vp, q, cl) on the last axis, got shape {z.shape}")
    return z[..., 0], z[..., 1], z[..., 2], z[..., 3]


def pk2_amounts(t, z, dosing):
    """Central and peripheral drug amounts at time(s) t.

    Parameters
    ----------
    t : array_like
        Time(s) in hours, >= 0; broadcasts against the parameter arrays.
    z : PKParams or array_like with last axis (vc, vp, q, cl)
    dosing : DosingRegimen or (bolus, rate, duration) arrays

    Returns
    -------
    (a_central, a_peripheral) : ndarray pair in mg, of the broadcast shape.
    """
    t = np.asarray(t, dtype=float)
    vc, vp, q, cl = _unpack_params(z)
    for name, arr in (("t", t), ("vc", vc), ("vp", vp), ("q", q), ("cl", cl)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in {name}")
    if np.any(t < 0):
        raise ValueError("times must be nonnegative")
    if np.any(vc <= 0) or np.any(vp <= 0):
        raise ValueError("volumes must be strictly positive")
    if np.any(q < 0) or np.any(cl < 0):
        raise ValueError("clearances must be nonnegative")
    bolus, rate, t_inf = dose_arrays(dosing)
    return _amounts_raw(vc, vp, q, cl, t, bolus, rate, t_inf)


def pk2_concentration(t, z, dosing):
    """Central-compartment concentration A_c(t)/vc in mg/L."""
    vc, _, _, _ = _unpack_params(z)
    ac, _ = pk2_amounts(t, z, dosing)
    return ac / vc


def _ode_rhs(state, k10, k12, k21, rate):
    ac = state[..., 0]
    ap = state[..., 1]
    dac = rate + k21 * ap - (k10 + k12) * ac
    dap = k12 * ac - k21 * ap
    return np.stack([dac, dap], axis=-1)


def rk4_reference(t, z, dosing, step):
    """Fixed-step 4th-order Runge-Kutta reference solution of the amounts.

    Independent of the closed-form solver; used to cross-validate it.  The
    integration grid is split at the end of the infusion so the forcing
    discontinuity never falls inside a step.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    t = float(t)
    if t < 0:
        raise ValueError("t must be nonnegative")
    vc, vp, q, cl = _unpack_params(z)
    k10, k12, k21 = cl / vc, q / vc, q / vp
    bolus, rate, t_inf = dose_arrays(dosing)
    if any(np.ndim(v) != 0 for v in (bolus, rate, t_inf)):
        raise ValueError("rk4_reference expects scalar dosing")
    bolus, rate, t_inf = float(bolus), float(rate), float(t_inf)

    state = np.zeros(np.shape(k10) + (2,))
    state[..., 0] = bolus

    segments = []
    if rate * t_inf > 0 and t > 0:
        segments.append((0.0, min(t, t_inf), rate))
        if t > t_inf:
            segments.append((t_inf, t, 0.0))
    else:
        segments.append((0.0, t, 0.0))

    for t0, t1, seg_rate in segments:
        length = t1 - t0
        if length <= 0:
            continue
        n_steps = max(1, int(math.ceil(length / step)))
        h = length / n_steps
        for _ in range(n_steps):
            k1 = _ode_rhs(state, k10, k12, k21, seg_rate)
            k2 = _ode_rhs(state + 0.5 * h * k1, k10, k12, k21, seg_rate)
            k3 = _ode_rhs(state + 0.5 * h * k2, k10, k12, k21, seg_rate)
            k4 = _ode_rhs(state + h * k3, k10, k12, k21, seg_rate)
            state = state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return state[..., 0], state[..., 1]


class TwoCompartmentModel(StructuralModel):
    """Central concentration from the bolus + infusion two-compartment model.

    Latent vector order: (vc, vp, q, cl).  All four parameters are positive,
    so the model declares the log transform: z = exp(eta) with Gaussian eta.
    """

    transform = "log"
    n_latent = 4

    def predict(self, times, z, dosing):
        z = np.asarray(z, dtype=float)
        vc, vp, q, cl = z[..., 0], z[..., 1], z[..., 2], z[..., 3]
        bolus, rate, t_inf = dose_arrays(dosing)
        ac, _ = _amounts_raw(vc, vp, q, cl, np.asarray(times, float), bolus, rate, t_inf)
        with np.errstate(all="ignore"):
            return ac / vc
