"""File formats: observation/covariate CSVs, parameter and report JSON.

Floats are serialized with ``repr``, i.e. the shortest string that parses
back to the identical double (at most 17 significant digits), so rereading
any file reproduces the numbers bit for bit and reruns with the same seed
produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .likelihood import SupportMask
from .model import Dataset, SubjectRecord, ThetaParams, gamma_from_strict
from .sapg import SAPGTrace
from .simulate import GroundTruth
from .structural import DosingRegimen

__all__ = [
    "write_dataset_csv",
    "write_covariates_csv",
    "read_dataset",
    "write_theta_json",
    "read_theta_json",
    "write_ground_truth_json",
    "write_trace_csv",
    "write_history_csv",
    "write_report_json",
]

DATA_COLUMNS = ["id", "time", "dv", "amt_bolus", "rate", "t_inf"]


def _fmt(x) -> str:
    return repr(float(x))


def write_dataset_csv(path, dataset: Dataset) -> None:
    """One row per observation: id, time, dv, plus the dosing columns."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DATA_COLUMNS)
        for s in dataset.subjects:
            d = s.dosing
            for t, y in zip(s.times, s.observations):
                writer.writerow([
                    s.subject_id, _fmt(t), _fmt(y),
                    _fmt(d.bolus), _fmt(d.infusion_rate), _fmt(d.infusion_duration),
                ])


def write_covariates_csv(path, dataset: Dataset) -> None:
    """One row per subject: id, x1, ..., xK."""
    k = dataset.n_covariates
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id"] + [f"x{j + 1}" for j in range(k)])
        for s in dataset.subjects:
            writer.writerow([s.subject_id] + [_fmt(v) for v in s.covariates])


def read_dataset(data_path, covariates_path=None) -> Dataset:
    """Load observations (and optional covariates) back into a Dataset.

    Subjects keep the order of first appearance in the data file; every
    subject present in the data must appear in the covariate file.
    """
    groups: dict = {}
    order = []
    with open(data_path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in DATA_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{data_path}: missing columns {missing}")
        for row in reader:
            sid = row["id"]
            if sid not in groups:
                groups[sid] = {"times": [], "obs": [], "dose": (
                    float(row["amt_bolus"]), float(row["rate"]), float(row["t_inf"]))}
                order.append(sid)
            groups[sid]["times"].append(float(row["time"]))
            groups[sid]["obs"].append(float(row["dv"]))

    covariates = {sid: np.zeros(0) for sid in order}
    if covariates_path is not None:
        covariates = {}
        with open(covariates_path, newline="") as fh:
            reader = csv.DictReader(fh)
            names = [c for c in (reader.fieldnames or []) if c != "id"]
            for row in reader:
                covariates[row["id"]] = np.array([float(row[c]) for c in names])
        absent = [sid for sid in order if sid not in covariates]
        if absent:
            raise ValueError(f"{covariates_path}: no covariates for subject(s) {absent}")

    subjects = []
    for sid in order:
        g = groups[sid]
        bolus, rate, t_inf = g["dose"]
        subjects.append(SubjectRecord(
            subject_id=sid,
            times=np.array(g["times"]),
            observations=np.array(g["obs"]),
            covariates=covariates[sid],
            dosing=DosingRegimen(bolus=bolus, infusion_rate=rate, infusion_duration=t_inf),
        ))
    return Dataset(subjects=tuple(subjects))


def theta_to_dict(theta: ThetaParams) -> dict:
    return {
        "n_latent": theta.n_latent,
        "n_covariates": theta.n_covariates,
        "beta": theta.beta.tolist(),
        "delta": theta.delta.tolist(),
        "gamma_lower": theta.gamma_strict().tolist(),
        "sigma": theta.sigma,
    }


def theta_from_dict(d: dict) -> ThetaParams:
    n_latent = int(d["n_latent"])
    return ThetaParams(
        beta=np.array(d["beta"], dtype=float),
        delta=np.array(d["delta"], dtype=float),
        gamma=gamma_from_strict(np.array(d["gamma_lower"], dtype=float), n_latent),
        sigma=float(d["sigma"]),
    )


def write_theta_json(path, theta: ThetaParams) -> None:
    Path(path).write_text(json.dumps(theta_to_dict(theta), indent=2) + "\n")


def read_theta_json(path) -> ThetaParams:
    return theta_from_dict(json.loads(Path(path).read_text()))


def write_ground_truth_json(path, truth: GroundTruth) -> None:
    sc = truth.scenario
    payload = {
        "theta": theta_to_dict(truth.theta),
        "beta_support": truth.support.beta.astype(int).tolist(),
        "gamma_support": truth.support.gamma.astype(int).tolist(),
        "scenario": {
            "n_subjects": sc.n_subjects,
            "n_covariates": sc.n_covariates,
            "mu": list(sc.mu),
            "effects": [[l, k, v] for (l, k), v in sorted(sc.effects.items())],
            "omega": np.asarray(sc.omega, dtype=float).tolist(),
            "sigma": sc.sigma,
            "times": list(sc.times),
            "dosing": {
                "bolus": sc.dosing.bolus,
                "infusion_rate": sc.dosing.infusion_rate,
                "infusion_duration": sc.dosing.infusion_duration,
            },
            "covariate_structure": sc.covariate_structure,
            "toeplitz_rho": sc.toeplitz_rho,
            "seed": sc.seed,
        },
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def write_trace_csv(path, trace: SAPGTrace) -> None:
    """iteration, penalized surrogate objective, sigma, and delta snapshots."""
    n_latent = trace.delta.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["iteration", "objective", "sigma"] + [f"delta_{j + 1}" for j in range(n_latent)]
        )
        for i in range(len(trace)):
            writer.writerow(
                [i + 1, _fmt(trace.objective[i]), _fmt(trace.sigma[i])]
                + [_fmt(v) for v in trace.delta[i]]
            )


def write_history_csv(path, records) -> None:
    """Evaluation log: iteration, particle (or grid index), penalties, BIC."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "particle", "lambda_beta", "lambda_gamma", "bic"])
        for r in records:
            writer.writerow([r.iteration, r.particle, _fmt(r.lam_beta),
                             _fmt(r.lam_gamma), _fmt(r.bic)])


def write_report_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def support_to_dict(support: SupportMask) -> dict:
    n_beta, n_gamma = support.counts()
    return {
        "beta": support.beta.astype(int).tolist(),
        "gamma": support.gamma.astype(int).tolist(),
        "n_covariate_effects": n_beta,
        "n_correlations": n_gamma,
    }
