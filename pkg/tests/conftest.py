import numpy as np
import pytest

from nlmeselect import Dataset, DosingRegimen, SubjectRecord
from nlmeselect.model import as_stacked

from helpers import ConstantModel, ExpDecayModel


def make_dataset(rng, n_subjects, n_covariates, n_obs=5, unbalanced=False,
                 dosing=None, times_max=8.0):
    """Random small dataset with synthetic (not model-based) observations."""
    subjects = []
    for i in range(n_subjects):
        j = n_obs if not unbalanced else int(rng.integers(2, n_obs + 1))
        times = np.sort(rng.uniform(0.05, times_max, j))
        subjects.append(SubjectRecord(
            subject_id=str(i),
            times=times,
            observations=rng.normal(size=j),
            covariates=rng.standard_normal(n_covariates),
            dosing=dosing or DosingRegimen(),
        ))
    return Dataset(tuple(subjects))


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


@pytest.fixture
def small_dataset(rng):
    return make_dataset(rng, n_subjects=12, n_covariates=3, n_obs=5, unbalanced=True)


@pytest.fixture
def small_stacked(small_dataset):
    return as_stacked(small_dataset)


@pytest.fixture
def constant_model():
    return ConstantModel()


@pytest.fixture
def decay_model():
    return ExpDecayModel()
