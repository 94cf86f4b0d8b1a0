import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlmeselect import (
    Dataset,
    DosingRegimen,
    PenaltyWeights,
    SubjectRecord,
    ThetaParams,
    assemble_omega,
    build_design_matrix,
    complete_loglik,
    decompose_omega,
    design_matvec,
    design_rmatvec,
    standardize_covariates,
)
from nlmeselect.model import LOG_2PI, as_stacked, gamma_from_strict, strict_lower

from conftest import make_dataset
from helpers import ConstantModel, random_spd


def dense_design_oracle(x, n_latent):
    """Independent brute-force block-diagonal construction."""
    k = len(x)
    out = np.zeros((n_latent, n_latent * (k + 1)))
    for l in range(n_latent):
        out[l, l * (k + 1)] = 1.0
        for j in range(k):
            out[l, l * (k + 1) + 1 + j] = x[j]
    return out


class TestDesign:
    def test_intercept_only(self):
        # K=0, L=2: X beta is just the intercepts
        assert np.array_equal(design_matvec(np.zeros(0), [1.5, -2.0], 2), [1.5, -2.0])

    def test_linear_form(self):
        # K=2, L=1: 1 + 2*0.5 + 3*(-1) = -1
        val = design_matvec(np.array([0.5, -1.0]), np.array([1.0, 2.0, 3.0]), 1)
        assert val.shape == (1,)
        assert val[0] == pytest.approx(-1.0)

    def test_two_blocks(self):
        # K=1, L=2, x=(2), beta=(1, 0, -1, 3) -> (1, 5); checked against the
        # dense block-diagonal product
        x = np.array([2.0])
        beta = np.array([1.0, 0.0, -1.0, 3.0])
        expected = dense_design_oracle(x, 2) @ beta
        assert np.allclose(expected, [1.0, 5.0])
        assert np.allclose(design_matvec(x, beta, 2), expected)

    def test_dense_builder_matches_oracle(self, rng):
        for _ in range(20):
            k = int(rng.integers(0, 5))
            l = int(rng.integers(1, 5))
            x = rng.standard_normal(k)
            assert np.array_equal(build_design_matrix(x, l), dense_design_oracle(x, l))

    def test_rmatvec_matches_dense(self, rng):
        for _ in range(20):
            k = int(rng.integers(0, 5))
            l = int(rng.integers(1, 5))
            x = rng.standard_normal(k)
            v = rng.standard_normal(l)
            assert np.allclose(design_rmatvec(x, v), dense_design_oracle(x, l).T @ v)

    @given(
        k=st.integers(0, 4),
        l=st.integers(1, 4),
        seed=st.integers(0, 2**31 - 1),
    )
    @settings(max_examples=50, deadline=None)
    def test_matvec_property(self, k, l, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(k)
        beta = rng.standard_normal((k + 1) * l)
        dense = dense_design_oracle(x, l)
        assert np.allclose(design_matvec(x, beta, l), dense @ beta, rtol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            design_matvec(np.array([1.0]), np.array([1.0, 2.0, 3.0]), 2)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            build_design_matrix(np.array([np.nan]), 1)


class TestOmega:
    def test_identity_gamma(self):
        d = np.array([0.7, 1.3, 0.2])
        assert np.allclose(assemble_omega(d, np.eye(3)), np.diag(d**2))

    def test_two_by_two(self):
        gamma = np.array([[1.0, 0.0], [0.5, 1.0]])
        omega = assemble_omega(np.array([1.0, 2.0]), gamma)
        assert np.allclose(omega, [[1.0, 1.0], [1.0, 5.0]])

    def test_determinant_is_delta_squared(self, rng):
        for _ in range(10):
            l = int(rng.integers(1, 5))
            d = rng.uniform(0.2, 2.0, l)
            g = gamma_from_strict(rng.normal(scale=0.5, size=l * (l - 1) // 2), l)
            omega = assemble_omega(d, g)
            assert np.linalg.det(omega) == pytest.approx(np.prod(d) ** 2, rel=1e-9)

    def test_nonpositive_delta_rejected(self):
        with pytest.raises(ValueError):
            assemble_omega(np.array([1.0, 0.0]), np.eye(2))

    def test_decompose_diagonal(self):
        delta, gamma = decompose_omega(np.diag([0.16, 0.3025]))
        assert np.allclose(delta, [0.4, 0.55], rtol=1e-14)
        assert np.array_equal(gamma, np.eye(2))

    def test_decompose_round_trip_example(self):
        delta, gamma = decompose_omega(np.array([[1.0, 1.0], [1.0, 5.0]]))
        assert np.allclose(delta, [1.0, 2.0])
        assert gamma[1, 0] == pytest.approx(0.5)

    def test_round_trip_random_spd(self):
        # 100 random SPD 4x4 matrices, relative error < 1e-10
        rng = np.random.default_rng(7)
        for _ in range(100):
            omega = random_spd(rng, 4)
            delta, gamma = decompose_omega(omega)
            back = assemble_omega(delta, gamma)
            assert np.linalg.norm(back - omega) <= 1e-10 * np.linalg.norm(omega)
            assert np.all(np.diagonal(gamma) == 1.0)
            assert np.all(np.triu(gamma, k=1) == 0.0)

    def test_not_spd_rejected(self):
        with pytest.raises(ValueError):
            decompose_omega(np.array([[1.0, 2.0], [2.0, 1.0]]))
        with pytest.raises(ValueError):
            decompose_omega(np.array([[1.0, 0.5], [0.1, 1.0]]))


class TestThetaParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            ThetaParams(np.zeros(2), np.array([1.0, -1.0]), np.eye(2), 1.0)
        with pytest.raises(ValueError):
            ThetaParams(np.zeros(2), np.ones(2), np.eye(2), 0.0)
        bad_gamma = np.eye(2)
        bad_gamma[0, 1] = 0.3
        with pytest.raises(ValueError):
            ThetaParams(np.zeros(2), np.ones(2), bad_gamma, 1.0)

    def test_layout_helpers(self):
        beta = np.arange(6.0)  # L=2, K=2
        theta = ThetaParams(beta, np.ones(2), np.eye(2), 1.0)
        assert np.array_equal(theta.intercepts(), [0.0, 3.0])
        assert np.array_equal(theta.intercept_positions(), [0, 3])
        assert theta.n_covariates == 2

    def test_gamma_strict_round_trip(self, rng):
        vals = rng.standard_normal(6)
        g = gamma_from_strict(vals, 4)
        assert np.array_equal(strict_lower(g), vals)


class TestPenaltyWeights:
    def test_default_intercepts_unpenalized(self):
        w = PenaltyWeights.default(n_latent=3, n_covariates=2)
        mat = w.beta_weights.reshape(3, 3)
        assert np.array_equal(mat[:, 0], np.zeros(3))
        assert np.all(mat[:, 1:] == 1.0)
        assert w.gamma_weights.size == 3

    def test_nonzero_intercept_weight_rejected(self):
        w = PenaltyWeights.default(2, 1)
        bad = w.beta_weights.copy()
        bad[0] = 0.5
        with pytest.raises(ValueError):
            PenaltyWeights(2, bad, w.gamma_weights)

    def test_negative_weight_rejected(self):
        w = PenaltyWeights.default(2, 1)
        bad = w.gamma_weights.copy()
        bad[0] = -1.0
        with pytest.raises(ValueError):
            PenaltyWeights(2, w.beta_weights, bad)


class TestCompleteLoglik:
    def test_perfect_fit_constants(self):
        # L=1, K=0, zero residuals and latent at its mean:
        # value = -J log sigma - log(delta) - (J+1)/2 log(2 pi)
        j, sigma, delta = 4, 0.7, 0.9
        subject = SubjectRecord("s", np.arange(1.0, j + 1), np.full(j, 2.5),
                                np.zeros(0), DosingRegimen())
        theta = ThetaParams(np.array([2.5]), np.array([delta]), np.eye(1), sigma)
        value = complete_loglik(theta, np.array([2.5]), subject, ConstantModel())
        expected = -j * math.log(sigma) - math.log(delta) - 0.5 * (j + 1) * LOG_2PI
        assert value == pytest.approx(expected, rel=1e-12)

    def test_matches_scalar_gaussian_densities(self, rng):
        # L=1: equals log N(y; f, sigma^2) + log N(z; mu, omega^2)
        j = 6
        subject = SubjectRecord("s", np.arange(1.0, j + 1), rng.normal(size=j),
                                np.zeros(0), DosingRegimen())
        theta = ThetaParams(np.array([0.4]), np.array([1.3]), np.eye(1), 0.8)
        z = np.array([0.9])
        value = complete_loglik(theta, z, subject, ConstantModel())

        def norm_logpdf(x, m, sd):
            return -0.5 * math.log(2 * math.pi) - math.log(sd) - 0.5 * ((x - m) / sd) ** 2

        oracle = sum(norm_logpdf(y, z[0], 0.8) for y in subject.observations)
        oracle += norm_logpdf(z[0], 0.4, 1.3)
        assert value == pytest.approx(oracle, rel=1e-8)

    def test_invariant_under_refactorization(self, rng):
        # replacing (delta, gamma) by decompose(assemble(...)) leaves it unchanged
        subject = SubjectRecord("s", np.array([1.0, 2.0]), np.array([0.3, -0.1]),
                                rng.standard_normal(2), DosingRegimen())
        delta = np.array([0.5, 1.1])
        gamma = gamma_from_strict([0.4], 2)
        beta = rng.standard_normal(6)
        theta = ThetaParams(beta, delta, gamma, 0.6)
        d2, g2 = decompose_omega(assemble_omega(delta, gamma))
        theta2 = ThetaParams(beta, d2, g2, 0.6)

        class FirstCoord(ConstantModel):
            n_latent = 2
            transform = "identity"

        z = rng.standard_normal(2)
        a = complete_loglik(theta, z, subject, FirstCoord())
        b = complete_loglik(theta2, z, subject, FirstCoord())
        assert a == pytest.approx(b, rel=1e-12)

    def test_depends_on_z_only_through_stats(self, rng):
        # recompute from (s1, s2, s3) with an independent formula
        subject = SubjectRecord("s", np.array([0.5, 1.5, 3.0]), np.array([1.0, 0.2, -0.4]),
                                np.zeros(0), DosingRegimen())
        theta = ThetaParams(np.array([0.1]), np.array([0.9]), np.eye(1), 1.2)
        model = ConstantModel()
        z = np.array([0.7])
        s1 = z.copy()
        s2 = np.outer(s1, s1)
        s3 = float(np.sum((subject.observations - z[0]) ** 2))
        omega = theta.omega()
        sig = s2 - np.outer(s1, [0.1]) - np.outer([0.1], s1) + np.outer([0.1], [0.1])
        j = subject.n_obs
        oracle = (
            -0.5 * j * LOG_2PI - j * math.log(1.2) - 0.5 * s3 / 1.2**2
            - 0.5 * LOG_2PI - 0.5 * math.log(omega[0, 0])
            - 0.5 * float(np.trace(sig @ np.linalg.inv(omega)))
        )
        assert complete_loglik(theta, z, subject, model) == pytest.approx(oracle, rel=1e-10)

    def test_domain_errors(self):
        subject = SubjectRecord("s", np.array([1.0]), np.array([0.0]),
                                np.zeros(0), DosingRegimen())
        with pytest.raises(ValueError):
            ThetaParams(np.array([0.0]), np.array([1.0]), np.eye(1), -1.0)
        theta = ThetaParams(np.array([0.0]), np.array([1.0]), np.eye(1), 1.0)
        with pytest.raises(ValueError):
            complete_loglik(theta, np.array([np.inf]), subject, ConstantModel())


class TestDatasetAndStacking:
    def test_subject_validation(self):
        with pytest.raises(ValueError):
            SubjectRecord("a", np.array([2.0, 1.0]), np.zeros(2), np.zeros(0))
        with pytest.raises(ValueError):
            SubjectRecord("a", np.array([1.0]), np.zeros(2), np.zeros(0))
        with pytest.raises(ValueError):
            SubjectRecord("a", np.array([1.0]), np.zeros(1), np.array([np.nan]))

    def test_covariate_count_must_match(self):
        s1 = SubjectRecord("a", np.array([1.0]), np.zeros(1), np.zeros(2))
        s2 = SubjectRecord("b", np.array([1.0]), np.zeros(1), np.zeros(3))
        with pytest.raises(ValueError):
            Dataset((s1, s2))

    def test_standardize(self, rng):
        data = make_dataset(rng, 40, 3)
        out = standardize_covariates(data)
        x = np.array([s.covariates for s in out.subjects])
        assert np.allclose(x.mean(axis=0), 0.0, atol=1e-12)
        assert np.allclose(x.std(axis=0), 1.0, rtol=1e-12)
        assert out.standardization is not None

    def test_stacked_padding(self, rng):
        data = make_dataset(rng, 6, 2, n_obs=5, unbalanced=True)
        stacked = as_stacked(data)
        for i, s in enumerate(data.subjects):
            j = s.n_obs
            assert np.array_equal(stacked.times[i, :j], s.times)
            assert np.all(stacked.obs_mask[i, :j])
            assert not np.any(stacked.obs_mask[i, j:])
        assert stacked.total_obs == sum(s.n_obs for s in data.subjects)

    def test_dims(self, small_dataset):
        dims = small_dataset.dims(4)
        assert dims.n_beta == 16
        assert dims.n_corr == 6
        assert dims.total_obs == sum(s.n_obs for s in small_dataset.subjects)
