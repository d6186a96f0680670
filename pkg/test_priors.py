"""
Prior service tests
Input functions, moments and sampling of every prior family
"""
import math

from hypothesis import given, settings, strategies as st
import numpy as np
import pytest

from lowramp.models import PriorFamily, PriorSpec
from lowramp.services.priors import PriorService, f_in, moments, sample, third_moment_scalar
from lowramp.validation import InvalidPrior, ShapeMismatch

RANK_ONE_PRIORS = [
    PriorSpec.ising(0.5),
    PriorSpec.ising(0.3),
    PriorSpec.bernoulli(0.2),
    PriorSpec.rademacher_bernoulli(0.1),
    PriorSpec.gauss_bernoulli(0.1),
    PriorSpec.two_balanced(0.25),
    PriorSpec.gaussian([0.5], [[2.0]]),
    PriorSpec.spherical(1),
]

MULTI_RANK_PRIORS = [
    PriorSpec.community(3),
    PriorSpec.gauss_bernoulli(0.2, rank=2, joint=True),
    PriorSpec.gauss_bernoulli(0.3, rank=2, joint=False),
    PriorSpec.gaussian([0.0, 1.0], [[1.0, 0.3], [0.3, 0.5]]),
]


def _log_z(prior, A, B):
    return PriorService.f_in(prior, A, B).log_z


class TestInputFunction:

    def test_ising_is_tanh(self):
        B = np.linspace(-3, 3, 7)[:, None]
        result = f_in(PriorSpec.ising(0.5), 0.7, B)
        np.testing.assert_allclose(result.mean[:, 0], np.tanh(B[:, 0]), atol=1e-12)
        np.testing.assert_allclose(result.covariance[:, 0, 0], 1 - np.tanh(B[:, 0]) ** 2, atol=1e-12)

    def test_gaussian_closed_form(self):
        prior = PriorSpec.gaussian([0.0], [[1.0]])
        result = f_in(prior, 1.5, [0.8])
        assert result.mean[0] == pytest.approx(0.8 / 2.5)
        assert result.covariance[0, 0] == pytest.approx(1 / 2.5)
        assert result.log_z == pytest.approx(0.5 * 0.8 ** 2 / 2.5 - 0.5 * math.log(2.5))

    def test_single_site_is_unbatched(self):
        result = f_in(PriorSpec.community(3), np.eye(3), np.zeros(3))
        assert result.mean.shape == (3,)
        assert result.covariance.shape == (3, 3)
        np.testing.assert_allclose(result.mean, np.full(3, 1 / 3))

    def test_per_site_fields_match_shared(self):
        prior = PriorSpec.gauss_bernoulli(0.3, rank=2, joint=False)
        A = np.array([[0.8, 0.1], [0.1, 0.5]])
        B = np.random.default_rng(0).standard_normal((4, 2))
        shared = f_in(prior, A, B)
        per_site = f_in(prior, np.broadcast_to(A, (4, 2, 2)), B)
        np.testing.assert_allclose(shared.mean, per_site.mean, atol=1e-12)
        np.testing.assert_allclose(shared.covariance, per_site.covariance, atol=1e-12)
        np.testing.assert_allclose(shared.log_z, per_site.log_z, atol=1e-12)

    def test_field_rank_mismatch(self):
        with pytest.raises(ShapeMismatch):
            f_in(PriorSpec.community(3), np.eye(3), np.zeros((2, 2)))

    @pytest.mark.parametrize('prior', RANK_ONE_PRIORS + MULTI_RANK_PRIORS,
                             ids=lambda p: f"{p.family.value}-{p.rank}")
    def test_mean_is_gradient_of_log_z(self, prior):
        r = prior.rank
        rng = np.random.default_rng(3)
        B = 0.7 * rng.standard_normal(r)
        A = 0.4 * np.eye(r)
        result = f_in(prior, A, B)
        h = 1e-6
        grad = np.empty(r)
        for k in range(r):
            step = np.zeros(r)
            step[k] = h
            grad[k] = (_log_z(prior, A, B + step) - _log_z(prior, A, B - step)) / (2 * h)
        np.testing.assert_allclose(result.mean, grad, atol=1e-6)

    @pytest.mark.parametrize('prior', RANK_ONE_PRIORS + MULTI_RANK_PRIORS,
                             ids=lambda p: f"{p.family.value}-{p.rank}")
    def test_covariance_is_gradient_of_mean(self, prior):
        r = prior.rank
        B = np.linspace(-0.5, 0.5, r)
        A = 0.3 * np.eye(r)
        result = f_in(prior, A, B)
        h = 1e-6
        jac = np.empty((r, r))
        for k in range(r):
            step = np.zeros(r)
            step[k] = h
            jac[:, k] = (f_in(prior, A, B + step).mean - f_in(prior, A, B - step).mean) / (2 * h)
        np.testing.assert_allclose(result.covariance, jac, atol=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(b=st.floats(-4, 4), a=st.floats(0, 3), rho=st.floats(0.02, 0.98))
    def test_rank_one_gradient_property(self, b, a, rho):
        for prior in (PriorSpec.rademacher_bernoulli(rho), PriorSpec.gauss_bernoulli(rho)):
            h = 1e-6
            grad = (_log_z(prior, a, [b + h]) - _log_z(prior, a, [b - h])) / (2 * h)
            assert f_in(prior, a, [b]).mean[0] == pytest.approx(grad, abs=1e-5)

    def test_zero_field_returns_prior_moments(self):
        for prior in RANK_ONE_PRIORS + MULTI_RANK_PRIORS:
            r = prior.rank
            mean, second = moments(prior)
            result = f_in(prior, np.zeros((r, r)), np.zeros(r))
            np.testing.assert_allclose(result.mean, mean, atol=1e-12)
            np.testing.assert_allclose(result.covariance, second - np.outer(mean, mean), atol=1e-12)


class TestMoments:

    def test_sparse_families(self):
        assert moments(PriorSpec.bernoulli(0.2))[1][0, 0] == pytest.approx(0.2)
        assert moments(PriorSpec.rademacher_bernoulli(0.1))[0][0] == pytest.approx(0.0)
        np.testing.assert_allclose(moments(PriorSpec.gauss_bernoulli(0.1, rank=3))[1], 0.1 * np.eye(3))

    def test_two_balanced_is_standardized(self):
        mean, second = moments(PriorSpec.two_balanced(0.2))
        assert mean[0] == pytest.approx(0.0, abs=1e-12)
        assert second[0, 0] == pytest.approx(1.0)

    def test_community_moments(self):
        mean, second = moments(PriorSpec.community(4))
        np.testing.assert_allclose(mean, np.full(4, 0.25))
        np.testing.assert_allclose(second, np.eye(4) / 4)

    def test_third_moment(self):
        rho = 0.2
        p = rho * (1 - rho)
        assert third_moment_scalar(PriorSpec.two_balanced(rho)) == pytest.approx((1 - 2 * rho) / math.sqrt(p))
        assert third_moment_scalar(PriorSpec.bernoulli(0.3)) == pytest.approx(0.3)
        assert third_moment_scalar(PriorSpec.rademacher_bernoulli(0.3)) == pytest.approx(0.0)

    def test_quadrature_reproduces_moments(self):
        for prior in RANK_ONE_PRIORS:
            points, weights = PriorService.quadrature(prior)
            mean, second = moments(prior)
            assert weights.sum() == pytest.approx(1.0)
            assert weights @ points == pytest.approx(mean[0], abs=1e-10)
            assert weights @ points ** 2 == pytest.approx(second[0, 0], rel=1e-10)


class TestSampling:

    def test_same_seed_same_sample(self):
        prior = PriorSpec.gauss_bernoulli(0.1)
        np.testing.assert_array_equal(sample(prior, 100, 7), sample(prior, 100, 7))

    def test_community_fractions(self):
        n, r = 10_000, 3
        x = sample(PriorSpec.community(r), n, 11)
        assert np.all(x.sum(axis=1) == 1)
        counts = x.sum(axis=0)
        band = 3 * math.sqrt(n * (1 / r) * (1 - 1 / r))
        assert np.all(np.abs(counts - n / r) < band)

    def test_joint_sparsity_shares_support(self):
        x = sample(PriorSpec.gauss_bernoulli(0.3, rank=3, joint=True), 2000, 5)
        active = np.abs(x) > 0
        assert np.all(active.all(axis=1) | ~active.any(axis=1))

    def test_sample_shape(self):
        for prior in RANK_ONE_PRIORS + MULTI_RANK_PRIORS:
            assert sample(prior, 17, 0).shape == (17, prior.rank)


class TestPriorSpec:

    def test_missing_rho(self):
        with pytest.raises(InvalidPrior, match='rho'):
            PriorSpec(PriorFamily.BERNOULLI)

    def test_rho_out_of_range(self):
        with pytest.raises(InvalidPrior):
            PriorSpec.bernoulli(1.5)
        with pytest.raises(InvalidPrior):
            PriorSpec.two_balanced(1.0)

    def test_scalar_family_rank(self):
        with pytest.raises(InvalidPrior):
            PriorSpec(PriorFamily.ISING, rank=2, rho=0.5)

    def test_community_needs_two_groups(self):
        with pytest.raises(InvalidPrior):
            PriorSpec.community(1)

    def test_config_round_trip(self):
        for prior in RANK_ONE_PRIORS + MULTI_RANK_PRIORS:
            assert PriorSpec.from_config(prior.to_config()) == prior
