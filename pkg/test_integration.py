"""
Integration service tests
Gauss-Hermite rules at every size the node doubling reaches, and non-finite results
"""
import numpy as np
import pytest

from lowramp.services.integration import MAX_GH_NODES, IntegrationService
from lowramp.validation import NonConvergentIntegral


class TestGaussHermite:

    @pytest.mark.parametrize('n', [21, 201, 401, MAX_GH_NODES])
    def test_rule_is_finite_and_normalized(self, n):
        nodes, weights = IntegrationService.gauss_hermite(n)
        assert np.all(np.isfinite(nodes))
        assert np.all(np.isfinite(weights))
        assert np.all(weights > 0)
        assert weights.sum() == pytest.approx(1.0, abs=1e-10)
        assert weights @ nodes ** 2 == pytest.approx(1.0, abs=1e-10)

    def test_second_moment(self):
        assert IntegrationService.gaussian_expectation(lambda w: w ** 2) == pytest.approx(1.0, abs=1e-10)

    def test_fourth_moment_with_trailing_axis(self):
        values = IntegrationService.gaussian_expectation(lambda w: np.stack([w ** 2, w ** 4], axis=1))
        np.testing.assert_allclose(values, [1.0, 3.0], atol=1e-9)

    def test_smooth_nonpolynomial(self):
        # E[exp(aW)] = exp(a^2 / 2)
        value = IntegrationService.gaussian_expectation(lambda w: np.exp(0.7 * w))
        assert value == pytest.approx(np.exp(0.245), rel=1e-10)

    def test_tanh_is_finite(self):
        value = IntegrationService.gaussian_expectation(lambda w: np.tanh(3 + 2 * w))
        assert np.isfinite(value)
        assert 0.5 < value < 1.0

    def test_non_finite_integrand_raises(self):
        with pytest.raises(NonConvergentIntegral):
            IntegrationService.gaussian_expectation(lambda w: np.full_like(w, np.nan))
