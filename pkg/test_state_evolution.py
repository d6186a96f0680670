"""
State evolution tests
Closed-form maps, Nishimori closure, replica free energy and the SK solution
"""
import math

import numpy as np
import pytest

from lowramp.models import (
    BipartiteOrderParams, ChannelSpec, NoiseParams, PriorSpec, SEMode, SEModel, SEOrderParams,
)
from lowramp.services.channels import noise_params
from lowramp.services.priors import PriorService
from lowramp.services.state_evolution import (
    StateEvolutionService, replica_free_energy, se_bipartite_step, se_step_general, sk_free_energy,
    sk_state_evolution,
)
from lowramp.validation import ConfigError

GAUSSIAN = PriorSpec.gaussian([0.0], [[1.0]])

RANK_ONE = [
    PriorSpec.bernoulli(0.1),
    PriorSpec.rademacher_bernoulli(0.2),
    PriorSpec.gauss_bernoulli(0.1),
    PriorSpec.two_balanced(0.3),
    GAUSSIAN,
]


def _gaussian_phi(m, delta):
    x = m / delta
    return x / 2 - 0.5 * math.log1p(x) - m * m / (4 * delta)


class TestBayesStep:

    @pytest.mark.parametrize('m', [1e-4, 0.1, 0.5, 0.9])
    def test_gaussian_prior_map(self, m):
        delta = 0.3
        result = StateEvolutionService.se_step_bayes(SEModel.bayes(GAUSSIAN, delta), [[m]])
        assert result.m[0, 0] == pytest.approx(m / (delta + m), rel=1e-10)
        assert result.sigma[0, 0] == pytest.approx(delta / (delta + m), rel=1e-10)

    @pytest.mark.parametrize('prior', RANK_ONE, ids=lambda p: p.family.value)
    def test_nishimori_closure(self, prior):
        delta = 0.05
        model = SEModel.bayes(prior, delta)
        second = PriorService.moments(prior)[1]
        m = 0.5 * second
        for _ in range(100):
            params = StateEvolutionService.se_step_bayes(model, m)
            assert np.max(np.abs(params.q - params.m)) < 1e-8
            np.testing.assert_allclose(params.m + params.sigma, second, atol=1e-8)
            m = params.m

    def test_rank_two_gaussian_matrix_map(self):
        prior = PriorSpec.gaussian([0.0, 0.0], np.eye(2))
        delta = 0.5
        m = np.array([[0.6, 0.1], [0.1, 0.3]])
        result = StateEvolutionService.se_step_bayes(SEModel.bayes(prior, delta), m)
        x = m / delta
        expected = x @ np.linalg.inv(np.eye(2) + x)
        np.testing.assert_allclose(result.m, expected, atol=2e-3)

    def test_step_rejects_mismatched_noise(self):
        noise = NoiseParams(2.0, 1.0, 0.5)
        model = SEModel(GAUSSIAN, noise, SEMode.GENERAL)
        with pytest.raises(ConfigError):
            StateEvolutionService.se_step_bayes(model, [[0.1]])


class TestFixedPoints:

    @pytest.mark.parametrize('delta', [0.2, 0.6])
    def test_gaussian_fixed_point(self, delta):
        fixed = StateEvolutionService.bayes_fixed_point(SEModel.bayes(GAUSSIAN, delta), informative=True)
        assert fixed.converged
        assert fixed.params.m[0, 0] == pytest.approx(1 - delta, abs=1e-8)
        assert fixed.mse == pytest.approx(delta, abs=1e-8)

    def test_uninformative_start_stays_uninformative_above_delta_c(self):
        prior = PriorSpec.rademacher_bernoulli(0.5)
        fixed = StateEvolutionService.bayes_fixed_point(SEModel.bayes(prior, 0.3), informative=False)
        assert fixed.params.m[0, 0] < 1e-6
        assert fixed.mse == pytest.approx(0.5, abs=1e-6)

    @pytest.mark.parametrize('prior', RANK_ONE, ids=lambda p: p.family.value)
    def test_mse_bounds(self, prior):
        second = float(np.trace(PriorService.moments(prior)[1]))
        for informative in (True, False):
            fixed = StateEvolutionService.bayes_fixed_point(SEModel.bayes(prior, 0.02), informative=informative)
            assert -1e-9 <= fixed.mse <= second + 1e-9

    def test_general_mode_matches_bayes_on_matched_noise(self):
        delta = 0.1
        prior = PriorSpec.rademacher_bernoulli(0.4)
        general = SEModel(prior, NoiseParams(1 / delta, 1 / delta, 0.0, delta, False), SEMode.GENERAL)
        bayes = SEModel.bayes(prior, delta)
        a = StateEvolutionService.iterate(general, informative=True)
        b = StateEvolutionService.bayes_fixed_point(bayes, informative=True)
        assert a.params.m[0, 0] == pytest.approx(b.params.m[0, 0], abs=1e-7)
        assert a.params.q[0, 0] == pytest.approx(a.params.m[0, 0], abs=1e-7)

    def test_general_step_with_mismatched_gaussian_channel(self):
        noise = noise_params(ChannelSpec.gaussian(0.5, assumed=ChannelSpec.gaussian(0.25)))
        model = SEModel.for_noise(GAUSSIAN, noise)
        assert model.mode is SEMode.GENERAL
        params = SEOrderParams(np.array([[0.3]]), np.array([[0.4]]), np.array([[0.2]]))
        new = se_step_general(model, params)
        a = 0.4 * noise.inv_delta_tilde - noise.r_bar * 0.6
        b_coef = 0.3 * noise.inv_delta_hat
        var_b = b_coef ** 2 + 0.4 * noise.inv_delta_tilde
        assert new.m[0, 0] == pytest.approx(b_coef / (1 + a), rel=1e-9)
        assert new.q[0, 0] == pytest.approx(var_b / (1 + a) ** 2, rel=1e-9)
        assert new.sigma[0, 0] == pytest.approx(1 / (1 + a), rel=1e-9)

    def test_quenched_mode_reduces_to_sk(self):
        J = 1.5
        model = SEModel.for_noise(PriorSpec.ising(), noise_params(ChannelSpec.random_gaussian(J)))
        assert model.mode is SEMode.QUENCHED_CONVENTIONAL
        fixed = StateEvolutionService.iterate(model, informative=True)
        assert fixed.mse is None
        assert fixed.params.q[0, 0] == pytest.approx(sk_state_evolution(J), abs=1e-7)


class TestBipartite:

    def test_gaussian_step(self):
        delta, alpha = 0.5, 2.0
        model = SEModel.bayes(GAUSSIAN, delta, prior_v=GAUSSIAN, alpha=alpha)
        mv = 0.4
        params = BipartiteOrderParams(SEOrderParams.bayes([[0.2]], [[1.0]]), SEOrderParams.bayes([[mv]], [[1.0]]))
        new = se_bipartite_step(model, params)
        x_u = alpha * mv / delta
        mu = x_u / (1 + x_u)
        x_v = mu / delta
        assert new.u.m[0, 0] == pytest.approx(mu, rel=1e-10)
        assert new.v.m[0, 0] == pytest.approx(x_v / (1 + x_v), rel=1e-10)

    def test_needs_alpha(self):
        with pytest.raises(ConfigError):
            SEModel.bayes(GAUSSIAN, 0.5, prior_v=GAUSSIAN)

    def test_bipartite_mse_sums_sides(self):
        model = SEModel.bayes(GAUSSIAN, 0.5, prior_v=PriorSpec.gauss_bernoulli(0.2), alpha=1.0)
        fixed = StateEvolutionService.bayes_fixed_point(model, informative=True)
        expected = (1 - fixed.params.u.m[0, 0]) + (0.2 - fixed.params.v.m[0, 0])
        assert fixed.mse == pytest.approx(expected, abs=1e-12)


class TestReplicaFreeEnergy:

    @pytest.mark.parametrize('m', [0.05, 0.3, 0.8])
    def test_gaussian_closed_form(self, m):
        delta = 0.4
        value = replica_free_energy(SEModel.bayes(GAUSSIAN, delta), SEOrderParams.bayes([[m]], [[1.0]]))
        assert value == pytest.approx(_gaussian_phi(m, delta), abs=1e-9)

    @pytest.mark.parametrize('m', [0.02, 0.1, 0.3])
    def test_derivative_identity(self, m):
        delta = 0.1
        prior = PriorSpec.rademacher_bernoulli(0.4)
        model = SEModel.bayes(prior, delta)
        h = 1e-4
        numeric = (replica_free_energy(model, [[m + h]]) - replica_free_energy(model, [[m - h]])) / (2 * h)
        f = StateEvolutionService.se_step_bayes(model, [[m]]).m[0, 0]
        assert numeric == pytest.approx((f - m) / (2 * delta), abs=2e-5)

    def test_general_form_agrees_on_nishimori_line(self):
        delta, m = 0.2, 0.15
        prior = PriorSpec.rademacher_bernoulli(0.3)
        second = PriorService.moments(prior)[1]
        general = SEModel(prior, NoiseParams(1 / delta, 1 / delta, 0.0, delta, False), SEMode.GENERAL)
        params = SEOrderParams.bayes([[m]], second)
        assert replica_free_energy(general, params) == pytest.approx(
            replica_free_energy(SEModel.bayes(prior, delta), params), abs=1e-9)

    def test_stationary_at_fixed_point(self):
        prior, delta = PriorSpec.rademacher_bernoulli(0.4), 0.1
        model = SEModel.bayes(prior, delta)
        m = StateEvolutionService.bayes_fixed_point(model, informative=True).params.m[0, 0]
        h = 1e-4
        numeric = (replica_free_energy(model, [[m + h]]) - replica_free_energy(model, [[m - h]])) / (2 * h)
        assert m > 0.1
        assert abs(numeric) < 1e-5


class TestSherringtonKirkpatrick:

    @pytest.mark.parametrize('J', [0.5, 0.9, 0.999])
    def test_paramagnetic_below_one(self, J):
        assert sk_state_evolution(J) < 1e-6

    @pytest.mark.parametrize('J', [1.001, 1.5])
    def test_ordered_above_one(self, J):
        assert sk_state_evolution(J) > 1e-4

    def test_free_energy_at_zero_overlap(self):
        assert sk_free_energy(0.8, 0.0) == pytest.approx(0.16)

    def test_free_energy_stationary_at_solution(self):
        J = 1.5
        q = sk_state_evolution(J)
        h = 1e-5
        numeric = (sk_free_energy(J, q + h) - sk_free_energy(J, q - h)) / (2 * h)
        assert abs(numeric) < 1e-7

    def test_rejects_non_positive_coupling(self):
        with pytest.raises(ConfigError):
            sk_state_evolution(0.0)
