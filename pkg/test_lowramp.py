"""
Low-RAMP tests
Frozen-iteration oracles, TAP special cases, Bethe stationarity and run determinism
"""
import math

import numpy as np
import pytest

from config import TestingConfig, config as config_profiles
from lowramp import create_context
from lowramp.models import (
    AmpConfig, AmpVariant, ChannelSpec, InitMode, InstanceKind, PriorSpec, ProblemInstance, SEModel, Symmetry,
)
from lowramp.services.amp_service import AmpService, mean_field_run, run_bipartite, run_symmetric
from lowramp.services.instance_service import generate_quenched, generate_symmetric
from lowramp.services.state_evolution import StateEvolutionService
from lowramp.services.thresholds import thresholds
from lowramp.validation import ConfigError, ShapeMismatch

GAUSSIAN = PriorSpec.gaussian([0.0], [[1.0]])


def _frozen(max_iters, **kwargs):
    """Undamped settings that stop after exactly ``max_iters`` updates"""
    return AmpConfig(damping=1.0, tol=1e-300, max_iters=max_iters, variant=AmpVariant.FULL, **kwargs)


def _symmetric_gaussian_instance(n, delta, seed):
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((n, n))
    y = 0.3 * (y + y.T) / 2
    np.fill_diagonal(y, 0.0)
    S = y / delta
    R = S ** 2 - 1 / delta
    np.fill_diagonal(R, 0.0)
    return ProblemInstance(InstanceKind.SYMMETRIC, n, n, y[np.triu_indices(n, 1)], S, R,
                           ChannelSpec.gaussian(delta), (GAUSSIAN,), seed, x0=np.full((n, 1), 0.7))


class TestFrozenIterations:

    def test_first_two_iterations_match_hand_evaluation(self):
        n, delta = 4, 0.8
        instance = _symmetric_gaussian_instance(n, delta, 1)
        S, R = instance.s_matrix, instance.r_matrix
        S2 = S ** 2
        x0 = np.full(n, 0.7)

        b1 = S @ x0 / 2
        a1 = (S2 @ x0 ** 2 - R @ x0 ** 2) / n
        x1, s1 = b1 / (1 + a1), 1 / (1 + a1)
        # the reaction term multiplies the estimate of the previous iteration
        b2 = S @ x1 / 2 - (S2 @ s1) / n * x0
        a2 = (S2 @ x1 ** 2 - R @ (x1 ** 2 + s1)) / n
        x2, s2 = b2 / (1 + a2), 1 / (1 + a2)

        one = run_symmetric(instance, GAUSSIAN, _frozen(1, init=InitMode.PLANTED))
        np.testing.assert_allclose(one.state.x_hat[:, 0], x1, rtol=1e-12)
        np.testing.assert_allclose(one.state.sigma[:, 0, 0], s1, rtol=1e-12)

        two = run_symmetric(instance, GAUSSIAN, _frozen(2, init=InitMode.PLANTED))
        np.testing.assert_allclose(two.state.b[:, 0], b2, rtol=1e-12)
        np.testing.assert_allclose(two.state.x_hat[:, 0], x2, rtol=1e-12)
        np.testing.assert_allclose(two.state.sigma[:, 0, 0], s2, rtol=1e-12)
        np.testing.assert_allclose(two.state.x_hat_old[:, 0], x1, rtol=1e-12)

    def test_sk_tap_equations(self):
        n, beta, seed, scale = 50, 0.7, 3, 0.5
        channel = ChannelSpec.random_pm1(1.0, assumed=ChannelSpec.conventional(beta))
        instance = generate_quenched(channel, n, seed=seed)
        Y = instance.y_dense()
        x0 = scale * np.random.default_rng(0).standard_normal(n)

        x1 = np.tanh(beta / math.sqrt(n) * Y @ x0)
        x2 = np.tanh(beta / math.sqrt(n) * Y @ x1 - x0 * beta ** 2 / n * (Y ** 2 @ (1 - x1 ** 2)))

        result = run_symmetric(instance, PriorSpec.ising(0.5), _frozen(2, init_scale=scale, seed=0))
        np.testing.assert_allclose(result.state.x_hat[:, 0], x2, rtol=1e-10, atol=1e-12)

    def test_bipartite_update_order(self):
        n, m, delta = 3, 3, 0.6
        rng = np.random.default_rng(5)
        y = 0.2 * rng.standard_normal((n, m))
        S = y / delta
        R = S ** 2 - 1 / delta
        u0, v0 = np.full((n, 1), 0.4), np.full((m, 1), -0.9)
        instance = ProblemInstance(InstanceKind.BIPARTITE, n, m, y, S, R, ChannelSpec.gaussian(delta),
                                   (GAUSSIAN, GAUSSIAN), 0, u0=u0, v0=v0)
        S2 = S ** 2
        u, v = u0[:, 0], v0[:, 0]

        b_u = S @ v / math.sqrt(n)
        a_u = (S2 @ v ** 2 - R @ v ** 2) / n
        u1, su1 = b_u / (1 + a_u), 1 / (1 + a_u)
        # V sees the U estimate of the same iteration
        b_v = S.T @ u1 / math.sqrt(n) - (S2.T @ su1) / n * v
        a_v = (S2.T @ u1 ** 2 - R.T @ (u1 ** 2 + su1)) / n
        v1 = b_v / (1 + a_v)

        result = run_bipartite(instance, GAUSSIAN, GAUSSIAN, _frozen(1, init=InitMode.PLANTED))
        np.testing.assert_allclose(result.state_u.x_hat[:, 0], u1, rtol=1e-12)
        np.testing.assert_allclose(result.state_v.x_hat[:, 0], v1, rtol=1e-12)


def _bethe_gradient(instance, prior, result):
    """Central differences of the Bethe free energy in every A_i and B_i"""
    a, b = result.state.a.copy(), result.state.b.copy()

    def energy(a_, b_):
        return AmpService.bethe_from_fields(instance, prior, a_, b_, variant=AmpVariant.FULL)

    h = 1e-5
    gradient = []
    for i in range(instance.n):
        step_b = np.zeros_like(b)
        step_b[i, 0] = h
        gradient.append((energy(a, b + step_b) - energy(a, b - step_b)) / (2 * h))
        step_a = np.zeros_like(a)
        step_a[i, 0, 0] = h
        gradient.append((energy(a + step_a, b) - energy(a - step_a, b)) / (2 * h))
    return np.asarray(gradient)


def _converged_run(prior, delta, n, seed):
    instance = generate_symmetric(prior, ChannelSpec.gaussian(delta), n, seed)
    config = AmpConfig(damping=0.5, tol=1e-12, max_iters=5000, variant=AmpVariant.FULL, init=InitMode.PLANTED)
    return instance, run_symmetric(instance, prior, config)


class TestBetheFreeEnergy:

    @pytest.mark.parametrize('prior, delta', [
        (PriorSpec.ising(), 0.5),
        (GAUSSIAN, 0.4),
        (PriorSpec.gauss_bernoulli(0.3), 0.05),
    ], ids=['ising', 'gaussian', 'gauss_bernoulli'])
    def test_stationary_at_fixed_point(self, prior, delta):
        instance, result = _converged_run(prior, delta, 60, 2)
        assert result.converged
        assert np.max(np.abs(_bethe_gradient(instance, prior, result))) < 1e-5

    @pytest.mark.slow
    @pytest.mark.parametrize('prior, delta', [
        (PriorSpec.ising(), 0.3),
        (PriorSpec.ising(), 0.5),
        (PriorSpec.ising(), 0.8),
        (GAUSSIAN, 0.2),
        (GAUSSIAN, 0.4),
        (GAUSSIAN, 0.7),
        (PriorSpec.gauss_bernoulli(0.3), 0.02),
        (PriorSpec.gauss_bernoulli(0.3), 0.04),
        (PriorSpec.gauss_bernoulli(0.3), 0.06),
    ])
    def test_stationary_at_fixed_point_large_system(self, prior, delta):
        instance, result = _converged_run(prior, delta, 500, 21)
        assert result.converged
        assert np.max(np.abs(_bethe_gradient(instance, prior, result))) < 1e-5

    def test_free_energy_from_result(self):
        prior = PriorSpec.rademacher_bernoulli(0.5)
        instance = generate_symmetric(prior, ChannelSpec.gaussian(0.1), 40, 8)
        result = run_symmetric(instance, prior, AmpConfig(variant=AmpVariant.FULL, track_free_energy=True,
                                                          init=InitMode.PLANTED))
        value = AmpService.bethe_free_energy(instance, prior, result)
        assert value == pytest.approx(result.trace[-1].free_energy)


class TestRuns:

    def test_seed_determinism(self):
        prior = PriorSpec.gauss_bernoulli(0.2)
        instance = generate_symmetric(prior, ChannelSpec.gaussian(0.02), 80, 4)
        config = AmpConfig(seed=9, max_iters=50, variant=AmpVariant.SELF_AVERAGED)
        first, second = run_symmetric(instance, prior, config), run_symmetric(instance, prior, config)
        np.testing.assert_array_equal(first.state.x_hat, second.state.x_hat)
        assert [rec.conv for rec in first.trace] == [rec.conv for rec in second.trace]

    def test_sk_paramagnet(self):
        instance = generate_quenched(ChannelSpec.random_gaussian(0.5), 2000, seed=1)
        result = run_symmetric(instance, PriorSpec.ising(), AmpConfig(variant=AmpVariant.SELF_AVERAGED))
        assert result.converged
        assert abs(float(np.mean(result.state.x_hat))) < 0.02

    def test_amp_matches_state_evolution(self):
        prior, delta = PriorSpec.gauss_bernoulli(0.1), 0.005
        instance = generate_symmetric(prior, ChannelSpec.gaussian(delta), 1500, 12)
        result = run_symmetric(instance, prior, AmpConfig(init=InitMode.PLANTED, max_iters=300))
        predicted = StateEvolutionService.bayes_fixed_point(SEModel.bayes(prior, delta), informative=True).mse
        assert result.trace[-1].mse == pytest.approx(predicted, abs=0.01)

    def test_bayes_variant_uses_fisher_delta(self):
        prior = PriorSpec.rademacher_bernoulli(0.5)
        instance = generate_symmetric(prior, ChannelSpec.gaussian(0.1), 300, 6)
        result = run_symmetric(instance, prior, AmpConfig(variant=AmpVariant.BAYES_OPTIMAL, init=InitMode.PLANTED))
        assert result.state.a.shape == (1, 1)
        assert result.trace[-1].mse < 0.5

    def test_mean_field_has_no_quadratic_field_for_conventional_channel(self):
        instance = generate_quenched(ChannelSpec.random_gaussian(0.5), 60, seed=2)
        result = mean_field_run(instance, PriorSpec.ising(), AmpConfig(variant=AmpVariant.FULL, max_iters=20))
        np.testing.assert_allclose(result.state.a, 0.0, atol=1e-12)

    def test_planted_init_needs_planted_instance(self):
        instance = generate_quenched(ChannelSpec.random_gaussian(1.0), 20, seed=0)
        with pytest.raises(ConfigError):
            run_symmetric(instance, PriorSpec.ising(), AmpConfig(init=InitMode.PLANTED))

    def test_bipartite_instance_rejected(self):
        instance = generate_quenched(ChannelSpec.random_gaussian(1.0), 10, 12, seed=0)
        with pytest.raises(ShapeMismatch):
            run_symmetric(instance, PriorSpec.ising(), AmpConfig())

    def test_zero_init_forbidden(self):
        with pytest.raises(ConfigError):
            AmpConfig(init_scale=0.0)


class TestAmpConfigDefaults:

    class _SlowProfile(TestingConfig):
        DAMPING = 0.3
        MAX_ITERS = 77

    def test_from_config(self):
        config = AmpConfig.from_config(self._SlowProfile, tol=1e-6)
        assert (config.damping, config.max_iters, config.tol) == (0.3, 77, 1e-6)

    def test_active_profile_reaches_defaults(self, monkeypatch):
        monkeypatch.setitem(config_profiles, 'slow', self._SlowProfile)
        try:
            create_context('slow')
            assert AmpConfig().damping == 0.3
            assert AmpConfig.default_for(40).max_iters == 77
            assert AmpConfig(damping=0.9).damping == 0.9
        finally:
            create_context('testing')
        assert AmpConfig().damping == TestingConfig.DAMPING


@pytest.mark.slow
@pytest.mark.parametrize('init', [InitMode.RANDOM, InitMode.PLANTED])
def test_amp_matches_state_evolution_across_deltas(init):
    prior = PriorSpec.gauss_bernoulli(0.1)
    reference = thresholds('gauss_bernoulli', 0.1)
    spinodals = [t for t in (reference.delta_alg, reference.delta_dyn) if t is not None]
    checked = 0
    for delta in np.geomspace(1e-3, 5e-2, 20):
        if any(abs(delta - t) <= 0.05 * t for t in spinodals):
            continue
        instance = generate_symmetric(prior, ChannelSpec.gaussian(delta), 20000, 7)
        config = AmpConfig(init=init, max_iters=500, mse_symmetry=Symmetry.SIGN)
        result = run_symmetric(instance, prior, config)
        model = SEModel.bayes(prior, delta)
        predicted = StateEvolutionService.bayes_fixed_point(model, informative=init is InitMode.PLANTED).mse
        assert result.trace[-1].mse == pytest.approx(predicted, abs=0.01), f"delta={delta}"
        checked += 1
    assert checked >= 16
