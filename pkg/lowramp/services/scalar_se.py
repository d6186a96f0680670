"""
Scalar state-evolution service
Closed-form Bayes-optimal maps m -> f(m / Delta) for the rank-1, community and jointly-sparse models
"""
import logging
import math

import numpy as np
from scipy.integrate import quad
from scipy.special import expit, gammaln, logsumexp
from scipy.stats import chi2

from config import Config
from lowramp.models import PriorSpec
from lowramp.services.integration import IntegrationService
from lowramp.services.priors import PriorService
from lowramp.validation import (
    ConfigError, RankUnsupported, UnsupportedValue, ValidationService,
)

logger = logging.getLogger(__name__)

RANK_ONE_TAGS = ('bernoulli', 'rademacher_bernoulli', 'gauss_bernoulli', 'two_balanced')
MODEL_TAGS = RANK_ONE_TAGS + ('community', 'jointly_sparse')

LAPLACE_S_POINTS = 4000
LAPLACE_U_POINTS = 2001
LAPLACE_U_RANGE = 10.0
CHI2_TAIL = 1e-14


def _logit(rho):
    return math.log(rho) - math.log1p(-rho)


def _log_cosh(y):
    return np.logaddexp(y, -y) - math.log(2)


def _gaussian_average(integrand, x, gh_nodes, tol):
    """E_W[integrand(W, x)] for every x; integrand maps (G, 1) x (1, n) to (G, n)"""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    values = IntegrationService.gaussian_expectation(
        lambda w: integrand(w[:, None], x[None, :]), n=gh_nodes, tol=tol)
    return np.asarray(values)


def _bernoulli(rho, x, gh_nodes, tol):
    lam = _logit(rho)
    return rho * _gaussian_average(lambda w, x: expit(lam + x / 2 + np.sqrt(x) * w), x, gh_nodes, tol)


def _rademacher_bernoulli(rho, x, gh_nodes, tol):
    log_rho, log_rest = math.log(rho), math.log1p(-rho)

    def integrand(w, x):
        y = x + np.sqrt(x) * w
        return np.tanh(y) * expit(log_rho - (log_rest + x / 2 - _log_cosh(y)))

    return rho * _gaussian_average(integrand, x, gh_nodes, tol)


def _gauss_bernoulli(rho, x, gh_nodes, tol):
    lam = _logit(rho)

    def integrand(w, x):
        return w * w * expit(lam + x * w * w / 2 - 0.5 * np.log1p(x))

    x = np.atleast_1d(np.asarray(x, dtype=float))
    return rho * x / (1 + x) * _gaussian_average(integrand, x, gh_nodes, tol)


def _two_balanced(rho, x, gh_nodes, tol):
    lam = _logit(rho)
    p = rho * (1 - rho)

    def integrand(w, x):
        shift = np.sqrt(x / p) * w
        return expit(lam + x / (2 * p) + shift) - expit(lam - x / (2 * p) + shift)

    return _gaussian_average(integrand, x, gh_nodes, tol)


_CLOSED_FORMS = {
    'bernoulli': _bernoulli,
    'rademacher_bernoulli': _rademacher_bernoulli,
    'gauss_bernoulli': _gauss_bernoulli,
    'two_balanced': _two_balanced,
}


def _softmax_first(block, a, sigma):
    logits = sigma * block
    logits[:, 0] += a
    return np.exp(logits[:, 0] - logsumexp(logits, axis=1))


class ScalarSEService:
    """Scalar Bayes-optimal state-evolution functions"""

    @staticmethod
    def prior_for(tag, rho=None, rank=1):
        """The prior whose Bayes-optimal map the tag denotes"""
        if tag == 'bernoulli':
            return PriorSpec.bernoulli(rho)
        if tag == 'rademacher_bernoulli':
            return PriorSpec.rademacher_bernoulli(rho)
        if tag == 'gauss_bernoulli':
            return PriorSpec.gauss_bernoulli(rho)
        if tag == 'two_balanced':
            return PriorSpec.two_balanced(rho)
        if tag == 'jointly_sparse':
            return PriorSpec.gauss_bernoulli(rho, rank=rank, joint=True)
        if tag == 'community':
            return PriorSpec.community(rank)
        raise UnsupportedValue(f"Unknown model tag '{tag}', expected one of {', '.join(MODEL_TAGS)}")

    @staticmethod
    def se_scalar_bayes(tag, rho, x, gh_nodes=Config.GH_NODES, tol=Config.INTEGRATION_TOL):
        """
        Bayes-optimal scalar map f so that m' = f(m / Delta)

        Args:
            tag (str): One of bernoulli, rademacher_bernoulli, gauss_bernoulli, two_balanced
            rho (float): Sparsity or group fraction
            x: Scalar or array of signal-to-noise values m / Delta

        Returns:
            Same shape as ``x``
        """
        if tag not in _CLOSED_FORMS:
            raise UnsupportedValue(f"No rank-1 closed form for '{tag}'")
        ValidationService.require(ValidationService.validate_probability(rho, allow_one=False))
        x_arr = np.asarray(x, dtype=float)
        if np.any(x_arr < 0):
            raise ConfigError("Scalar state evolution needs x >= 0")
        values = _CLOSED_FORMS[tag](rho, x_arr.ravel(), gh_nodes, tol)
        values = np.maximum(values, 0.0)
        return float(values[0]) if x_arr.ndim == 0 else values.reshape(x_arr.shape)

    @staticmethod
    def community_map(r, x, method='qmc', samples=Config.MC_SAMPLES, seed=Config.MC_SEED):
        """
        M_r(x) = (r E[softmax_1] - 1) / (r - 1)

        The softmax has logits x/r + sqrt(x/r) u_1 and sqrt(x/r) u_k for k > 1
        with u ~ N(0, I_r). ``method`` is 'qmc' (scrambled Sobol points,
        antithetic) or 'laplace' (the 1-D representation
        1/sum_k e^{l_k} = int_0^inf exp(-t sum_k e^{l_k}) dt).
        """
        ValidationService.require(ValidationService.validate_rank(r, minimum=2))
        x_arr = np.atleast_1d(np.asarray(x, dtype=float))
        if np.any(x_arr < 0):
            raise ConfigError("Community map needs x >= 0")
        if method == 'laplace':
            first = np.array([ScalarSEService._softmax_laplace(r, xi) for xi in x_arr])
        elif method == 'qmc':
            first = np.array([ScalarSEService._softmax_qmc(r, xi, samples, seed) for xi in x_arr])
        else:
            raise UnsupportedValue(f"Unknown community integration method '{method}'")
        values = np.clip((r * first - 1) / (r - 1), 0.0, 1.0)
        return float(values[0]) if np.ndim(x) == 0 else values.reshape(np.shape(x))

    @staticmethod
    def _softmax_qmc(r, x, samples, seed):
        if x == 0:
            return 1.0 / r
        a, sigma = x / r, math.sqrt(x / r)
        mean, stderr = IntegrationService.qmc_expectation(
            lambda block: _softmax_first(block, a, sigma), r, samples, seed)
        logger.debug(f"Community QMC r={r} x={x:.6g}: {float(mean):.6g} +- {float(stderr):.1e}")
        return float(mean)

    @staticmethod
    def _softmax_laplace(r, x, chunk=500):
        if x == 0:
            return 1.0 / r
        a, sigma = x / r, math.sqrt(x / r)
        u = np.linspace(-LAPLACE_U_RANGE, LAPLACE_U_RANGE, LAPLACE_U_POINTS)
        log_wu = -0.5 * u * u
        log_wu -= logsumexp(log_wu)
        s = np.linspace(-(a + LAPLACE_U_RANGE * sigma) - 25.0, LAPLACE_U_RANGE * sigma + 25.0, LAPLACE_S_POINTS)
        exponent = np.exp(sigma * u)[None, :]
        log_integrand = np.empty_like(s)
        for start in range(0, s.size, chunk):
            block = s[start:start + chunk]
            t = np.exp(block)[:, None]
            log_g = logsumexp(log_wu[None, :] - t * exponent, axis=1)
            log_g1 = logsumexp(log_wu[None, :] + a + sigma * u[None, :] - t * np.exp(a) * exponent, axis=1)
            log_integrand[start:start + chunk] = log_g1 + (r - 1) * log_g + block
        log_trap = np.full(s.shape, math.log(s[1] - s[0]))
        log_trap[[0, -1]] -= math.log(2)
        return float(np.exp(logsumexp(log_integrand + log_trap)))

    @staticmethod
    def se_community(r, b, delta, method='qmc', **kwargs):
        """One community-detection step b' = M_r(b / Delta)"""
        if not 0 <= b <= 1:
            raise ConfigError(f"b must lie in [0, 1], got {b}")
        ValidationService.require(ValidationService.validate_positive(delta, 'delta'))
        return ScalarSEService.community_map(r, b / delta, method=method, **kwargs)

    @staticmethod
    def se_jointly_sparse(rho, r, x):
        """
        Jointly-sparse PCA map rho x/(1+x) E_{t ~ chi2(r+2)}[rho_hat(t)]

        rho_hat is the posterior probability that the row is active.
        """
        ValidationService.require(ValidationService.validate_probability(rho))
        ValidationService.require(ValidationService.validate_rank(r))
        x_arr = np.atleast_1d(np.asarray(x, dtype=float))
        if np.any(x_arr < 0):
            raise ConfigError("Jointly-sparse map needs x >= 0")
        dof = r + 2
        lo, hi = chi2.ppf(CHI2_TAIL, dof), chi2.isf(CHI2_TAIL, dof)
        log_norm = -0.5 * dof * math.log(2) - float(gammaln(dof / 2))
        odds = math.log1p(-rho) - math.log(rho) if rho < 1 else -math.inf
        out = np.empty_like(x_arr)
        for i, xi in enumerate(x_arr):
            if xi == 0:
                out[i] = 0.0
                continue
            shift = odds + 0.5 * r * math.log1p(xi)

            def integrand(t):
                return math.exp((dof / 2 - 1) * math.log(t) - t / 2 + log_norm) * expit(xi * t / 2 - shift)

            value, _ = quad(integrand, lo, hi, epsabs=1e-13, epsrel=1e-11, limit=200)
            out[i] = rho * xi / (1 + xi) * value
        return float(out[0]) if np.ndim(x) == 0 else out.reshape(np.shape(x))

    @staticmethod
    def f_se(tag, x, rho=None, rank=None, community_method='laplace'):
        """Dispatch over every tag, ``x`` being m / Delta"""
        if tag in _CLOSED_FORMS:
            return ScalarSEService.se_scalar_bayes(tag, rho, x)
        if tag == 'community':
            return ScalarSEService.community_map(rank, x, method=community_method)
        if tag == 'jointly_sparse':
            return ScalarSEService.se_jointly_sparse(rho, rank, x)
        raise UnsupportedValue(f"Unknown model tag '{tag}', expected one of {', '.join(MODEL_TAGS)}")

    @staticmethod
    def second_order_expansion(prior, m, delta):
        """
        <x^2>^2 m/Delta + (<x^3>^2/2 - <x^2>^3)(m/Delta)^2

        Second-order Bayes-optimal map around the uniform fixed point of a
        zero-mean rank-1 prior.
        """
        if prior.rank != 1:
            raise RankUnsupported("The second-order expansion is defined for rank 1")
        if not PriorService.is_zero_mean(prior):
            raise UnsupportedValue("The expansion around m = 0 needs a zero-mean prior")
        second = float(PriorService.moments(prior)[1][0, 0])
        third = PriorService.third_moment_scalar(prior)
        x = m / delta
        return second ** 2 * x + (third ** 2 / 2 - second ** 3) * x * x


def se_scalar_bayes(tag, rho, x):
    return ScalarSEService.se_scalar_bayes(tag, rho, x)


def se_community(r, b, delta, method='qmc'):
    return ScalarSEService.se_community(r, b, delta, method)


def se_jointly_sparse(rho, r, x):
    return ScalarSEService.se_jointly_sparse(rho, r, x)


def second_order_expansion(prior, m, delta):
    return ScalarSEService.second_order_expansion(prior, m, delta)
