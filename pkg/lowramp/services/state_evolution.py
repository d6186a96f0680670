"""
State evolution service
Order-parameter recursions, replica free energies and the SK replica-symmetric solution
"""
import logging
import math

import numpy as np

from config import Config
from lowramp.models import (
    BipartiteOrderParams, SEFixedPoint, SEMode, SEModel, SEOrderParams,
)
from lowramp.services.integration import IntegrationService
from lowramp.services.priors import PriorService
from lowramp.validation import ConfigError, NonPSDOrderParam, ShapeMismatch, log_call

logger = logging.getLogger(__name__)

PSD_TOL = -1e-10


def _psd_sqrt(matrix, name):
    root = IntegrationService.sqrtm_psd(matrix, clip=PSD_TOL)
    if root is None:
        raise NonPSDOrderParam(f"{name} has an eigenvalue below {PSD_TOL}: {np.linalg.eigvalsh(matrix).min():.3g}")
    return root


class _Moments:
    """E[f x0^T], E[f f^T], E[df/dB] and E[log Z] at one (A, B) law"""

    def __init__(self, m, q, sigma, log_z):
        self.m = m
        self.q = 0.5 * (q + q.T)
        self.sigma = 0.5 * (sigma + sigma.T)
        self.log_z = log_z

    def params(self):
        return SEOrderParams(self.m, self.q, self.sigma)


def _rank_one_moments(prior, prior0, a, b_coef, sqrt_q, integration, quenched):
    if quenched:
        points, weights = np.zeros(1), np.ones(1)
    else:
        points, weights = PriorService.quadrature(prior0, integration.gh_nodes)
    a = np.atleast_2d(a)

    def per_node(w_nodes):
        grid = b_coef * points[None, :] + sqrt_q * w_nodes[:, None]
        res = PriorService.f_in(prior, a, grid.reshape(-1, 1))
        f = res.mean[:, 0].reshape(grid.shape)
        cov = res.covariance[:, 0, 0].reshape(grid.shape)
        log_z = res.log_z.reshape(grid.shape)
        stacked = np.stack([f * points[None, :], f * f, cov, log_z], axis=-1)
        return np.tensordot(stacked, weights, axes=(1, 0))

    values = IntegrationService.gaussian_expectation(per_node, n=integration.gh_nodes, tol=integration.target_tol)
    m, q, sigma, log_z = (float(v) for v in values)
    return _Moments(np.array([[m]]), np.array([[q]]), np.array([[sigma]]), log_z)


def _multi_rank_moments(prior, prior0, a, b_coef, sqrt_q, integration, quenched):
    r = prior.rank
    r0 = b_coef.shape[1]
    if quenched:
        components = [(1.0, np.zeros(r0), np.zeros((r0, r0)))]
    else:
        components = PriorService.components(prior0)
    needs_z = any(np.any(scale) for _, _, scale in components)
    dim = r + (r0 if needs_z else 0)

    def per_point(block):
        w = block[:, :r]
        z = block[:, r:] if needs_z else None
        total = 0.0
        for weight, offset, scale in components:
            x0 = np.broadcast_to(offset, (block.shape[0], r0))
            if z is not None and np.any(scale):
                x0 = x0 + z @ scale.T
            res = PriorService.f_in(prior, a, x0 @ b_coef.T + w @ sqrt_q.T)
            k = block.shape[0]
            out = np.concatenate([
                (res.mean[:, :, None] * x0[:, None, :]).reshape(k, -1),
                (res.mean[:, :, None] * res.mean[:, None, :]).reshape(k, -1),
                res.covariance.reshape(k, -1),
                res.log_z[:, None],
            ], axis=1)
            total = total + weight * out
        return total

    mean, stderr = IntegrationService.qmc_expectation(per_point, dim, integration.mc_samples, integration.mc_seed)
    logger.debug(f"QMC state-evolution moments, max stderr {float(np.max(stderr)):.2e}")
    m = mean[:r * r0].reshape(r, r0)
    q = mean[r * r0:r * r0 + r * r].reshape(r, r)
    sigma = mean[r * r0 + r * r:r * r0 + 2 * r * r].reshape(r, r)
    return _Moments(m, q, sigma, float(mean[-1]))


def input_moments(prior, prior0, a, b_coef, sqrt_q, integration, quenched=False):
    """
    Expectations over x0 ~ prior0 and W ~ N(0, I) of f_in(A, b_coef x0 + sqrt_q W)

    Rank one uses adaptive Gauss-Hermite quadrature; higher ranks use
    scrambled Sobol points over W (and the Gaussian part of x0).
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b_coef = np.atleast_2d(np.asarray(b_coef, dtype=float))
    sqrt_q = np.atleast_2d(np.asarray(sqrt_q, dtype=float))
    if b_coef.shape[0] != prior.rank:
        raise ShapeMismatch(f"M has {b_coef.shape[0]} rows, prior rank is {prior.rank}")
    if prior.rank == 1 and b_coef.shape[1] == 1:
        return _rank_one_moments(prior, prior0, a, b_coef[0, 0], sqrt_q[0, 0], integration, quenched)
    return _multi_rank_moments(prior, prior0, a, b_coef, sqrt_q, integration, quenched)


def _fields(noise, params, scale=1.0):
    """(A, M/Delta_hat, sqrt(Q/Delta_tilde)) for one side, ``scale`` = alpha on the U side"""
    q = np.atleast_2d(params.q)
    a = scale * (q * noise.inv_delta_tilde - noise.r_bar * (q + np.atleast_2d(params.sigma)))
    b_coef = scale * noise.inv_delta_hat * np.atleast_2d(params.m)
    sqrt_q = math.sqrt(scale * noise.inv_delta_tilde) * _psd_sqrt(q, 'Q')
    return a, b_coef, sqrt_q


def _bayes_fields(noise, m, scale=1.0):
    m = np.atleast_2d(m)
    coef = scale / noise.delta
    return coef * m, coef * m, math.sqrt(coef) * _psd_sqrt(0.5 * (m + m.T), 'M')


class StateEvolutionService:
    """State evolution and replica free energies"""

    @staticmethod
    def se_step_general(model, params):
        """
        One step of the general state evolution

        Args:
            model (SEModel): Model in general or quenched-conventional mode
            params (SEOrderParams): Current (M, Q, Sigma)

        Returns:
            SEOrderParams: Next (M, Q, Sigma)
        """
        a, b_coef, sqrt_q = _fields(model.noise, params)
        moments = input_moments(model.prior, model.planted_prior, a, b_coef, sqrt_q,
                                model.integration, quenched=model.noise.quenched)
        return moments.params()

    @staticmethod
    def se_step_bayes(model, m):
        """One Bayes-optimal step with Q = M enforced on input; returns the full (M, Q, Sigma)"""
        if not model.noise.bayes_optimal:
            raise ConfigError("se_step_bayes needs Bayes-optimal noise parameters")
        a, b_coef, sqrt_q = _bayes_fields(model.noise, m)
        moments = input_moments(model.prior, model.planted_prior, a, b_coef, sqrt_q, model.integration)
        return moments.params()

    @staticmethod
    def step(model, params):
        if model.bipartite:
            return StateEvolutionService.se_bipartite_step(model, params)
        if model.mode is SEMode.BAYES_OPTIMAL:
            return StateEvolutionService.se_step_bayes(model, params.m)
        return StateEvolutionService.se_step_general(model, params)

    @staticmethod
    def se_bipartite_step(model, params):
        """
        U from V, then V from the updated U

        Args:
            model (SEModel): Bipartite model (``prior_v`` and ``alpha`` set)
            params (BipartiteOrderParams): Current order parameters of both sides

        Returns:
            BipartiteOrderParams: Updated order parameters
        """
        if not model.bipartite:
            raise ConfigError("se_bipartite_step needs a bipartite model")
        noise, alpha = model.noise, model.alpha
        if model.mode is SEMode.BAYES_OPTIMAL:
            a, b_coef, sqrt_q = _bayes_fields(noise, params.v.m, alpha)
        else:
            a, b_coef, sqrt_q = _fields(noise, params.v, alpha)
        u = input_moments(model.prior, model.planted_prior, a, b_coef, sqrt_q,
                          model.integration, quenched=noise.quenched).params()
        if model.mode is SEMode.BAYES_OPTIMAL:
            a, b_coef, sqrt_q = _bayes_fields(noise, u.m)
        else:
            a, b_coef, sqrt_q = _fields(noise, u)
        v = input_moments(model.prior_v, model.planted_prior_v, a, b_coef, sqrt_q,
                          model.integration, quenched=noise.quenched).params()
        return BipartiteOrderParams(u, v)

    @staticmethod
    def initial_params(model, informative=True):
        """Informative start at <x0 x0^T>, uninformative start at epsilon * I"""
        def side(prior, prior0):
            _, second = PriorService.moments(prior0)
            r = prior.rank
            if informative:
                m = second if prior.rank == prior0.rank else np.zeros((r, prior0.rank))
                return SEOrderParams(np.array(m), np.array(second), np.zeros((r, r)))
            eps = Config.SE_UNINFORMATIVE_INIT * np.eye(r, prior0.rank)
            return SEOrderParams(eps, Config.SE_UNINFORMATIVE_INIT * np.eye(r),
                                 PriorService.moments(prior)[1] - Config.SE_UNINFORMATIVE_INIT * np.eye(r))

        if model.bipartite:
            return BipartiteOrderParams(side(model.prior, model.planted_prior),
                                        side(model.prior_v, model.planted_prior_v))
        return side(model.prior, model.planted_prior)

    @staticmethod
    @log_call('state_evolution')
    def iterate(model, init=None, informative=True, damping=Config.SE_DAMPING,
                tol=Config.SE_TOL, max_iters=Config.SE_MAX_ITERS):
        """
        Damped fixed-point iteration of the state evolution

        Returns:
            SEFixedPoint: Order parameters, convergence flag, iterations and MSE
        """
        params = init if init is not None else StateEvolutionService.initial_params(model, informative)
        converged = False
        t = 0
        while t < max_iters:
            t += 1
            new = StateEvolutionService.step(model, params)
            diff = new.max_abs_diff(params)
            params = params.damped(new, damping)
            if diff < tol:
                converged = True
                break
        mse = StateEvolutionService.mse(model, params)
        logger.info(f"State evolution {model.mode.value}: {t} iterations, converged={converged}, mse={mse}")
        return SEFixedPoint(params, converged, t, mse)

    @staticmethod
    def bayes_fixed_point(model, informative=True, **kwargs):
        """Bayes-optimal fixed point reached from the informative or uninformative start"""
        if model.mode is not SEMode.BAYES_OPTIMAL:
            raise ConfigError("bayes_fixed_point needs a Bayes-optimal model")
        return StateEvolutionService.iterate(model, informative=informative, **kwargs)

    @staticmethod
    def mse(model, params):
        """Tr[<x0 x0^T> - 2M + Q]; Tr[<x0 x0^T> - M] in the Bayes-optimal mode; None without planting"""
        if model.mode is SEMode.QUENCHED_CONVENTIONAL:
            return None

        def side(prior0, p):
            _, second = PriorService.moments(prior0)
            if model.mode is SEMode.BAYES_OPTIMAL:
                return float(np.trace(second - p.m))
            return float(np.trace(second - 2 * p.m + p.q))

        if model.bipartite:
            return side(model.planted_prior, params.u) + side(model.planted_prior_v, params.v)
        return side(model.planted_prior, params)

    @staticmethod
    def replica_free_energy(model, params):
        """
        Replica-symmetric potential phi_RS at the given order parameters

        Symmetric general form:
        Tr(Q Q^T)/(4 Delta_tilde) - Tr(M M^T)/(2 Delta_hat)
        - R_bar Tr((Q + Sigma)^2)/4 + E log Z(A, B).
        Bayes-optimal form: E log Z(M/Delta, ...) - Tr(M M^T)/(4 Delta).
        """
        noise = model.noise
        if model.bipartite:
            return StateEvolutionService._bipartite_free_energy(model, params)
        if model.mode is SEMode.BAYES_OPTIMAL:
            m = np.atleast_2d(params.m if isinstance(params, SEOrderParams) else params)
            a, b_coef, sqrt_q = _bayes_fields(noise, m)
            moments = input_moments(model.prior, model.planted_prior, a, b_coef, sqrt_q, model.integration)
            return moments.log_z - float(np.trace(m @ m.T)) / (4 * noise.delta)
        q, m = np.atleast_2d(params.q), np.atleast_2d(params.m)
        second = q + np.atleast_2d(params.sigma)
        a, b_coef, sqrt_q = _fields(noise, params)
        moments = input_moments(model.prior, model.planted_prior, a, b_coef, sqrt_q,
                                model.integration, quenched=noise.quenched)
        return (float(np.trace(q @ q.T)) * noise.inv_delta_tilde / 4
                - float(np.trace(m @ m.T)) * noise.inv_delta_hat / 2
                - noise.r_bar * float(np.trace(second @ second.T)) / 4
                + moments.log_z)

    @staticmethod
    def _bipartite_free_energy(model, params):
        noise, alpha = model.noise, model.alpha
        pu, pv = params.u, params.v
        if model.mode is SEMode.BAYES_OPTIMAL:
            a, b_coef, sqrt_q = _bayes_fields(noise, pv.m, alpha)
            log_zu = input_moments(model.prior, model.planted_prior, a, b_coef, sqrt_q, model.integration).log_z
            a, b_coef, sqrt_q = _bayes_fields(noise, pu.m)
            log_zv = input_moments(model.prior_v, model.planted_prior_v, a, b_coef, sqrt_q, model.integration).log_z
            return log_zu + alpha * log_zv - alpha * float(np.trace(pv.m @ pu.m.T)) / (2 * noise.delta)
        a, b_coef, sqrt_q = _fields(noise, pv, alpha)
        log_zu = input_moments(model.prior, model.planted_prior, a, b_coef, sqrt_q,
                               model.integration, quenched=noise.quenched).log_z
        a, b_coef, sqrt_q = _fields(noise, pu)
        log_zv = input_moments(model.prior_v, model.planted_prior_v, a, b_coef, sqrt_q,
                               model.integration, quenched=noise.quenched).log_z
        second_u, second_v = pu.q + pu.sigma, pv.q + pv.sigma
        return (alpha * float(np.trace(pv.q @ pu.q.T)) * noise.inv_delta_tilde / 2
                - alpha * float(np.trace(pv.m @ pu.m.T)) * noise.inv_delta_hat
                - alpha * noise.r_bar * float(np.trace(second_v @ second_u.T)) / 2
                + log_zu + alpha * log_zv)

    @staticmethod
    def sk_state_evolution(J, q0=1.0, damping=1.0, tol=1e-12, max_iters=Config.SE_MAX_ITERS,
                           gh_nodes=Config.GH_NODES):
        """
        Replica-symmetric SK overlap: iterate q <- E_W[tanh(J sqrt(q) W)^2]

        Args:
            J (float): Coupling strength
            q0 (float): Starting overlap
            damping (float): Weight of the new value in each step

        Returns:
            float: Fixed-point overlap q
        """
        if not J > 0:
            raise ConfigError(f"J must be positive, got {J}")
        nodes, weights = IntegrationService.gauss_hermite(gh_nodes)
        q = float(q0)
        for _ in range(int(max_iters)):
            new = float(weights @ np.tanh(J * math.sqrt(max(q, 0.0)) * nodes) ** 2)
            diff = abs(new - q)
            q = damping * new + (1 - damping) * q
            if diff < tol:
                break
        return q

    @staticmethod
    def sk_free_energy(J, q, gh_nodes=Config.GH_NODES):
        """J^2 (1 - q)^2 / 4 + E_W[log cosh(J sqrt(q) W)]"""
        nodes, weights = IntegrationService.gauss_hermite(gh_nodes)
        y = J * math.sqrt(max(q, 0.0)) * nodes
        log_cosh = np.abs(y) + np.log1p(np.exp(-2 * np.abs(y))) - math.log(2)
        return J * J * (1 - q) ** 2 / 4 + float(weights @ log_cosh)


def se_step_general(model: SEModel, params: SEOrderParams):
    return StateEvolutionService.se_step_general(model, params)


def se_bipartite_step(model: SEModel, params: BipartiteOrderParams):
    return StateEvolutionService.se_bipartite_step(model, params)


def replica_free_energy(model: SEModel, params):
    return StateEvolutionService.replica_free_energy(model, params)


def sk_state_evolution(J, q0=1.0, **kwargs):
    return StateEvolutionService.sk_state_evolution(J, q0, **kwargs)


def sk_free_energy(J, q):
    return StateEvolutionService.sk_free_energy(J, q)
