"""
Low-RAMP service
Symmetric and bipartite message passing, the mean-field baseline and Bethe free energies
"""
from dataclasses import dataclass
import logging
import math
from typing import Optional

import numpy as np

from lowramp.models import (
    AmpConfig, AmpResult, AmpState, AmpVariant, InitMode, InstanceKind, TraceRecord,
)
from lowramp.services.channels import ChannelService
from lowramp.services.instance_service import InstanceService
from lowramp.services.priors import PriorService
from lowramp.validation import (
    ConfigError, DivergedEstimates, NonConvergentIntegral, ShapeMismatch, UnsupportedValue, log_call,
)

logger = logging.getLogger(__name__)

DIVERGENCE_NORM = 1e8
ADAPTIVE_GROWTH = 1.1


@dataclass
class Couplings:
    """Score matrices of one block (target rows x source columns) and the variant's noise coefficients"""
    s: np.ndarray
    s2: Optional[np.ndarray]
    r: Optional[np.ndarray]
    inv_delta_tilde: float
    r_bar: float
    variant: AmpVariant
    n: int

    @property
    def transposed(self):
        return Couplings(self.s.T, None if self.s2 is None else self.s2.T,
                         None if self.r is None else self.r.T,
                         self.inv_delta_tilde, self.r_bar, self.variant, self.n)


def _outer(x_hat):
    return x_hat[:, :, None] * x_hat[:, None, :]


def _flat(blocks):
    return blocks.reshape(blocks.shape[0], -1)


def build_couplings(instance, variant, mean_field=False):
    """
    Precompute what a variant needs from an instance

    Full and mean-field variants keep S^2 and R; self-averaged keeps the
    empirical 1/Delta_tilde and R_bar; Bayes-optimal uses the Fisher Delta.
    """
    S = instance.s_matrix
    n = instance.n
    pairs = n * n if instance.kind is InstanceKind.SYMMETRIC else n * instance.m
    if mean_field or variant is AmpVariant.FULL:
        s2 = S * S
        return Couplings(S, s2, instance.r_matrix, float(s2.sum() / pairs),
                         float(instance.r_matrix.sum() / pairs), AmpVariant.FULL, n)
    if variant is AmpVariant.SELF_AVERAGED:
        inv_dt = float(np.einsum('ij,ij->', S, S) / pairs)
        return Couplings(S, None, None, inv_dt, float(instance.r_matrix.sum() / pairs), variant, n)
    if instance.channel.assumed is not None:
        raise UnsupportedValue("The Bayes-optimal variant needs the assumed channel to be the generating one")
    delta = ChannelService.fisher_delta(instance.channel.generating)
    if delta is None:
        raise ConfigError(f"Channel {instance.channel.family.value} has no Fisher Delta for the Bayes-optimal variant")
    return Couplings(S, None, None, 1.0 / delta, 0.0, variant, n)


def compute_fields(couplings, src_hat, src_sigma, onsager_hat, mean_field=False):
    """
    New (B, A) for the target block from the source estimators

    ``onsager_hat`` is the target estimate the reaction term multiplies.
    A is per-site (n, r, r) for full and mean-field updates, shared (r, r) otherwise.
    """
    n = couplings.n
    r = src_hat.shape[1]
    outer = _outer(src_hat)
    b = couplings.s @ src_hat / math.sqrt(n)
    if mean_field:
        second = _flat(outer + src_sigma)
        a = ((couplings.s2 - couplings.r) @ second).reshape(-1, r, r) / n
        return b, a
    if couplings.variant is AmpVariant.FULL:
        reaction = (couplings.s2 @ _flat(src_sigma)).reshape(-1, r, r) / n
        b = b - np.einsum('nij,nj->ni', reaction, onsager_hat)
        a = (couplings.s2 @ _flat(outer) - couplings.r @ _flat(outer + src_sigma)).reshape(-1, r, r) / n
        return b, a
    sigma_tot = src_sigma.sum(axis=0)
    outer_tot = outer.sum(axis=0)
    b = b - (couplings.inv_delta_tilde / n) * onsager_hat @ sigma_tot
    a = (couplings.inv_delta_tilde * outer_tot - couplings.r_bar * (outer_tot + sigma_tot)) / n
    return b, a


def _initial_estimate(config, planted, n, rank, rng):
    if config.init is InitMode.PLANTED:
        if planted is None:
            raise ConfigError("Planted initialization needs a planted instance")
        planted = np.asarray(planted, dtype=float)
        if planted.shape != (n, rank):
            raise ShapeMismatch(f"Planted signal has shape {planted.shape}, expected {(n, rank)}")
        return planted.copy()
    return config.init_scale * rng.standard_normal((n, rank))


def _apply_damping(state, b_new, a_new):
    lam = state.damping
    state.b_old, state.a_old = state.b, state.a
    state.b = lam * b_new + (1 - lam) * state.b_old
    state.a = lam * a_new + (1 - lam) * state.a_old


def _update_estimates(state, prior, t):
    try:
        result = PriorService.f_in(prior, state.a, state.b)
    except NonConvergentIntegral as e:
        raise DivergedEstimates(f"Input function diverged at iteration {t}: {e}")
    state.x_hat_old = state.x_hat
    state.x_hat = result.mean
    state.sigma = result.covariance
    norms = np.linalg.norm(state.x_hat, axis=1)
    if not np.all(np.isfinite(norms)) or norms.max(initial=0.0) > DIVERGENCE_NORM:
        raise DivergedEstimates(f"Estimates diverged at iteration {t}")
    return float(np.mean(np.linalg.norm(state.x_hat - state.x_hat_old, axis=1)))


class _DampingSchedule:
    """Halve the damping after two consecutive increases of conv, grow it back by 10% otherwise"""

    def __init__(self, initial, adaptive):
        self.initial = initial
        self.adaptive = adaptive
        self.previous = math.inf
        self.increases = 0

    def next(self, damping, conv):
        if not self.adaptive:
            return damping
        if conv > self.previous:
            self.increases += 1
        else:
            self.increases = 0
        self.previous = conv
        if self.increases >= 2:
            self.increases = 0
            return damping / 2
        if self.increases == 0:
            return min(damping * ADAPTIVE_GROWTH, self.initial)
        return damping


def _site_terms(prior, a, b):
    """sum_i log Z_i - B_i.x_i + Tr[A_i (x_i x_i^T + sigma_i)] / 2, plus the estimators"""
    result = PriorService.f_in(prior, a, b)
    x_hat, sigma = result.mean, result.covariance
    second = _outer(x_hat) + sigma
    a = np.asarray(a, dtype=float)
    if a.ndim == 2:
        trace = np.einsum('ij,nij->', a, second)
    else:
        trace = np.einsum('nij,nij->', a, second)
    value = float(np.sum(result.log_z) - np.sum(b * x_hat) + 0.5 * trace)
    return value, x_hat, sigma


class AmpService:
    """Service running Low-RAMP and evaluating its free energies"""

    @staticmethod
    @log_call('run_symmetric')
    def run_symmetric(instance, prior, config=None):
        """
        Low-RAMP on a symmetric instance

        Args:
            instance (ProblemInstance): Symmetric instance with S and R
            prior (PriorSpec): Prior used by the input function
            config (AmpConfig): Iteration settings (defaults chosen from N)

        Returns:
            AmpResult: Final state, convergence flag and per-iteration trace
        """
        if instance.kind is not InstanceKind.SYMMETRIC:
            raise ShapeMismatch("run_symmetric needs a symmetric instance")
        config = config or AmpConfig.default_for(instance.n)
        return AmpService._run_symmetric(instance, prior, config, mean_field=False)

    @staticmethod
    @log_call('mean_field_run')
    def mean_field_run(instance, prior, config=None):
        """Naive mean-field iteration: no reaction term, A from (S^2 - R)"""
        if instance.kind is not InstanceKind.SYMMETRIC:
            raise ShapeMismatch("mean_field_run needs a symmetric instance")
        config = config or AmpConfig(variant=AmpVariant.FULL)
        return AmpService._run_symmetric(instance, prior, config, mean_field=True)

    @staticmethod
    def _run_symmetric(instance, prior, config, mean_field):
        n, r = instance.n, prior.rank
        couplings = build_couplings(instance, config.variant, mean_field)
        shared = not mean_field and couplings.variant is not AmpVariant.FULL
        rng = np.random.default_rng(config.seed)
        state = AmpState.initial(_initial_estimate(config, instance.x0, n, r, rng), r, config.damping, shared)
        schedule = _DampingSchedule(config.damping, config.adaptive_damping)
        trace = []
        label = 'mean-field' if mean_field else couplings.variant.value

        while state.conv * state.damping > config.tol and state.t < config.max_iters:
            state.t += 1
            b_new, a_new = compute_fields(couplings, state.x_hat, state.sigma, state.x_hat_old, mean_field)
            _apply_damping(state, b_new, a_new)
            state.conv = _update_estimates(state, prior, state.t)

            mse = math.nan
            if instance.x0 is not None:
                mse = InstanceService.empirical_mse(state.x_hat, instance.x0, config.mse_symmetry)
            free_energy = math.nan
            if config.track_free_energy:
                if mean_field:
                    free_energy = AmpService.mean_field_free_energy(instance, prior, state.a, state.b)
                else:
                    free_energy = AmpService.bethe_from_fields(instance, prior, state.a, state.b, couplings)
                state.free_energy_trace.append(free_energy)
            trace.append(TraceRecord(state.t, state.conv, mse, free_energy))
            logger.debug(f"{label} t={state.t} conv={state.conv:.3e} mse={mse:.6g} damping={state.damping:.3g}")
            state.damping = schedule.next(state.damping, state.conv)

        converged = state.conv * state.damping <= config.tol
        logger.info(f"Low-RAMP {label} N={n} r={r}: {state.t} iterations, converged={converged}")
        return AmpResult(converged, trace, state=state)

    @staticmethod
    @log_call('run_bipartite')
    def run_bipartite(instance, prior_u, prior_v, config=None):
        """
        Bipartite Low-RAMP: U is updated from V, then V from the new U

        The trace MSE is the row-weighted mean of the U and V errors.
        """
        if instance.kind is not InstanceKind.BIPARTITE:
            raise ShapeMismatch("run_bipartite needs a bipartite instance")
        if prior_u.rank != prior_v.rank:
            raise ShapeMismatch(f"U rank {prior_u.rank} differs from V rank {prior_v.rank}")
        n, m, r = instance.n, instance.m, prior_u.rank
        config = config or AmpConfig.default_for(n)
        block_u = build_couplings(instance, config.variant)
        block_v = block_u.transposed
        shared = block_u.variant is not AmpVariant.FULL
        rng = np.random.default_rng(config.seed)
        u_init = _initial_estimate(config, instance.u0, n, r, rng)
        v_init = _initial_estimate(config, instance.v0, m, r, rng)
        state_u = AmpState.initial(u_init, r, config.damping, shared)
        state_v = AmpState.initial(v_init, r, config.damping, shared)
        schedule = _DampingSchedule(config.damping, config.adaptive_damping)
        trace = []
        damping, conv, t = config.damping, math.inf, 0

        while conv * damping > config.tol and t < config.max_iters:
            t += 1
            state_u.damping = state_v.damping = damping
            b_new, a_new = compute_fields(block_u, state_v.x_hat, state_v.sigma, state_u.x_hat)
            _apply_damping(state_u, b_new, a_new)
            conv_u = _update_estimates(state_u, prior_u, t)

            b_new, a_new = compute_fields(block_v, state_u.x_hat, state_u.sigma, state_v.x_hat)
            _apply_damping(state_v, b_new, a_new)
            conv_v = _update_estimates(state_v, prior_v, t)

            conv = conv_u + conv_v
            state_u.t = state_v.t = t
            state_u.conv = state_v.conv = conv
            mse = math.nan
            if instance.u0 is not None:
                mse_u = InstanceService.empirical_mse(state_u.x_hat, instance.u0, config.mse_symmetry)
                mse_v = InstanceService.empirical_mse(state_v.x_hat, instance.v0, config.mse_symmetry)
                mse = (n * mse_u + m * mse_v) / (n + m)
            free_energy = math.nan
            if config.track_free_energy:
                free_energy = AmpService.bethe_from_fields_bipartite(
                    instance, prior_u, prior_v, state_u.a, state_u.b, state_v.a, state_v.b, block_u)
                state_u.free_energy_trace.append(free_energy)
            trace.append(TraceRecord(t, conv, mse, free_energy))
            logger.debug(f"bipartite t={t} conv={conv:.3e} mse={mse:.6g}")
            damping = schedule.next(damping, conv)

        converged = conv * damping <= config.tol
        logger.info(f"Low-RAMP bipartite {block_u.variant.value} N={n} M={m} r={r}: "
                    f"{t} iterations, converged={converged}")
        return AmpResult(converged, trace, state_u=state_u, state_v=state_v)

    @staticmethod
    def bethe_from_fields(instance, prior, a, b, couplings=None, variant=AmpVariant.FULL):
        """
        Bethe free energy of a symmetric instance as a function of the fields

        The pair term is sum_{i<j} [S_ij x_i.x_j / sqrt(N)
        + (R_ij - S_ij^2) Tr(P_i P_j) / 2N + S_ij^2 Tr(sigma_i sigma_j) / 2N]
        with P = x x^T + sigma; its stationary points are the Low-RAMP fixed
        points of the same variant. Self-averaged and Bayes-optimal variants
        replace S^2 and R by their averages.
        """
        couplings = couplings or build_couplings(instance, variant)
        value, x_hat, sigma = _site_terms(prior, a, b)
        n = instance.n
        value += 0.5 * float(np.sum(x_hat * (couplings.s @ x_hat))) / math.sqrt(n)
        second = _outer(x_hat) + sigma
        if couplings.variant is AmpVariant.FULL:
            p, s = _flat(second), _flat(sigma)
            value += 0.25 / n * float(np.sum(p * ((couplings.r - couplings.s2) @ p)))
            value += 0.25 / n * float(np.sum(s * (couplings.s2 @ s)))
        else:
            p_tot, s_tot = second.sum(axis=0), sigma.sum(axis=0)
            value += 0.25 / n * ((couplings.r_bar - couplings.inv_delta_tilde) * float(np.sum(p_tot * p_tot))
                                 + couplings.inv_delta_tilde * float(np.sum(s_tot * s_tot)))
        return value

    @staticmethod
    def bethe_from_fields_bipartite(instance, prior_u, prior_v, a_u, b_u, a_v, b_v,
                                    couplings=None, variant=AmpVariant.FULL):
        """Bipartite Bethe free energy; pair sums run over all (i, j)"""
        couplings = couplings or build_couplings(instance, variant)
        value_u, u_hat, sigma_u = _site_terms(prior_u, a_u, b_u)
        value_v, v_hat, sigma_v = _site_terms(prior_v, a_v, b_v)
        n = instance.n
        value = value_u + value_v + float(np.sum(u_hat * (couplings.s @ v_hat))) / math.sqrt(n)
        second_u, second_v = _outer(u_hat) + sigma_u, _outer(v_hat) + sigma_v
        if couplings.variant is AmpVariant.FULL:
            value += 0.5 / n * float(np.sum(_flat(second_u) * ((couplings.r - couplings.s2) @ _flat(second_v))))
            value += 0.5 / n * float(np.sum(_flat(sigma_u) * (couplings.s2 @ _flat(sigma_v))))
        else:
            pu, pv = second_u.sum(axis=0), second_v.sum(axis=0)
            su, sv = sigma_u.sum(axis=0), sigma_v.sum(axis=0)
            value += 0.5 / n * ((couplings.r_bar - couplings.inv_delta_tilde) * float(np.sum(pu * pv))
                                + couplings.inv_delta_tilde * float(np.sum(su * sv)))
        return value

    @staticmethod
    def bethe_free_energy(instance, priors, result, variant=None):
        """
        Bethe free energy at the fields held by an AmpResult

        Args:
            instance (ProblemInstance): Instance the run used
            priors: PriorSpec (symmetric) or (prior_u, prior_v)
            result (AmpResult): Output of run_symmetric or run_bipartite
            variant (AmpVariant): Variant of the run (inferred from the field shapes if omitted)

        Returns:
            float: Free energy (extensive, not divided by N)
        """
        if instance.kind is InstanceKind.SYMMETRIC:
            state = result.state
            if variant is None:
                variant = AmpVariant.FULL if state.a.ndim == 3 else AmpVariant.SELF_AVERAGED
            return AmpService.bethe_from_fields(instance, priors, state.a, state.b, variant=variant)
        prior_u, prior_v = priors
        su, sv = result.state_u, result.state_v
        if variant is None:
            variant = AmpVariant.FULL if su.a.ndim == 3 else AmpVariant.SELF_AVERAGED
        return AmpService.bethe_from_fields_bipartite(
            instance, prior_u, prior_v, su.a, su.b, sv.a, sv.b, variant=variant)

    @staticmethod
    def mean_field_free_energy(instance, prior, a, b):
        """Variational mean-field free energy, stationary at mean_field_run fixed points"""
        couplings = build_couplings(instance, AmpVariant.FULL, mean_field=True)
        value, x_hat, sigma = _site_terms(prior, a, b)
        n = instance.n
        value += 0.5 * float(np.sum(x_hat * (couplings.s @ x_hat))) / math.sqrt(n)
        p = _flat(_outer(x_hat) + sigma)
        value += 0.25 / n * float(np.sum(p * ((couplings.r - couplings.s2) @ p)))
        return value


def run_symmetric(instance, prior, config=None):
    return AmpService.run_symmetric(instance, prior, config)


def run_bipartite(instance, prior_u, prior_v, config=None):
    return AmpService.run_bipartite(instance, prior_u, prior_v, config)


def mean_field_run(instance, prior, config=None):
    return AmpService.mean_field_run(instance, prior, config)


def bethe_free_energy(instance, priors, result, variant=None):
    return AmpService.bethe_free_energy(instance, priors, result, variant)
