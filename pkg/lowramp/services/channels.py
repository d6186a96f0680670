"""
Channel service
Output sampling, Fisher score matrices and effective noise parameters
"""
import logging

import numpy as np
from scipy.special import roots_laguerre

from lowramp.models import ChannelFamily, ChannelSpec, NoiseParams
from lowramp.services.integration import IntegrationService
from lowramp.validation import (
    NonIntegrableChannel, ProbabilityOutOfRange, UnsupportedValue,
)

logger = logging.getLogger(__name__)

QUADRATURE_NODES = 201
MEAN_SCORE_TOL = 1e-8


class ChannelService:
    """Service for output channels"""

    @staticmethod
    def log_likelihood(channel, y, w):
        """g(Y, w) of the channel's own family, up to w-independent constants"""
        y = np.asarray(y, dtype=float)
        w = np.asarray(w, dtype=float)
        family = channel.family
        if family is ChannelFamily.GAUSSIAN:
            return -(y - w) ** 2 / (2 * channel.delta)
        if family is ChannelFamily.CONVENTIONAL:
            return channel.beta * y * w
        if family is ChannelFamily.SBM:
            prob = channel.p_out + channel.mu * w
            return y * np.log(prob) + (1 - y) * np.log1p(-prob)
        if family is ChannelFamily.EXPONENTIAL:
            return -np.abs(y - w)
        return np.zeros(np.broadcast(y, w).shape)

    @staticmethod
    def score_matrices(channel, Y):
        """
        Fisher score S = dg/dw at 0 and R = S^2 + d2g/dw2 at 0, elementwise

        Uses the assumed likelihood when the channel carries a mismatch.

        Args:
            channel (ChannelSpec): Channel (generating, possibly with ``assumed``)
            Y (np.ndarray): Observations, any shape

        Returns:
            tuple: (S, R) arrays shaped like Y
        """
        g = channel.likelihood
        Y = np.asarray(Y, dtype=float)
        if g.family is ChannelFamily.GAUSSIAN:
            S = Y / g.delta
            return S, S ** 2 - 1.0 / g.delta
        if g.family is ChannelFamily.CONVENTIONAL:
            S = g.beta * Y
            return S, S ** 2
        if g.family is ChannelFamily.SBM:
            if not np.all((Y == 0) | (Y == 1)):
                raise UnsupportedValue("SBM observations must be binary")
            S = np.where(Y == 1, g.mu / g.p_out, -g.mu / (1 - g.p_out))
            # S^2 + g'' vanishes on both outcomes
            return S, np.zeros_like(S)
        if g.family is ChannelFamily.EXPONENTIAL:
            S = np.sign(Y)
            return S, S ** 2
        raise UnsupportedValue(f"Channel {g.family.value} has no likelihood")

    @staticmethod
    def fisher_score(channel, Y):
        """d/dw log P_out(Y|w) at w=0 for the generating channel"""
        Y = np.asarray(Y, dtype=float)
        if channel.family is ChannelFamily.GAUSSIAN:
            return Y / channel.delta
        if channel.family is ChannelFamily.SBM:
            return np.where(Y == 1, channel.mu / channel.p_out, -channel.mu / (1 - channel.p_out))
        if channel.family is ChannelFamily.EXPONENTIAL:
            return np.sign(Y)
        raise UnsupportedValue(f"Channel {channel.family.value} does not generate planted data")

    @staticmethod
    def fisher_delta(channel):
        """Inverse Fisher information Delta of a generating channel"""
        if channel.family is ChannelFamily.GAUSSIAN:
            return channel.delta
        if channel.family is ChannelFamily.SBM:
            return channel.p_out * (1 - channel.p_out) / channel.mu ** 2
        if channel.family is ChannelFamily.EXPONENTIAL:
            return 1.0
        return None

    @staticmethod
    def sample_output(channel, w, seed):
        """
        Draw Y ~ P_out(.|w) elementwise

        Args:
            channel (ChannelSpec): Generating channel
            w: Scalar or array of noiseless values (already scaled by 1/sqrt(N))
            seed: Integer seed, SeedSequence or Generator

        Returns:
            Array of observations shaped like ``w`` (a float for scalar ``w``)
        """
        rng = np.random.default_rng(seed)
        w = np.asarray(w, dtype=float)
        family = channel.family
        if family is ChannelFamily.GAUSSIAN:
            y = w + np.sqrt(channel.delta) * rng.standard_normal(w.shape)
        elif family is ChannelFamily.SBM:
            prob = channel.p_out + channel.mu * w
            if np.any(prob < 0) or np.any(prob > 1):
                raise ProbabilityOutOfRange(
                    f"SBM edge probability left [0, 1] (range {prob.min():.4g}..{prob.max():.4g})")
            y = (rng.random(w.shape) < prob).astype(float)
        elif family is ChannelFamily.EXPONENTIAL:
            y = w + rng.laplace(0.0, 1.0, w.shape)
        elif family is ChannelFamily.RANDOM_GAUSSIAN:
            y = channel.strength * rng.standard_normal(w.shape)
        elif family is ChannelFamily.RANDOM_PM1:
            y = channel.strength * np.where(rng.random(w.shape) < 0.5, 1.0, -1.0)
        else:
            raise UnsupportedValue(f"Channel {family.value} cannot generate data")
        return float(y) if y.ndim == 0 else y

    @staticmethod
    def output_quadrature(channel, n=QUADRATURE_NODES):
        """Nodes and weights of P_out(Y | w=0)"""
        family = channel.family
        if family in (ChannelFamily.GAUSSIAN, ChannelFamily.RANDOM_GAUSSIAN):
            nodes, weights = IntegrationService.gauss_hermite(n)
            scale = np.sqrt(channel.delta) if family is ChannelFamily.GAUSSIAN else channel.strength
            return scale * nodes, np.array(weights)
        if family is ChannelFamily.SBM:
            return np.array([0.0, 1.0]), np.array([1 - channel.p_out, channel.p_out])
        if family is ChannelFamily.RANDOM_PM1:
            return channel.strength * np.array([-1.0, 1.0]), np.array([0.5, 0.5])
        if family is ChannelFamily.EXPONENTIAL:
            # Laplace(0, 1): Gauss-Laguerre on each half line
            nodes, weights = roots_laguerre(n)
            return np.concatenate([-nodes[::-1], nodes]), 0.5 * np.concatenate([weights[::-1], weights])
        raise UnsupportedValue(f"Channel {family.value} cannot generate data")

    @staticmethod
    def noise_params(generating, assumed=None, quenched=False):
        """
        Effective noise parameters 1/Delta_tilde, 1/Delta_hat, R_bar and Delta

        Args:
            generating (ChannelSpec): Channel that produced Y
            assumed (ChannelSpec): Likelihood used by the algorithm
                (defaults to ``generating.likelihood``)
            quenched (bool): Y carries no planted signal; forces 1/Delta_hat = 0

        Returns:
            NoiseParams: Effective parameters
        """
        if assumed is None:
            assumed = generating.likelihood
        generating = generating.generating
        quenched = quenched or generating.is_quenched

        if not quenched and generating == assumed.generating:
            delta = ChannelService.fisher_delta(generating)
            if delta is None:
                raise UnsupportedValue(f"Channel {generating.family.value} has no Fisher information")
            return NoiseParams.bayes(delta)

        y, weights = ChannelService.output_quadrature(generating)
        S, R = ChannelService.score_matrices(assumed, y)
        mean_score = float(weights @ S)
        inv_delta_tilde = float(weights @ S ** 2)
        if not np.isfinite(inv_delta_tilde) or inv_delta_tilde <= 0:
            raise NonIntegrableChannel(
                f"E[S^2] = {inv_delta_tilde} for assumed {assumed.family.value} under {generating.family.value}")
        if abs(mean_score) > MEAN_SCORE_TOL * max(1.0, np.sqrt(inv_delta_tilde)):
            raise UnsupportedValue(
                f"Mismatched score has non-zero mean {mean_score:.3g}; this pair is not supported")
        r_bar = float(weights @ R)
        if quenched:
            inv_delta_hat = 0.0
        else:
            inv_delta_hat = float(weights @ (S * ChannelService.fisher_score(generating, y)))
        params = NoiseParams(
            inv_delta_tilde=inv_delta_tilde,
            inv_delta_hat=inv_delta_hat,
            r_bar=r_bar,
            delta=ChannelService.fisher_delta(generating),
            bayes_optimal=False,
        )
        logger.debug(f"Noise parameters for {generating.family.value}/{assumed.family.value}: {params}")
        return params


def score_matrices(channel: ChannelSpec, Y):
    return ChannelService.score_matrices(channel, Y)


def noise_params(generating: ChannelSpec, assumed: ChannelSpec = None, quenched=False):
    return ChannelService.noise_params(generating, assumed, quenched)


def sample_output(channel: ChannelSpec, w, seed):
    return ChannelService.sample_output(channel, w, seed)
