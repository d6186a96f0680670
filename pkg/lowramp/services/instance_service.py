"""
Instance service
Generates planted and quenched problem instances and scores estimates against the planted truth
"""
from concurrent.futures import ThreadPoolExecutor
import logging

import numpy as np
from scipy.optimize import linear_sum_assignment

from config import Config
from lowramp.models import InstanceKind, ProblemInstance, Symmetry
from lowramp.services.channels import ChannelService
from lowramp.services.priors import PriorService
from lowramp.validation import ShapeMismatch, UnsupportedValue, ValidationService, log_call

logger = logging.getLogger(__name__)


def _row_streams(seed, count):
    """Independent child seeds: stream k belongs to row k whatever thread fills it"""
    return np.random.SeedSequence(int(seed)).spawn(count)


def _fill_rows(row_fn, count, threads):
    if threads is None or threads <= 1 or count < 2:
        return [row_fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(row_fn, range(count)))


def symmetric_scores(channel, n, y):
    """Dense S and R from the strict upper triangle, zero diagonal"""
    dense = np.zeros((n, n))
    iu = np.triu_indices(n, 1)
    dense[iu] = y
    dense.T[iu] = y
    S, R = ChannelService.score_matrices(channel, dense)
    np.fill_diagonal(S, 0.0)
    np.fill_diagonal(R, 0.0)
    return S, R


class InstanceService:
    """Service for problem-instance generation"""

    @staticmethod
    @log_call('generate_symmetric')
    def generate_symmetric(prior0, channel, n, seed, threads=None):
        """
        Planted symmetric instance Y_ij ~ P_out(.| x0_i.x0_j / sqrt(N)), i < j

        Args:
            prior0 (PriorSpec): Prior of the planted signal
            channel (ChannelSpec): Generating channel (with optional assumed likelihood)
            n (int): Number of variables N
            seed (int): Master seed
            threads (int): Worker threads filling rows (results do not depend on it)

        Returns:
            ProblemInstance: Instance with upper-triangle Y and dense S, R
        """
        ValidationService.require(ValidationService.validate_size(n, 'n', minimum=2))
        if channel.is_quenched:
            raise UnsupportedValue("Quenched channels carry no planted signal, use generate_quenched")
        streams = _row_streams(seed, n)
        x0 = PriorService.sample(prior0, n, streams[0])
        scale = 1.0 / np.sqrt(n)

        def row(i):
            w = (x0[i + 1:] @ x0[i]) * scale
            return np.atleast_1d(ChannelService.sample_output(channel.generating, w, streams[i + 1]))

        rows = _fill_rows(row, n - 1, threads if threads is not None else Config.THREADS)
        y = np.concatenate(rows)
        S, R = symmetric_scores(channel, n, y)
        logger.info(f"Generated symmetric instance N={n} prior={prior0.family.value} "
                    f"channel={channel.family.value} seed={seed}")
        return ProblemInstance(InstanceKind.SYMMETRIC, n, n, y, S, R, channel, (prior0,), seed, x0=x0)

    @staticmethod
    @log_call('generate_bipartite')
    def generate_bipartite(prior_u, prior_v, channel, n, m, seed, threads=None):
        """Planted bipartite instance Y_ij ~ P_out(.| u0_i.v0_j / sqrt(N))"""
        ValidationService.require(ValidationService.validate_size(n, 'n'))
        ValidationService.require(ValidationService.validate_size(m, 'm'))
        if prior_u.rank != prior_v.rank:
            raise ShapeMismatch(f"U rank {prior_u.rank} differs from V rank {prior_v.rank}")
        if channel.is_quenched:
            raise UnsupportedValue("Quenched channels carry no planted signal, use generate_quenched")
        streams = _row_streams(seed, n + 2)
        u0 = PriorService.sample(prior_u, n, streams[0])
        v0 = PriorService.sample(prior_v, m, streams[1])
        scale = 1.0 / np.sqrt(n)

        def row(i):
            w = (v0 @ u0[i]) * scale
            return np.atleast_1d(ChannelService.sample_output(channel.generating, w, streams[i + 2]))

        y = np.vstack(_fill_rows(row, n, threads if threads is not None else Config.THREADS))
        S, R = ChannelService.score_matrices(channel, y)
        logger.info(f"Generated bipartite instance N={n} M={m} channel={channel.family.value} seed={seed}")
        return ProblemInstance(InstanceKind.BIPARTITE, n, m, y, S, R, channel,
                               (prior_u, prior_v), seed, u0=u0, v0=v0)

    @staticmethod
    def generate_quenched(channel_rand, n, m=None, seed=0, threads=None):
        """
        Instance with i.i.d. disorder Y and no planted signal

        Symmetric when ``m`` is None, bipartite N x M otherwise.
        """
        if not channel_rand.is_quenched:
            raise UnsupportedValue(f"Channel {channel_rand.family.value} depends on w, not a quenched sampler")
        ValidationService.require(ValidationService.validate_size(n, 'n', minimum=2 if m is None else 1))
        threads = threads if threads is not None else Config.THREADS
        generating = channel_rand.generating
        if m is None:
            streams = _row_streams(seed, n)

            def row(i):
                return np.atleast_1d(ChannelService.sample_output(generating, np.zeros(n - 1 - i), streams[i + 1]))

            y = np.concatenate(_fill_rows(row, n - 1, threads))
            S, R = symmetric_scores(channel_rand, n, y)
            return ProblemInstance(InstanceKind.SYMMETRIC, n, n, y, S, R, channel_rand, (), seed)

        ValidationService.require(ValidationService.validate_size(m, 'm'))
        streams = _row_streams(seed, n + 2)

        def row(i):
            return np.atleast_1d(ChannelService.sample_output(generating, np.zeros(m), streams[i + 2]))

        y = np.vstack(_fill_rows(row, n, threads))
        S, R = ChannelService.score_matrices(channel_rand, y)
        return ProblemInstance(InstanceKind.BIPARTITE, n, m, y, S, R, channel_rand, (), seed)

    @staticmethod
    def empirical_mse(estimate, planted, symmetry=Symmetry.NONE):
        """
        (1/N) sum_i ||x_hat_i - x0_i||^2, minimized over the symmetry group

        Args:
            estimate (np.ndarray): (N, r) estimate
            planted (np.ndarray): (N, r) ground truth
            symmetry (Symmetry): none, sign (per column) or permutation of columns

        Returns:
            float: Aligned mean-squared error per row
        """
        estimate = np.asarray(estimate, dtype=float)
        planted = np.asarray(planted, dtype=float)
        if estimate.ndim == 1:
            estimate = estimate[:, None]
        if planted.ndim == 1:
            planted = planted[:, None]
        if estimate.shape != planted.shape:
            raise ShapeMismatch(f"Estimate shape {estimate.shape} differs from planted {planted.shape}")
        n = estimate.shape[0]
        if symmetry is Symmetry.SIGN:
            plus = np.sum((estimate - planted) ** 2, axis=0)
            minus = np.sum((estimate + planted) ** 2, axis=0)
            return float(np.sum(np.minimum(plus, minus)) / n)
        if symmetry is Symmetry.PERMUTATION:
            cost = (np.sum(estimate ** 2, axis=0)[:, None] + np.sum(planted ** 2, axis=0)[None, :]
                    - 2 * estimate.T @ planted)
            rows, cols = linear_sum_assignment(cost)
            return float(max(cost[rows, cols].sum(), 0.0) / n)
        return float(np.sum((estimate - planted) ** 2) / n)


def generate_symmetric(prior0, channel, n, seed, threads=None):
    return InstanceService.generate_symmetric(prior0, channel, n, seed, threads)


def generate_bipartite(prior_u, prior_v, channel, n, m, seed, threads=None):
    return InstanceService.generate_bipartite(prior_u, prior_v, channel, n, m, seed, threads)


def generate_quenched(channel_rand, n, m=None, seed=0, threads=None):
    return InstanceService.generate_quenched(channel_rand, n, m, seed, threads)


def empirical_mse(estimate, planted, symmetry=Symmetry.NONE):
    return InstanceService.empirical_mse(estimate, planted, symmetry)
