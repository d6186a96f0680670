"""
PCA service
Spectral fixed point of the linearized algorithm and the top-eigenvector estimator
"""
from dataclasses import dataclass
import logging
import math

import numpy as np
from scipy.sparse.linalg import eigsh, svds

from lowramp.models import IntegrationConfig
from lowramp.services.priors import PriorService
from lowramp.services.state_evolution import input_moments
from lowramp.validation import NoInformativeFixedPoint, ShapeMismatch, ValidationService

logger = logging.getLogger(__name__)


@dataclass
class PCAResult:
    """Fixed point of the spectral method in the eigenbasis of <x0 x0^T>"""
    m: np.ndarray
    q: np.ndarray
    sigma_prime: np.ndarray
    snr: np.ndarray
    mse: float
    informative: np.ndarray


class PCAService:
    """Spectral method analysis and estimation"""

    @staticmethod
    def pca_analysis(prior0, noise, integration=None):
        """
        Fixed point (M, Q, Sigma') of PCA on the score matrix and its denoised MSE

        Along each eigen-direction lambda of <x0 x0^T> the fixed point is
        informative iff lambda^2 > Delta_hat^2 / Delta_tilde. The denoiser is
        the Bayes posterior mean under the effective Gaussian channel of
        signal-to-noise ratio M_hat^T Q_hat^-1 M_hat, M_hat = Sigma' M / Delta_hat,
        Q_hat = Q Sigma'^2 / Delta_tilde.

        Args:
            prior0 (PriorSpec): Planted prior
            noise (NoiseParams): Effective noise of the score matrix

        Returns:
            PCAResult: Per-direction order parameters and the MSE

        Raises:
            NoInformativeFixedPoint: No direction is above the spectral threshold
        """
        integration = integration or IntegrationConfig()
        mean, second = PriorService.moments(prior0)
        eigvals, eigvecs = np.linalg.eigh(second)
        fallback = float(np.trace(second) - mean @ mean)
        if noise.quenched:
            raise NoInformativeFixedPoint("No planted signal reaches the score matrix", mse=fallback)

        d_tilde, d_hat, r_bar = noise.delta_tilde, noise.delta_hat, noise.r_bar
        informative = eigvals ** 2 > d_hat ** 2 / d_tilde
        m = np.zeros_like(eigvals)
        q = np.empty_like(eigvals)
        sigma_prime = np.empty_like(eigvals)
        for k, lam in enumerate(eigvals):
            if informative[k]:
                sigma_prime[k] = d_hat / lam
                q[k] = (lam / d_hat + d_hat / (lam * d_tilde)) / (1 / d_tilde - r_bar)
                m[k] = math.sqrt(max(q[k] * (lam - d_hat ** 2 / (lam * d_tilde)), 0.0))
            else:
                sigma_prime[k] = math.sqrt(d_tilde)
                q[k] = 2 * math.sqrt(d_tilde) / (1 - r_bar * d_tilde)
        if np.any(q <= 0):
            raise NoInformativeFixedPoint("PCA overlap equations have no positive solution", mse=fallback)
        if not informative.any():
            raise NoInformativeFixedPoint(
                f"Spectrum is uninformative: max eigenvalue {eigvals.max():.6g} <= "
                f"{d_hat / math.sqrt(d_tilde):.6g}", mse=fallback)

        m_hat = sigma_prime * m / d_hat
        q_hat = q * sigma_prime ** 2 / d_tilde
        snr_diag = m_hat ** 2 / q_hat
        snr = (eigvecs * snr_diag) @ eigvecs.T
        moments = input_moments(prior0, prior0, snr, snr, (eigvecs * np.sqrt(snr_diag)) @ eigvecs.T, integration)
        mse = float(np.trace(second - moments.m))
        logger.info(f"PCA fixed point: {int(informative.sum())} informative directions, mse={mse:.6g}")
        return PCAResult(m, q, sigma_prime, snr, mse, informative)

    @staticmethod
    def spectral_estimate(matrix, rank, scale=None, seed=0):
        """
        Top-``rank`` eigenvectors (or left singular vectors) scaled to row norm ``scale``

        Args:
            matrix (np.ndarray): Symmetric N x N or rectangular N x M matrix
            rank (int): Number of components
            scale (np.ndarray): Per-component second moment of the prior (default 1)
            seed (int): Seed of the Lanczos start vector

        Returns:
            np.ndarray: (N, rank) estimate with column norms sqrt(N scale)
        """
        matrix = np.asarray(matrix, dtype=float)
        ValidationService.require(ValidationService.validate_rank(rank))
        n = matrix.shape[0]
        if rank >= min(matrix.shape):
            raise ShapeMismatch(f"Rank {rank} needs a matrix larger than {matrix.shape}")
        start = np.random.default_rng(seed).standard_normal(n)
        if matrix.shape[0] == matrix.shape[1] and np.allclose(matrix, matrix.T):
            values, vectors = eigsh(matrix, k=rank, which='LA', v0=start)
        else:
            vectors, values, _ = svds(matrix, k=rank, v0=np.random.default_rng(seed).standard_normal(min(matrix.shape)))
        order = np.argsort(values)[::-1]
        vectors = vectors[:, order]
        # fix the sign so repeated runs agree
        signs = np.sign(vectors[np.argmax(np.abs(vectors), axis=0), np.arange(rank)])
        vectors = vectors * signs
        scale = np.ones(rank) if scale is None else np.broadcast_to(np.asarray(scale, dtype=float), (rank,))
        return vectors * np.sqrt(n * scale)

    @staticmethod
    def spectral_overlap(estimate, planted):
        """
        Squared overlap Tr(P_est P_planted) / rank of the column spaces

        Rank 1 gives (x_hat . x0)^2 / (|x_hat|^2 |x0|^2).
        """
        estimate = np.atleast_2d(np.asarray(estimate, dtype=float).T).T
        planted = np.atleast_2d(np.asarray(planted, dtype=float).T).T
        if estimate.shape != planted.shape:
            raise ShapeMismatch(f"Estimate shape {estimate.shape} differs from planted {planted.shape}")
        q_est, _ = np.linalg.qr(estimate)
        q_true, _ = np.linalg.qr(planted)
        return float(np.sum((q_est.T @ q_true) ** 2) / estimate.shape[1])


def pca_analysis(prior0, noise, integration=None):
    return PCAService.pca_analysis(prior0, noise, integration)


def spectral_estimate(matrix, rank, scale=None, seed=0):
    return PCAService.spectral_estimate(matrix, rank, scale, seed)


def spectral_overlap(estimate, planted):
    return PCAService.spectral_overlap(estimate, planted)
