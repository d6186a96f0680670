"""
Integration service
Gauss-Hermite quadrature for Gaussian expectations and scrambled Sobol points for higher dimensions
"""
from functools import lru_cache
import logging

import numpy as np
from scipy.special import ndtri, roots_hermitenorm
from scipy.stats import qmc

from lowramp.validation import NonConvergentIntegral

logger = logging.getLogger(__name__)

MAX_GH_NODES = 801


@lru_cache(maxsize=16)
def _gauss_hermite(n):
    nodes, weights = roots_hermitenorm(n)
    if not (np.all(np.isfinite(nodes)) and np.all(np.isfinite(weights))):
        raise NonConvergentIntegral(f"Gauss-Hermite rule with {n} nodes is not finite")
    weights = weights / np.sqrt(2 * np.pi)
    # underflowed tail nodes carry no mass
    keep = weights > 0
    nodes, weights = nodes[keep], weights[keep]
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def _check_finite(value, n):
    if not np.all(np.isfinite(value)):
        raise NonConvergentIntegral(f"Gaussian expectation is not finite with {n} nodes")


class IntegrationService:
    """Expectations over standard Gaussian variables"""

    @staticmethod
    def gauss_hermite(n):
        """
        Nodes and weights for E[h(W)], W ~ N(0, 1)

        Args:
            n (int): Number of nodes

        Returns:
            tuple: (nodes, weights) with weights summing to one
        """
        return _gauss_hermite(int(n))

    @staticmethod
    def gaussian_expectation(func, n=201, tol=1e-10, max_nodes=MAX_GH_NODES):
        """
        E_W[func(W)] with node doubling until successive results agree

        ``func`` receives the node vector and returns values with the node
        axis first; extra trailing axes are averaged independently.
        """
        nodes, weights = _gauss_hermite(n)
        value = np.tensordot(weights, func(nodes), axes=(0, 0))
        _check_finite(value, n)
        while n < max_nodes:
            n = 2 * n - 1
            nodes, weights = _gauss_hermite(n)
            refined = np.tensordot(weights, func(nodes), axes=(0, 0))
            _check_finite(refined, n)
            if np.max(np.abs(refined - value)) < tol * max(1.0, float(np.max(np.abs(refined)))):
                return refined
            value = refined
        logger.debug(f"Gauss-Hermite expectation stopped at {n} nodes without reaching tol={tol}")
        return value

    @staticmethod
    def sobol_normal(dim, n, seed, scramble_index=0):
        """
        Scrambled Sobol points mapped to N(0, I_dim)

        The point count is rounded up to a power of two.
        """
        m = int(np.ceil(np.log2(max(int(n), 2))))
        seq = np.random.SeedSequence([int(seed), int(dim), int(scramble_index)])
        sampler = qmc.Sobol(d=int(dim), scramble=True, seed=np.random.default_rng(seq))
        uniform = sampler.random_base2(m)
        uniform = np.clip(uniform, 1e-16, 1 - 1e-16)
        return ndtri(uniform)

    @staticmethod
    def qmc_expectation(func, dim, n, seed, scrambles=8, chunk=1 << 14, antithetic=True):
        """
        Quasi-Monte-Carlo estimate of E[func(U)], U ~ N(0, I_dim)

        ``func`` maps an (k, dim) array to (k, ...) values. Independent
        scrambles give the standard error of the estimate.

        Returns:
            tuple: (mean, stderr)
        """
        per_scramble = max(int(n) // scrambles, 2)
        estimates = []
        for s in range(scrambles):
            points = IntegrationService.sobol_normal(dim, per_scramble, seed, s)
            total = None
            for start in range(0, points.shape[0], chunk):
                block = points[start:start + chunk]
                values = func(block)
                if antithetic:
                    values = 0.5 * (values + func(-block))
                partial = np.sum(values, axis=0)
                total = partial if total is None else total + partial
            estimates.append(total / points.shape[0])
        estimates = np.asarray(estimates)
        mean = estimates.mean(axis=0)
        stderr = estimates.std(axis=0, ddof=1) / np.sqrt(scrambles)
        return mean, stderr

    @staticmethod
    def sqrtm_psd(matrix, clip=-1e-12):
        """Symmetric square root through eigh; eigenvalues down to ``clip`` are set to 0"""
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        matrix = 0.5 * (matrix + matrix.T)
        eigvals, eigvecs = np.linalg.eigh(matrix)
        if eigvals.min() < clip:
            return None
        eigvals = np.clip(eigvals, 0.0, None)
        return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T
