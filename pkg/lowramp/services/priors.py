"""
Prior service
Moments, sampling and the input function f_in of every prior family
"""
from itertools import product
import logging
import math

import numpy as np
from scipy.special import logsumexp

from lowramp.models import InputResult, PriorFamily, PriorSpec
from lowramp.services.integration import IntegrationService
from lowramp.validation import (
    NonConvergentIntegral, RankUnsupported, ShapeMismatch,
)

logger = logging.getLogger(__name__)

PD_EIGEN_FLOOR = 1e-12

_DISCRETE = {
    PriorFamily.ISING, PriorFamily.BERNOULLI, PriorFamily.RADEMACHER_BERNOULLI,
    PriorFamily.COMMUNITY, PriorFamily.TWO_BALANCED,
}
_SUBSET_MIXTURES = {PriorFamily.GAUSS_BERNOULLI_JOINT, PriorFamily.GAUSS_BERNOULLI_INDEP}


def _atoms(prior):
    """Support points and probabilities of a discrete prior (zero-probability atoms dropped)"""
    rho = prior.rho
    if prior.family is PriorFamily.ISING:
        atoms, probs = [[1.0], [-1.0]], [rho, 1 - rho]
    elif prior.family is PriorFamily.BERNOULLI:
        atoms, probs = [[1.0], [0.0]], [rho, 1 - rho]
    elif prior.family is PriorFamily.RADEMACHER_BERNOULLI:
        atoms, probs = [[1.0], [-1.0], [0.0]], [rho / 2, rho / 2, 1 - rho]
    elif prior.family is PriorFamily.TWO_BALANCED:
        atoms = [[math.sqrt((1 - rho) / rho)], [-math.sqrt(rho / (1 - rho))]]
        probs = [rho, 1 - rho]
    else:
        atoms, probs = np.eye(prior.rank), np.full(prior.rank, 1.0 / prior.rank)
    atoms, probs = np.asarray(atoms, dtype=float), np.asarray(probs, dtype=float)
    keep = probs > 0
    return atoms[keep], probs[keep]


def _subsets(prior):
    """Support subsets and log-weights of a Gauss-Bernoulli mixture"""
    r, rho = prior.rank, prior.rho
    if prior.family is PriorFamily.GAUSS_BERNOULLI_JOINT:
        masks = [np.zeros(r, dtype=bool), np.ones(r, dtype=bool)]
    else:
        masks = [np.array(bits, dtype=bool) for bits in product([False, True], repeat=r)]
    subsets = []
    for mask in masks:
        k = int(mask.sum())
        if prior.family is PriorFamily.GAUSS_BERNOULLI_JOINT:
            weight = rho if k == r else 1 - rho
        else:
            weight = rho ** k * (1 - rho) ** (r - k)
        if weight > 0:
            subsets.append((mask, math.log(weight)))
    return subsets


def _as_fields(prior, A, B):
    """Broadcast (A, B) to (N, r, r) and (N, r); remember whether a single site was given"""
    r = prior.rank
    B = np.asarray(B, dtype=float)
    A = np.asarray(A, dtype=float)
    single = B.ndim <= 1
    if B.ndim == 0:
        B = B.reshape(1)
    B = np.atleast_2d(B)
    if B.shape[-1] != r:
        raise ShapeMismatch(f"Field B has last dimension {B.shape[-1]}, prior rank is {r}")
    n = B.shape[0]
    if A.ndim == 0:
        A = A.reshape(1, 1) * np.eye(r) if r == 1 else A * np.eye(r)
    if A.ndim == 2:
        if A.shape != (r, r):
            raise ShapeMismatch(f"Field A has shape {A.shape}, expected {(r, r)}")
        shared = True
    elif A.ndim == 3:
        if A.shape[1:] != (r, r) or A.shape[0] not in (1, n):
            raise ShapeMismatch(f"Field A has shape {A.shape}, expected {(n, r, r)}")
        shared = A.shape[0] == 1
        if shared:
            A = A[0]
    else:
        raise ShapeMismatch(f"Field A has {A.ndim} dimensions")
    return A, B, shared, single


def _package(mean, cov, log_z, single):
    if single:
        return InputResult(mean[0], cov[0], float(log_z[0]))
    return InputResult(mean, cov, log_z)


class PriorService:
    """Service for prior moments, sampling and input functions"""

    @staticmethod
    def f_in(prior, A, B):
        """
        Posterior mean, covariance and log Z of P_X(x) exp(B.x - x.A.x/2)

        Args:
            prior (PriorSpec): Prior family
            A: (r, r) shared or (N, r, r) per-site quadratic field
            B: (r,) single site or (N, r) linear fields

        Returns:
            InputResult: mean (N, r), covariance (N, r, r), log_z (N,);
            single-site inputs return unbatched values
        """
        A, B, shared, single = _as_fields(prior, A, B)
        if prior.family in _DISCRETE:
            mean, cov, log_z = PriorService._f_in_discrete(prior, A, B, shared)
        elif prior.family in _SUBSET_MIXTURES:
            mean, cov, log_z = PriorService._f_in_subset_mixture(prior, A, B, shared)
        else:
            mean, cov, log_z = PriorService._f_in_gaussian(prior, A, B, shared)
        return _package(mean, cov, log_z, single)

    @staticmethod
    def _f_in_discrete(prior, A, B, shared):
        atoms, probs = _atoms(prior)
        if shared:
            quad = np.einsum('ki,ij,kj->k', atoms, A, atoms)[None, :]
        else:
            quad = np.einsum('ki,nij,kj->nk', atoms, A, atoms)
        logits = np.log(probs)[None, :] + B @ atoms.T - 0.5 * quad
        log_z = logsumexp(logits, axis=1)
        resp = np.exp(logits - log_z[:, None])
        mean = resp @ atoms
        second = np.einsum('nk,ki,kj->nij', resp, atoms, atoms)
        cov = second - mean[:, :, None] * mean[:, None, :]
        return mean, cov, log_z

    @staticmethod
    def _gaussian_completion(precision, h):
        """Solve a batch of Gaussian integrals with precision matrices ``precision``"""
        eigvals = np.linalg.eigvalsh(precision)
        if eigvals.min() <= PD_EIGEN_FLOOR:
            raise NonConvergentIntegral(
                f"Gaussian quadratic form not positive definite (min eigenvalue {eigvals.min():.3g})")
        cov = np.linalg.inv(precision)
        mean = np.einsum('...ij,...j->...i', cov, h)
        logdet = np.sum(np.log(eigvals), axis=-1)
        return mean, cov, logdet

    @staticmethod
    def _f_in_gaussian(prior, A, B, shared):
        r = prior.rank
        if prior.family is PriorFamily.SPHERICAL:
            mu, prec0, logdet0 = np.zeros(r), np.eye(r), 0.0
        else:
            mu = prior.mean_vector
            cov0 = prior.cov_matrix
            prec0 = np.linalg.inv(cov0)
            logdet0 = np.linalg.slogdet(cov0)[1]
        precision = prec0 + A if shared else prec0[None, :, :] + A
        h = B + (prec0 @ mu)[None, :]
        if shared:
            _, cov, logdet_prec = PriorService._gaussian_completion(precision, np.zeros(r))
            mean = h @ cov.T
            cov = np.broadcast_to(cov, (B.shape[0], r, r)).copy()
        else:
            mean, cov, logdet_prec = PriorService._gaussian_completion(precision, h)
        log_z = (-0.5 * logdet0 - 0.5 * logdet_prec
                 + 0.5 * np.einsum('ni,ni->n', h, mean)
                 - 0.5 * float(mu @ prec0 @ mu))
        return mean, cov, log_z

    @staticmethod
    def _f_in_subset_mixture(prior, A, B, shared):
        n, r = B.shape
        log_terms, means, seconds = [], [], []
        for mask, log_weight in _subsets(prior):
            mean_s = np.zeros((n, r))
            second_s = np.zeros((n, r, r))
            if not mask.any():
                log_terms.append(np.full(n, log_weight))
                means.append(mean_s)
                seconds.append(second_s)
                continue
            idx = np.flatnonzero(mask)
            k = idx.size
            A_ss = A[np.ix_(idx, idx)] if shared else A[:, idx][:, :, idx]
            precision = np.eye(k) + A_ss if shared else np.eye(k)[None, :, :] + A_ss
            if shared:
                precision = np.broadcast_to(precision, (n, k, k))
            m_sub, c_sub, logdet = PriorService._gaussian_completion(precision, B[:, idx])
            log_terms.append(log_weight - 0.5 * logdet + 0.5 * np.einsum('ni,ni->n', B[:, idx], m_sub))
            mean_s[:, idx] = m_sub
            second_s[:, idx[:, None], idx[None, :]] = c_sub + m_sub[:, :, None] * m_sub[:, None, :]
            means.append(mean_s)
            seconds.append(second_s)
        log_terms = np.stack(log_terms, axis=1)
        log_z = logsumexp(log_terms, axis=1)
        resp = np.exp(log_terms - log_z[:, None])
        mean = np.einsum('nk,kni->ni', resp, np.stack(means))
        second = np.einsum('nk,knij->nij', resp, np.stack(seconds))
        cov = second - mean[:, :, None] * mean[:, None, :]
        return mean, cov, log_z

    @staticmethod
    def moments(prior):
        """
        Exact mean vector and second-moment matrix <x x^T>

        Returns:
            tuple: (mean (r,), second_moment (r, r))
        """
        r = prior.rank
        if prior.family in _DISCRETE:
            atoms, probs = _atoms(prior)
            return probs @ atoms, np.einsum('k,ki,kj->ij', probs, atoms, atoms)
        if prior.family in _SUBSET_MIXTURES:
            return np.zeros(r), prior.rho * np.eye(r)
        if prior.family is PriorFamily.SPHERICAL:
            return np.zeros(r), np.eye(r)
        mu = prior.mean_vector
        return mu, prior.cov_matrix + np.outer(mu, mu)

    @staticmethod
    def third_moment_scalar(prior):
        """<x^3> of a rank-1 prior"""
        if prior.rank != 1:
            raise RankUnsupported(f"Third moment needs rank 1, prior has rank {prior.rank}")
        if prior.family in _DISCRETE:
            atoms, probs = _atoms(prior)
            return float(probs @ atoms[:, 0] ** 3)
        if prior.family in (PriorFamily.GAUSSIAN,):
            mu, var = prior.mean_vector[0], prior.cov_matrix[0, 0]
            return float(mu ** 3 + 3 * mu * var)
        return 0.0

    @staticmethod
    def sample(prior, n, seed):
        """
        Draw ``n`` i.i.d. rows from the prior

        Args:
            prior (PriorSpec): Prior family
            n (int): Number of rows
            seed: Integer seed, SeedSequence or Generator

        Returns:
            np.ndarray: (n, r) sample
        """
        rng = np.random.default_rng(seed)
        r = prior.rank
        if prior.family in _DISCRETE:
            atoms, probs = _atoms(prior)
            return atoms[rng.choice(len(probs), size=n, p=probs)]
        if prior.family is PriorFamily.GAUSS_BERNOULLI_JOINT:
            active = rng.random(n) < prior.rho
            return rng.standard_normal((n, r)) * active[:, None]
        if prior.family is PriorFamily.GAUSS_BERNOULLI_INDEP:
            active = rng.random((n, r)) < prior.rho
            return rng.standard_normal((n, r)) * active
        if prior.family is PriorFamily.SPHERICAL:
            return rng.standard_normal((n, r))
        return rng.multivariate_normal(prior.mean_vector, prior.cov_matrix, size=n, method='eigh')

    @staticmethod
    def quadrature(prior, n=201):
        """
        Points and weights representing a rank-1 prior in expectations

        Atoms are exact; Gaussian parts use ``n`` Gauss-Hermite nodes.
        """
        if prior.rank != 1:
            raise RankUnsupported("Prior quadrature is defined for rank 1")
        if prior.family in _DISCRETE:
            atoms, probs = _atoms(prior)
            return atoms[:, 0], probs
        nodes, weights = IntegrationService.gauss_hermite(n)
        if prior.family in _SUBSET_MIXTURES:
            points = np.concatenate([[0.0], nodes])
            probs = np.concatenate([[1 - prior.rho], prior.rho * weights])
            keep = probs > 0
            return points[keep], probs[keep]
        if prior.family is PriorFamily.SPHERICAL:
            return np.array(nodes), np.array(weights)
        mu, var = prior.mean_vector[0], prior.cov_matrix[0, 0]
        return mu + math.sqrt(var) * nodes, np.array(weights)

    @staticmethod
    def components(prior):
        """
        The prior as a finite mixture of affine images of a standard normal

        Returns:
            list: (weight, offset (r,), scale (r, r)) with x = offset + scale @ z,
            z ~ N(0, I_r); atoms have a zero scale
        """
        r = prior.rank
        if prior.family in _DISCRETE:
            atoms, probs = _atoms(prior)
            return [(float(p), atom, np.zeros((r, r))) for atom, p in zip(atoms, probs)]
        if prior.family in _SUBSET_MIXTURES:
            return [(math.exp(log_weight), np.zeros(r), np.diag(mask.astype(float)))
                    for mask, log_weight in _subsets(prior)]
        if prior.family is PriorFamily.SPHERICAL:
            return [(1.0, np.zeros(r), np.eye(r))]
        cov = prior.cov_matrix
        eigvals, eigvecs = np.linalg.eigh(cov)
        return [(1.0, prior.mean_vector, eigvecs * np.sqrt(np.clip(eigvals, 0.0, None)))]

    @staticmethod
    def is_zero_mean(prior, tol=1e-12):
        mean, _ = PriorService.moments(prior)
        return bool(np.all(np.abs(mean) <= tol))


def f_in(prior: PriorSpec, A, B):
    return PriorService.f_in(prior, A, B)


def moments(prior: PriorSpec):
    return PriorService.moments(prior)


def third_moment_scalar(prior: PriorSpec):
    return PriorService.third_moment_scalar(prior)


def sample(prior: PriorSpec, n, seed):
    return PriorService.sample(prior, n, seed)
