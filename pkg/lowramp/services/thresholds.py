"""
Threshold service
Spectral stability, first-order criteria and the parametric phase-transition finder
"""
from dataclasses import dataclass
from functools import lru_cache
import logging
import math

import numpy as np
from scipy.integrate import cumulative_trapezoid, quad
from scipy.optimize import brentq, minimize_scalar
from scipy.special import erfc

from lowramp import current_config
from lowramp.models import PriorFamily, PriorSpec, Thresholds, TransitionOrder
from lowramp.services.priors import PriorService
from lowramp.services.scalar_se import MODEL_TAGS, ScalarSEService
from lowramp.validation import (
    ConfigError, GridTooCoarse, RankUnsupported, UnsupportedValue, ValidationService, log_call,
)

logger = logging.getLogger(__name__)

GB_DYN_CONSTANT = 0.595
GB_IT_CONSTANT = 0.528
GB_BIPARTITE_DYN_CONSTANT = 0.771
GB_BIPARTITE_IT_CONSTANT = 0.726

TRI_CRITICAL_BRACKETS = {
    'rademacher_bernoulli': (0.05, 0.2),
    'gauss_bernoulli': (0.2, 0.4),
    'bernoulli': (0.02, 0.06),
}

SLOPE_NOISE = 1e-12
ROUNDOFF_NOISE = 1e-13
CRITERION_TOL = 1e-12


def _small_rho_limit(beta):
    """Limit of f(-beta log rho) / rho for the Gauss-Bernoulli map"""
    return 2 * math.exp(-1 / beta) / math.sqrt(math.pi * beta) + erfc(1 / math.sqrt(beta))


@dataclass
class _Curve:
    """Fixed points (Delta(x), m(x)) of a scalar map sampled on an x grid"""
    x: np.ndarray
    m: np.ndarray
    delta: np.ndarray
    delta_of: object          # scalar x -> Delta(x)
    m_of: object              # scalar x -> m(x)
    delta_c: object = None    # Delta(0+) when the uniform fixed point exists

    @property
    def slope(self):
        return np.gradient(self.delta, self.x)


def _extrema(curve):
    """Interior local extrema of Delta(x) as ('min' | 'max', index)"""
    steps = np.diff(curve.delta)
    # f is known to about ROUNDOFF_NOISE * max|m| in absolute terms, so Delta = f / x to that over x
    noise = np.maximum(SLOPE_NOISE * float(np.max(np.abs(curve.delta))),
                       ROUNDOFF_NOISE * float(np.max(np.abs(curve.m))) / curve.x[1:])
    keep = np.flatnonzero(np.abs(steps) > noise)
    signs = np.sign(steps[keep])
    found = []
    for j in np.flatnonzero(signs[1:] != signs[:-1]):
        index = keep[j + 1]
        found.append(('min' if signs[j] < 0 else 'max', int(index)))
    if keep.size and signs[-1] > 0:
        raise GridTooCoarse("Delta(x) still increases at the end of the grid, raise x_max")
    return found


def _refine_extremum(curve, kind, index):
    lo = math.log(curve.x[max(index - 1, 0)])
    hi = math.log(curve.x[min(index + 1, curve.x.size - 1)])
    sign = 1.0 if kind == 'min' else -1.0
    res = minimize_scalar(lambda lx: sign * curve.delta_of(math.exp(lx)), bounds=(lo, hi),
                          method='bounded', options={'xatol': 1e-10})
    best = sign * res.fun
    grid_best = float(curve.delta[index])
    if sign * grid_best < sign * best:
        return grid_best, float(curve.x[index])
    return float(best), float(math.exp(res.x))


class ThresholdService:
    """Phase-transition thresholds of the Bayes-optimal scalar maps"""

    @staticmethod
    def uniform_stability(prior, prior_v=None, alpha=None):
        """
        Spectral threshold Delta_c where the uniform fixed point loses stability

        Args:
            prior (PriorSpec): Prior of X (or U in the bipartite case)
            prior_v (PriorSpec): Prior of V, bipartite only
            alpha (float): M / N, bipartite only

        Returns:
            float: Delta_c, or None when the prior has a non-zero mean
        """
        if prior.family is PriorFamily.COMMUNITY and prior_v is None:
            return 1.0 / prior.rank ** 2
        if not PriorService.is_zero_mean(prior):
            return None
        cov_u = PriorService.moments(prior)[1]
        if prior_v is None:
            return float(np.linalg.eigvalsh(cov_u).max()) ** 2
        ValidationService.require(ValidationService.validate_positive(alpha, 'alpha'))
        if not PriorService.is_zero_mean(prior_v):
            return None
        cov_v = PriorService.moments(prior_v)[1]
        lam = float(np.max(np.abs(np.linalg.eigvals(cov_u @ cov_v))))
        return math.sqrt(alpha) * lam

    @staticmethod
    def first_order_criterion(prior, tol=CRITERION_TOL):
        """First order when <x^3>^2 > 2 <x^2>^3 for a zero-mean rank-1 prior"""
        if prior.rank != 1:
            raise RankUnsupported("The first-order criterion is defined for rank 1")
        if not PriorService.is_zero_mean(prior):
            raise UnsupportedValue("The first-order criterion needs a zero-mean prior")
        second = float(PriorService.moments(prior)[1][0, 0])
        third = PriorService.third_moment_scalar(prior)
        margin = third ** 2 - 2 * second ** 3
        if abs(margin) <= tol:
            return TransitionOrder.INCONCLUSIVE
        return TransitionOrder.FIRST_ORDER if margin > 0 else TransitionOrder.SECOND_ORDER

    @staticmethod
    def default_grid(points=None, x_min=None, x_max=None):
        """Logarithmic x grid on [X_GRID_MIN, X_GRID_MAX]"""
        settings = current_config()
        return np.geomspace(x_min or settings.X_GRID_MIN, x_max or settings.X_GRID_MAX,
                            points or settings.X_GRID_POINTS)

    @staticmethod
    def scalar_map(tag, rho=None, rank=None):
        """Vectorized x -> f(x) for a model tag"""
        if tag not in MODEL_TAGS:
            raise UnsupportedValue(f"Unknown model tag '{tag}', expected one of {', '.join(MODEL_TAGS)}")
        if tag in ('community', 'jointly_sparse') and rank is None:
            raise ConfigError(f"Model '{tag}' needs a rank")

        def f(x):
            return ScalarSEService.f_se(tag, x, rho=rho, rank=rank)

        return f

    @staticmethod
    def _symmetric_curve(tag, rho, rank, x_grid):
        f = ThresholdService.scalar_map(tag, rho, rank)
        x = np.asarray(x_grid if x_grid is not None else ThresholdService.default_grid(), dtype=float)
        ValidationService.require(ValidationService.validate_grid(x, 'x_grid'))
        x = np.sort(x)
        m = np.asarray(f(x), dtype=float)
        prior = ScalarSEService.prior_for(tag, rho, rank if rank is not None else 1)
        return _Curve(x, m, m / x, lambda xi: float(f(xi)) / xi, lambda xi: float(f(xi)),
                      ThresholdService.uniform_stability(prior))

    @staticmethod
    def _bipartite_curve(tag_v, rho, alpha, x_grid):
        f = ThresholdService.scalar_map(tag_v, rho)
        x = np.sort(np.asarray(x_grid if x_grid is not None else ThresholdService.default_grid(), dtype=float))
        ValidationService.require(ValidationService.validate_grid(x, 'x_grid'))

        def delta_of(xi, fx=None):
            fx = f(xi) if fx is None else fx
            return (-alpha * fx + np.sqrt(alpha ** 2 * fx ** 2 + 4 * alpha * fx / xi)) / 2

        m = np.asarray(f(x), dtype=float)
        prior_v = ScalarSEService.prior_for(tag_v, rho)
        delta_c = ThresholdService.uniform_stability(PriorSpec.gaussian([0.0], [[1.0]]), prior_v, alpha)
        return _Curve(x, m, delta_of(x, m), lambda xi: float(delta_of(xi)), lambda xi: float(f(xi)), delta_c)

    @staticmethod
    def _transitions(curve, gap_of, refine=True):
        """Delta_Alg, Delta_IT and Delta_Dyn of a sampled curve, ``gap_of(x, x_low)`` the free-energy gap"""
        extrema = _extrema(curve)
        kinds = [kind for kind, _ in extrema]
        if not extrema:
            return Thresholds(delta_c=curve.delta_c)
        if kinds == ['max']:
            if curve.delta_c is None:
                raise GridTooCoarse("A lone maximum of Delta(x) needs a uniform fixed point")
            delta_alg = curve.delta_c
            low_end = 0
            delta_dyn, x_dyn = _refine_extremum(curve, 'max', extrema[0][1])
        elif kinds == ['min', 'max']:
            delta_alg, _ = _refine_extremum(curve, 'min', extrema[0][1])
            low_end = extrema[0][1]
            delta_dyn, x_dyn = _refine_extremum(curve, 'max', extrema[1][1])
        else:
            raise GridTooCoarse(f"Unexpected stationary pattern {kinds} of Delta(x)")
        k_max = extrema[-1][1]

        def x_low_of(target):
            """Lowest-x fixed point at the same Delta (0 for the uniform fixed point)"""
            if low_end == 0 or target >= curve.delta[0]:
                if curve.delta_c is None:
                    return float(curve.x[0])
                return 0.0
            branch_x, branch_d = curve.x[:low_end + 1], curve.delta[:low_end + 1]
            if not refine:
                return float(np.interp(target, branch_d[::-1], branch_x[::-1]))
            j = int(np.searchsorted(-branch_d, -target))
            j = min(max(j, 1), low_end)
            lo, hi = float(branch_x[j - 1]), float(branch_x[j])
            try:
                return brentq(lambda xi: curve.delta_of(xi) - target, lo, hi, xtol=1e-14, rtol=1e-12)
            except ValueError:
                return float(np.interp(target, branch_d[::-1], branch_x[::-1]))

        high = np.arange(k_max, curve.x.size)
        high = high[curve.delta[high] >= delta_alg]
        gaps = np.array([gap_of(float(curve.x[k]), x_low_of(float(curve.delta[k])), False) for k in high])
        crossing = np.flatnonzero((gaps[:-1] < 0) & (gaps[1:] >= 0))
        if crossing.size == 0:
            raise GridTooCoarse("No sign change of the free-energy gap on the informative branch")
        j = int(crossing[0])
        x_a, x_b = float(curve.x[high[j]]), float(curve.x[high[j + 1]])
        if refine:
            x_it = brentq(lambda xi: gap_of(xi, x_low_of(curve.delta_of(xi)), True), x_a, x_b,
                          xtol=1e-14, rtol=1e-10)
            delta_it = curve.delta_of(x_it)
        else:
            w = -gaps[j] / (gaps[j + 1] - gaps[j])
            delta_it = float((1 - w) * curve.delta[high[j]] + w * curve.delta[high[j + 1]])
        return Thresholds(delta_c=curve.delta_c, delta_alg=float(delta_alg),
                          delta_it=float(delta_it), delta_dyn=float(delta_dyn))

    @staticmethod
    def _symmetric_gap(curve, f_scalar):
        cumulative = cumulative_trapezoid(curve.m, curve.x, initial=0.0) + 0.5 * curve.x[0] * curve.m[0]

        def integral(lo, hi, exact):
            if exact:
                value, _ = quad(f_scalar, lo, hi, epsabs=1e-14, epsrel=1e-10, limit=200)
                return value
            return float(np.interp(hi, curve.x, cumulative) - np.interp(lo, curve.x, cumulative, left=0.0))

        def gap_of(x, x_low, exact):
            """phi at the fixed point x minus phi at x_low, both at Delta(x)"""
            delta = curve.delta_of(x) if exact else float(np.interp(x, curve.x, curve.delta))
            return 0.5 * (integral(x_low, x, exact) - delta * (x * x - x_low * x_low) / 2)

        return gap_of

    @staticmethod
    @log_call('thresholds')
    def thresholds(tag, rho=None, x_grid=None, rank=None, refine=None):
        """
        Delta_c, Delta_Alg, Delta_IT and Delta_Dyn by the parametric method

        Fixed points are (Delta(x), m(x)) = (f(x)/x, f(x)). Local extrema of
        Delta(x) are the spinodals, and Delta_IT is where the free energies of
        the informative and the low branch cross.

        Args:
            tag (str): Model tag
            rho (float): Sparsity or group fraction
            x_grid: Increasing positive grid, logarithmic by default
            rank (int): Number of groups (community) or rank (jointly_sparse)
            refine (bool): Polish Delta_IT with quad and brentq (default except for community)

        Returns:
            Thresholds: Fields absent when Delta(x) is monotone
        """
        if refine is None:
            refine = tag != 'community'
        curve = ThresholdService._symmetric_curve(tag, rho, rank, x_grid)
        f = ThresholdService.scalar_map(tag, rho, rank)
        result = ThresholdService._transitions(
            curve, ThresholdService._symmetric_gap(curve, lambda xi: float(f(xi))), refine)
        logger.info(f"Thresholds {tag} rho={rho} rank={rank}: {result.as_row()}")
        return result

    @staticmethod
    def bipartite_thresholds(tag_v, rho, alpha, x_grid=None, refine=True):
        """
        Thresholds of the spiked Wishart model with a unit Gaussian U side

        Delta(x) = (-alpha f + sqrt(alpha^2 f^2 + 4 alpha f / x)) / 2 with
        f = f_v(x) and x = m_u / Delta.
        """
        ValidationService.require(ValidationService.validate_positive(alpha, 'alpha'))
        curve = ThresholdService._bipartite_curve(tag_v, rho, alpha, x_grid)
        f = ThresholdService.scalar_map(tag_v, rho)
        cumulative = cumulative_trapezoid(curve.m, curve.x, initial=0.0) + 0.5 * curve.x[0] * curve.m[0]

        def relative_potential(x, exact):
            """Potential of the fixed point at x relative to the uniform one"""
            if x == 0.0:
                return 0.0
            fx = float(f(x))
            delta = curve.delta_of(x)
            if exact:
                area, _ = quad(lambda xi: float(f(xi)), 0.0, x, epsabs=1e-14, epsrel=1e-10, limit=200)
            else:
                area = float(np.interp(x, curve.x, cumulative))
            y = alpha * fx / delta
            return alpha * area + (y - math.log1p(y)) - alpha * x * fx

        def gap_of(x, x_low, exact):
            return relative_potential(x, exact) - relative_potential(x_low, exact)

        result = ThresholdService._transitions(curve, gap_of, refine)
        logger.info(f"Bipartite thresholds {tag_v} rho={rho} alpha={alpha}: {result.as_row()}")
        return result

    @staticmethod
    def fixed_point_curve(tag, rho=None, x_grid=None, rank=None):
        """
        Rows (x, delta, m, stable, free_energy_gap) of the parametrized fixed points

        ``free_energy_gap`` is phi at the fixed point minus phi on the low
        branch at the same Delta; zero on the low branch.
        """
        curve = ThresholdService._symmetric_curve(tag, rho, rank, x_grid)
        gap_of = ThresholdService._symmetric_gap(curve, None)
        extrema = _extrema(curve)
        low_end = extrema[0][1] if [k for k, _ in extrema] == ['min', 'max'] else 0
        low_x, low_d = curve.x[:low_end + 1], curve.delta[:low_end + 1]
        rows = []
        for k, (x, m, delta, slope) in enumerate(zip(curve.x, curve.m, curve.delta, curve.slope)):
            if not extrema or k <= low_end:
                gap = 0.0
            else:
                if low_end and delta < low_d[0]:
                    x_low = float(np.interp(delta, low_d[::-1], low_x[::-1]))
                else:
                    x_low = 0.0 if curve.delta_c is not None else float(curve.x[0])
                gap = gap_of(float(x), x_low, False)
            rows.append({'x': float(x), 'delta': float(delta), 'm': float(m),
                         'stable': bool(slope < 0), 'free_energy_gap': float(gap)})
        return rows

    @staticmethod
    def tri_critical_point(tag, bracket=None, tol=1e-5, x_grid=None, rank=None):
        """
        Bisection on rho for the end of the first-order line

        Args:
            tag (str): Model tag
            bracket (tuple): (rho_lo, rho_hi) with a transition at rho_lo only

        Returns:
            tuple: (delta_tri, rho_tri)
        """
        lo, hi = bracket or TRI_CRITICAL_BRACKETS.get(tag, (None, None))
        if lo is None:
            raise ConfigError(f"No default tri-critical bracket for '{tag}'")

        def classify(rho):
            try:
                return ThresholdService.thresholds(tag, rho, x_grid, rank)
            except GridTooCoarse as e:
                logger.warning(f"Tri-critical bisection rho={rho}: {e}")
                return Thresholds()

        at_lo = classify(lo)
        if not at_lo.first_order or classify(hi).first_order:
            raise ConfigError(f"Bracket ({lo}, {hi}) does not straddle the end of the first-order line")
        last = at_lo
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            result = classify(mid)
            if result.first_order:
                lo, last = mid, result
            else:
                hi = mid
        delta_tri = 0.5 * (last.delta_alg + last.delta_dyn)
        logger.info(f"Tri-critical point of {tag}: delta={delta_tri:.6g} rho={0.5 * (lo + hi):.6g}")
        return delta_tri, 0.5 * (lo + hi)

    @staticmethod
    def asymptotic_thresholds(tag, regime, value, rho=None, alpha=None):
        """
        Leading-order thresholds for small rho or large rank

        Args:
            tag (str): Model tag
            regime (str): 'small_rho' (value = rho) or 'large_rank' (value = r)
            value (float): rho or r
            rho (float): Sparsity for jointly_sparse at large rank
            alpha (float): Aspect ratio, selects the bipartite forms

        Returns:
            Thresholds: Predicted thresholds
        """
        if regime == 'large_rank':
            r = value
            if tag == 'community':
                log_r = math.log(r)
                return Thresholds(1 / r ** 2, 1 / r ** 2, 1 / (4 * r * log_r), 1 / (2 * r * log_r))
            if tag == 'jointly_sparse':
                ValidationService.require(ValidationService.validate_probability(rho))
                return Thresholds(rho ** 2, rho ** 2, rho, rho)
            raise UnsupportedValue(f"No large-rank expansion for '{tag}'")
        if regime != 'small_rho':
            raise UnsupportedValue(f"Unknown regime '{regime}'")
        rho = value
        ValidationService.require(ValidationService.validate_probability(rho, allow_one=False))
        log_rho = math.log(rho)
        if alpha is not None:
            ValidationService.require(ValidationService.validate_positive(alpha, 'alpha'))
            delta_c = rho * math.sqrt(alpha)
            scale = math.sqrt(-rho * alpha / log_rho)
            if tag == 'rademacher_bernoulli':
                return Thresholds(delta_c, delta_c, scale / 2, scale / math.sqrt(2))
            if tag == 'gauss_bernoulli':
                return Thresholds(delta_c, delta_c, GB_BIPARTITE_IT_CONSTANT * scale,
                                  GB_BIPARTITE_DYN_CONSTANT * scale)
            raise UnsupportedValue(f"No bipartite small-rho expansion for '{tag}'")
        if tag == 'bernoulli':
            return Thresholds(None, math.e * rho ** 2, rho / (-4 * log_rho), rho / (-2 * log_rho))
        if tag == 'rademacher_bernoulli':
            return Thresholds(rho ** 2, rho ** 2, rho / (-4 * log_rho), rho / (-2 * log_rho))
        if tag == 'gauss_bernoulli':
            return Thresholds(rho ** 2, rho ** 2, GB_IT_CONSTANT * rho / -log_rho,
                              GB_DYN_CONSTANT * rho / -log_rho)
        if tag == 'two_balanced':
            p = rho * (1 - rho)
            return Thresholds(1.0, 1.0, 1 / (-4 * p * math.log(p)), 1 / (-2 * p * math.log(p)))
        raise UnsupportedValue(f"No small-rho expansion for '{tag}'")

    @staticmethod
    @lru_cache(maxsize=1)
    def small_rho_constants():
        """
        Gauss-Bernoulli small-rho constants computed from the limit map

        Returns:
            dict: dyn, it, bipartite_dyn and bipartite_it prefactors
        """
        dyn = minimize_scalar(lambda b: -_small_rho_limit(b) / b, bounds=(0.05, 50.0), method='bounded',
                              options={'xatol': 1e-10})
        bip = minimize_scalar(lambda b: -erfc(1 / math.sqrt(b)) / b, bounds=(0.05, 50.0), method='bounded',
                              options={'xatol': 1e-10})

        def area_gap(beta):
            area, _ = quad(_small_rho_limit, 0.0, beta, epsabs=1e-14, epsrel=1e-12)
            return area - 0.5 * beta * _small_rho_limit(beta)

        beta_it = brentq(area_gap, 0.1, 100.0, xtol=1e-14)
        it = _small_rho_limit(beta_it) / beta_it
        return {
            'dyn': float(-dyn.fun),
            'it': float(it),
            'bipartite_dyn': math.sqrt(-bip.fun),
            'bipartite_it': math.sqrt(it),
        }


def uniform_stability(prior, prior_v=None, alpha=None):
    return ThresholdService.uniform_stability(prior, prior_v, alpha)


def first_order_criterion(prior):
    return ThresholdService.first_order_criterion(prior)


def thresholds(tag, rho=None, x_grid=None, rank=None):
    return ThresholdService.thresholds(tag, rho, x_grid, rank)


def asymptotic_thresholds(tag, regime, value, rho=None, alpha=None):
    return ThresholdService.asymptotic_thresholds(tag, regime, value, rho, alpha)
