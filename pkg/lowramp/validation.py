"""
Validation utilities and error types for the Low-RAMP toolkit
Includes parameter checks, the exception hierarchy and call logging
"""
from functools import wraps
import logging
import math
import time

import numpy as np

logger = logging.getLogger(__name__)


class LowRampError(Exception):
    """Base class for every error raised by the toolkit"""


class ConfigError(LowRampError):
    """Invalid user input (CLI exit code 2)"""


class InvalidPrior(ConfigError):
    pass


class RankUnsupported(ConfigError):
    pass


class UnsupportedValue(ConfigError):
    pass


class ShapeMismatch(ConfigError):
    pass


class NumericalError(LowRampError):
    """Numerical failure (CLI exit code 3)"""


class NonConvergentIntegral(NumericalError):
    pass


class NonIntegrableChannel(NumericalError):
    pass


class ProbabilityOutOfRange(NumericalError):
    pass


class DivergedEstimates(NumericalError):
    pass


class NonPSDOrderParam(NumericalError):
    pass


class GridTooCoarse(NumericalError):
    pass


class NoInformativeFixedPoint(NumericalError):
    """No informative spectral fixed point; ``mse`` holds the prior-variance error"""

    def __init__(self, message, mse=None):
        super().__init__(message)
        self.mse = mse


class ValidationService:
    """Centralized parameter validation"""

    @staticmethod
    def validate_probability(value, name='rho', allow_zero=False, allow_one=True):
        """Check that a probability-like parameter lies in its admissible interval"""
        if value is None:
            return False, f"Missing required field: {name}"
        try:
            value = float(value)
        except (TypeError, ValueError):
            return False, f"Field {name} must be a number"
        if not math.isfinite(value):
            return False, f"Field {name} must be finite"
        low_ok = value >= 0 if allow_zero else value > 0
        high_ok = value <= 1 if allow_one else value < 1
        if not (low_ok and high_ok):
            low = '[' if allow_zero else '('
            high = ']' if allow_one else ')'
            return False, f"Field {name}={value} outside {low}0, 1{high}"
        return True, "Valid probability"

    @staticmethod
    def validate_positive(value, name):
        if value is None:
            return False, f"Missing required field: {name}"
        try:
            value = float(value)
        except (TypeError, ValueError):
            return False, f"Field {name} must be a number"
        if not math.isfinite(value) or value <= 0:
            return False, f"Field {name} must be positive, got {value}"
        return True, "Valid value"

    @staticmethod
    def validate_rank(rank, minimum=1):
        if not isinstance(rank, (int, np.integer)) or isinstance(rank, bool):
            return False, f"Rank must be an integer, got {rank!r}"
        if rank < minimum:
            return False, f"Rank must be at least {minimum}, got {rank}"
        return True, "Valid rank"

    @staticmethod
    def validate_covariance(cov, rank, strict=True):
        """Check a symmetric positive (semi)definite covariance of the declared rank"""
        cov = np.asarray(cov, dtype=float)
        if cov.shape != (rank, rank):
            return False, f"Covariance must be {rank}x{rank}, got shape {cov.shape}"
        if not np.all(np.isfinite(cov)):
            return False, "Covariance has non-finite entries"
        if not np.allclose(cov, cov.T, atol=1e-12):
            return False, "Covariance must be symmetric"
        min_eig = np.linalg.eigvalsh(cov).min()
        if strict and min_eig <= 0:
            return False, f"Covariance must be positive definite (min eigenvalue {min_eig:.3g})"
        if not strict and min_eig < -1e-12:
            return False, f"Covariance must be positive semidefinite (min eigenvalue {min_eig:.3g})"
        return True, "Valid covariance"

    @staticmethod
    def validate_size(value, name, minimum=1):
        if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
            return False, f"Field {name} must be an integer"
        if value < minimum:
            return False, f"Field {name} must be at least {minimum}, got {value}"
        return True, "Valid size"

    @staticmethod
    def validate_grid(values, name):
        """Grids must be non-empty, finite and positive"""
        values = np.asarray(values, dtype=float).ravel()
        if values.size == 0:
            return False, f"Grid {name} is empty"
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            return False, f"Grid {name} must contain positive finite values"
        return True, "Valid grid"

    @staticmethod
    def require(result, error_class=ConfigError):
        """Raise ``error_class`` when a ``(ok, message)`` validation result failed"""
        ok, message = result
        if not ok:
            raise error_class(message)
        return message


def log_call(action):
    """Decorator to log completion time of a numerical action"""
    def decorator(f):
        @wraps(f)
        def decorated_function(*args, **kwargs):
            started = time.perf_counter()

            # Execute the function first
            result = f(*args, **kwargs)

            # Log the action
            try:
                logger.info(f"{action} completed in {time.perf_counter() - started:.3f}s")
            except Exception as e:
                logger.error(f"Failed to log action {action}: {e}")

            return result
        return decorated_function
    return decorator
