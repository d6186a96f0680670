"""
Domain models for the Low-RAMP toolkit
Prior and channel specifications, problem instances, solver and state-evolution types
"""
from dataclasses import dataclass, field, replace
from enum import Enum
import math
from typing import List, Optional, Tuple

import numpy as np

from config import Config
from lowramp import current_config
from lowramp.validation import (
    ConfigError, InvalidPrior, UnsupportedValue, ValidationService,
)


class PriorFamily(Enum):
    """Prior distribution families"""
    ISING = "ising"
    BERNOULLI = "bernoulli"
    RADEMACHER_BERNOULLI = "rademacher_bernoulli"
    GAUSS_BERNOULLI_JOINT = "gauss_bernoulli_joint"
    GAUSS_BERNOULLI_INDEP = "gauss_bernoulli_indep"
    GAUSSIAN = "gaussian"
    COMMUNITY = "community"
    TWO_BALANCED = "two_balanced"
    SPHERICAL = "spherical"


class ChannelFamily(Enum):
    """Output channel families"""
    GAUSSIAN = "gaussian"
    CONVENTIONAL = "conventional"
    SBM = "sbm"
    EXPONENTIAL = "exponential"
    RANDOM_GAUSSIAN = "random_gaussian"   # quenched disorder, Y ~ N(0, J^2)
    RANDOM_PM1 = "random_pm1"             # quenched disorder, Y = +-J


class InstanceKind(Enum):
    SYMMETRIC = "symmetric"
    BIPARTITE = "bipartite"


class AmpVariant(Enum):
    """Low-RAMP field-update variants"""
    FULL = "full"
    SELF_AVERAGED = "self_averaged"
    BAYES_OPTIMAL = "bayes_optimal"


class InitMode(Enum):
    RANDOM = "random"
    PLANTED = "planted"


class SEMode(Enum):
    """State-evolution modes"""
    GENERAL = "general"
    BAYES_OPTIMAL = "bayes_optimal"
    QUENCHED_CONVENTIONAL = "quenched_conventional"


class Symmetry(Enum):
    """Symmetry group used when aligning an estimate with the planted signal"""
    NONE = "none"
    SIGN = "sign"
    PERMUTATION = "permutation"


class TransitionOrder(Enum):
    SECOND_ORDER = "second_order"
    FIRST_ORDER = "first_order"
    INCONCLUSIVE = "inconclusive"


class Command(Enum):
    """CLI commands"""
    GEN = "gen"
    AMP = "amp"
    SE = "se"
    PHASE_SCAN = "phase-scan"
    SPECTRAL = "spectral"
    COMPARE = "compare"


_RHO_FAMILIES = {
    PriorFamily.ISING, PriorFamily.BERNOULLI, PriorFamily.RADEMACHER_BERNOULLI,
    PriorFamily.GAUSS_BERNOULLI_JOINT, PriorFamily.GAUSS_BERNOULLI_INDEP,
    PriorFamily.TWO_BALANCED,
}
_SCALAR_FAMILIES = {
    PriorFamily.ISING, PriorFamily.BERNOULLI, PriorFamily.RADEMACHER_BERNOULLI,
    PriorFamily.TWO_BALANCED,
}


@dataclass(frozen=True)
class PriorSpec:
    """Prior distribution P_X (or P_U, P_V) with its parameters"""
    family: PriorFamily
    rank: int = 1
    rho: Optional[float] = None
    mean: Optional[Tuple[float, ...]] = None
    cov: Optional[Tuple[Tuple[float, ...], ...]] = None

    def __post_init__(self):
        ValidationService.require(ValidationService.validate_rank(self.rank), InvalidPrior)
        if self.family in _RHO_FAMILIES:
            ValidationService.require(
                ValidationService.validate_probability(
                    self.rho, 'rho', allow_one=self.family is not PriorFamily.TWO_BALANCED),
                InvalidPrior)
        if self.family in _SCALAR_FAMILIES and self.rank != 1:
            raise InvalidPrior(f"Prior {self.family.value} is defined for rank 1 only")
        if self.family is PriorFamily.COMMUNITY and self.rank < 2:
            raise InvalidPrior("Community prior needs at least 2 groups")
        if self.family is PriorFamily.GAUSSIAN:
            if self.mean is None or self.cov is None:
                raise InvalidPrior("Gaussian prior needs mean and cov")
            if len(self.mean) != self.rank:
                raise InvalidPrior(f"Gaussian mean must have length {self.rank}")
            ValidationService.require(
                ValidationService.validate_covariance(self.cov, self.rank), InvalidPrior)

    # Constructors

    @classmethod
    def ising(cls, rho=0.5):
        return cls(PriorFamily.ISING, 1, rho=float(rho))

    @classmethod
    def bernoulli(cls, rho):
        return cls(PriorFamily.BERNOULLI, 1, rho=float(rho))

    @classmethod
    def rademacher_bernoulli(cls, rho):
        return cls(PriorFamily.RADEMACHER_BERNOULLI, 1, rho=float(rho))

    @classmethod
    def gauss_bernoulli(cls, rho, rank=1, joint=True):
        family = PriorFamily.GAUSS_BERNOULLI_JOINT if joint else PriorFamily.GAUSS_BERNOULLI_INDEP
        return cls(family, int(rank), rho=float(rho))

    @classmethod
    def gaussian(cls, mean=None, cov=None, rank=None):
        if rank is None:
            rank = len(mean) if mean is not None else np.asarray(cov).shape[0] if cov is not None else 1
        mean = np.zeros(rank) if mean is None else np.asarray(mean, dtype=float).ravel()
        cov = np.eye(rank) if cov is None else np.atleast_2d(np.asarray(cov, dtype=float))
        return cls(PriorFamily.GAUSSIAN, int(rank),
                   mean=tuple(float(v) for v in mean),
                   cov=tuple(tuple(float(v) for v in row) for row in cov))

    @classmethod
    def community(cls, rank):
        return cls(PriorFamily.COMMUNITY, int(rank))

    @classmethod
    def two_balanced(cls, rho):
        return cls(PriorFamily.TWO_BALANCED, 1, rho=float(rho))

    @classmethod
    def spherical(cls, rank=1):
        return cls(PriorFamily.SPHERICAL, int(rank))

    # Array views

    @property
    def mean_vector(self):
        return np.asarray(self.mean, dtype=float)

    @property
    def cov_matrix(self):
        return np.asarray(self.cov, dtype=float)

    def to_config(self):
        """Tag plus params, the form used in meta.json and config files"""
        params = {'rank': self.rank}
        if self.rho is not None:
            params['rho'] = self.rho
        if self.family is PriorFamily.GAUSSIAN:
            params['mean'] = list(self.mean)
            params['cov'] = [list(row) for row in self.cov]
        return {'family': self.family.value, 'params': params}

    @classmethod
    def from_config(cls, data):
        try:
            family = PriorFamily(data['family'])
        except (KeyError, ValueError):
            raise InvalidPrior(f"Unknown prior family: {data.get('family')!r}")
        params = dict(data.get('params', {}))
        rank = int(params.get('rank', 1))
        if family is PriorFamily.GAUSSIAN:
            return cls.gaussian(params.get('mean'), params.get('cov'), rank=rank)
        rho = params.get('rho')
        return cls(family, rank, rho=None if rho is None else float(rho))


@dataclass(frozen=True)
class ChannelSpec:
    """Output channel g(Y, w); ``assumed`` is the likelihood used for inference when it differs"""
    family: ChannelFamily
    delta: Optional[float] = None
    beta: Optional[float] = None
    p_out: Optional[float] = None
    mu: Optional[float] = None
    strength: Optional[float] = None
    assumed: Optional['ChannelSpec'] = None

    def __post_init__(self):
        if self.family is ChannelFamily.GAUSSIAN:
            ValidationService.require(ValidationService.validate_positive(self.delta, 'delta'))
        elif self.family is ChannelFamily.CONVENTIONAL:
            ValidationService.require(ValidationService.validate_positive(self.beta, 'beta'))
        elif self.family is ChannelFamily.SBM:
            ValidationService.require(
                ValidationService.validate_probability(self.p_out, 'p_out', allow_one=False))
            if self.mu is None or not math.isfinite(self.mu):
                raise ConfigError("Missing required field: mu")
        elif self.family in (ChannelFamily.RANDOM_GAUSSIAN, ChannelFamily.RANDOM_PM1):
            ValidationService.require(ValidationService.validate_positive(self.strength, 'strength'))
        if self.assumed is not None:
            if self.assumed.assumed is not None:
                raise ConfigError("The assumed channel cannot itself carry a mismatch")
            if self.assumed.is_quenched:
                raise UnsupportedValue("Quenched disorder has no likelihood to assume")

    @classmethod
    def gaussian(cls, delta, assumed=None):
        return cls(ChannelFamily.GAUSSIAN, delta=float(delta), assumed=assumed)

    @classmethod
    def conventional(cls, beta):
        return cls(ChannelFamily.CONVENTIONAL, beta=float(beta))

    @classmethod
    def sbm(cls, p_out, mu, assumed=None):
        return cls(ChannelFamily.SBM, p_out=float(p_out), mu=float(mu), assumed=assumed)

    @classmethod
    def exponential(cls, assumed=None):
        return cls(ChannelFamily.EXPONENTIAL, assumed=assumed)

    @classmethod
    def random_gaussian(cls, strength=1.0, assumed=None):
        return cls(ChannelFamily.RANDOM_GAUSSIAN, strength=float(strength), assumed=assumed)

    @classmethod
    def random_pm1(cls, strength=1.0, assumed=None):
        return cls(ChannelFamily.RANDOM_PM1, strength=float(strength), assumed=assumed)

    @property
    def is_quenched(self):
        return self.family in (ChannelFamily.RANDOM_GAUSSIAN, ChannelFamily.RANDOM_PM1)

    @property
    def likelihood(self):
        """Channel whose g(Y, w) the algorithm uses"""
        if self.assumed is not None:
            return self.assumed
        if self.is_quenched:
            return ChannelSpec.conventional(1.0)
        return self

    @property
    def generating(self):
        return replace(self, assumed=None)

    def with_assumed(self, assumed):
        return replace(self, assumed=assumed)

    def to_config(self):
        params = {key: getattr(self, key)
                  for key in ('delta', 'beta', 'p_out', 'mu', 'strength')
                  if getattr(self, key) is not None}
        data = {'family': self.family.value, 'params': params}
        if self.assumed is not None:
            data['assumed'] = self.assumed.to_config()
        return data

    @classmethod
    def from_config(cls, data):
        try:
            family = ChannelFamily(data['family'])
        except (KeyError, ValueError):
            raise ConfigError(f"Unknown channel family: {data.get('family')!r}")
        params = {key: float(value) for key, value in dict(data.get('params', {})).items()}
        assumed = data.get('assumed')
        return cls(family, assumed=None if assumed is None else cls.from_config(assumed), **params)


@dataclass(frozen=True)
class NoiseParams:
    """Effective noise parameters of a (generating, assumed) channel pair"""
    inv_delta_tilde: float
    inv_delta_hat: float
    r_bar: float
    delta: Optional[float] = None  # Fisher Delta of the generating channel
    bayes_optimal: bool = False

    @property
    def delta_tilde(self):
        return 1.0 / self.inv_delta_tilde

    @property
    def delta_hat(self):
        return math.inf if self.inv_delta_hat == 0 else 1.0 / self.inv_delta_hat

    @property
    def quenched(self):
        return self.inv_delta_hat == 0

    @classmethod
    def bayes(cls, delta):
        return cls(1.0 / delta, 1.0 / delta, 0.0, float(delta), True)


@dataclass
class InputResult:
    """Output of f_in: posterior mean, covariance and log-normalization"""
    mean: np.ndarray
    covariance: np.ndarray
    log_z: np.ndarray


@dataclass
class ProblemInstance:
    """A generated (planted or quenched) problem with its score matrices"""
    kind: InstanceKind
    n: int
    m: int
    y: np.ndarray            # strict upper triangle (symmetric) or n x m (bipartite)
    s_matrix: np.ndarray
    r_matrix: np.ndarray
    channel: ChannelSpec
    priors: Tuple[Optional[PriorSpec], ...]
    seed: Optional[int]
    x0: Optional[np.ndarray] = None
    u0: Optional[np.ndarray] = None
    v0: Optional[np.ndarray] = None

    @property
    def alpha(self):
        return self.m / self.n

    @property
    def planted(self):
        if self.kind is InstanceKind.SYMMETRIC:
            return self.x0
        if self.u0 is None:
            return None
        return self.u0, self.v0

    @property
    def is_planted(self):
        return self.x0 is not None or self.u0 is not None

    def y_dense(self):
        """Observed matrix as a dense array (symmetric case: zero diagonal)"""
        if self.kind is InstanceKind.BIPARTITE:
            return self.y
        dense = np.zeros((self.n, self.n))
        iu = np.triu_indices(self.n, 1)
        dense[iu] = self.y
        dense.T[iu] = self.y
        return dense


# AmpConfig field -> Config attribute supplying its default
AMP_CONFIG_KEYS = {
    'damping': 'DAMPING',
    'tol': 'TOLERANCE',
    'max_iters': 'MAX_ITERS',
    'init_scale': 'INIT_SCALE',
}


@dataclass(frozen=True)
class AmpConfig:
    """Low-RAMP iteration settings; unset numeric fields come from the active configuration profile"""
    damping: Optional[float] = None
    tol: Optional[float] = None
    max_iters: Optional[int] = None
    init: InitMode = InitMode.RANDOM
    init_scale: Optional[float] = None
    variant: AmpVariant = AmpVariant.SELF_AVERAGED
    adaptive_damping: bool = False
    seed: int = 0
    track_free_energy: bool = False
    mse_symmetry: Symmetry = Symmetry.NONE

    def __post_init__(self):
        settings = current_config()
        for name, key in AMP_CONFIG_KEYS.items():
            if getattr(self, name) is None:
                object.__setattr__(self, name, getattr(settings, key))
        if not (0 < self.damping <= 1):
            raise ConfigError(f"Damping must lie in (0, 1], got {self.damping}")
        if self.init is InitMode.RANDOM and not self.init_scale > 0:
            raise ConfigError("Random initialization scale must be positive (exact zero init is forbidden)")
        ValidationService.require(ValidationService.validate_positive(self.tol, 'tol'))
        ValidationService.require(ValidationService.validate_size(self.max_iters, 'max_iters'))

    @classmethod
    def from_config(cls, settings=None, **overrides):
        """
        Settings with defaults taken from a configuration class

        Args:
            settings: Config class, the active profile when omitted
            **overrides: Explicit field values

        Returns:
            AmpConfig: Validated settings
        """
        settings = settings or current_config()
        values = {name: getattr(settings, key) for name, key in AMP_CONFIG_KEYS.items()}
        values.update(overrides)
        return cls(**values)

    @classmethod
    def default_for(cls, n, settings=None, **overrides):
        """Full variant for small systems, self-averaged from SELF_AVERAGED_MIN_N sites on"""
        settings = settings or current_config()
        variant = AmpVariant.SELF_AVERAGED if n >= settings.SELF_AVERAGED_MIN_N else AmpVariant.FULL
        overrides.setdefault('variant', variant)
        return cls.from_config(settings, **overrides)


@dataclass
class AmpState:
    """Per-site estimators, fields and their previous-iteration copies"""
    x_hat: np.ndarray
    sigma: np.ndarray
    x_hat_old: np.ndarray
    b: np.ndarray
    b_old: np.ndarray
    a: np.ndarray
    a_old: np.ndarray
    t: int = 0
    conv: float = math.inf
    damping: float = 1.0
    free_energy_trace: List[float] = field(default_factory=list)

    @classmethod
    def initial(cls, x_hat, rank, damping, shared_a=False):
        """Zero fields around ``x_hat``; ``shared_a`` keeps a single (r, r) A for all sites"""
        n = x_hat.shape[0]
        a_shape = (rank, rank) if shared_a else (n, rank, rank)
        return cls(
            x_hat=np.array(x_hat, dtype=float),
            sigma=np.zeros((n, rank, rank)),
            x_hat_old=np.zeros((n, rank)),
            b=np.zeros((n, rank)),
            b_old=np.zeros((n, rank)),
            a=np.zeros(a_shape),
            a_old=np.zeros(a_shape),
            damping=damping,
        )


@dataclass(frozen=True)
class TraceRecord:
    t: int
    conv: float
    mse: float
    free_energy: float


@dataclass
class AmpResult:
    """Outcome of a symmetric run (``state``) or bipartite run (``state_u``/``state_v``)"""
    converged: bool
    trace: List[TraceRecord]
    state: Optional[AmpState] = None
    state_u: Optional[AmpState] = None
    state_v: Optional[AmpState] = None


@dataclass(frozen=True)
class IntegrationConfig:
    """Quadrature and quasi-Monte-Carlo budgets"""
    gh_nodes: int = Config.GH_NODES
    mc_samples: int = Config.MC_SAMPLES
    mc_seed: int = Config.MC_SEED
    target_tol: float = Config.INTEGRATION_TOL

    def __post_init__(self):
        if self.gh_nodes < 61 or self.gh_nodes % 2 == 0:
            raise ConfigError(f"gh_nodes must be odd and at least 61, got {self.gh_nodes}")
        if self.mc_samples < 100000:
            raise ConfigError(f"mc_samples must be at least 1e5, got {self.mc_samples}")


@dataclass(frozen=True)
class SEOrderParams:
    """Order parameters (M, Q, Sigma) of the state evolution"""
    m: np.ndarray
    q: np.ndarray
    sigma: np.ndarray

    @classmethod
    def bayes(cls, m, second_moment):
        m = np.atleast_2d(np.asarray(m, dtype=float))
        return cls(m, m.copy(), np.atleast_2d(second_moment) - m)

    def max_abs_diff(self, other):
        return max(float(np.max(np.abs(self.m - other.m))),
                   float(np.max(np.abs(self.q - other.q))),
                   float(np.max(np.abs(self.sigma - other.sigma))))

    def damped(self, new, damping):
        return SEOrderParams(
            damping * new.m + (1 - damping) * self.m,
            damping * new.q + (1 - damping) * self.q,
            damping * new.sigma + (1 - damping) * self.sigma,
        )


@dataclass(frozen=True)
class BipartiteOrderParams:
    u: SEOrderParams
    v: SEOrderParams

    def max_abs_diff(self, other):
        return max(self.u.max_abs_diff(other.u), self.v.max_abs_diff(other.v))

    def damped(self, new, damping):
        return BipartiteOrderParams(self.u.damped(new.u, damping), self.v.damped(new.v, damping))


@dataclass
class SEFixedPoint:
    """Result of iterating the state evolution"""
    params: object
    converged: bool
    iterations: int
    mse: Optional[float] = None


@dataclass(frozen=True)
class SEModel:
    """State-evolution model: algorithm prior(s), planted prior(s), noise and mode"""
    prior: PriorSpec
    noise: NoiseParams
    mode: SEMode = SEMode.BAYES_OPTIMAL
    integration: IntegrationConfig = field(default_factory=IntegrationConfig)
    prior0: Optional[PriorSpec] = None
    prior_v: Optional[PriorSpec] = None
    prior_v0: Optional[PriorSpec] = None
    alpha: Optional[float] = None

    def __post_init__(self):
        if self.mode is SEMode.BAYES_OPTIMAL:
            if not self.noise.bayes_optimal:
                raise ConfigError("Bayes-optimal mode needs matching generating and assumed channels")
            if self.prior0 is not None and self.prior0 != self.prior:
                raise ConfigError("Bayes-optimal mode needs the planted prior to equal the algorithm prior")
            if self.prior_v0 is not None and self.prior_v0 != self.prior_v:
                raise ConfigError("Bayes-optimal mode needs the planted prior to equal the algorithm prior")
        if self.mode is SEMode.QUENCHED_CONVENTIONAL and not self.noise.quenched:
            raise ConfigError("Quenched mode needs 1/delta_hat = 0")
        if self.prior_v is not None:
            ValidationService.require(ValidationService.validate_positive(self.alpha, 'alpha'))

    @property
    def planted_prior(self):
        return self.prior0 if self.prior0 is not None else self.prior

    @property
    def planted_prior_v(self):
        return self.prior_v0 if self.prior_v0 is not None else self.prior_v

    @property
    def bipartite(self):
        return self.prior_v is not None

    @classmethod
    def bayes(cls, prior, delta, integration=None, prior_v=None, alpha=None):
        return cls(prior, NoiseParams.bayes(delta), SEMode.BAYES_OPTIMAL,
                   integration or IntegrationConfig(), prior_v=prior_v, alpha=alpha)

    @classmethod
    def for_noise(cls, prior, noise, integration=None, prior0=None, prior_v=None, alpha=None):
        """Picks the mode implied by the noise parameters"""
        if noise.bayes_optimal and (prior0 is None or prior0 == prior):
            mode = SEMode.BAYES_OPTIMAL
        elif noise.quenched:
            mode = SEMode.QUENCHED_CONVENTIONAL
        else:
            mode = SEMode.GENERAL
        return cls(prior, noise, mode, integration or IntegrationConfig(),
                   prior0=prior0, prior_v=prior_v, alpha=alpha)


@dataclass(frozen=True)
class Thresholds:
    """Phase-transition thresholds of a model at one parameter point"""
    delta_c: Optional[float] = None
    delta_alg: Optional[float] = None
    delta_it: Optional[float] = None
    delta_dyn: Optional[float] = None
    tri_critical: bool = False

    @property
    def first_order(self):
        return self.delta_dyn is not None

    def as_row(self):
        return {
            'delta_c': self.delta_c,
            'delta_alg': self.delta_alg,
            'delta_it': self.delta_it,
            'delta_dyn': self.delta_dyn,
        }


@dataclass
class ExperimentConfig:
    """Resolved CLI configuration of one command"""
    command: Command
    prior: Optional[PriorSpec] = None
    prior_v: Optional[PriorSpec] = None
    channel: Optional[ChannelSpec] = None
    n: Optional[int] = None
    m: Optional[int] = None
    seed: int = 0
    rho_grid: Tuple[float, ...] = ()
    delta_grid: Tuple[float, ...] = ()
    output: Optional[str] = None
    instance_dir: Optional[str] = None
    amp: AmpConfig = field(default_factory=AmpConfig)
    model_tag: Optional[str] = None
    rank: Optional[int] = None
    alpha: Optional[float] = None
    output_format: str = 'csv'
    threads: int = Config.THREADS
    rescale: Optional[str] = None
    extras: dict = field(default_factory=dict)
