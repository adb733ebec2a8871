"""
Domain types shared by every engine: parameters, weighted samples,
trajectories, inference reports and the missing-data model contract.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Optional, Sequence

import numpy as np
from scipy.special import softmax

from utils import symmetric_inverse, symmetrize

logger = logging.getLogger(__name__)


# Errors

class EstimationError(Exception):
    """Base class for engine failures. May carry the partial trajectory."""

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class ConstraintError(EstimationError):
    pass


class CapabilityError(EstimationError):
    pass


class InvalidStepError(EstimationError):
    pass


class DegenerateWeightsError(EstimationError):
    pass


class BudgetExhaustedError(EstimationError):
    def __init__(self, message, accepted, proposals):
        super().__init__(message)
        self.accepted = accepted
        self.proposals = proposals


class InvalidInitError(EstimationError):
    pass


class InsufficientSampleError(EstimationError):
    pass


class OptimizationError(EstimationError):
    def __init__(self, message, iterates=None, trajectory=None):
        super().__init__(message, trajectory)
        self.iterates = list(iterates or [])


class RootFailureError(EstimationError):
    pass


class SingularityError(EstimationError):
    pass


class IndefiniteInformationError(EstimationError):
    def __init__(self, message, eigenvalues):
        super().__init__(message)
        self.eigenvalues = np.asarray(eigenvalues)


class InsufficientPilotError(EstimationError):
    pass


class AugmentationStallError(EstimationError):
    def __init__(self, message, state, trajectory=None):
        super().__init__(message, trajectory)
        self.state = state


class EmptyInputError(EstimationError):
    pass


class ConfigError(Exception):
    """Invalid experiment or engine configuration."""

    def __init__(self, message, field_name=None):
        super().__init__(message)
        self.field_name = field_name


# Parameters

class ConstraintKind(str, Enum):
    UNCONSTRAINED = 'unconstrained'
    SIMPLEX_INTERIOR = 'simplex-interior'
    POSITIVE_COMPONENTS = 'positive-components'


@dataclass(frozen=True)
class Constraint:
    """
    Parameter-space constraint and its unconstrained reparameterization.

    - simplex-interior(k): components in (0,1) with sum < 1; mapped by
      v_i = log(θ_i / r) with r = 1 - Σθ.
    - positive-components(indices): flagged components mapped by log.
    """
    kind: ConstraintKind = ConstraintKind.UNCONSTRAINED
    size: int = 0
    indices: tuple = ()

    @classmethod
    def unconstrained(cls):
        return cls(ConstraintKind.UNCONSTRAINED)

    @classmethod
    def simplex_interior(cls, size):
        return cls(ConstraintKind.SIMPLEX_INTERIOR, size=size)

    @classmethod
    def positive(cls, indices):
        return cls(ConstraintKind.POSITIVE_COMPONENTS, indices=tuple(indices))

    def holds(self, values):
        values = np.asarray(values, dtype=float)
        if not np.all(np.isfinite(values)):
            return False
        if self.kind is ConstraintKind.SIMPLEX_INTERIOR:
            if values.shape[0] != self.size:
                return False
            return bool(np.all(values > 0) and np.all(values < 1) and 1.0 - values.sum() > 0)
        if self.kind is ConstraintKind.POSITIVE_COMPONENTS:
            return bool(all(values[i] > 0 for i in self.indices))
        return True

    def to_unconstrained(self, values):
        values = np.asarray(values, dtype=float)
        if self.kind is ConstraintKind.SIMPLEX_INTERIOR:
            remainder = 1.0 - values.sum()
            return np.log(values) - np.log(remainder)
        if self.kind is ConstraintKind.POSITIVE_COMPONENTS:
            v = values.copy()
            idx = list(self.indices)
            v[idx] = np.log(values[idx])
            return v
        return values.copy()

    def from_unconstrained(self, v):
        v = np.asarray(v, dtype=float)
        if self.kind is ConstraintKind.SIMPLEX_INTERIOR:
            # softmax over (0, v) puts the remainder first
            return softmax(np.concatenate(([0.0], v)))[1:]
        if self.kind is ConstraintKind.POSITIVE_COMPONENTS:
            values = v.copy()
            idx = list(self.indices)
            values[idx] = np.exp(v[idx])
            return values
        return v.copy()

    def jacobian(self, values):
        """dθ/dv evaluated at θ."""
        values = np.asarray(values, dtype=float)
        if self.kind is ConstraintKind.SIMPLEX_INTERIOR:
            return np.diag(values) - np.outer(values, values)
        if self.kind is ConstraintKind.POSITIVE_COMPONENTS:
            diag = np.ones_like(values)
            idx = list(self.indices)
            diag[idx] = values[idx]
            return np.diag(diag)
        return np.eye(values.shape[0])

    def __repr__(self):
        if self.kind is ConstraintKind.SIMPLEX_INTERIOR:
            return f'<Constraint simplex-interior({self.size})>'
        if self.kind is ConstraintKind.POSITIVE_COMPONENTS:
            return f'<Constraint positive-components{self.indices}>'
        return '<Constraint unconstrained>'


@dataclass(frozen=True, eq=False)
class Theta:
    values: np.ndarray
    constraint: Constraint = field(default_factory=Constraint.unconstrained)

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(-1)
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @property
    def dimension(self):
        return self.values.shape[0]

    def unconstrained(self):
        return self.constraint.to_unconstrained(self.values)

    def with_values(self, values):
        return Theta(values, self.constraint)

    def from_unconstrained(self, v):
        return Theta(self.constraint.from_unconstrained(v), self.constraint)

    def __eq__(self, other):
        if not isinstance(other, Theta):
            return NotImplemented
        return self.constraint == other.constraint and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.constraint, self.values.tobytes()))

    def __repr__(self):
        return f'<Theta {np.array2string(self.values, precision=6)}>'


def validate_theta(theta):
    """True iff every constraint invariant holds for θ."""
    return theta.constraint.holds(theta.values)


def require_interior(theta, what='theta'):
    if not validate_theta(theta):
        raise ConstraintError(f'{what} {theta!r} violates {theta.constraint!r}')


# Samples

class SamplerKind(str, Enum):
    DIRECT = 'direct'
    IMPORTANCE = 'importance'
    TRUNCATED_IMPORTANCE = 'truncated-importance'
    REJECTION = 'rejection'
    METROPOLIS_HASTINGS = 'metropolis-hastings'
    EXACT = 'exact-enumeration'


@dataclass(frozen=True, eq=False)
class WeightedSample:
    """
    A batch of missing-data draws with normalized weights.

    Draws are model-defined payloads; engines only pass them back to the
    model. Samples of kind exact-enumeration carry exact conditional
    probabilities and have no Monte Carlo error.
    """
    draws: Any
    weights: np.ndarray
    raw_weights: np.ndarray
    sampler_kind: SamplerKind
    target_theta: Theta
    seed: int = -1
    diagnostics: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        weights = np.array(self.weights, dtype=float)
        raw = np.array(self.raw_weights, dtype=float)
        if raw.shape[0] != len(self.draws) or weights.shape[0] != len(self.draws):
            raise ValueError('weights and draws differ in length')
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError('weights must be nonnegative and sum to 1')
        weights.setflags(write=False)
        raw.setflags(write=False)
        object.__setattr__(self, 'weights', weights)
        object.__setattr__(self, 'raw_weights', raw)

    @classmethod
    def uniform(cls, draws, sampler_kind, target_theta, seed=-1, diagnostics=None):
        size = len(draws)
        return cls(
            draws=draws,
            weights=np.full(size, 1.0 / size),
            raw_weights=np.ones(size),
            sampler_kind=sampler_kind,
            target_theta=target_theta,
            seed=seed,
            diagnostics=dict(diagnostics or {}),
        )

    @property
    def size(self):
        return len(self.draws)

    @property
    def is_exact(self):
        return self.sampler_kind is SamplerKind.EXACT

    @property
    def is_uniform(self):
        return self.sampler_kind in (
            SamplerKind.DIRECT, SamplerKind.REJECTION, SamplerKind.METROPOLIS_HASTINGS
        )

    def __len__(self):
        return len(self.draws)

    def __repr__(self):
        return f'<WeightedSample {self.sampler_kind.value} M={self.size} at {self.target_theta!r}>'


# Trajectories

class TerminationReason(str, Enum):
    MAX_ITERATIONS = 'max-iterations'
    CONVERGED = 'converged'
    CI_CONTAINS_ZERO = 'ci-contains-zero'
    INCREMENT_BELOW_TAU = 'increment-below-tau'
    FAILED = 'failed'


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    iteration: int
    theta: Theta
    mc_size: Optional[int] = None
    objective_increment: Optional[float] = None
    ci_lower: Optional[float] = None
    ci_upper: Optional[float] = None
    diagnostics: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.iteration < 1:
            raise ValueError('iterations start at 1')
        if self.mc_size is not None and self.mc_size < 1:
            raise ValueError('Monte Carlo size must be at least 1')


@dataclass(frozen=True, eq=False)
class Trajectory:
    records: tuple
    terminated_reason: TerminationReason
    method: str = ''

    def __post_init__(self):
        records = tuple(self.records)
        for previous, current in zip(records, records[1:]):
            if current.iteration <= previous.iteration:
                raise ValueError('trajectory iterations must strictly increase')
        object.__setattr__(self, 'records', records)

    @property
    def final_theta(self):
        return self.records[-1].theta if self.records else None

    @property
    def total_draws(self):
        return int(sum(record.diagnostics.get('draws', 0) for record in self.records))

    def thetas(self):
        return np.array([record.theta.values for record in self.records])

    def __len__(self):
        return len(self.records)

    def __repr__(self):
        return f'<Trajectory {self.method} {len(self.records)} records, {self.terminated_reason.value}>'


# Inference

@dataclass(frozen=True, eq=False)
class InferenceReport:
    info: np.ndarray
    covariance: np.ndarray
    std_errors: np.ndarray
    fraction_missing_info: np.ndarray
    mc_size_used: int

    @classmethod
    def from_information(cls, info, complete_info, mc_size_used):
        """Invert the observed information and decompose it against 𝓘_c."""
        info = symmetrize(info)
        complete_info = symmetrize(complete_info)
        eigenvalues = np.linalg.eigvalsh(info)
        if np.any(eigenvalues <= 0):
            logger.error(f'Observed information is not positive definite: {eigenvalues}')
            raise IndefiniteInformationError(
                'observed information is not positive definite', eigenvalues
            )
        covariance = symmetric_inverse(info)
        missing = complete_info - info
        fraction = np.linalg.eigvals(np.linalg.solve(complete_info, missing))
        return cls(
            info=info,
            covariance=covariance,
            std_errors=np.sqrt(np.diag(covariance)),
            fraction_missing_info=np.sort(fraction.real),
            mc_size_used=int(mc_size_used),
        )


@dataclass(frozen=True, eq=False)
class ExactMoments:
    """Exact conditional moments of complete-data derivatives at θ."""
    complete_info: np.ndarray
    score_outer: np.ndarray
    mean_score: np.ndarray
    missing_info: np.ndarray


# Model contract

class ModelSpec(ABC):
    """
    The missing-data model contract.

    Implementations are stateless. Log-likelihoods drop additive θ-free
    constants. Batch methods take the model's draw container (a sequence
    of missing-data points); the defaults loop over the per-point methods
    and models override them with vectorized versions.
    """
    name = 'model'
    parameter_names: Sequence[str] = ()
    loglik_linear_in_stats = False

    @property
    @abstractmethod
    def constraint(self):
        ...

    @property
    def dimension(self):
        return len(self.parameter_names)

    def make_theta(self, values):
        return Theta(values, self.constraint)

    def to_unconstrained(self, theta):
        return self.constraint.to_unconstrained(theta.values)

    def from_unconstrained(self, v):
        return Theta(self.constraint.from_unconstrained(v), self.constraint)

    # required

    @abstractmethod
    def complete_loglik(self, theta, x):
        ...

    @abstractmethod
    def complete_score(self, theta, x):
        ...

    @abstractmethod
    def complete_neg_hessian(self, theta, x):
        ...

    @abstractmethod
    def conditional_log_density_unnorm(self, theta, x):
        ...

    # batch forms

    def complete_loglik_batch(self, theta, draws):
        return np.array([self.complete_loglik(theta, x) for x in draws], dtype=float)

    def complete_score_batch(self, theta, draws):
        return np.array([self.complete_score(theta, x) for x in draws], dtype=float).reshape(
            len(draws), self.dimension
        )

    def complete_neg_hessian_batch(self, theta, draws):
        return np.array([self.complete_neg_hessian(theta, x) for x in draws], dtype=float).reshape(
            len(draws), self.dimension, self.dimension
        )

    def conditional_log_density_batch(self, theta, draws):
        return np.array(
            [self.conditional_log_density_unnorm(theta, x) for x in draws], dtype=float
        )

    def sufficient_stats_batch(self, draws):
        return np.array([self.sufficient_stats(x) for x in draws], dtype=float)

    def concat_draws(self, first, second):
        return np.concatenate([np.asarray(first), np.asarray(second)], axis=0)

    def repeat_draws(self, draws, repeats):
        return np.repeat(np.asarray(draws), repeats, axis=0)

    # optional capabilities

    def default_start(self):
        raise CapabilityError(f'{self.name} has no default starting point')

    def oracle_mle(self):
        raise CapabilityError(f'{self.name} has no reference maximum-likelihood estimate')

    def sample_conditional_direct(self, theta, size, generator):
        raise CapabilityError(f'{self.name} has no direct conditional sampler')

    def sufficient_stats(self, x):
        raise CapabilityError(f'{self.name} has no sufficient statistics')

    def maximize_given_stats(self, stats):
        raise CapabilityError(f'{self.name} has no closed-form M-step')

    def stats_loglik(self, theta, stats):
        raise CapabilityError(f'{self.name} has no statistics form of the log-likelihood')

    def expected_stats(self, theta):
        raise CapabilityError(f'{self.name} has no exact E-step')

    def observed_loglik(self, theta):
        raise CapabilityError(f'{self.name} has no observed log-likelihood oracle')

    def observed_score(self, theta):
        raise CapabilityError(f'{self.name} has no observed score')

    def observed_information(self, theta):
        raise CapabilityError(f'{self.name} has no analytic observed information')

    def exact_moments(self, theta):
        raise CapabilityError(f'{self.name} has no exact conditional moments')

    def enumerate_conditional(self, theta):
        raise CapabilityError(f'{self.name} has no exact enumeration of the missing data')

    def importance_proposal(self, theta):
        raise CapabilityError(f'{self.name} has no importance proposal')

    def rejection_proposal(self, theta):
        raise CapabilityError(f'{self.name} has no rejection envelope')

    def mh_setup(self, theta, **options):
        raise CapabilityError(f'{self.name} has no Metropolis-Hastings kernel')

    def supports(self, capability):
        """Whether the model overrides the named optional operation."""
        own = getattr(type(self), capability, None)
        return own is not None and own is not getattr(ModelSpec, capability, None)

    def __repr__(self):
        return f'<{type(self).__name__} {self.name}>'


def finite_difference_check(model, theta, x, h=1e-5):
    """
    Compare the analytic complete score and negative Hessian with central
    differences of the complete log-likelihood and score.

    Returns the largest |analytic - numeric| / (|analytic| + h).
    """
    if not (0 < h <= 1e-3):
        raise InvalidStepError(f'finite-difference step must lie in (0, 1e-3], got {h}')
    require_interior(theta)
    values = theta.values
    p = values.shape[0]
    score = np.asarray(model.complete_score(theta, x), dtype=float)
    neg_hessian = np.asarray(model.complete_neg_hessian(theta, x), dtype=float)
    numeric_score = np.empty(p)
    numeric_hessian = np.empty((p, p))
    for j in range(p):
        step = np.zeros(p)
        step[j] = h
        plus = theta.with_values(values + step)
        minus = theta.with_values(values - step)
        require_interior(plus, 'perturbed theta')
        require_interior(minus, 'perturbed theta')
        numeric_score[j] = (model.complete_loglik(plus, x) - model.complete_loglik(minus, x)) / (2 * h)
        numeric_hessian[:, j] = -(
            np.asarray(model.complete_score(plus, x)) - np.asarray(model.complete_score(minus, x))
        ) / (2 * h)
    score_error = np.abs(score - numeric_score) / (np.abs(score) + h)
    hessian_error = np.abs(neg_hessian - numeric_hessian) / (np.abs(neg_hessian) + h)
    error = float(max(score_error.max(), hessian_error.max()))
    logger.debug(f'Finite-difference check for {model.name} at {theta!r}: {error:.3e}')
    return error
