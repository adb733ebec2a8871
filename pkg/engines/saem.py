"""
Stochastic approximation EM.

Gu–Kong steps average scores and a Louis-identity information estimate,
moving θ by a preconditioned score step on the unconstrained scale.
Delyon steps average sufficient statistics and re-maximize in closed form.
Both use a decaying step size α_k.
"""
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Mapping

import numpy as np

from engines import partial_trajectory
from extensions import as_stream
from models import CapabilityError, ConfigError, EmptyInputError, Trajectory, TrajectoryRecord, TerminationReason
from samplers import DirectSampling
from utils import floor_eigenvalues, symmetrize, weighted_mean

logger = logging.getLogger(__name__)


class ScheduleKind(str, Enum):
    POWER = 'power'
    HARMONIC = 'harmonic'
    CONSTANT = 'constant'


@dataclass(frozen=True)
class StepSchedule:
    """
    α_k = scale · k^(-gamma).

    Power schedules need gamma in (0.5, 1] so that Σα_k diverges while
    Σα_k² converges; harmonic is gamma = 1. Constant schedules are for
    degenerate checks only and are not admissible.
    """
    kind: ScheduleKind = ScheduleKind.POWER
    gamma: float = 0.7
    scale: float = 1.0

    def __post_init__(self):
        if self.kind is ScheduleKind.POWER and not 0.5 < self.gamma <= 1:
            raise ConfigError(f'power schedule needs gamma in (0.5, 1], got {self.gamma}', 'gamma')
        if self.kind is ScheduleKind.CONSTANT:
            if self.scale < 0:
                raise ConfigError('constant step must be nonnegative', 'scale')
        elif self.scale <= 0:
            raise ConfigError('schedule scale must be positive', 'scale')

    @classmethod
    def power(cls, gamma=0.7, scale=1.0):
        return cls(ScheduleKind.POWER, gamma, scale)

    @classmethod
    def harmonic(cls, scale=1.0):
        return cls(ScheduleKind.HARMONIC, 1.0, scale)

    @classmethod
    def constant(cls, value):
        return cls(ScheduleKind.CONSTANT, 0.0, value)

    @property
    def admissible(self):
        return self.kind is not ScheduleKind.CONSTANT

    def alpha(self, k):
        if k < 1:
            raise ValueError('step indices start at 1')
        if self.kind is ScheduleKind.CONSTANT:
            return self.scale
        return self.scale * k ** -self.gamma

    def __repr__(self):
        if self.kind is ScheduleKind.CONSTANT:
            return f'<StepSchedule constant {self.scale}>'
        return f'<StepSchedule {self.scale} k^-{self.gamma}>'


@dataclass(frozen=True, eq=False)
class SaemState:
    theta: Any
    gamma_matrix: np.ndarray
    stats: Any = None
    iteration: int = 0
    diagnostics: Mapping[str, float] = field(default_factory=dict)

    @classmethod
    def initial(cls, theta):
        return cls(theta=theta, gamma_matrix=np.eye(theta.dimension))


def saem_gu_kong_step(model, state, size, schedule, rng, policy=None):
    policy = policy or DirectSampling()
    k = state.iteration + 1
    alpha = schedule.alpha(k)
    theta = state.theta
    sample = policy(model, theta, size, rng)
    weights = sample.weights
    scores = model.complete_score_batch(theta, sample.draws)
    mean_score = weights @ scores
    information = (
        weighted_mean(model.complete_neg_hessian_batch(theta, sample.draws), weights)
        - np.einsum('i,ij,ik->jk', weights, scores, scores)
        + np.outer(mean_score, mean_score)
    )
    gamma_matrix, floored = floor_eigenvalues(state.gamma_matrix + alpha * (symmetrize(information) - state.gamma_matrix))
    if floored:
        logger.debug(f'Γ eigenvalues floored at SAEM iteration {k}')
    if np.any(mean_score):
        jacobian = model.constraint.jacobian(theta.values)
        metric = jacobian.T @ gamma_matrix @ jacobian
        direction = np.linalg.solve(metric, jacobian.T @ mean_score)
        theta_new = model.from_unconstrained(model.to_unconstrained(theta) + alpha * direction)
    else:
        theta_new = theta
    diagnostics = {
        'draws': float(sample.diagnostics.get('draws', len(sample))),
        'alpha': alpha,
        'floor_engaged': float(floored),
        'score_norm': float(np.max(np.abs(mean_score))),
    }
    return SaemState(theta_new, gamma_matrix, state.stats, k, diagnostics)


def saem_delyon_step(model, state, size, schedule, rng, policy=None):
    if not (model.loglik_linear_in_stats and model.supports('maximize_given_stats')):
        raise CapabilityError(f'{model.name} has no linear sufficient statistics with a closed-form M-step')
    policy = policy or DirectSampling()
    k = state.iteration + 1
    alpha = schedule.alpha(k)
    if alpha == 0:
        return replace(state, iteration=k, diagnostics={'draws': 0.0, 'alpha': 0.0})
    sample = policy(model, state.theta, size, rng)
    estimate = weighted_mean(model.sufficient_stats_batch(sample.draws), sample.weights)
    stats = estimate if state.stats is None else (1 - alpha) * np.asarray(state.stats) + alpha * estimate
    diagnostics = {'draws': float(sample.diagnostics.get('draws', len(sample))), 'alpha': alpha}
    return SaemState(model.maximize_given_stats(stats), state.gamma_matrix, stats, k, diagnostics)


VARIANTS = {
    'gu-kong': saem_gu_kong_step,
    'delyon': saem_delyon_step,
}


def run_saem(model, theta0, variant, size, iterations, schedule, policy=None, rng=0, floor_warning_fraction=0.2):
    """Run a fixed number of SAEM iterations of the named variant."""
    if variant not in VARIANTS:
        raise ConfigError(f'unknown SAEM variant {variant!r}', 'variant')
    if size < 1:
        raise ConfigError('Monte Carlo size must be at least 1', 'mc_size')
    step_function = VARIANTS[variant]
    stream = as_stream(rng)
    state = SaemState.initial(theta0)
    floored = 0
    method = f'saem-{variant}'
    with partial_trajectory(method) as records:
        for k in range(1, iterations + 1):
            state = step_function(model, state, size, schedule, stream.spawn(k), policy)
            floored += int(state.diagnostics.get('floor_engaged', 0))
            diagnostics = dict(state.diagnostics)
            diagnostics['floor_engaged_fraction'] = floored / k
            records.append(TrajectoryRecord(k, state.theta, mc_size=size, diagnostics=diagnostics))
            logger.debug(f'SAEM ({variant}) iteration {k}: {state.theta!r}')
    if iterations and floored / iterations > floor_warning_fraction:
        logger.warning(f'Γ eigenvalue floor engaged in {floored} of {iterations} SAEM iterations')
    logger.info(f'SAEM ({variant}) finished {iterations} iterations at {state.theta!r}')
    return Trajectory(tuple(records), TerminationReason.MAX_ITERATIONS, method=method)


def offline_average(trajectory, burn):
    """
    Cumulative means of θ after a burn-in, on the unconstrained scale.

    Records up to burn are kept; record j > burn holds the average of
    records burn+1..j.
    """
    records = trajectory.records
    if burn < 0 or burn >= len(records):
        raise EmptyInputError(f'no records left after burning {burn} of {len(records)}')
    averaged = list(records[:burn])
    total = None
    for count, record in enumerate(records[burn:], start=1):
        v = record.theta.unconstrained()
        if total is None:
            total = v.copy()
            averaged.append(record)
            continue
        total = total + v
        averaged.append(replace(record, theta=record.theta.from_unconstrained(total / count)))
    return Trajectory(tuple(averaged), trajectory.terminated_reason, method=trajectory.method)
