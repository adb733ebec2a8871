"""
Monte Carlo maximum likelihood.

One sample at a reference parameter θ* estimates the whole observed
log-likelihood ratio surface

    log L(θ) - log L(θ*) ≈ log Σ w_i exp(ℓ_c(θ; x_i) - ℓ_c(θ*; x_i)),

which is then maximized directly.
"""
import logging
from dataclasses import dataclass
from typing import Any, Callable, Optional

import numpy as np

from extensions import as_stream
from models import (
    InsufficientSampleError, OptimizationError, TerminationReason, Trajectory, TrajectoryRecord,
    require_interior,
)
from optim import fd_jacobian, maximize_theta
from samplers import DirectSampling
from utils import log_mean_ratio

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class McmlSurface:
    """
    Estimated log-likelihood ratio surface around theta_star.

    second_term, when given, adds a correction for models whose complete
    likelihood is known only up to a θ-dependent constant; the benchmark
    models leave it unset.
    """
    model: Any
    theta_star: Any
    sample: Any
    second_term: Optional[Callable] = None

    def _log_ratios(self, theta):
        draws = self.sample.draws
        return self.model.complete_loglik_batch(theta, draws) - self.model.complete_loglik_batch(self.theta_star, draws)

    def eval(self, theta):
        if theta == self.theta_star:
            return 0.0
        estimate, _ = log_mean_ratio(self._log_ratios(theta), self.sample.weights, exact=self.sample.is_exact)
        if self.second_term is not None:
            estimate += self.second_term(theta)
        return estimate

    def standard_error(self, theta):
        if theta == self.theta_star:
            return 0.0
        _, se = log_mean_ratio(self._log_ratios(theta), self.sample.weights, exact=self.sample.is_exact)
        return se

    def gradient(self, theta):
        """Complete scores averaged with the normalized likelihood-ratio weights."""
        log_ratios = self._log_ratios(theta)
        terms = self.sample.weights * np.exp(log_ratios - np.max(log_ratios))
        scores = self.model.complete_score_batch(theta, self.sample.draws)
        gradient = terms @ scores / terms.sum()
        if self.second_term is not None:
            gradient = gradient + fd_jacobian(lambda values: [self.second_term(theta.with_values(values))], theta.values)[0]
        return gradient

    def __repr__(self):
        return f'<McmlSurface at {self.theta_star!r} M={len(self.sample)}>'


def mcml_surface(model, theta_star, size, rng=0, policy=None, second_term=None):
    if size < 2:
        raise InsufficientSampleError(f'MCML needs M >= 2, got {size}')
    require_interior(theta_star, 'reference parameter')
    policy = policy or DirectSampling()
    sample = policy(model, theta_star, size, as_stream(rng).spawn(0))
    return McmlSurface(model, theta_star, sample, second_term)


def mcml_maximize(surface, theta_init=None):
    theta_init = theta_init if theta_init is not None else surface.theta_star
    require_interior(theta_init, 'starting point')
    iterates = []
    theta, converged = maximize_theta(
        surface.model, surface.eval, surface.gradient, theta_init, callback=iterates.append
    )
    if not converged:
        logger.error(f'MCML maximization did not converge from {theta_init!r}')
        raise OptimizationError(f'MCML maximization did not converge from {theta_init!r}', iterates)
    return theta


def mcml_iterate(model, theta_star, size, rounds=1, rng=0, policy=None):
    """
    Repeat MCML with the reference moved to the previous estimate.

    Each round is one trajectory record; its increment is the estimated
    log-likelihood gain over that round's reference.
    """
    stream = as_stream(rng)
    records = []
    reference = theta_star
    for round_index in range(1, rounds + 1):
        surface = mcml_surface(model, reference, size, stream.spawn(round_index), policy)
        estimate = mcml_maximize(surface)
        records.append(TrajectoryRecord(
            round_index, estimate, mc_size=len(surface.sample),
            objective_increment=surface.eval(estimate),
            diagnostics={
                'draws': float(surface.sample.diagnostics.get('draws', len(surface.sample))),
                'se': surface.standard_error(estimate),
            },
        ))
        logger.debug(f'MCML round {round_index} from {reference!r}: {estimate!r}')
        reference = estimate
    return Trajectory(tuple(records), TerminationReason.MAX_ITERATIONS, method='mcml')
