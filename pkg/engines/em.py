"""
Deterministic EM for models with an exact E-step.

Used as ground truth for the Monte Carlo engines.
"""
import logging

import numpy as np

from models import CapabilityError, TerminationReason, Trajectory, TrajectoryRecord, require_interior
from optim import fd_jacobian, maximize_theta

logger = logging.getLogger(__name__)


def _numeric_m_step(model, theta0, stats):
    def objective(theta):
        return float(model.stats_loglik(theta, stats))

    def gradient(theta):
        return fd_jacobian(lambda values: [objective(theta.with_values(values))], theta.values)[0]

    theta, converged = maximize_theta(model, objective, gradient, theta0)
    if not converged:
        logger.warning(f'Numeric M-step for {model.name} did not converge from {theta0!r}')
    return theta


def em_step(model, theta0):
    """One EM update M(θ₀) = argmax Q(· | θ₀)."""
    require_interior(theta0)
    if not model.supports('expected_stats'):
        raise CapabilityError(f'{model.name} has no exact E-step')
    stats = model.expected_stats(theta0)
    if model.supports('maximize_given_stats'):
        return model.maximize_given_stats(stats)
    return _numeric_m_step(model, theta0, stats)


def run_em(model, theta0, tol=1e-8, max_iter=1000):
    """
    Iterate em_step until the max-norm parameter change drops below tol.

    When the model has an observed log-likelihood it is recorded per
    iteration together with its increment.
    """
    if tol <= 0:
        raise ValueError(f'tol must be positive, got {tol}')
    track = model.supports('observed_loglik')
    previous_loglik = model.observed_loglik(theta0) if track else None
    theta = theta0
    records = []
    reason = TerminationReason.MAX_ITERATIONS
    for iteration in range(1, max_iter + 1):
        theta_new = em_step(model, theta)
        change = float(np.max(np.abs(theta_new.values - theta.values)))
        diagnostics = {'change': change}
        increment = None
        if track:
            loglik = model.observed_loglik(theta_new)
            increment = loglik - previous_loglik
            diagnostics['observed_loglik'] = loglik
            previous_loglik = loglik
        records.append(TrajectoryRecord(iteration, theta_new, objective_increment=increment, diagnostics=diagnostics))
        logger.debug(f'EM iteration {iteration}: {theta_new!r}, change {change:.3e}')
        theta = theta_new
        if change < tol:
            reason = TerminationReason.CONVERGED
            break
    logger.info(f'EM on {model.name} stopped after {len(records)} iterations ({reason.value})')
    return Trajectory(tuple(records), reason, method='em')
