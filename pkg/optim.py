"""
Smooth maximization on an unconstrained scale.

Newton steps use a Hessian built from central differences of the
gradient. When the Newton direction is not an ascent direction the step
falls back to the gradient, and every step is accepted by backtracking
until the Armijo condition holds.
"""
import logging

import numpy as np

from models import RootFailureError, validate_theta
from utils import symmetrize

logger = logging.getLogger(__name__)

ARMIJO = 1e-4
MAX_HALVINGS = 60
NO_GAIN = np.finfo(float).eps ** 0.5


def fd_jacobian(function, v):
    """Central-difference Jacobian of a vector function, step 1e-6 * (1 + |v_j|)."""
    v = np.asarray(v, dtype=float)
    columns = []
    for j in range(v.shape[0]):
        h = 1e-6 * (1.0 + abs(v[j]))
        step = np.zeros_like(v)
        step[j] = h
        columns.append((np.asarray(function(v + step)) - np.asarray(function(v - step))) / (2 * h))
    return np.column_stack(columns)


def maximize(objective, gradient, v0, tol=1e-8, max_iter=200, callback=None):
    """
    Maximize objective(v) starting at v0.

    Returns (v*, converged). Convergence means the gradient max-norm fell
    below tol * (1 + |objective|), or the line search found no step with a
    representable gain while the predicted gain was already below
    NO_GAIN * (1 + |objective|). callback, if given, receives a dict per
    accepted step with the step size, directional derivative and objective
    values.
    """
    v = np.array(v0, dtype=float)
    value = objective(v)
    if not np.isfinite(value):
        logger.warning(f'Objective is not finite at the starting point {v}')
        return v, False
    for iteration in range(1, max_iter + 1):
        grad = np.asarray(gradient(v), dtype=float)
        scale = 1.0 + abs(value)
        if np.max(np.abs(grad)) < tol * scale:
            logger.debug(f'Maximizer converged after {iteration - 1} steps')
            return v, True
        hessian = symmetrize(fd_jacobian(gradient, v))
        try:
            direction = -np.linalg.solve(hessian, grad)
        except np.linalg.LinAlgError:
            direction = grad
        slope = float(grad @ direction)
        if not np.isfinite(slope) or slope <= 0:
            logger.debug('Newton direction is not an ascent direction; using the gradient')
            direction = grad
            slope = float(grad @ grad)
        step = 1.0
        for _ in range(MAX_HALVINGS):
            candidate = v + step * direction
            candidate_value = objective(candidate)
            if np.isfinite(candidate_value) and candidate_value >= value + ARMIJO * step * slope:
                break
            step *= 0.5
        else:
            converged = bool(slope <= NO_GAIN * scale)
            if converged:
                logger.debug(f'No representable gain left after {iteration - 1} steps; slope {slope:.3e}')
            else:
                logger.warning(f'Line search failed at iteration {iteration}; gradient max-norm {np.max(np.abs(grad)):.3e}')
            return v, converged
        if callback is not None:
            callback({
                'iteration': iteration,
                'step': step,
                'slope': slope,
                'value': value,
                'new_value': candidate_value,
            })
        v, value = candidate, candidate_value
    grad = np.asarray(gradient(v), dtype=float)
    converged = bool(np.max(np.abs(grad)) < tol * (1.0 + abs(value)))
    if not converged:
        logger.warning(f'Maximizer stopped after {max_iter} iterations without converging')
    return v, converged


def maximize_theta(model, objective, gradient, theta0, tol=1e-8, max_iter=200, callback=None):
    """
    Maximize a function of θ over the unconstrained scale.

    objective(θ) and gradient(θ) work on Theta; the gradient is mapped to
    the unconstrained scale by the transform's Jacobian.
    """
    constraint = model.constraint

    def f(v):
        theta = model.from_unconstrained(v)
        if not validate_theta(theta):
            return -np.inf
        return objective(theta)

    def g(v):
        theta = model.from_unconstrained(v)
        return constraint.jacobian(theta.values).T @ np.asarray(gradient(theta), dtype=float)

    v, converged = maximize(f, g, model.to_unconstrained(theta0), tol, max_iter, callback)
    return model.from_unconstrained(v), converged


def solve_score_system(model, theta0=None, tol=1e-9, max_iter=100):
    """
    Newton root-finding on the observed score.

    Steps are halved until the iterate stays inside the parameter space,
    so roots outside it are never accepted.
    """
    theta = theta0 if theta0 is not None else model.default_start()
    if not validate_theta(theta):
        raise RootFailureError(f'starting point {theta!r} lies outside the parameter space')
    has_information = model.supports('observed_information')
    for iteration in range(max_iter):
        score = np.asarray(model.observed_score(theta), dtype=float)
        if np.max(np.abs(score)) < tol:
            logger.debug(f'Score system solved in {iteration} Newton steps: {theta!r}')
            return theta
        if has_information:
            information = np.asarray(model.observed_information(theta), dtype=float)
        else:
            information = -fd_jacobian(lambda values: model.observed_score(theta.with_values(values)), theta.values)
        try:
            direction = np.linalg.solve(information, score)
        except np.linalg.LinAlgError as exc:
            raise RootFailureError(f'singular information at {theta!r}') from exc
        step = 1.0
        for _ in range(MAX_HALVINGS):
            candidate = theta.with_values(theta.values + step * direction)
            if validate_theta(candidate):
                break
            step *= 0.5
        else:
            raise RootFailureError(f'Newton iterates left the parameter space from {theta!r}')
        theta = candidate
    score = np.asarray(model.observed_score(theta), dtype=float)
    if np.max(np.abs(score)) < tol:
        return theta
    logger.error(f'No interior root found; last iterate {theta!r}, score {score}')
    raise RootFailureError(f'no interior root of the score found from {theta0!r}')
