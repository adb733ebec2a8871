"""
Standard errors after convergence through Louis' identity.

    I(θ) = E[-∇²ℓ_c] - E[S_c S_cᵀ] + E[S_c] E[S_c]ᵀ

with expectations over the missing-data conditional at θ, estimated from
a weighted sample or taken from a model's exact moments.
"""
import logging

import numpy as np

from extensions import as_stream
from models import CapabilityError, InferenceReport, InsufficientSampleError
from optim import fd_jacobian
from utils import symmetrize, weighted_mean

logger = logging.getLogger(__name__)


def louis_information(model, theta, sample, include_score_term=True):
    if sample.target_theta != theta:
        raise ValueError(f'{sample!r} was not drawn at {theta!r}')
    if len(sample) < 2:
        raise InsufficientSampleError(f'Louis information needs M >= 2, got {len(sample)}')
    weights = sample.weights
    complete_info = symmetrize(weighted_mean(model.complete_neg_hessian_batch(theta, sample.draws), weights))
    scores = model.complete_score_batch(theta, sample.draws)
    outer = np.einsum('i,ij,ik->jk', weights, scores, scores)
    info = complete_info - outer
    if include_score_term:
        mean_score = weights @ scores
        info = info + np.outer(mean_score, mean_score)
    return InferenceReport.from_information(symmetrize(info), complete_info, len(sample))


def exact_louis_information(model, theta, include_score_term=True):
    """Louis' identity with the model's exact conditional moments."""
    moments = model.exact_moments(theta)
    info = moments.complete_info - moments.score_outer
    if include_score_term:
        info = info + np.outer(moments.mean_score, moments.mean_score)
    return InferenceReport.from_information(symmetrize(info), moments.complete_info, 0)


def standard_errors(model, theta, size, policy, rng=0, include_score_term=True):
    """Draw a fresh sample at θ̂ and apply Louis' identity to it."""
    sample = policy(model, theta, size, as_stream(rng).spawn(0))
    report = louis_information(model, theta, sample, include_score_term)
    logger.info(f'Standard errors at {theta!r} from M={len(sample)}: {report.std_errors}')
    return report


def observed_information_numeric(model, theta):
    """-∇² of the observed log-likelihood by central differences, in θ coordinates."""
    if model.supports('observed_score'):
        def gradient(values):
            return model.observed_score(theta.with_values(values))
    else:
        def gradient(values):
            return fd_jacobian(lambda point: [model.observed_loglik(theta.with_values(point))], values)[0]
    return -symmetrize(fd_jacobian(gradient, theta.values))


def _relative_gap(first, second):
    scale = max(np.max(np.abs(first)), np.max(np.abs(second)))
    return float(np.max(np.abs(first - second)) / scale) if scale > 0 else 0.0


def information_decomposition_check(model, theta):
    """
    Largest pairwise relative discrepancy between three routes to I(θ):
    the observed information, 𝓘_c - 𝓘_m, and Louis' identity with exact
    moments.
    """
    if not model.supports('exact_moments'):
        raise CapabilityError(f'{model.name} has no exact conditional moments')
    if model.supports('observed_information'):
        observed = np.asarray(model.observed_information(theta), dtype=float)
    else:
        observed = observed_information_numeric(model, theta)
    moments = model.exact_moments(theta)
    decomposed = moments.complete_info - moments.missing_info
    louis = moments.complete_info - moments.score_outer + np.outer(moments.mean_score, moments.mean_score)
    routes = (observed, decomposed, louis)
    gap = max(_relative_gap(a, b) for i, a in enumerate(routes) for b in routes[i + 1:])
    logger.debug(f'Information routes for {model.name} at {theta!r} agree to {gap:.3e}')
    return gap
