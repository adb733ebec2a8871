"""
Samplers for the missing-data distribution f_m(x | y; θ).

Every sampler returns a WeightedSample. Sampler policies wrap a sampler
with its settings so controllers can ask for "M draws at θ" without
knowing how they are produced.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np

from extensions import as_generator
from models import (
    BudgetExhaustedError, CapabilityError, ConfigError, DegenerateWeightsError,
    InsufficientSampleError, InvalidInitError, SamplerKind, WeightedSample,
)

logger = logging.getLogger(__name__)


class ProposalKind(str, Enum):
    INDEPENDENCE = 'independence'
    RANDOM_WALK = 'random-walk'


@dataclass(frozen=True)
class ProposalSpec:
    """
    Proposal distribution.

    Independence proposals provide a vectorized log_density(draws) and
    sample(generator, size). Random-walk proposals provide
    step(generator, x); without transition_log_density(x_from, x_to) the
    walk is taken as symmetric and contributes no correction to the
    acceptance ratio.
    """
    log_density: Optional[Callable] = None
    sample: Optional[Callable] = None
    kind: ProposalKind = ProposalKind.INDEPENDENCE
    step_scale: tuple = ()
    step: Optional[Callable] = None
    transition_log_density: Optional[Callable] = None

    def __post_init__(self):
        if self.kind is ProposalKind.RANDOM_WALK:
            if self.step is None:
                raise ConfigError('random-walk proposal needs a step function', 'step')
            if not self.step_scale or any(scale <= 0 for scale in self.step_scale):
                raise ConfigError('random-walk step scales must be strictly positive', 'step_scale')
        elif self.log_density is None or self.sample is None:
            raise ConfigError('independence proposal needs log_density and sample', 'proposal')


@dataclass(frozen=True)
class MHConfig:
    proposal: ProposalSpec
    burn_in: int = 0
    thinning: int = 1

    def __post_init__(self):
        if self.burn_in < 0:
            raise ConfigError('burn_in must be nonnegative', 'burn_in')
        if self.thinning < 1:
            raise ConfigError('thinning must be at least 1', 'thinning')


def conditional_proposal(model, theta):
    """Independence proposal equal to the model's own conditional at θ."""
    return ProposalSpec(
        log_density=lambda draws: model.conditional_log_density_batch(theta, draws),
        sample=lambda generator, size: model.sample_conditional_direct(theta, size, generator),
    )


def effective_sample_size(sample):
    weights = np.asarray(sample.weights if isinstance(sample, WeightedSample) else sample)
    return float(1.0 / np.sum(weights ** 2))


def sample_direct(model, theta, size, rng):
    if size < 1:
        raise InsufficientSampleError(f'Monte Carlo size must be at least 1, got {size}')
    if not model.supports('sample_conditional_direct'):
        raise CapabilityError(f'{model.name} has no direct conditional sampler')
    generator, seed = as_generator(rng)
    draws = model.sample_conditional_direct(theta, size, generator)
    return WeightedSample.uniform(draws, SamplerKind.DIRECT, theta, seed=seed, diagnostics={'draws': size})


def sample_importance(model, theta, proposal, size, truncate, rng, threshold_scale=None):
    """
    Self-normalized importance sampling, optionally truncated.

    With truncation each raw weight is clamped at threshold_scale times the
    mean raw weight; threshold_scale defaults to √M.
    """
    if size < 2:
        raise InsufficientSampleError(f'importance sampling needs M >= 2, got {size}')
    generator, seed = as_generator(rng)
    draws = proposal.sample(generator, size)
    log_weights = model.conditional_log_density_batch(theta, draws) - proposal.log_density(draws)
    shift = np.max(log_weights)
    if not np.isfinite(shift):
        logger.error(f'All importance weights vanish for {model.name} at {theta!r}')
        raise DegenerateWeightsError('all raw importance weights are zero')
    raw = np.exp(log_weights - shift)
    diagnostics = {'draws': size, 'log_weight_shift': float(shift)}
    kind = SamplerKind.IMPORTANCE
    if truncate:
        scale = math.sqrt(size) if threshold_scale is None else threshold_scale
        threshold = scale * raw.mean()
        clamped = int(np.sum(raw > threshold))
        raw = np.minimum(raw, threshold)
        kind = SamplerKind.TRUNCATED_IMPORTANCE
        diagnostics.update(truncation_threshold=float(threshold), truncated=clamped)
        if clamped:
            logger.debug(f'Truncated {clamped} of {size} importance weights')
    weights = raw / raw.sum()
    diagnostics['ess'] = float(1.0 / np.sum(weights ** 2))
    return WeightedSample(
        draws=draws,
        weights=weights,
        raw_weights=raw,
        sampler_kind=kind,
        target_theta=theta,
        seed=seed,
        diagnostics=diagnostics,
    )


def sample_rejection(model, theta, proposal, envelope_log_const, size, max_proposals, rng):
    """Accept proposals with probability f_m(x) / (exp(K) g(x)) until M are accepted."""
    generator, seed = as_generator(rng)
    accepted = []
    accepted_count = 0
    consumed = 0
    while accepted_count < size:
        budget = max_proposals - consumed
        if budget <= 0:
            logger.error(f'Rejection sampler exhausted {max_proposals} proposals with {accepted_count} accepted')
            raise BudgetExhaustedError(
                f'accepted {accepted_count} of {size} draws within {max_proposals} proposals',
                accepted=accepted_count,
                proposals=consumed,
            )
        batch = min(budget, max(2 * (size - accepted_count), 16))
        draws = proposal.sample(generator, batch)
        log_ratio = (
            model.conditional_log_density_batch(theta, draws)
            - envelope_log_const
            - proposal.log_density(draws)
        )
        keep = generator.random(batch) < np.exp(np.minimum(log_ratio, 0.0))
        positions = np.flatnonzero(keep)
        needed = size - accepted_count
        if positions.shape[0] >= needed:
            last = positions[needed - 1]
            consumed += last + 1
            accepted.append(np.asarray(draws)[positions[:needed]])
            accepted_count = size
        else:
            consumed += batch
            accepted.append(np.asarray(draws)[positions])
            accepted_count += positions.shape[0]
    draws = np.concatenate(accepted, axis=0)
    diagnostics = {
        'draws': size,
        'proposals': int(consumed),
        'acceptance_rate': size / consumed,
    }
    return WeightedSample.uniform(draws, SamplerKind.REJECTION, theta, seed=seed, diagnostics=diagnostics)


def sample_mh(model, theta, config, size, init, rng):
    """
    Metropolis–Hastings chain targeting f_m(x | y; θ).

    Runs burn_in discarded steps, then size * thinning steps keeping every
    thinning-th state. A rejected step repeats the current state.
    """
    if size < 1:
        raise InsufficientSampleError(f'Monte Carlo size must be at least 1, got {size}')
    generator, seed = as_generator(rng)
    proposal = config.proposal
    independence = proposal.kind is ProposalKind.INDEPENDENCE
    current = init
    current_log = float(model.conditional_log_density_batch(theta, [current])[0])
    if not np.isfinite(current_log):
        raise InvalidInitError(f'initial state lies outside the conditional support at {theta!r}')
    current_proposal_log = float(proposal.log_density([current])[0]) if independence else 0.0
    kept = []
    accepted = 0
    steps = config.burn_in + size * config.thinning
    for step in range(steps):
        if independence:
            candidate = proposal.sample(generator, 1)[0]
            candidate_proposal_log = float(proposal.log_density([candidate])[0])
        else:
            candidate = proposal.step(generator, current)
            candidate_proposal_log = 0.0
            if proposal.transition_log_density is not None:
                # Hastings correction: reverse move over forward move
                current_proposal_log = float(proposal.transition_log_density(candidate, current))
                candidate_proposal_log = float(proposal.transition_log_density(current, candidate))
        candidate_log = float(model.conditional_log_density_batch(theta, [candidate])[0])
        log_ratio = (candidate_log - current_log) + (current_proposal_log - candidate_proposal_log)
        if np.isfinite(candidate_log) and generator.random() < math.exp(min(log_ratio, 0.0)):
            current, current_log, current_proposal_log = candidate, candidate_log, candidate_proposal_log
            accepted += 1
        if step >= config.burn_in and (step - config.burn_in + 1) % config.thinning == 0:
            kept.append(np.array(current, copy=True))
    draws = np.stack(kept)
    diagnostics = {'draws': size, 'acceptance_rate': accepted / steps, 'chain_steps': steps}
    return WeightedSample.uniform(
        draws, SamplerKind.METROPOLIS_HASTINGS, theta, seed=seed, diagnostics=diagnostics
    )


def combine_samples(model, first, second):
    """Pool two samples drawn at the same θ, keeping raw-weight scales comparable."""
    if first.target_theta != second.target_theta:
        raise ValueError('cannot pool samples drawn at different parameters')
    draws = model.concat_draws(first.draws, second.draws)
    if first.is_uniform and second.is_uniform:
        diagnostics = {'draws': len(draws)}
        return WeightedSample.uniform(draws, first.sampler_kind, first.target_theta, first.seed, diagnostics)
    raw = np.concatenate([
        first.weights * len(first),
        second.weights * len(second),
    ])
    return WeightedSample(
        draws=draws,
        weights=raw / raw.sum(),
        raw_weights=raw,
        sampler_kind=first.sampler_kind,
        target_theta=first.target_theta,
        seed=first.seed,
        diagnostics={'draws': len(draws)},
    )


# Policies

@dataclass(frozen=True)
class DirectSampling:
    name = 'direct'

    def __call__(self, model, theta, size, rng):
        return sample_direct(model, theta, size, rng)


@dataclass(frozen=True)
class ImportanceSampling:
    """IS with a proposal built from (model, θ) by proposal_factory."""
    proposal_factory: Callable
    truncate: bool = False
    name = 'importance'

    def __call__(self, model, theta, size, rng):
        proposal = self.proposal_factory(model, theta)
        return sample_importance(model, theta, proposal, max(size, 2), self.truncate, rng)


@dataclass(frozen=True)
class RejectionSampling:
    """proposal_factory returns (proposal, envelope_log_const) for (model, θ)."""
    proposal_factory: Callable
    max_proposals: int = 10_000_000
    name = 'rejection'

    def __call__(self, model, theta, size, rng):
        proposal, envelope = self.proposal_factory(model, theta)
        return sample_rejection(model, theta, proposal, envelope, size, self.max_proposals, rng)


@dataclass(frozen=True)
class MetropolisSampling:
    """config_factory returns (MHConfig, init) for (model, θ)."""
    config_factory: Callable
    name = 'metropolis-hastings'

    def __call__(self, model, theta, size, rng):
        config, init = self.config_factory(model, theta)
        return sample_mh(model, theta, config, size, init, rng)
