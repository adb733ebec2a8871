"""
Monte Carlo EM.

A shared inner step maximizes the Monte Carlo objective
Q̂(θ | θ_old) = Σ w_i ℓ_c(θ; x_i); the controllers differ in how they size
the Monte Carlo sample and when they stop:

 - run_wei_tanner: fixed (iterations, M) schedule.
 - run_chan_ledolter: pilot run sizes M, then stop when the one-step
   log-likelihood ratio is indistinguishable from zero.
 - run_booth_hobert: grow M when the update's confidence box contains
   the previous estimate; relative-change stopping rule.
 - run_caffo: augment until the Q-increment lower bound is positive or
   its upper bound falls below tau, and stop in the latter case.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from engines import partial_trajectory
from engines.inference import louis_information
from extensions import as_stream
from models import (
    AugmentationStallError, ConfigError, IndefiniteInformationError, InsufficientPilotError,
    InsufficientSampleError, OptimizationError, SingularityError, TerminationReason, Trajectory,
    TrajectoryRecord,
)
from optim import maximize_theta
from samplers import DirectSampling, combine_samples, effective_sample_size
from utils import log_mean_ratio, symmetric_inverse, wald_z, weighted_mean, weighted_sd

logger = logging.getLogger(__name__)

PILOT_TIE = 1e-12


@dataclass(frozen=True, eq=False)
class McemStepResult:
    theta_new: object
    sample: object
    qhat_at_new: float
    qhat_at_old: float


@dataclass(frozen=True)
class WeiTannerConfig:
    schedule: tuple = ((50, 100), (20, 1000))

    def __post_init__(self):
        schedule = tuple((int(iterations), int(size)) for iterations, size in self.schedule)
        if not schedule:
            raise ConfigError('schedule needs at least one (iterations, mc_size) entry', 'schedule')
        for iterations, size in schedule:
            if iterations < 0 or size < 1:
                raise ConfigError(f'invalid schedule entry ({iterations}, {size})', 'schedule')
        object.__setattr__(self, 'schedule', schedule)


@dataclass(frozen=True)
class ChanLedolterConfig:
    pilot_iters: int = 50
    pilot_mc_size: int = 100
    followers: int = 10
    se_threshold: float = 1e-3
    ci_level: float = 0.95
    max_stage2_iters: int = 200

    def __post_init__(self):
        if not 0 < self.ci_level < 1:
            raise ConfigError('ci_level must lie in (0, 1)', 'ci_level')
        if self.se_threshold <= 0:
            raise ConfigError('se_threshold must be positive', 'se_threshold')
        if self.pilot_iters < 1 or self.followers < 1 or self.max_stage2_iters < 1:
            raise ConfigError('iteration counts must be positive', 'pilot_iters')
        if self.pilot_mc_size < 2:
            raise ConfigError('pilot_mc_size must be at least 2', 'pilot_mc_size')


@dataclass(frozen=True)
class BoothHobertConfig:
    m0: int = 10
    alpha: float = 0.25
    r: int = 3
    delta1: float = 1e-3
    delta2: float = 2e-3
    consecutive: int = 3
    se_rule: bool = False
    ripatti_variant: bool = False
    max_iters: int = 200
    delta1_se: Optional[float] = None
    delta2_se: Optional[float] = None

    def __post_init__(self):
        if self.m0 < 1:
            raise ConfigError('m0 must be at least 1', 'm0')
        if not 0 < self.alpha < 1:
            raise ConfigError('alpha must lie in (0, 1)', 'alpha')
        if self.r < 1:
            raise ConfigError('r must be at least 1', 'r')
        if self.delta1 <= 0 or self.delta2 <= 0:
            raise ConfigError('delta1 and delta2 must be positive', 'delta1')
        if self.consecutive < 1 or self.max_iters < 1:
            raise ConfigError('consecutive and max_iters must be positive', 'consecutive')
        for name in ('delta1_se', 'delta2_se'):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ConfigError(f'{name} must be positive', name)

    @property
    def se_tolerances(self):
        return (
            self.delta1 if self.delta1_se is None else self.delta1_se,
            self.delta2 if self.delta2_se is None else self.delta2_se,
        )

    def escalate(self, size):
        """ceil(M (1 + 1/r)) in integer arithmetic."""
        return (size * (self.r + 1) + self.r - 1) // self.r


@dataclass(frozen=True)
class CaffoConfig:
    m0: int = 10
    ascent_level: float = 0.80
    term_level: float = 0.90
    tau: float = 1e-3
    augment_fraction: float = 0.5
    max_iters: int = 200
    max_augments_per_iter: int = 20
    max_mc_size: int = 1_000_000

    def __post_init__(self):
        for name in ('ascent_level', 'term_level'):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f'{name} must lie in (0, 1)', name)
        if self.tau <= 0:
            raise ConfigError('tau must be positive', 'tau')
        if self.augment_fraction <= 0:
            raise ConfigError('augment_fraction must be positive', 'augment_fraction')
        if self.m0 < 2:
            raise ConfigError('m0 must be at least 2', 'm0')
        if self.max_iters < 1 or self.max_augments_per_iter < 0:
            raise ConfigError('max_iters must be positive', 'max_iters')
        if self.max_mc_size < self.m0:
            raise ConfigError('max_mc_size must be at least m0', 'max_mc_size')


def qhat(model, theta, sample):
    return float(np.dot(sample.weights, model.complete_loglik_batch(theta, sample.draws)))


def mcem_inner_step(model, theta_old, sample, numeric=False):
    """
    Maximize Σ w_i ℓ_c(θ; x_i).

    Closed form through weighted sufficient statistics when the complete
    log-likelihood is linear in them, otherwise Newton on the
    unconstrained scale started from θ_old. θ_old is returned when the
    maximizer fails to improve on it.
    """
    if sample.target_theta != theta_old:
        raise ValueError(f'{sample!r} was not drawn at {theta_old!r}')
    weights = sample.weights
    closed_form = (
        not numeric and model.loglik_linear_in_stats and model.supports('maximize_given_stats')
    )
    if closed_form:
        stats = weighted_mean(model.sufficient_stats_batch(sample.draws), weights)
        theta_new = model.maximize_given_stats(stats)
    else:
        iterates = []

        def objective(theta):
            return qhat(model, theta, sample)

        def gradient(theta):
            return weighted_mean(model.complete_score_batch(theta, sample.draws), weights)

        theta_new, converged = maximize_theta(model, objective, gradient, theta_old, callback=iterates.append)
        if not converged:
            logger.error(f'Inner maximization failed from {theta_old!r} after {len(iterates)} steps')
            raise OptimizationError(f'MCEM inner maximization did not converge from {theta_old!r}', iterates)
    old_value = qhat(model, theta_old, sample)
    new_value = qhat(model, theta_new, sample)
    if not new_value >= old_value:
        logger.debug(f'Inner step did not improve Q-hat at {theta_old!r}; keeping it')
        theta_new, new_value = theta_old, old_value
    return McemStepResult(theta_new=theta_new, sample=sample, qhat_at_new=new_value, qhat_at_old=old_value)


def estimate_log_lr(model, theta_a, theta_b, sample):
    """
    log L(θ_a) - log L(θ_b) from a sample drawn at θ_b.

    Returns (estimate, se) with the delta-method standard error.
    """
    if len(sample) < 2:
        raise InsufficientSampleError(f'log-likelihood ratio needs M >= 2, got {len(sample)}')
    differences = (
        model.complete_loglik_batch(theta_a, sample.draws)
        - model.complete_loglik_batch(theta_b, sample.draws)
    )
    return log_mean_ratio(differences, sample.weights, exact=sample.is_exact)


def one_step_log_lr(model, theta_old, theta_new, sample_new, bias_correct=False):
    """
    log L(θ_new) - log L(θ_old), estimated through the reciprocal ratio on a θ_new sample.

    The log of a sample mean underestimates the log of its expectation by
    about se²/2; bias_correct removes that second-order term.
    """
    estimate, se = estimate_log_lr(model, theta_old, theta_new, sample_new)
    if bias_correct:
        return -estimate - se ** 2 / 2, se
    return -estimate, se


def pilot_peak(cumulative, ses, z):
    """
    Earliest pilot iterate statistically indistinguishable from the maximum.

    cumulative[k] is the summed one-step ratio up to iterate k and ses[k-1]
    the standard error of its k-th term. An earlier iterate is accepted when
    the gain to the maximum is within z standard errors of that stretch.
    """
    cumulative = np.asarray(cumulative, dtype=float)
    variances = np.concatenate([[0.0], np.cumsum(np.square(ses))])
    best = int(np.argmax(cumulative))
    tie = PILOT_TIE * (1 + abs(cumulative[best]))
    for k in range(best + 1):
        band = z * math.sqrt(max(variances[best] - variances[k], 0.0))
        if cumulative[best] - cumulative[k] <= max(band, tie):
            return k
    return best


def mc_update_covariance(model, step):
    """Sandwich covariance of the MCEM update around the exact EM update."""
    sample = step.sample
    p = model.dimension
    if sample.is_exact:
        return np.zeros((p, p))
    theta = step.theta_new
    weights = sample.weights
    hessian = weighted_mean(model.complete_neg_hessian_batch(theta, sample.draws), weights)
    scores = model.complete_score_batch(theta, sample.draws)
    outer = np.einsum('i,ij,ik->jk', weights, scores, scores)
    try:
        inverse = symmetric_inverse(hessian)
    except np.linalg.LinAlgError as exc:
        logger.error(f'Singular Q-hat Hessian at {theta!r}')
        raise SingularityError(f'Hessian of Q-hat is singular at {theta!r}') from exc
    covariance = inverse @ outer @ inverse / effective_sample_size(sample)
    return 0.5 * (covariance + covariance.T)


def delta_q_bounds(model, step, level):
    """
    Wald bounds for ΔQ = Q(θ_new | θ_old) - Q(θ_old | θ_old).

    Positive values mean the update improved the objective.
    """
    sample = step.sample
    if len(sample) < 2:
        raise InsufficientSampleError(f'ΔQ bounds need M >= 2, got {len(sample)}')
    if step.theta_new == step.sample.target_theta:
        return 0.0, 0.0
    differences = (
        model.complete_loglik_batch(step.theta_new, sample.draws)
        - model.complete_loglik_batch(sample.target_theta, sample.draws)
    )
    increment = float(np.dot(sample.weights, differences))
    if sample.is_exact:
        return increment, increment
    half_width = wald_z(level) * weighted_sd(differences, sample.weights) / math.sqrt(effective_sample_size(sample))
    return increment - half_width, increment + half_width


def _sample_diagnostics(sample):
    return {
        'draws': float(sample.diagnostics.get('draws', len(sample))),
        'ess': effective_sample_size(sample),
    }


def run_wei_tanner(model, theta0, config, policy=None, rng=0):
    policy = policy or DirectSampling()
    stream = as_stream(rng)
    theta = theta0
    iteration = 0
    with partial_trajectory('wei-tanner') as records:
        for iterations, size in config.schedule:
            for _ in range(iterations):
                iteration += 1
                sample = policy(model, theta, size, stream.spawn(iteration))
                step = mcem_inner_step(model, theta, sample)
                records.append(TrajectoryRecord(
                    iteration, step.theta_new, mc_size=len(sample),
                    objective_increment=step.qhat_at_new - step.qhat_at_old,
                    diagnostics=_sample_diagnostics(sample),
                ))
                logger.debug(f'Wei-Tanner iteration {iteration}: M={size} {step.theta_new!r}')
                theta = step.theta_new
    logger.info(f'Wei-Tanner finished {iteration} scheduled iterations at {theta!r}')
    return Trajectory(tuple(records), TerminationReason.MAX_ITERATIONS, method='wei-tanner')


def run_chan_ledolter(model, theta0, config, rng=0, policy=None):
    """
    Two-stage MCEM.

    Stage 1 runs a fixed-size pilot, locates the earliest iterate whose
    bias-corrected cumulative log-likelihood ratio against θ₀ is within the
    Wald band of the maximum, and pools the one-step standard error over
    the iterates that follow it. Stage 2 restarts from that iterate with M
    sized to bring the standard error below se_threshold, and stops once
    the one-step ratio's Wald interval no longer lies above zero.
    """
    policy = policy or DirectSampling()
    stream = as_stream(rng)
    pilot, followers_stream, stage2 = stream.spawn(1), stream.spawn(2), stream.spawn(3)
    size = config.pilot_mc_size
    z = wald_z(config.ci_level)
    with partial_trajectory('chan-ledolter') as records:
        thetas = [theta0]
        cumulative = [0.0]
        ses = []
        sample = policy(model, theta0, size, pilot.spawn(0))
        pending_draws = _sample_diagnostics(sample)['draws']
        for iteration in range(1, config.pilot_iters + 1):
            step = mcem_inner_step(model, thetas[-1], sample)
            sample = policy(model, step.theta_new, size, pilot.spawn(iteration))
            log_lr, se = one_step_log_lr(model, thetas[-1], step.theta_new, sample, bias_correct=True)
            cumulative.append(cumulative[-1] + log_lr)
            ses.append(se)
            thetas.append(step.theta_new)
            diagnostics = _sample_diagnostics(sample)
            diagnostics.update(draws=pending_draws + diagnostics['draws'], stage=1.0, cumulative_log_lr=cumulative[-1])
            pending_draws = 0.0
            records.append(TrajectoryRecord(
                iteration, step.theta_new, mc_size=size, objective_increment=log_lr,
                ci_lower=log_lr - z * se, ci_upper=log_lr + z * se, diagnostics=diagnostics,
            ))

        peak = pilot_peak(cumulative, ses, z)
        if peak + config.followers > config.pilot_iters:
            logger.error(f'Pilot maximizer at iteration {peak} leaves fewer than {config.followers} followers')
            raise InsufficientPilotError(
                f'pilot maximizer at iteration {peak} of {config.pilot_iters} has fewer than {config.followers} followers'
            )

        variances = []
        follower_draws = 0.0
        for offset in range(1, config.followers + 1):
            start = thetas[peak + offset]
            child = followers_stream.spawn(offset)
            first = policy(model, start, size, child.spawn(0))
            step = mcem_inner_step(model, start, first)
            second = policy(model, step.theta_new, size, child.spawn(1))
            _, se = one_step_log_lr(model, start, step.theta_new, second)
            variances.append(se ** 2)
            follower_draws += _sample_diagnostics(first)['draws'] + _sample_diagnostics(second)['draws']
        pilot_se = math.sqrt(float(np.mean(variances)))
        stage2_size = max(size, math.ceil(size * pilot_se / config.se_threshold))
        logger.info(
            f'Chan-Ledolter pilot peaked at iteration {peak}; pooled se {pilot_se:.3e}, stage-2 M={stage2_size}'
        )

        theta = thetas[peak]
        sample = policy(model, theta, stage2_size, stage2.spawn(0))
        pending_draws = follower_draws + _sample_diagnostics(sample)['draws']
        reason = TerminationReason.MAX_ITERATIONS
        for index in range(1, config.max_stage2_iters + 1):
            step = mcem_inner_step(model, theta, sample)
            sample = policy(model, step.theta_new, stage2_size, stage2.spawn(index))
            log_lr, se = one_step_log_lr(model, theta, step.theta_new, sample, bias_correct=True)
            lower, upper = log_lr - z * se, log_lr + z * se
            diagnostics = _sample_diagnostics(sample)
            diagnostics.update(draws=pending_draws + diagnostics['draws'], stage=2.0, pilot_se=pilot_se)
            pending_draws = 0.0
            records.append(TrajectoryRecord(
                config.pilot_iters + index, step.theta_new, mc_size=stage2_size,
                objective_increment=log_lr, ci_lower=lower, ci_upper=upper, diagnostics=diagnostics,
            ))
            logger.debug(f'Chan-Ledolter stage 2 iteration {index}: {step.theta_new!r} CI [{lower:.3e}, {upper:.3e}]')
            theta = step.theta_new
            # near the maximizer the true one-step change is slightly negative
            if lower <= 0:
                reason = TerminationReason.CI_CONTAINS_ZERO
                break
    logger.info(f'Chan-Ledolter stopped at {theta!r} ({reason.value})')
    return Trajectory(tuple(records), reason, method='chan-ledolter')


def _coefficient_of_variation(values):
    values = np.asarray(values, dtype=float)
    mean = values.mean()
    return float(values.std(ddof=1) / mean) if mean > 0 else 0.0


def _relative_change(theta_new, theta_old, scale, delta1):
    return float(np.max(np.abs(theta_new.values - theta_old.values) / (scale + delta1)))


def run_booth_hobert(model, theta0, config, rng=0, policy=None):
    policy = policy or DirectSampling()
    stream = as_stream(rng)
    z = wald_z(1 - config.alpha)
    names = model.parameter_names or tuple(str(j) for j in range(model.dimension))
    size = config.m0
    theta = theta0
    streak = 0
    lengths = []
    reason = TerminationReason.MAX_ITERATIONS
    with partial_trajectory('booth-hobert') as records:
        for iteration in range(1, config.max_iters + 1):
            sample = policy(model, theta, size, stream.spawn(iteration))
            step = mcem_inner_step(model, theta, sample)
            theta_new = step.theta_new
            se = np.sqrt(np.maximum(np.diag(mc_update_covariance(model, step)), 0.0))
            lower, upper = theta_new.values - z * se, theta_new.values + z * se
            contains = bool(np.all((lower <= theta.values) & (theta.values <= upper)))

            relative = _relative_change(theta_new, theta, np.abs(theta.values), config.delta1)
            if config.se_rule:
                delta1, delta2 = config.se_tolerances
                try:
                    statistical_se = louis_information(model, theta, sample).std_errors
                    rule_holds = _relative_change(theta_new, theta, statistical_se, delta1) < delta2
                except IndefiniteInformationError:
                    logger.debug(f'Louis information indefinite at {theta!r}; stopping rule not met')
                    rule_holds = False
            else:
                rule_holds = relative < config.delta2
            streak = streak + 1 if rule_holds else 0

            diagnostics = _sample_diagnostics(sample)
            diagnostics.update(relative_change=relative, ci_contains_previous=float(contains))
            for name, low, high in zip(names, lower, upper):
                diagnostics[f'ci_lower_{name}'] = float(low)
                diagnostics[f'ci_upper_{name}'] = float(high)
            records.append(TrajectoryRecord(
                iteration, theta_new, mc_size=len(sample),
                objective_increment=step.qhat_at_new - step.qhat_at_old, diagnostics=diagnostics,
            ))
            logger.debug(f'Booth-Hobert iteration {iteration}: M={size} {theta_new!r} relative change {relative:.3e}')
            theta = theta_new
            if streak >= config.consecutive:
                reason = TerminationReason.CONVERGED
                break

            lengths.append(relative)
            if config.ripatti_variant:
                escalate = len(lengths) >= 4 and _coefficient_of_variation(lengths[-3:]) > _coefficient_of_variation(lengths[-4:-1])
            else:
                escalate = contains
            if escalate:
                size = config.escalate(size)
                logger.debug(f'Booth-Hobert escalates M to {size}')
    logger.info(f'Booth-Hobert stopped after {len(records)} iterations at {theta!r} ({reason.value}), final M={size}')
    return Trajectory(tuple(records), reason, method='booth-hobert')


def _caffo_bounds(model, step, config):
    lower, _ = delta_q_bounds(model, step, config.ascent_level)
    _, upper = delta_q_bounds(model, step, config.term_level)
    return lower, upper


def run_caffo(model, theta0, config, rng=0, policy=None):
    policy = policy or DirectSampling()
    stream = as_stream(rng)
    size = config.m0
    theta = theta0
    reason = TerminationReason.MAX_ITERATIONS
    with partial_trajectory('caffo') as records:
        for iteration in range(1, config.max_iters + 1):
            child = stream.spawn(iteration)
            sample = policy(model, theta, size, child.spawn(0))
            drawn = _sample_diagnostics(sample)['draws']
            step = mcem_inner_step(model, theta, sample)
            lower, upper = _caffo_bounds(model, step, config)
            augments = 0
            # an increment already certified below tau ends the run without augmenting
            while lower <= 0 and upper >= config.tau and not sample.is_exact:
                extra_size = math.ceil(len(sample) * config.augment_fraction)
                if augments >= config.max_augments_per_iter or len(sample) + extra_size > config.max_mc_size:
                    state = {'iteration': iteration, 'theta': theta, 'mc_size': len(sample), 'lower_bound': lower}
                    logger.error(f'Caffo stalled at iteration {iteration} after {augments} augmentations, M={len(sample)}')
                    raise AugmentationStallError(
                        f'ascent lower bound still nonpositive after {augments} augmentations at M={len(sample)}', state
                    )
                augments += 1
                extra = policy(model, theta, extra_size, child.spawn(augments))
                drawn += _sample_diagnostics(extra)['draws']
                sample = combine_samples(model, sample, extra)
                step = mcem_inner_step(model, theta, sample)
                lower, upper = _caffo_bounds(model, step, config)

            diagnostics = _sample_diagnostics(sample)
            diagnostics.update(draws=drawn, augmentations=float(augments))
            records.append(TrajectoryRecord(
                iteration, step.theta_new, mc_size=len(sample),
                objective_increment=step.qhat_at_new - step.qhat_at_old,
                ci_lower=lower, ci_upper=upper, diagnostics=diagnostics,
            ))
            logger.debug(f'Caffo iteration {iteration}: M={len(sample)} {step.theta_new!r} ΔQ bounds [{lower:.3e}, {upper:.3e}]')
            theta = step.theta_new
            size = max(size, len(sample))
            if upper < config.tau:
                reason = TerminationReason.INCREMENT_BELOW_TAU
                break
    logger.info(f'Caffo stopped after {len(records)} iterations at {theta!r} ({reason.value})')
    return Trajectory(tuple(records), reason, method='caffo')
