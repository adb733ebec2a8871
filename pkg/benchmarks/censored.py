"""
Right-censored normal benchmark.

Values above the threshold c are recorded only as "censored"; the missing
data are the m censored values themselves. θ = (μ, σ) with σ > 0; the
unconstrained scale is (μ, log σ).
"""
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtri
from scipy.stats import norm, truncnorm

from models import Constraint, ConstraintError, ExactMoments, ModelSpec, validate_theta
from samplers import MHConfig, ProposalKind, ProposalSpec

logger = logging.getLogger(__name__)

FIXTURE_SEED = 20240101
FIXTURE_SIZE = 50
FIXTURE_THRESHOLD = 1.0
TAIL_SWITCH = 8.0
HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


@dataclass(frozen=True, eq=False)
class CensoredData:
    observed: np.ndarray
    m: int
    c: float

    def __post_init__(self):
        observed = np.array(self.observed, dtype=float).reshape(-1)
        if np.any(observed > self.c):
            raise ValueError('uncensored values must not exceed the censoring threshold')
        if self.m < 0:
            raise ValueError('the number of censored units must be nonnegative')
        observed.setflags(write=False)
        object.__setattr__(self, 'observed', observed)
        object.__setattr__(self, 'm', int(self.m))
        object.__setattr__(self, 'c', float(self.c))

    @property
    def n(self):
        return self.observed.shape[0] + self.m

    @classmethod
    def from_values(cls, values, c):
        values = np.asarray(values, dtype=float)
        return cls(observed=values[values <= c], m=int(np.sum(values > c)), c=c)


def censored_fixture():
    """The canonical dataset: 50 standard normal values censored at c = 1."""
    values = np.random.default_rng(FIXTURE_SEED).standard_normal(FIXTURE_SIZE)
    return CensoredData.from_values(values, FIXTURE_THRESHOLD)


def sample_truncated_normal(mu, sigma, c, shape, generator):
    """
    Draws from N(μ, σ²) restricted to (c, ∞).

    Inverse CDF on the complementary tail; beyond TAIL_SWITCH standard
    deviations, rejection from a shifted exponential proposal.
    """
    a = (c - mu) / sigma
    size = int(np.prod(shape))
    if a <= TAIL_SWITCH:
        u = generator.random(size) + 2.0 ** -54
        z = -ndtri(np.exp(log_ndtr(-a) + np.log(u)))
    else:
        rate = 0.5 * (a + math.sqrt(a * a + 4))
        z = np.empty(size)
        filled = 0
        while filled < size:
            need = size - filled
            proposals = a + generator.exponential(1.0 / rate, 2 * need)
            keep = proposals[generator.random(2 * need) < np.exp(-0.5 * (proposals - rate) ** 2)]
            take = keep[:need]
            z[filled:filled + take.shape[0]] = take
            filled += take.shape[0]
    return (mu + sigma * z).reshape(shape)


def truncated_moments(sigma, a, orders=4):
    """Raw moments E[u^k], k = 1..orders, of u = X - μ with X | X > c."""
    dist = truncnorm(a, np.inf, loc=0.0, scale=sigma)
    return np.array([dist.moment(k) for k in range(1, orders + 1)])


class CensoredNormalModel(ModelSpec):
    name = 'censored'
    parameter_names = ('mu', 'sigma')
    loglik_linear_in_stats = True

    def __init__(self, data=None):
        self.data = data if data is not None else censored_fixture()
        observed = self.data.observed
        self._observed_sum = float(observed.sum())
        self._observed_square_sum = float(np.dot(observed, observed))

    @property
    def constraint(self):
        return Constraint.positive([1])

    def default_start(self):
        return self.make_theta([0.0, 1.0])

    def parameters(self, theta):
        if not validate_theta(theta):
            raise ConstraintError(f'{theta!r} needs a positive scale')
        mu, sigma = theta.values
        return mu, sigma

    def standardized_threshold(self, theta):
        mu, sigma = self.parameters(theta)
        return (self.data.c - mu) / sigma

    # complete data

    def sufficient_stats(self, x):
        x = np.asarray(x, dtype=float)
        return np.array([self._observed_sum + x.sum(), self._observed_square_sum + np.dot(x, x)])

    def sufficient_stats_batch(self, draws):
        x = np.asarray(draws, dtype=float).reshape(len(draws), self.data.m)
        return np.column_stack([
            self._observed_sum + x.sum(axis=1),
            self._observed_square_sum + np.einsum('ij,ij->i', x, x),
        ])

    def _centred_square_sum(self, mu, stats):
        stats = np.asarray(stats, dtype=float)
        return stats[..., 1] - 2 * mu * stats[..., 0] + self.data.n * mu ** 2

    def stats_loglik(self, theta, stats):
        mu, sigma = self.parameters(theta)
        return -self.data.n * math.log(sigma) - self._centred_square_sum(mu, stats) / (2 * sigma ** 2)

    def maximize_given_stats(self, stats):
        total, square_total = np.asarray(stats, dtype=float)
        n = self.data.n
        mu = total / n
        variance = max(square_total / n - mu ** 2, np.finfo(float).tiny)
        return self.make_theta([mu, math.sqrt(variance)])

    def complete_loglik(self, theta, x):
        return float(self.stats_loglik(theta, self.sufficient_stats(x)))

    def complete_loglik_batch(self, theta, draws):
        return np.asarray(self.stats_loglik(theta, self.sufficient_stats_batch(draws)), dtype=float)

    def complete_score(self, theta, x):
        return self.complete_score_batch(theta, [x])[0]

    def complete_score_batch(self, theta, draws):
        mu, sigma = self.parameters(theta)
        n = self.data.n
        stats = self.sufficient_stats_batch(draws)
        squares = self._centred_square_sum(mu, stats)
        return np.column_stack([
            (stats[:, 0] - n * mu) / sigma ** 2,
            -n / sigma + squares / sigma ** 3,
        ])

    def complete_neg_hessian(self, theta, x):
        return self.complete_neg_hessian_batch(theta, [x])[0]

    def complete_neg_hessian_batch(self, theta, draws):
        mu, sigma = self.parameters(theta)
        n = self.data.n
        stats = self.sufficient_stats_batch(draws)
        squares = self._centred_square_sum(mu, stats)
        cross = 2 * (stats[:, 0] - n * mu) / sigma ** 3
        hessian = np.empty((stats.shape[0], 2, 2))
        hessian[:, 0, 0] = n / sigma ** 2
        hessian[:, 0, 1] = cross
        hessian[:, 1, 0] = cross
        hessian[:, 1, 1] = -n / sigma ** 2 + 3 * squares / sigma ** 4
        return hessian

    # missing data

    def conditional_log_density_unnorm(self, theta, x):
        return float(self.conditional_log_density_batch(theta, [x])[0])

    def conditional_log_density_batch(self, theta, draws):
        mu, sigma = self.parameters(theta)
        m = self.data.m
        x = np.asarray(draws, dtype=float).reshape(len(draws), m)
        if m == 0:
            return np.zeros(x.shape[0])
        a = (self.data.c - mu) / sigma
        u = (x - mu) / sigma
        log_density = np.sum(-0.5 * u ** 2, axis=1) - m * (math.log(sigma) + HALF_LOG_2PI + log_ndtr(-a))
        return np.where(np.all(x > self.data.c, axis=1), log_density, -np.inf)

    def sample_conditional_direct(self, theta, size, generator):
        mu, sigma = self.parameters(theta)
        if (self.data.c - mu) / sigma > TAIL_SWITCH:
            logger.debug(f'Censoring threshold is far in the tail at {theta!r}; using exponential rejection')
        return sample_truncated_normal(mu, sigma, self.data.c, (size, self.data.m), generator)

    def expected_stats(self, theta):
        mu, sigma = self.parameters(theta)
        m = self.data.m
        if m == 0:
            return np.array([self._observed_sum, self._observed_square_sum])
        a = (self.data.c - mu) / sigma
        mean, variance = truncnorm.stats(a, np.inf, loc=mu, scale=sigma, moments='mv')
        return np.array([
            self._observed_sum + m * float(mean),
            self._observed_square_sum + m * (float(variance) + float(mean) ** 2),
        ])

    def exact_moments(self, theta):
        mu, sigma = self.parameters(theta)
        n, m = self.data.n, self.data.m
        observed = self.data.observed - mu
        observed_score = np.array([
            observed.sum() / sigma ** 2,
            -observed.shape[0] / sigma + np.dot(observed, observed) / sigma ** 3,
        ])
        if m == 0:
            moments = np.zeros(4)
            unit_covariance = np.zeros((2, 2))
        else:
            moments = truncated_moments(sigma, (self.data.c - mu) / sigma)
            u1, u2, u3, u4 = moments
            unit_covariance = np.array([
                [(u2 - u1 ** 2) / sigma ** 4, (u3 - u1 * u2) / sigma ** 5],
                [(u3 - u1 * u2) / sigma ** 5, (u4 - u2 ** 2) / sigma ** 6],
            ])
        u1, u2 = moments[0], moments[1]
        mean_score = observed_score + m * np.array([u1 / sigma ** 2, -1 / sigma + u2 / sigma ** 3])
        cross = 2 * (observed.sum() + m * u1) / sigma ** 3
        complete_info = np.array([
            [n / sigma ** 2, cross],
            [cross, -n / sigma ** 2 + 3 * (np.dot(observed, observed) + m * u2) / sigma ** 4],
        ])
        missing_info = m * unit_covariance
        return ExactMoments(
            complete_info=complete_info,
            score_outer=missing_info + np.outer(mean_score, mean_score),
            mean_score=mean_score,
            missing_info=missing_info,
        )

    # observed data

    def observed_loglik(self, theta):
        mu, sigma = self.parameters(theta)
        observed = self.data.observed
        a = (self.data.c - mu) / sigma
        return float(
            -observed.shape[0] * math.log(sigma)
            - np.sum((observed - mu) ** 2) / (2 * sigma ** 2)
            + self.data.m * log_ndtr(-a)
        )

    def observed_score(self, theta):
        mu, sigma = self.parameters(theta)
        observed = self.data.observed - mu
        a = (self.data.c - mu) / sigma
        mills = math.exp(norm.logpdf(a) - log_ndtr(-a)) if self.data.m else 0.0
        return np.array([
            observed.sum() / sigma ** 2 + self.data.m * mills / sigma,
            -observed.shape[0] / sigma + np.dot(observed, observed) / sigma ** 3
            + self.data.m * mills * a / sigma,
        ])

    def oracle_mle(self, tol=1e-12):
        return censored_em_oracle(self.data, self.default_start(), tol)

    # samplers

    def tail_rate(self, theta):
        """Optimal exponential rate for the censored tail, on the data scale."""
        _, sigma = self.parameters(theta)
        a = self.standardized_threshold(theta)
        return 0.5 * (a + math.sqrt(a * a + 4)) / sigma

    def exponential_tail_proposal(self, theta, rate=None):
        """Independent shifted exponentials on (c, ∞), one per censored unit."""
        rate = self.tail_rate(theta) if rate is None else rate
        c, m = self.data.c, self.data.m

        def log_density(draws):
            x = np.asarray(draws, dtype=float).reshape(len(draws), m)
            values = np.sum(math.log(rate) - rate * (x - c), axis=1)
            return np.where(np.all(x > c, axis=1), values, -np.inf)

        def sample(generator, size):
            return c + generator.exponential(1.0 / rate, (size, m))

        return ProposalSpec(log_density=log_density, sample=sample)

    def importance_proposal(self, theta):
        return self.exponential_tail_proposal(theta)

    def rejection_proposal(self, theta):
        """Exponential tail proposal with the tightest envelope constant."""
        mu, sigma = self.parameters(theta)
        rate = self.tail_rate(theta)
        c, m = self.data.c, self.data.m
        if m == 0:
            return self.exponential_tail_proposal(theta, rate), 0.0
        peak = max(mu + rate * sigma ** 2, c)
        a = (c - mu) / sigma
        per_unit = (
            -0.5 * ((peak - mu) / sigma) ** 2 - math.log(sigma) - HALF_LOG_2PI - log_ndtr(-a)
            - (math.log(rate) - rate * (peak - c))
        )
        return self.exponential_tail_proposal(theta, rate), m * float(per_unit)

    def random_walk_proposal(self, scale):
        def move(generator, x):
            x = np.asarray(x, dtype=float)
            return x + scale * generator.standard_normal(x.shape)

        return ProposalSpec(kind=ProposalKind.RANDOM_WALK, step_scale=(scale,), step=move)

    def mh_setup(self, theta, burn_in=500, thinning=1, step=0.5):
        mu, sigma = self.parameters(theta)
        init = np.full(self.data.m, self.data.c + 0.5 * sigma)
        return MHConfig(self.random_walk_proposal(step * sigma), burn_in=burn_in, thinning=thinning), init

    def __repr__(self):
        return f'<CensoredNormalModel n={self.data.n} m={self.data.m} c={self.data.c}>'


def censored_em_oracle(data, theta0=None, tol=1e-10, max_iter=10_000):
    """EM with exact truncated-normal moments; converges to the observed MLE."""
    from engines.em import run_em

    model = CensoredNormalModel(data)
    start = theta0 if theta0 is not None else model.default_start()
    trajectory = run_em(model, start, tol, max_iter)
    return trajectory.final_theta if trajectory.records else start
