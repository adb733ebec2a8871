"""
ABO blood-type benchmark.

Observed phenotype counts (O, A, B, AB) are augmented with genotype counts
(OO, AO, AA, BO, BB, AB). Allele frequencies θ = (p, q) for A and B live
in the open simplex; r = 1 - p - q is the O frequency.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import binom

from models import (
    Constraint, ConstraintError, ExactMoments, ModelSpec, SamplerKind, WeightedSample,
    validate_theta,
)
from samplers import MHConfig, ProposalKind, ProposalSpec, conditional_proposal

logger = logging.getLogger(__name__)

DEFAULT_COUNTS = (10, 16, 7, 1)


def reflect(values, upper):
    """Fold integers into {0, ..., upper} by reflecting at both ends."""
    values = np.asarray(values, dtype=np.int64)
    if upper == 0:
        return np.zeros_like(values)
    period = 2 * upper
    folded = np.mod(values, period)
    return np.where(folded > upper, period - folded, folded)


def reflected_step_log_prob(origin, target, step, upper):
    """log P(reflect(origin + s) = target) for s uniform on {-step, ..., step}."""
    hits = np.count_nonzero(reflect(origin + np.arange(-step, step + 1), upper) == target)
    if hits == 0:
        return -np.inf
    return float(np.log(hits / (2 * step + 1)))

# genotype counts -> allele counts (O, A, B)
ALLELES = np.array([
    [2, 0, 0],   # OO
    [1, 1, 0],   # AO
    [0, 2, 0],   # AA
    [1, 0, 1],   # BO
    [0, 0, 2],   # BB
    [0, 1, 1],   # AB
], dtype=float)


@dataclass(frozen=True)
class BloodData:
    y: tuple = DEFAULT_COUNTS

    def __post_init__(self):
        y = tuple(int(count) for count in self.y)
        if len(y) != 4 or any(count < 0 for count in y):
            raise ValueError('blood-type data needs four nonnegative counts (O, A, B, AB)')
        if sum(y) < 1:
            raise ValueError('blood-type data needs at least one individual')
        object.__setattr__(self, 'y', y)

    @property
    def n(self):
        return sum(self.y)


class BloodTypeModel(ModelSpec):
    name = 'blood'
    parameter_names = ('p', 'q')
    loglik_linear_in_stats = True

    def __init__(self, data=None):
        self.data = data or BloodData()

    @property
    def constraint(self):
        return Constraint.simplex_interior(2)

    def default_start(self):
        return self.make_theta([1 / 3, 1 / 3])

    def frequencies(self, theta):
        if not validate_theta(theta):
            raise ConstraintError(f'allele frequencies {theta!r} are not in the simplex interior')
        p, q = theta.values
        return p, q, 1.0 - p - q

    def conditional_probabilities(self, theta):
        """(α₁, β₁): P(genotype AO | phenotype A) and P(BO | B)."""
        p, q, r = self.frequencies(theta)
        return 2 * r / (p + 2 * r), 2 * r / (q + 2 * r)

    # complete data

    def sufficient_stats(self, x):
        return np.asarray(x, dtype=float) @ ALLELES

    def sufficient_stats_batch(self, draws):
        return np.asarray(draws, dtype=float).reshape(-1, 6) @ ALLELES

    def stats_loglik(self, theta, stats):
        p, q, r = self.frequencies(theta)
        return float(np.dot(stats, np.log([r, p, q])))

    def maximize_given_stats(self, stats):
        n_o, n_a, n_b = np.asarray(stats, dtype=float)
        total = n_o + n_a + n_b
        return self.make_theta([n_a / total, n_b / total])

    def complete_loglik(self, theta, x):
        return self.stats_loglik(theta, self.sufficient_stats(x))

    def complete_loglik_batch(self, theta, draws):
        p, q, r = self.frequencies(theta)
        return self.sufficient_stats_batch(draws) @ np.log([r, p, q])

    def complete_score(self, theta, x):
        return self.complete_score_batch(theta, [x])[0]

    def complete_score_batch(self, theta, draws):
        p, q, r = self.frequencies(theta)
        stats = self.sufficient_stats_batch(draws)
        n_o, n_a, n_b = stats[:, 0], stats[:, 1], stats[:, 2]
        return np.column_stack([n_a / p - n_o / r, n_b / q - n_o / r])

    def complete_neg_hessian(self, theta, x):
        return self.complete_neg_hessian_batch(theta, [x])[0]

    def complete_neg_hessian_batch(self, theta, draws):
        p, q, r = self.frequencies(theta)
        stats = self.sufficient_stats_batch(draws)
        n_o, n_a, n_b = stats[:, 0], stats[:, 1], stats[:, 2]
        shared = n_o / r ** 2
        hessian = np.empty((stats.shape[0], 2, 2))
        hessian[:, 0, 0] = n_a / p ** 2 + shared
        hessian[:, 0, 1] = shared
        hessian[:, 1, 0] = shared
        hessian[:, 1, 1] = n_b / q ** 2 + shared
        return hessian

    def score_map(self, theta):
        """The 2x6 matrix 𝒮(θ) with S_c(θ; x) = 𝒮(θ) x."""
        p, q, r = self.frequencies(theta)
        per_allele = np.array([
            [-1 / r, 1 / p, 0.0],
            [-1 / r, 0.0, 1 / q],
        ])
        return per_allele @ ALLELES.T

    # missing data

    def conditional_log_density_unnorm(self, theta, x):
        return float(self.conditional_log_density_batch(theta, [x])[0])

    def conditional_log_density_batch(self, theta, draws):
        alpha, beta = self.conditional_probabilities(theta)
        y1, y2, y3, y4 = self.data.y
        x = np.asarray(draws).reshape(-1, 6)
        consistent = (
            (x[:, 0] == y1) & (x[:, 1] + x[:, 2] == y2) & (x[:, 3] + x[:, 4] == y3)
            & (x[:, 5] == y4) & np.all(x >= 0, axis=1)
        )
        log_density = binom.logpmf(x[:, 1], y2, alpha) + binom.logpmf(x[:, 3], y3, beta)
        return np.where(consistent, log_density, -np.inf)

    def complete_draws(self, x2, x4):
        """Fill the genotype vector from the AO and BO counts."""
        y1, y2, y3, y4 = self.data.y
        x2 = np.asarray(x2, dtype=np.int64)
        x4 = np.asarray(x4, dtype=np.int64)
        return np.column_stack([
            np.full(x2.shape, y1), x2, y2 - x2, x4, y3 - x4, np.full(x2.shape, y4),
        ])

    def sample_conditional_direct(self, theta, size, generator):
        alpha, beta = self.conditional_probabilities(theta)
        _, y2, y3, _ = self.data.y
        return self.complete_draws(generator.binomial(y2, alpha, size), generator.binomial(y3, beta, size))

    def enumerate_conditional(self, theta):
        """The whole conditional support with exact probabilities as weights."""
        alpha, beta = self.conditional_probabilities(theta)
        _, y2, y3, _ = self.data.y
        x2, x4 = np.meshgrid(np.arange(y2 + 1), np.arange(y3 + 1), indexing='ij')
        x2, x4 = x2.ravel(), x4.ravel()
        probabilities = binom.pmf(x2, y2, alpha) * binom.pmf(x4, y3, beta)
        weights = probabilities / probabilities.sum()
        return WeightedSample(
            draws=self.complete_draws(x2, x4),
            weights=weights,
            raw_weights=probabilities,
            sampler_kind=SamplerKind.EXACT,
            target_theta=theta,
            diagnostics={'draws': int(x2.shape[0])},
        )

    def conditional_mean(self, theta):
        alpha, beta = self.conditional_probabilities(theta)
        y1, y2, y3, y4 = self.data.y
        return np.array([y1, y2 * alpha, y2 * (1 - alpha), y3 * beta, y3 * (1 - beta), y4])

    def conditional_covariance(self, theta):
        alpha, beta = self.conditional_probabilities(theta)
        _, y2, y3, _ = self.data.y
        a = y2 * alpha * (1 - alpha)
        b = y3 * beta * (1 - beta)
        covariance = np.zeros((6, 6))
        covariance[1:3, 1:3] = [[a, -a], [-a, a]]
        covariance[3:5, 3:5] = [[b, -b], [-b, b]]
        return covariance

    def expected_stats(self, theta):
        """(ν_O, ν_A, ν_B); ν_O by allele conservation so the three sum to 2n."""
        p, q, r = self.frequencies(theta)
        _, y2, y3, y4 = self.data.y
        nu_a = y2 * (1 + p ** 2 / (p ** 2 + 2 * p * r)) + y4
        nu_b = y3 * (1 + q ** 2 / (q ** 2 + 2 * q * r)) + y4
        return np.array([2 * self.data.n - nu_a - nu_b, nu_a, nu_b])

    def exact_moments(self, theta):
        p, q, r = self.frequencies(theta)
        nu_o, nu_a, nu_b = self.expected_stats(theta)
        shared = nu_o / r ** 2
        complete_info = np.array([
            [nu_a / p ** 2 + shared, shared],
            [shared, nu_b / q ** 2 + shared],
        ])
        score_map = self.score_map(theta)
        mean = self.conditional_mean(theta)
        covariance = self.conditional_covariance(theta)
        return ExactMoments(
            complete_info=complete_info,
            score_outer=score_map @ (covariance + np.outer(mean, mean)) @ score_map.T,
            mean_score=score_map @ mean,
            missing_info=score_map @ covariance @ score_map.T,
        )

    # observed data

    def observed_loglik(self, theta):
        p, q, r = self.frequencies(theta)
        y1, y2, y3, y4 = self.data.y
        return float(
            2 * y1 * np.log(r) + y2 * np.log(p ** 2 + 2 * p * r)
            + y3 * np.log(q ** 2 + 2 * q * r) + y4 * np.log(p * q)
        )

    def observed_score(self, theta):
        p, q, r = self.frequencies(theta)
        y1, y2, y3, y4 = self.data.y
        p_y = p ** 2 + 2 * p * r
        q_y = q ** 2 + 2 * q * r
        return np.array([
            -2 * y1 / r + 2 * r * y2 / p_y - 2 * q * y3 / q_y + y4 / p,
            -2 * y1 / r - 2 * p * y2 / p_y + 2 * r * y3 / q_y + y4 / q,
        ])

    def observed_information(self, theta):
        p, q, r = self.frequencies(theta)
        y1, y2, y3, y4 = self.data.y
        p_y = p ** 2 + 2 * p * r
        q_y = q ** 2 + 2 * q * r
        pp = 2 * y1 / r ** 2 + 2 * y2 * (p_y + 2 * r ** 2) / p_y ** 2 + 4 * y3 * q ** 2 / q_y ** 2 + y4 / p ** 2
        pq = 2 * y1 / r ** 2 + 2 * y2 * p ** 2 / p_y ** 2 + 2 * y3 * q ** 2 / q_y ** 2
        qq = 2 * y1 / r ** 2 + 4 * y2 * p ** 2 / p_y ** 2 + 2 * y3 * (q_y + 2 * r ** 2) / q_y ** 2 + y4 / q ** 2
        return np.array([[pp, pq], [pq, qq]])

    def genotype_probabilities(self, theta):
        p, q, r = self.frequencies(theta)
        return np.array([r ** 2, 2 * p * r, p ** 2, 2 * q * r, q ** 2, 2 * p * q])

    def oracle_mle(self):
        from optim import solve_score_system
        return solve_score_system(self, self.default_start())

    # samplers

    def importance_proposal(self, theta, shrink=0.1):
        """The conditional at θ pulled toward equal frequencies."""
        centre = np.full(2, 1 / 3)
        return conditional_proposal(self, self.make_theta((1 - shrink) * theta.values + shrink * centre))

    def rejection_proposal(self, theta, shrink=0.1):
        proposal = self.importance_proposal(theta, shrink)
        support = self.enumerate_conditional(theta).draws
        envelope = float(np.max(self.conditional_log_density_batch(theta, support) - proposal.log_density(support)))
        return proposal, envelope

    def random_walk_proposal(self, step=2):
        """
        Uniform ±step moves of the AO and BO counts, reflected into
        {0, ..., y_A} and {0, ..., y_B}. Reflection piles mass next to the
        boundaries, so the proposal carries its transition log-density.
        """
        _, y2, y3, _ = self.data.y

        def move(generator, x):
            x = np.asarray(x)
            x2 = reflect(x[1] + generator.integers(-step, step + 1), y2)
            x4 = reflect(x[3] + generator.integers(-step, step + 1), y3)
            return self.complete_draws([x2], [x4])[0]

        def transition_log_density(x_from, x_to):
            return (
                reflected_step_log_prob(x_from[1], x_to[1], step, y2)
                + reflected_step_log_prob(x_from[3], x_to[3], step, y3)
            )

        return ProposalSpec(
            kind=ProposalKind.RANDOM_WALK, step_scale=(step, step), step=move,
            transition_log_density=transition_log_density,
        )

    def mh_setup(self, theta, burn_in=500, thinning=1, step=2):
        init = np.rint(self.conditional_mean(theta)).astype(np.int64)
        init[2] = self.data.y[1] - init[1]
        init[4] = self.data.y[2] - init[3]
        return MHConfig(self.random_walk_proposal(int(step)), burn_in=burn_in, thinning=thinning), init

    def __repr__(self):
        return f'<BloodTypeModel y={self.data.y}>'


class ExactEnumeration:
    """Sampler policy returning the exact conditional for any requested size."""
    name = 'exact'

    def __call__(self, model, theta, size, rng):
        return model.enumerate_conditional(theta)
