import numpy as np
import pytest

from models import (
    CapabilityError, Constraint, ConstraintError, IndefiniteInformationError, InferenceReport, InvalidStepError,
    SamplerKind, TerminationReason, Theta, Trajectory, TrajectoryRecord, WeightedSample,
    finite_difference_check, validate_theta,
)


def test_validate_theta_simplex():
    simplex = Constraint.simplex_interior(2)
    assert validate_theta(Theta([0.3, 0.1], simplex))
    assert not validate_theta(Theta([0.6, 0.5], simplex))
    assert not validate_theta(Theta([0.0, 0.5], simplex))
    assert not validate_theta(Theta([0.3, np.nan], simplex))


def test_validate_theta_positive_components():
    positive = Constraint.positive([1])
    assert validate_theta(Theta([-2.0, 0.5], positive))
    assert not validate_theta(Theta([0.0, 0.0], positive))
    assert not validate_theta(Theta([0.0, -1.0], positive))


def test_simplex_transform_round_trip():
    generator = np.random.default_rng(3)
    simplex = Constraint.simplex_interior(2)
    for point in generator.dirichlet([1.0, 1.0, 1.0], size=100):
        values = point[1:]
        back = simplex.from_unconstrained(simplex.to_unconstrained(values))
        np.testing.assert_allclose(back, values, rtol=0, atol=1e-12)


def test_positive_transform_round_trip():
    generator = np.random.default_rng(4)
    positive = Constraint.positive([1])
    for _ in range(100):
        values = np.array([generator.normal(), generator.gamma(2.0)])
        back = positive.from_unconstrained(positive.to_unconstrained(values))
        np.testing.assert_allclose(back, values, rtol=1e-12, atol=1e-12)


def test_simplex_jacobian_matches_finite_differences():
    simplex = Constraint.simplex_interior(2)
    values = np.array([0.3, 0.15])
    v = simplex.to_unconstrained(values)
    h = 1e-6
    numeric = np.column_stack([
        (simplex.from_unconstrained(v + h * e) - simplex.from_unconstrained(v - h * e)) / (2 * h)
        for e in np.eye(2)
    ])
    np.testing.assert_allclose(simplex.jacobian(values), numeric, atol=1e-8)


def test_theta_equality_and_immutability():
    simplex = Constraint.simplex_interior(2)
    theta = Theta([0.2, 0.3], simplex)
    assert theta == Theta(np.array([0.2, 0.3]), simplex)
    assert theta != Theta([0.2, 0.3])
    with pytest.raises(ValueError):
        theta.values[0] = 0.5


def test_weighted_sample_rejects_unnormalized_weights(start):
    draws = np.zeros((3, 6))
    with pytest.raises(ValueError):
        WeightedSample(draws, [0.5, 0.5, 0.5], [1, 1, 1], SamplerKind.IMPORTANCE, start)
    with pytest.raises(ValueError):
        WeightedSample(draws, [0.5, 0.5], [1, 1], SamplerKind.IMPORTANCE, start)


def test_uniform_sample(start):
    sample = WeightedSample.uniform(np.zeros((4, 6)), SamplerKind.DIRECT, start)
    assert sample.size == 4
    assert sample.is_uniform
    assert not sample.is_exact
    np.testing.assert_array_equal(sample.weights, np.full(4, 0.25))


def test_trajectory_iterations_increase(start):
    records = (TrajectoryRecord(1, start), TrajectoryRecord(1, start))
    with pytest.raises(ValueError):
        Trajectory(records, TerminationReason.MAX_ITERATIONS)


def test_trajectory_counts_draws(start):
    records = (
        TrajectoryRecord(1, start, mc_size=10, diagnostics={'draws': 10.0}),
        TrajectoryRecord(2, start, mc_size=20, diagnostics={'draws': 20.0}),
    )
    trajectory = Trajectory(records, TerminationReason.CONVERGED, method='em')
    assert trajectory.total_draws == 30
    assert trajectory.final_theta == start
    assert trajectory.thetas().shape == (2, 2)


def test_record_rejects_zero_iteration(start):
    with pytest.raises(ValueError):
        TrajectoryRecord(0, start)


def test_inference_report_inverts_information():
    info = np.array([[2.0, 0.5], [0.5, 1.0]])
    complete = np.array([[3.0, 0.5], [0.5, 2.0]])
    report = InferenceReport.from_information(info, complete, 100)
    np.testing.assert_allclose(report.covariance @ info, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(report.std_errors, np.sqrt(np.diag(report.covariance)))
    assert np.all(report.fraction_missing_info >= 0)
    assert np.all(report.fraction_missing_info < 1)
    assert report.mc_size_used == 100


def test_inference_report_rejects_indefinite_information():
    info = np.array([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(IndefiniteInformationError) as excinfo:
        InferenceReport.from_information(info, np.eye(2) * 5, 10)
    assert np.min(excinfo.value.eigenvalues) < 0


def test_blood_derivatives_match_finite_differences(blood, start):
    x = np.rint(blood.conditional_mean(start))
    x[2] = blood.data.y[1] - x[1]
    x[4] = blood.data.y[2] - x[3]
    assert finite_difference_check(blood, start, x) < 1e-6


def test_censored_derivatives_match_finite_differences(censored):
    theta = censored.make_theta([0.0, 1.0])
    x = np.full(censored.data.m, 6.0)
    assert finite_difference_check(censored, theta, x) < 1e-6


def test_finite_difference_check_rejects_bad_step(blood, start):
    x = blood.sample_conditional_direct(start, 1, np.random.default_rng(0))[0]
    with pytest.raises(InvalidStepError):
        finite_difference_check(blood, start, x, h=0.0)
    with pytest.raises(InvalidStepError):
        finite_difference_check(blood, start, x, h=0.01)


def test_finite_difference_check_requires_interior(blood):
    outside = blood.make_theta([0.6, 0.5])
    with pytest.raises(ConstraintError):
        finite_difference_check(blood, outside, np.zeros(6))


def test_supports_reports_overrides(blood):
    assert blood.supports('expected_stats')
    assert blood.supports('observed_information')
    assert not blood.supports('no_such_capability')


def test_optional_samplers_are_capabilities(blood, censored):
    assert blood.supports('enumerate_conditional')
    assert censored.supports('importance_proposal')
    assert censored.supports('mh_setup')
    assert not censored.supports('enumerate_conditional')
    with pytest.raises(CapabilityError):
        censored.enumerate_conditional(censored.default_start())
