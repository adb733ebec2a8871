import numpy as np
import pytest

from benchmarks import BloodData, BloodTypeModel
from models import RootFailureError
from optim import ARMIJO, NO_GAIN, fd_jacobian, maximize, maximize_theta, solve_score_system

BLOOD_MLE = (0.29861, 0.12798)


def test_fd_jacobian_of_linear_map():
    matrix = np.array([[1.0, 2.0], [-3.0, 0.5], [0.0, 4.0]])
    np.testing.assert_allclose(fd_jacobian(lambda v: matrix @ v, np.array([0.3, -1.2])), matrix, atol=1e-8)


def test_maximize_quadratic():
    v, converged = maximize(lambda v: -float(v @ v), lambda v: -2 * v, np.array([1.0, 1.0]))
    assert converged
    assert np.max(np.abs(v)) < 1e-8


def test_accepted_steps_satisfy_armijo():
    steps = []

    def objective(v):
        return -float((v[0] - 1) ** 4 + (v[1] + 2) ** 2 + np.exp(v[0]))

    def gradient(v):
        return np.array([-4 * (v[0] - 1) ** 3 - np.exp(v[0]), -2 * (v[1] + 2)])

    _, converged = maximize(objective, gradient, np.array([4.0, 3.0]), callback=steps.append)
    assert converged
    assert steps
    for step in steps:
        assert step['new_value'] >= step['value'] + ARMIJO * step['step'] * step['slope']


def test_maximize_reports_infinite_start():
    v, converged = maximize(lambda v: -np.inf, lambda v: v, np.array([1.0]))
    assert not converged
    np.testing.assert_array_equal(v, [1.0])


def _rounded_parabola(v):
    return float(np.round(-(v[0] - 1) ** 2, 6))


def _parabola_gradient(v):
    return np.array([-2 * (v[0] - 1)])


def test_no_representable_gain_counts_as_converged():
    start = np.array([1 + 5e-5])
    v, converged = maximize(_rounded_parabola, _parabola_gradient, start)
    assert converged
    np.testing.assert_array_equal(v, start)
    assert (2 * 5e-5) ** 2 / 2 < NO_GAIN


def test_failed_line_search_with_gain_left_is_not_converged():
    v, converged = maximize(_rounded_parabola, _parabola_gradient, np.array([1 + 5e-4]))
    assert not converged


def test_gradient_tolerance_scales_with_the_objective():
    offset = 1e6

    def objective(v):
        return offset - float((v[0] - 1) ** 4)

    v, converged = maximize(objective, lambda v: np.array([-4 * (v[0] - 1) ** 3]), np.array([3.0]))
    assert converged
    assert abs(v[0] - 1) < 0.15


def test_blood_observed_likelihood_maximum(blood, start):
    theta, converged = maximize_theta(blood, blood.observed_loglik, blood.observed_score, start)
    assert converged
    np.testing.assert_allclose(theta.values, BLOOD_MLE, atol=1e-3)


def test_censored_observed_likelihood_matches_em_limit(censored, censored_mle):
    theta, converged = maximize_theta(
        censored, censored.observed_loglik, censored.observed_score, censored.default_start()
    )
    assert converged
    np.testing.assert_allclose(theta.values, censored_mle.values, atol=1e-4)


def test_solve_score_system(blood):
    theta = solve_score_system(blood)
    assert np.max(np.abs(blood.observed_score(theta))) < 1e-9
    np.testing.assert_allclose(theta.values, BLOOD_MLE, atol=1e-3)


def test_symmetric_data_gives_equal_frequencies():
    model = BloodTypeModel(BloodData((10, 8, 8, 1)))
    p, q = solve_score_system(model).values
    assert p == pytest.approx(q, abs=1e-12)


def test_scaled_counts_give_the_same_root(blood):
    scaled = BloodTypeModel(BloodData(tuple(10 * count for count in blood.data.y)))
    np.testing.assert_allclose(solve_score_system(scaled).values, solve_score_system(blood).values, atol=1e-9)


def test_solve_score_system_rejects_exterior_start(blood):
    with pytest.raises(RootFailureError):
        solve_score_system(blood, blood.make_theta([0.6, 0.5]))
