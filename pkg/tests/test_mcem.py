import numpy as np
import pytest

from benchmarks import ExactEnumeration
from engines.em import em_step, run_em
from engines.mcem import (
    BoothHobertConfig, CaffoConfig, ChanLedolterConfig, WeiTannerConfig, delta_q_bounds,
    estimate_log_lr, mc_update_covariance, mcem_inner_step, one_step_log_lr, pilot_peak, qhat,
    run_booth_hobert, run_caffo, run_chan_ledolter, run_wei_tanner,
)
from extensions import SeedStream
from models import (
    AugmentationStallError, ConfigError, InsufficientPilotError, InsufficientSampleError,
    TerminationReason,
)
from samplers import DirectSampling, sample_direct

PUBLISHED_WEI_TANNER = (0.298, 0.128)
PUBLISHED_CHAN_LEDOLTER = (0.298, 0.129)
PUBLISHED_BOOTH_HOBERT = (0.299, 0.128)
PUBLISHED_CAFFO = (0.299, 0.127)


def share_within(finals, target, tol):
    finals = np.asarray(finals, dtype=float)
    return float(np.mean(np.max(np.abs(finals - np.asarray(target)), axis=1) <= tol))


def assert_matches_em(thetas, model, start, atol=1e-9):
    em = run_em(model, start, tol=1e-300, max_iter=len(thetas)).thetas()
    common = min(len(thetas), len(em))
    assert common >= 3
    np.testing.assert_allclose(thetas[:common], em[:common], atol=atol)


def test_exact_inner_step_is_the_em_update(blood, start):
    step = mcem_inner_step(blood, start, blood.enumerate_conditional(start))
    np.testing.assert_allclose(step.theta_new.values, em_step(blood, start).values, atol=1e-12)


def test_numeric_inner_step_matches_closed_form(blood, start):
    sample = sample_direct(blood, start, 200, SeedStream(1))
    closed = mcem_inner_step(blood, start, sample)
    numeric = mcem_inner_step(blood, start, sample, numeric=True)
    np.testing.assert_allclose(numeric.theta_new.values, closed.theta_new.values, atol=1e-6)


def test_inner_step_never_lowers_q_hat(blood, start):
    for seed in range(10):
        step = mcem_inner_step(blood, start, sample_direct(blood, start, 20, SeedStream(seed)))
        assert step.qhat_at_new >= step.qhat_at_old


def test_inner_step_needs_sample_at_theta(blood, start):
    sample = sample_direct(blood, blood.make_theta([0.3, 0.2]), 20, 0)
    with pytest.raises(ValueError):
        mcem_inner_step(blood, start, sample)


def test_exact_log_likelihood_ratio(blood, start):
    other = blood.make_theta([0.3, 0.12])
    estimate, se = estimate_log_lr(blood, other, start, blood.enumerate_conditional(start))
    assert estimate == pytest.approx(blood.observed_loglik(other) - blood.observed_loglik(start), abs=1e-10)
    assert se == 0.0


def test_one_step_ratio_is_negated_reverse_ratio(blood, start):
    theta_new = blood.make_theta([0.3, 0.12])
    sample = sample_direct(blood, theta_new, 100, SeedStream(2))
    forward, forward_se = one_step_log_lr(blood, start, theta_new, sample)
    reverse, reverse_se = estimate_log_lr(blood, start, theta_new, sample)
    assert forward == -reverse
    assert forward_se == reverse_se


def test_bias_corrected_one_step_ratio(blood, start):
    theta_new = blood.make_theta([0.3, 0.12])
    sample = sample_direct(blood, theta_new, 100, SeedStream(2))
    plain, se = one_step_log_lr(blood, start, theta_new, sample)
    corrected, corrected_se = one_step_log_lr(blood, start, theta_new, sample, bias_correct=True)
    assert corrected == pytest.approx(plain - se ** 2 / 2)
    assert corrected_se == se

    exact = blood.enumerate_conditional(theta_new)
    assert one_step_log_lr(blood, start, theta_new, exact, bias_correct=True) == one_step_log_lr(
        blood, start, theta_new, exact
    )


def test_pilot_peak_of_an_exact_climb():
    assert pilot_peak([0.0, 1.0, 2.0, 3.0], [0.0, 0.0, 0.0], 1.96) == 3
    assert pilot_peak([0.0, 1.0, 2.0, 2.0], [0.0, 0.0, 0.0], 1.96) == 2


def test_pilot_peak_ignores_gains_inside_the_noise():
    assert pilot_peak([0.0, 0.5, 0.4, 0.6], [1.0, 1.0, 1.0], 1.96) == 0
    assert pilot_peak([0.0, 5.0, 5.1, 5.05], [0.1, 0.1, 0.1], 1.96) == 1


def test_log_ratio_needs_two_draws(blood, start):
    with pytest.raises(InsufficientSampleError):
        estimate_log_lr(blood, start, start, sample_direct(blood, start, 1, 0))


def test_exact_sample_has_no_update_covariance(blood, start):
    step = mcem_inner_step(blood, start, blood.enumerate_conditional(start))
    np.testing.assert_array_equal(mc_update_covariance(blood, step), np.zeros((2, 2)))


def _covariance_norm(model, theta, size, seeds):
    norms = []
    for seed in seeds:
        step = mcem_inner_step(model, theta, sample_direct(model, theta, size, SeedStream(seed)))
        covariance = mc_update_covariance(model, step)
        assert np.all(np.linalg.eigvalsh(covariance) > 0)
        norms.append(np.max(np.abs(covariance)))
    return float(np.mean(norms))


def test_update_covariance_scales_inversely_with_sample_size(blood, start):
    small = _covariance_norm(blood, start, 100, range(3, 8))
    large = _covariance_norm(blood, start, 10_000, range(3, 8))
    assert 50 <= small / large <= 200


@pytest.mark.slow
def test_delta_q_bounds_cover_the_exact_increment(blood, start):
    exact = blood.enumerate_conditional(start)
    covered = 0
    for seed in range(100):
        step = mcem_inner_step(blood, start, sample_direct(blood, start, 10_000, SeedStream(seed)))
        lower, upper = delta_q_bounds(blood, step, 0.95)
        increment = qhat(blood, step.theta_new, exact) - qhat(blood, start, exact)
        covered += lower <= increment <= upper
    assert covered >= 92


def test_delta_q_bounds(blood, start):
    step = mcem_inner_step(blood, start, sample_direct(blood, start, 100, SeedStream(4)))
    lower, upper = delta_q_bounds(blood, step, 0.9)
    increment = step.qhat_at_new - step.qhat_at_old
    assert lower <= increment <= upper
    assert increment == pytest.approx(0.5 * (lower + upper))

    exact = mcem_inner_step(blood, start, blood.enumerate_conditional(start))
    lower, upper = delta_q_bounds(blood, exact, 0.9)
    assert lower == upper > 0


def test_booth_hobert_escalation():
    config = BoothHobertConfig(r=3)
    assert config.escalate(9) == 12
    assert config.escalate(10) == 14
    assert BoothHobertConfig(r=1).escalate(7) == 14


@pytest.mark.parametrize('factory', [
    lambda: WeiTannerConfig(schedule=()),
    lambda: WeiTannerConfig(schedule=((5, 0),)),
    lambda: ChanLedolterConfig(ci_level=1.0),
    lambda: ChanLedolterConfig(pilot_mc_size=1),
    lambda: BoothHobertConfig(alpha=0.0),
    lambda: BoothHobertConfig(delta2=-1.0),
    lambda: BoothHobertConfig(delta1_se=0.0),
    lambda: CaffoConfig(m0=1),
    lambda: CaffoConfig(tau=0.0),
    lambda: CaffoConfig(m0=10, max_mc_size=5),
])
def test_invalid_controller_settings(factory):
    with pytest.raises(ConfigError):
        factory()


def test_wei_tanner_follows_schedule(blood, start):
    config = WeiTannerConfig(schedule=((3, 50), (0, 10), (2, 100)))
    trajectory = run_wei_tanner(blood, start, config, rng=SeedStream(5))
    assert [record.iteration for record in trajectory.records] == [1, 2, 3, 4, 5]
    assert [record.mc_size for record in trajectory.records] == [50, 50, 50, 100, 100]
    assert trajectory.total_draws == 350
    assert trajectory.terminated_reason is TerminationReason.MAX_ITERATIONS


def test_wei_tanner_is_reproducible(blood, start):
    config = WeiTannerConfig(schedule=((10, 30),))
    first = run_wei_tanner(blood, start, config, rng=3)
    second = run_wei_tanner(blood, start, config, rng=3)
    np.testing.assert_array_equal(first.thetas(), second.thetas())


def test_wei_tanner_with_exact_enumeration_is_em(blood, start):
    trajectory = run_wei_tanner(blood, start, WeiTannerConfig(schedule=((8, 1),)), ExactEnumeration())
    em = run_em(blood, start, tol=1e-300, max_iter=8)
    np.testing.assert_allclose(trajectory.thetas(), em.thetas(), atol=1e-10)


def test_wei_tanner_reaches_censored_mle(censored, censored_mle):
    config = WeiTannerConfig(schedule=((20, 100), (10, 2000)))
    trajectory = run_wei_tanner(censored, censored.default_start(), config, rng=SeedStream(6))
    np.testing.assert_allclose(trajectory.final_theta.values, censored_mle.values, atol=0.05)


def test_chan_ledolter(blood, start, blood_mle):
    config = ChanLedolterConfig()
    trajectory = run_chan_ledolter(blood, start, config, rng=SeedStream(1))
    pilot = [record for record in trajectory.records if record.diagnostics['stage'] == 1.0]
    stage2 = [record for record in trajectory.records if record.diagnostics['stage'] == 2.0]
    assert [record.iteration for record in pilot] == list(range(1, 51))
    assert stage2 and stage2[0].iteration == 51
    assert all(record.mc_size >= 100 for record in stage2)
    assert len({record.mc_size for record in stage2}) == 1
    for record in trajectory.records:
        assert record.ci_lower <= record.objective_increment <= record.ci_upper
    if trajectory.terminated_reason is TerminationReason.CI_CONTAINS_ZERO:
        assert stage2[-1].ci_lower <= 0
        assert all(record.ci_lower > 0 for record in stage2[:-1])
    np.testing.assert_allclose(trajectory.final_theta.values, blood_mle.values, atol=0.01)


def test_chan_ledolter_pilot_with_exact_enumeration_is_em(blood, start):
    config = ChanLedolterConfig()
    trajectory = run_chan_ledolter(blood, start, config, rng=0, policy=ExactEnumeration())
    pilot = np.array([record.theta.values for record in trajectory.records if record.diagnostics['stage'] == 1.0])
    assert len(pilot) == config.pilot_iters
    assert_matches_em(pilot, blood, start)


def _chan_ledolter_finals(model, theta0, config, seeds):
    finals, first_check_stops = [], 0
    for seed in seeds:
        try:
            trajectory = run_chan_ledolter(model, theta0, config, rng=SeedStream(seed))
        except InsufficientPilotError:
            continue
        finals.append(trajectory.final_theta.values)
        stage2 = [record for record in trajectory.records if record.diagnostics['stage'] == 2.0]
        if trajectory.terminated_reason is TerminationReason.CI_CONTAINS_ZERO and len(stage2) == 1:
            first_check_stops += 1
    return finals, first_check_stops


@pytest.mark.slow
def test_chan_ledolter_replicates(blood, start):
    finals, _ = _chan_ledolter_finals(blood, start, ChanLedolterConfig(), range(100))
    assert len(finals) >= 90
    assert share_within(finals, PUBLISHED_CHAN_LEDOLTER, 0.005) * len(finals) >= 90


@pytest.mark.slow
def test_chan_ledolter_started_at_the_mle_stops_at_the_first_check(blood, blood_mle):
    _, first_check_stops = _chan_ledolter_finals(blood, blood_mle, ChanLedolterConfig(), range(100))
    assert first_check_stops >= 95


def test_chan_ledolter_needs_enough_pilot_followers(blood, start):
    config = ChanLedolterConfig(pilot_iters=3, pilot_mc_size=20, followers=5)
    with pytest.raises(InsufficientPilotError) as excinfo:
        run_chan_ledolter(blood, start, config, rng=SeedStream(8))
    partial = excinfo.value.trajectory
    assert partial.terminated_reason is TerminationReason.FAILED
    assert len(partial) == 3


def _check_escalations(trajectory, config):
    records = trajectory.records
    for current, following in zip(records, records[1:]):
        if current.diagnostics['ci_contains_previous']:
            assert following.mc_size == config.escalate(current.mc_size)
        else:
            assert following.mc_size == current.mc_size


def test_booth_hobert(blood, start, blood_mle):
    config = BoothHobertConfig(m0=10)
    trajectory = run_booth_hobert(blood, start, config, rng=SeedStream(9))
    assert trajectory.records[0].mc_size == 10
    _check_escalations(trajectory, config)
    for record in trajectory.records:
        assert record.diagnostics['ci_lower_p'] <= record.theta.values[0] <= record.diagnostics['ci_upper_p']
    if trajectory.terminated_reason is TerminationReason.CONVERGED:
        tail = trajectory.records[-config.consecutive:]
        assert all(record.diagnostics['relative_change'] < config.delta2 for record in tail)
    np.testing.assert_allclose(trajectory.final_theta.values, blood_mle.values, atol=0.05)


def test_booth_hobert_is_reproducible(blood, start):
    config = BoothHobertConfig(m0=10, max_iters=30)
    first = run_booth_hobert(blood, start, config, rng=11)
    second = run_booth_hobert(blood, start, config, rng=11)
    np.testing.assert_array_equal(first.thetas(), second.thetas())
    assert [record.mc_size for record in first.records] == [record.mc_size for record in second.records]


def test_booth_hobert_with_exact_enumeration(blood, start, blood_mle):
    config = BoothHobertConfig(m0=10, max_iters=500)
    trajectory = run_booth_hobert(blood, start, config, rng=0, policy=ExactEnumeration())
    assert trajectory.terminated_reason is TerminationReason.CONVERGED
    assert len({record.mc_size for record in trajectory.records}) == 1
    np.testing.assert_allclose(trajectory.final_theta.values, blood_mle.values, atol=1e-2)
    assert_matches_em(trajectory.thetas(), blood, start)


def test_booth_hobert_variants_run(blood, start):
    for config in (
        BoothHobertConfig(m0=20, se_rule=True, max_iters=40),
        BoothHobertConfig(m0=20, ripatti_variant=True, max_iters=40),
    ):
        trajectory = run_booth_hobert(blood, start, config, rng=SeedStream(12))
        assert 1 <= len(trajectory) <= 40
        sizes = [record.mc_size for record in trajectory.records]
        assert sizes == sorted(sizes)


def test_caffo(blood, start, blood_mle):
    config = CaffoConfig(m0=10)
    trajectory = run_caffo(blood, start, config, rng=SeedStream(13))
    sizes = [record.mc_size for record in trajectory.records]
    assert sizes == sorted(sizes)
    assert all(record.ci_lower > 0 or record.ci_upper < config.tau for record in trajectory.records)
    assert all(record.ci_lower <= record.ci_upper for record in trajectory.records)
    if trajectory.terminated_reason is TerminationReason.INCREMENT_BELOW_TAU:
        assert trajectory.records[-1].ci_upper < config.tau
    np.testing.assert_allclose(trajectory.final_theta.values, blood_mle.values, atol=0.01)


def test_caffo_does_not_augment_once_the_increment_is_below_tau(blood, start):
    config = CaffoConfig(m0=2, ascent_level=0.99, tau=1e3, max_augments_per_iter=0)
    trajectory = run_caffo(blood, start, config, rng=SeedStream(13))
    assert trajectory.terminated_reason is TerminationReason.INCREMENT_BELOW_TAU
    assert len(trajectory) == 1
    assert trajectory.records[0].diagnostics['augmentations'] == 0
    assert trajectory.records[0].mc_size == 2


def test_caffo_counts_augmented_draws(blood, start):
    trajectory = run_caffo(blood, start, CaffoConfig(m0=10, max_iters=20), rng=SeedStream(14))
    for record in trajectory.records:
        assert record.diagnostics['draws'] >= record.mc_size
        if record.diagnostics['augmentations'] == 0:
            assert record.diagnostics['draws'] == record.mc_size


def test_caffo_stall_keeps_partial_trajectory(blood, start):
    config = CaffoConfig(m0=2, ascent_level=0.99, tau=1e-12, max_augments_per_iter=0, max_iters=200)
    with pytest.raises(AugmentationStallError) as excinfo:
        run_caffo(blood, start, config, rng=SeedStream(15))
    state = excinfo.value.state
    assert state['lower_bound'] <= 0
    assert state['mc_size'] >= 2
    partial = excinfo.value.trajectory
    assert partial.terminated_reason is TerminationReason.FAILED
    assert len(partial) == state['iteration'] - 1


def test_caffo_stalls_at_the_sample_size_cap(blood, start):
    config = CaffoConfig(m0=2, ascent_level=0.99, tau=1e-12, max_mc_size=2, max_iters=200)
    with pytest.raises(AugmentationStallError) as excinfo:
        run_caffo(blood, start, config, rng=SeedStream(15))
    assert excinfo.value.state['mc_size'] == 2
    assert all(record.mc_size == 2 for record in excinfo.value.trajectory.records)


def test_caffo_with_exact_enumeration_never_augments(blood, start):
    trajectory = run_caffo(blood, start, CaffoConfig(m0=10), rng=0, policy=ExactEnumeration())
    assert trajectory.terminated_reason is TerminationReason.INCREMENT_BELOW_TAU
    assert all(record.diagnostics['augmentations'] == 0 for record in trajectory.records)


def test_caffo_with_exact_enumeration_is_em(blood, start):
    trajectory = run_caffo(blood, start, CaffoConfig(m0=10, tau=1e-10), rng=0, policy=ExactEnumeration())
    assert_matches_em(trajectory.thetas(), blood, start)


def test_controllers_accept_a_policy_instance(blood, start):
    trajectory = run_wei_tanner(blood, start, WeiTannerConfig(schedule=((2, 10),)), DirectSampling(), rng=1)
    assert len(trajectory) == 2


@pytest.mark.slow
def test_wei_tanner_replicates(blood, start):
    finals = [
        run_wei_tanner(blood, start, WeiTannerConfig(), rng=SeedStream(seed)).final_theta.values
        for seed in range(100)
    ]
    assert share_within(finals, PUBLISHED_WEI_TANNER, 0.005) >= 0.9


@pytest.mark.slow
def test_booth_hobert_replicates(blood, start):
    finals = [
        run_booth_hobert(blood, start, BoothHobertConfig(), rng=SeedStream(seed)).final_theta.values
        for seed in range(100)
    ]
    assert share_within(finals, PUBLISHED_BOOTH_HOBERT, 0.005) >= 0.9


@pytest.mark.slow
def test_caffo_replicates(blood, start):
    finals = []
    for seed in range(100):
        try:
            finals.append(run_caffo(blood, start, CaffoConfig(), rng=SeedStream(seed)).final_theta.values)
        except AugmentationStallError:
            continue
    assert share_within(finals, PUBLISHED_CAFFO, 0.005) * len(finals) >= 90


@pytest.mark.slow
def test_caffo_started_at_the_mle_stops_quickly(blood, blood_mle):
    quick = 0
    for seed in range(100):
        try:
            trajectory = run_caffo(blood, blood_mle, CaffoConfig(m0=10_000), rng=SeedStream(seed))
        except AugmentationStallError:
            continue
        quick += trajectory.terminated_reason is TerminationReason.INCREMENT_BELOW_TAU and len(trajectory) <= 3
    assert quick >= 90
