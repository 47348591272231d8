from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import norm

from src.diffusion.measurements import (
    ELBO,
    PER_TIMESTEP_LOSS,
    SIMPLE_LOSS,
    TRAJECTORY_LOG_PROB,
    MeasurementFn,
    diffusion_loss,
    measure,
    per_timestep_loss,
)
from src.diffusion.process import posterior_mean, q_sample
from src.diffusion.sampling import ddpm_sample, ddpm_sample_batch
from src.diffusion.schedule import NoiseSchedule, elbo_weights, make_schedule
from src.nn.network import build_network
from src.utils.errors import ConfigurationError, PayloadError, ScheduleError
from src.utils.rng import RngStream

ONE_D_ARCH = {
    "data_dim": 1,
    "time_embed_dim": 2,
    "layers": [{"out_dim": 3}, {"out_dim": 1, "activation": "identity"}],
}


def scalar_schedule(lam: float, abar: float) -> NoiseSchedule:
    return NoiseSchedule(1, np.array([lam]), np.array([abar]), np.zeros(1), np.ones(1))


def test_single_step_schedule():
    schedule = make_schedule(1, 0.5, 0.5)
    assert schedule.lambdas[0] == pytest.approx(0.70711, abs=1e-5)
    assert schedule.alpha_bar[0] == pytest.approx(0.5)


def test_desk_schedule_nearly_destroys_signal():
    schedule = make_schedule(100, 1e-4, 0.05)
    assert np.all(np.diff(schedule.alpha_bar) < 0)
    assert schedule.alpha_bar[-1] < 0.1


def test_alpha_bar_ratios_are_step_variances(schedule):
    ratios = schedule.alpha_bar[1:] / schedule.alpha_bar[:-1]
    np.testing.assert_allclose(ratios, schedule.lambdas[1:] ** 2, atol=1e-12)


def test_schedule_range_checked():
    with pytest.raises(ConfigurationError):
        make_schedule(10, 0.2, 0.1)
    with pytest.raises(ConfigurationError):
        make_schedule(0, 0.1, 0.2)


def test_q_sample_scalar_case():
    schedule = scalar_schedule(0.5, 0.25)
    x_t = q_sample(schedule, np.array([1.0]), 1, np.array([1.0]))
    assert x_t[0] == pytest.approx(0.5 + np.sqrt(0.75), abs=1e-12)
    np.testing.assert_array_equal(q_sample(scalar_schedule(1.0, 1.0), np.array([2.5]), 1, np.array([9.0])), [2.5])


def test_q_sample_marginal_law(schedule):
    eps = RngStream(0).child("marginal").generator().standard_normal((100_000, 2))
    x0 = np.array([1.5, -0.5])
    t = 4
    x_t = q_sample(schedule, x0, t, eps)
    abar = schedule.alpha_bar[t - 1]
    n = len(x_t)
    mean_se = np.sqrt((1 - abar) / n)
    var_se = (1 - abar) * np.sqrt(2 / n)
    assert np.all(np.abs(x_t.mean(axis=0) - np.sqrt(abar) * x0) < 4 * mean_se)
    assert np.all(np.abs(x_t.var(axis=0) - (1 - abar)) < 4 * var_se)


def test_posterior_mean_scalar_case():
    mu = posterior_mean(scalar_schedule(0.9, 0.5), np.array([1.0]), np.array([0.2]), 1)
    assert mu[0] == pytest.approx((1 - (0.19 / np.sqrt(0.5)) * 0.2) / 0.9, abs=1e-12)
    assert mu[0] == pytest.approx(1.05144, abs=1e-5)


def test_posterior_mean_matches_gaussian_posterior(schedule):
    t, x0, x_t = 5, np.array([0.8, -1.1]), np.array([0.3, 0.4])
    abar_t, abar_prev = schedule.alpha_bar[t - 1], schedule.alpha_bar[t - 2]
    beta = 1 - schedule.lambdas[t - 1] ** 2
    eps = (x_t - np.sqrt(abar_t) * x0) / np.sqrt(1 - abar_t)
    expected = (np.sqrt(abar_prev) * beta / (1 - abar_t)) * x0 + (
        schedule.lambdas[t - 1] * (1 - abar_prev) / (1 - abar_t)
    ) * x_t
    np.testing.assert_allclose(posterior_mean(schedule, x_t, eps, t), expected, rtol=1e-12)


def test_posterior_mean_rejects_zero_lambda():
    with pytest.raises(ScheduleError):
        posterior_mean(scalar_schedule(0.0, 0.5), np.array([1.0]), np.array([0.0]), 1)


def test_two_step_elbo_weight_closed_form():
    b1, b2 = 0.1, 0.3
    schedule = NoiseSchedule.from_betas([b1, b2])
    assert schedule.elbo_weight[1] == pytest.approx(b2 / (2 * b1 * (1 - b2)), rel=1e-12)
    assert schedule.elbo_weight[0] == schedule.elbo_weight[1]


def test_elbo_weights_scale_with_sigma(schedule):
    scaled = elbo_weights(replace(schedule, sigma=3.0 * schedule.sigma))
    np.testing.assert_allclose(scaled[1:], schedule.elbo_weight[1:] / 9.0, rtol=1e-12)
    assert np.all(schedule.elbo_weight > 0)


def test_zero_network_loss_is_chi_squared(net, schedule):
    zero = net.with_flat_params(np.zeros(net.param_count))
    S = 20_000
    stream = RngStream(5).child("chi2")
    estimate = per_timestep_loss(zero, schedule, np.array([0.4, 0.1]), 3, S, stream)
    assert abs(estimate - 2.0) < 4 * np.sqrt(2 * 2 / S)
    estimate = diffusion_loss(zero, schedule, np.array([0.4, 0.1]), S, stream)
    assert abs(estimate - 2.0) < 4 * np.sqrt(2 * 2 / S)


def test_single_step_loss_equals_per_timestep_loss(net):
    schedule = make_schedule(1, 0.3, 0.3)
    stream = RngStream(1).child("loss")
    x0 = np.array([0.2, -0.7])
    assert diffusion_loss(net, schedule, x0, 16, stream) == per_timestep_loss(net, schedule, x0, 1, 16, stream)


def test_measurements_are_deterministic_and_nonnegative(net, schedule, stream):
    x0 = np.array([0.2, -0.7])
    fn = MeasurementFn(PER_TIMESTEP_LOSS, 32, stream, t=4)
    assert measure(net, schedule, fn, x0) == measure(net, schedule, fn, x0)
    assert measure(net, schedule, fn, x0) >= 0
    simple = MeasurementFn(SIMPLE_LOSS, 32, stream)
    assert measure(net, schedule, simple, x0) == diffusion_loss(net, schedule, x0, 32, stream)


def test_constant_elbo_weights_scale_simple_loss(net, schedule, stream):
    c = 0.7
    flat = replace(schedule, elbo_weight=np.full(schedule.T, c))
    x0 = np.array([1.0, 0.0])
    elbo = measure(net, flat, MeasurementFn(ELBO, 24, stream), x0)
    simple = measure(net, flat, MeasurementFn(SIMPLE_LOSS, 24, stream), x0)
    assert elbo == pytest.approx(c * flat.T * simple, rel=1e-12)


def test_trajectory_log_prob_by_hand():
    schedule = make_schedule(2, 0.1, 0.3)
    net = build_network(ONE_D_ARCH, seed=2)
    _, trajectory = ddpm_sample(net, schedule, seed=4, record=True)
    x2, x1 = trajectory.state(2), trajectory.state(1)

    eps = net(x2[None, :], 2)[0]
    mu = posterior_mean(schedule, x2, eps, 2)
    expected = norm.logpdf(x1[0], mu[0], schedule.sigma[1]) + norm.logpdf(x2[0], 0.0, 1.0)
    value = measure(net, schedule, MeasurementFn(TRAJECTORY_LOG_PROB), trajectory)
    assert value == pytest.approx(expected, rel=1e-10)


def test_trajectory_log_prob_needs_trajectory(net, schedule):
    with pytest.raises(PayloadError):
        measure(net, schedule, MeasurementFn(TRAJECTORY_LOG_PROB), np.array([0.0, 1.0]))


def test_per_timestep_loss_needs_timestep():
    with pytest.raises(ConfigurationError):
        MeasurementFn(PER_TIMESTEP_LOSS, 4)


def test_sampling_is_seeded(net, schedule):
    a, ta = ddpm_sample(net, schedule, seed=3, record=True)
    b, tb = ddpm_sample(net, schedule, seed=3, record=True)
    c, _ = ddpm_sample(net, schedule, seed=4)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(ta.states, tb.states)
    assert ta.states.shape == (schedule.T + 1, 2)
    assert not np.array_equal(a, c)


def test_batch_sampling_matches_single_seeds(net, schedule):
    batch, _ = ddpm_sample_batch(net, schedule, [3, 8], 2)
    np.testing.assert_allclose(batch[1], ddpm_sample(net, schedule, seed=8)[0], rtol=1e-12, atol=1e-14)


def test_last_sampling_step_is_noise_free():
    schedule = make_schedule(1, 0.4, 0.4)
    net = build_network(ONE_D_ARCH, seed=0)
    sample, trajectory = ddpm_sample(net, schedule, seed=1, record=True)
    x1 = trajectory.state(1)
    expected = posterior_mean(schedule, x1, net(x1[None, :], 1)[0], 1)
    np.testing.assert_allclose(sample, expected, rtol=1e-13)


def test_optimal_denoiser_samples_gaussian_data():
    # alpha_bar_T is ~4e-5 here, so the N(0, 1) prior matches q(x_T)
    schedule = make_schedule(1000, 1e-4, 0.02)
    mean, std, n = 1.0, 0.5, 10_000

    def optimal_eps(x, t):
        abar = schedule.abar(t)[:, None]
        return np.sqrt(1.0 - abar) * (x - np.sqrt(abar) * mean) / (abar * std**2 + 1.0 - abar)

    samples, _ = ddpm_sample_batch(optimal_eps, schedule, range(n), 1)
    x = samples[:, 0]
    z_mean = (x.mean() - mean) / (std / np.sqrt(n))
    z_var = (x.var(ddof=1) - std**2) / (std**2 * np.sqrt(2.0 / (n - 1)))
    assert abs(z_mean) < 4.0
    assert abs(z_var) < 4.0
