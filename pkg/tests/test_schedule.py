import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskdiff.schedule import (
    NoiseSchedule,
    forward_diffuse,
    make_linear_schedule,
    posterior_mean,
    reverse_step,
    sigma_ddpm,
)


def half_half():
    return NoiseSchedule.from_betas([0.5, 0.5])


def test_rejects_zero_beta():
    with pytest.raises(ValueError):
        make_linear_schedule(3, 0.0, 0.0)


@pytest.mark.parametrize("start,end", [(0.02, 0.01), (0.1, 1.0), (-0.1, 0.2)])
def test_rejects_bad_ranges(start, end):
    with pytest.raises(ValueError):
        make_linear_schedule(10, start, end)


def test_single_step_schedule():
    s = make_linear_schedule(1, 0.5, 0.5)
    np.testing.assert_array_equal(s.alpha_bar, [1.0, 0.5])


def test_alpha_bar_matches_log_sum_oracle_at_T1000():
    s = make_linear_schedule(1000, 1e-4, 0.02)
    betas = [1e-4 + (0.02 - 1e-4) * i / 999 for i in range(1000)]
    oracle = math.exp(math.fsum(math.log1p(-b) for b in betas))
    assert s.alpha_bar[1000] == pytest.approx(oracle, rel=1e-10)


def test_linear_interpolation_includes_endpoints():
    s = make_linear_schedule(5, 0.1, 0.5)
    np.testing.assert_allclose(s.beta, [0.1, 0.2, 0.3, 0.4, 0.5])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1e-5, 0.5), min_size=1, max_size=200))
def test_prefix_product_identity(betas):
    s = NoiseSchedule.from_betas(betas)
    expected = np.cumprod(1.0 - np.asarray(betas))
    np.testing.assert_allclose(s.alpha_bar[1:], expected, rtol=1e-12)
    assert s.alpha_bar[0] == 1.0
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert 0 < s.alpha_bar[-1] < 1


def test_sigma_first_step_is_zero():
    s = make_linear_schedule(50)
    assert sigma_ddpm(s, 1) == 0.0


def test_sigma_hand_value():
    assert sigma_ddpm(half_half(), 2) == pytest.approx(math.sqrt(0.5 / 0.75) * math.sqrt(1 - 0.25 / 0.5), abs=1e-12)
    assert sigma_ddpm(half_half(), 2) == pytest.approx(0.577350, abs=1e-6)


def test_ddim_sigma_is_zero_everywhere():
    s = make_linear_schedule(20)
    assert all(s.sigma(t, eta=0.0) == 0.0 for t in range(1, 21))


def test_timestep_range_checked():
    s = make_linear_schedule(10)
    x = np.zeros(3, np.float32)
    with pytest.raises(ValueError):
        forward_diffuse(x, 0, x, s)
    with pytest.raises(ValueError):
        forward_diffuse(x, 11, x, s)
    with pytest.raises(ValueError):
        sigma_ddpm(s, 0)


def test_forward_zero_noise_and_zero_signal():
    s = make_linear_schedule(10, 0.01, 0.1)
    x0 = np.linspace(-1, 1, 8).astype(np.float32)
    eps = np.random.default_rng(0).standard_normal(8).astype(np.float32)
    ab = s.alpha_bar[7]
    np.testing.assert_allclose(forward_diffuse(x0, 7, np.zeros(8), s), math.sqrt(ab) * x0, rtol=1e-6)
    np.testing.assert_allclose(forward_diffuse(np.zeros(8), 7, eps, s), math.sqrt(1 - ab) * eps, rtol=1e-6)


def test_forward_hand_value():
    out = forward_diffuse(np.array([1.0]), 2, np.array([1.0]), half_half())
    assert out[0] == pytest.approx(0.5 + math.sqrt(0.75), abs=1e-12)
    assert out[0] == pytest.approx(1.366025, abs=1e-6)


def test_forward_keeps_float32():
    s = make_linear_schedule(10)
    x = np.ones((4, 4, 1), np.float32)
    assert forward_diffuse(x, 3, x, s).dtype == np.float32


def test_posterior_mean_lands_on_closed_form_with_exact_noise():
    s = make_linear_schedule(30, 1e-3, 0.05)
    rng = np.random.default_rng(1)
    x0, eps = rng.standard_normal(100), rng.standard_normal(100)
    for t in (1, 2, 15, 30):
        x_t = forward_diffuse(x0, t, eps, s)
        prev = posterior_mean(x_t, eps, t, 0.0, s)
        ab_prev = s.alpha_bar[t - 1]
        np.testing.assert_allclose(prev, math.sqrt(ab_prev) * x0 + math.sqrt(1 - ab_prev) * eps, atol=1e-12)


def test_posterior_mean_zero_prediction():
    s = make_linear_schedule(10, 0.01, 0.1)
    x = np.array([0.3, -1.2])
    out = posterior_mean(x, np.zeros(2), 5, 0.0, s)
    np.testing.assert_allclose(out, math.sqrt(s.alpha_bar[4]) * x / math.sqrt(s.alpha_bar[5]))


def test_posterior_mean_hand_value():
    x2 = 0.5 + math.sqrt(0.75)
    out = posterior_mean(np.array([x2]), np.array([1.0]), 2, 0.0, half_half())
    assert out[0] == pytest.approx(math.sqrt(0.5) * (x2 - math.sqrt(0.75)) / 0.5 + math.sqrt(0.5), abs=1e-12)
    assert out[0] == pytest.approx(1.414214, abs=1e-6)


def test_posterior_mean_rejects_excess_sigma():
    with pytest.raises(ValueError):
        posterior_mean(np.zeros(1), np.zeros(1), 2, 0.8, half_half())


def test_reverse_step_zero_noise_and_ddim():
    s = half_half()
    x, e = np.array([1.2]), np.array([0.4])
    mean = posterior_mean(x, e, 2, sigma_ddpm(s, 2), s)
    np.testing.assert_array_equal(reverse_step(x, e, np.zeros(1), 2, sigma_ddpm(s, 2), s), mean)
    ddim = posterior_mean(x, e, 2, 0.0, s)
    for z in (np.array([5.0]), np.array([-3.0])):
        np.testing.assert_array_equal(reverse_step(x, e, z, 2, 0.0, s), ddim)


def test_reverse_step_composite_hand_value():
    s = half_half()
    x2, sigma, z = 0.5 + math.sqrt(0.75), math.sqrt(0.5 / 0.75) * math.sqrt(0.5), 0.5
    hand = math.sqrt(0.5) * (x2 - math.sqrt(0.75)) / 0.5 + math.sqrt(1 - 0.5 - sigma**2) * 1.0 + sigma * z
    out = reverse_step(np.array([x2]), np.array([1.0]), np.array([z]), 2, sigma, s)
    assert out[0] == pytest.approx(hand, abs=1e-12)
    assert out[0] == pytest.approx(1.404030, abs=1e-6)


def test_reverse_step_replays_recursion_with_matched_noise():
    # choosing z so that the step hits x_{t-1} exactly reproduces the forward sequence
    s = make_linear_schedule(20, 1e-3, 0.1)
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal(50)
    xs = [x0]
    for t in range(1, 21):
        xs.append(math.sqrt(1 - s.beta[t - 1]) * xs[-1] + math.sqrt(s.beta[t - 1]) * rng.standard_normal(50))
    for t in range(20, 1, -1):
        eps = rng.standard_normal(50)
        sig = sigma_ddpm(s, t)
        z = (xs[t - 1] - posterior_mean(xs[t], eps, t, sig, s)) / sig
        np.testing.assert_allclose(reverse_step(xs[t], eps, z, t, sig, s), xs[t - 1], atol=1e-12)


def test_forward_marginal_statistics():
    s = make_linear_schedule(50)
    n, t, x0 = 100_000, 25, 0.7
    eps = np.random.default_rng(7).standard_normal(n)
    x_t = forward_diffuse(np.full(n, x0), t, eps, s)
    ab = s.alpha_bar[t]
    assert abs(x_t.mean() - math.sqrt(ab) * x0) <= 3 * math.sqrt((1 - ab) / n)
    assert x_t.var() == pytest.approx(1 - ab, rel=0.03)


def test_ddim_step_is_pure():
    s = make_linear_schedule(10)
    x, e = np.full(4, 0.25), np.full(4, -0.5)
    a = reverse_step(x, e, np.random.default_rng(0).standard_normal(4), 4, 0.0, s)
    b = reverse_step(x.copy(), e.copy(), np.random.default_rng(1).standard_normal(4), 4, 0.0, s)
    np.testing.assert_array_equal(a, b)
