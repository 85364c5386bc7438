from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layerlab import flow
from layerlab.numerics import Tensor, parameter


def test_interpolate_endpoints_and_midpoint():
    x0, x1 = np.array([1.0, 2.0]), np.array([5.0, -1.0])
    np.testing.assert_array_equal(flow.interpolate(x0, x1, 0.0), x0)
    np.testing.assert_array_equal(flow.interpolate(x0, x1, 1.0), x1)
    assert flow.interpolate(np.array(0.0), np.array(4.0), 0.25) == 1.0
    with pytest.raises(ValueError):
        flow.interpolate(x0, x1, 1.5)
    with pytest.raises(ValueError):
        flow.interpolate(x0, np.zeros(3), 0.5)


def test_fm_loss_examples():
    x0, x1 = np.zeros((1, 2)), np.ones((1, 2))
    exact = lambda x, t, c: Tensor(x1 - x0)  # noqa: E731
    zero = lambda x, t, c: Tensor(np.zeros_like(x))  # noqa: E731
    assert flow.fm_loss(exact, x0, x1, 0.3).item() == 0.0
    assert flow.fm_loss(zero, x0, x1, 0.3).item() == 1.0
    with pytest.raises(ValueError):
        flow.fm_loss(zero, x0, np.ones((1, 3)), 0.3)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), t=st.floats(0, 1))
def test_fm_loss_nonnegative(seed, t):
    rng = np.random.default_rng(seed)
    x0, x1 = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 4))
    assert flow.fm_loss(lambda x, t_, c: Tensor(x @ w), x0, x1, t).item() >= 0.0


def test_fm_loss_differentiates():
    rng = np.random.default_rng(0)
    w = parameter(rng.standard_normal((3, 3)))
    x0, x1 = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    loss = flow.fm_loss(lambda x, t, c: Tensor(x) @ w, x0, x1, np.full(4, 0.4))
    assert loss.requires_grad


def test_ode_step_examples():
    x = np.array([1.0, 2.0])
    np.testing.assert_array_equal(flow.ode_step(x, np.zeros(2), 0.5, 0.25), x)
    assert flow.ode_step(1.0, -2.0, 1.0, 0.5) == 0.0
    v = np.array([0.3, -0.7])
    half = flow.ode_step(flow.ode_step(x, v, 1.0, 0.25), v, 0.75, 0.25)
    np.testing.assert_allclose(half, flow.ode_step(x, v, 1.0, 0.5), rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        flow.ode_step(x, v, 0.2, 0.5)


def test_sde_mean_examples():
    assert flow.sde_mean(1.0, 1.0, 0.5, 0.125, 0.7) == pytest.approx(0.783125, abs=1e-15)
    x, v = np.array([0.4, -1.0]), np.array([2.0, 0.5])
    np.testing.assert_allclose(flow.sde_mean(x, v, 0.3, 0.1, 0.0), x - v * 0.1)
    np.testing.assert_array_equal(flow.sde_mean(x, v, 0.3, 0.0, 0.7), x)
    with pytest.raises(ValueError):
        flow.sde_mean(x, v, 0.0, 0.1, 0.7)


def test_sde_step_examples():
    rng = np.random.default_rng(1)
    x, v = rng.standard_normal(6), rng.standard_normal(6)
    mean = flow.sde_mean(x, v, 0.5, 0.125, 0.7)
    x_next, mu, lp = flow.sde_step(x, v, 0.5, 0.125, 0.7, np.zeros(6))
    np.testing.assert_array_equal(x_next, mean)
    eps = rng.standard_normal(6)
    x_next, mu, lp = flow.sde_step(x, v, 0.5, 0.125, 0.7, eps)
    np.testing.assert_allclose((x_next - mu) / (0.7 * math.sqrt(0.125)), eps, rtol=0, atol=1e-13)
    assert abs(lp - flow.transition_log_prob(x_next, mu, 0.7, 0.125)) <= 1e-12
    with pytest.raises(ValueError):
        flow.sde_step(x, v, 0.5, 0.125, 0.0, eps)


def test_transition_log_prob_examples():
    # scale sigma*sqrt(dt) = 1 at the mean
    assert flow.transition_log_prob(np.array([0.3]), np.array([0.3]), 2.0, 0.25) == pytest.approx(
        -0.5 * math.log(2 * math.pi), abs=1e-15)
    d = 7
    x, mu = np.zeros(d), np.zeros(d)
    lp1 = flow.transition_log_prob(x, mu, 0.5, 0.2)
    lp2 = flow.transition_log_prob(x, mu, 1.0, 0.2)
    assert lp1 - lp2 == pytest.approx(d * math.log(2), abs=1e-12)


def _brute(x, mu, sigma, dt):
    var = sigma * sigma * dt
    return math.fsum(-((a - b) ** 2) / (2 * var) - 0.5 * math.log(2 * math.pi * var)
                     for a, b in zip(x, mu))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), d=st.integers(1, 64))
def test_transition_log_prob_matches_brute_force(seed, d):
    rng = np.random.default_rng(seed)
    sigma, dt = rng.uniform(0.1, 2.0), rng.uniform(0.01, 0.5)
    # x_next drawn from the transition itself, as in every sampler call
    mu = rng.standard_normal(d)
    x = mu + sigma * math.sqrt(dt) * rng.standard_normal(d)
    assert abs(flow.transition_log_prob(x, mu, sigma, dt) - _brute(x, mu, sigma, dt)) <= 1e-12


def test_transition_log_prob_tensor_branch_matches_numpy():
    rng = np.random.default_rng(4)
    x, mu = rng.standard_normal((3, 10)), rng.standard_normal((3, 10))
    a = flow.transition_log_prob(x, mu, 0.9, 0.125)
    b = flow.transition_log_prob(x, Tensor(mu), 0.9, 0.125).data
    np.testing.assert_array_equal(a, b)
    per = flow.transition_log_prob(x, mu, 0.9, 0.125, per_element=True)
    assert per.shape == (3, 10)


def test_build_schedule_examples():
    s = flow.build_schedule(8)
    np.testing.assert_allclose(s.dts, 0.125, rtol=0, atol=1e-15)
    assert s.n_steps == 8
    assert 0.7 * math.sqrt(0.5 / 0.5) == pytest.approx(0.7)
    s4 = flow.build_schedule(4, a=0.7)
    # t grid 1, .75, .5, .25 -> clamped .96, .75, .5, .25
    assert s4.sigmas[2] == pytest.approx(0.7)
    s5 = flow.build_schedule(5, a=0.7)
    assert s5.sigmas[1] == pytest.approx(1.4)  # t = 0.8
    with pytest.raises(ValueError):
        flow.build_schedule(0)
    with pytest.raises(ValueError):
        flow.build_schedule(8, t_clamp=(0.5, 0.2))


@given(n=st.integers(1, 200), a=st.floats(0.1, 2.0))
def test_schedule_stays_inside_unit_interval(n, a):
    s = flow.build_schedule(n, a)
    assert np.all((s.clamped > 0) & (s.clamped < 1))
    assert np.all(s.dts > 0)
    np.testing.assert_array_equal(s.sigmas, a * np.sqrt(s.clamped / (1 - s.clamped)))


def test_trajectory_reconstructs_bit_for_bit():
    rng = np.random.default_rng(2)
    vel = flow.gaussian_flow_velocity(np.array([0.5, -0.2, 1.0]), np.array([0.8, 1.2, 0.6]))
    traj = flow.sample_sde(vel, rng.standard_normal((5, 3)), flow.build_schedule(8), rng)
    assert len(traj) == 8
    for i, step in enumerate(traj.steps):
        nxt = traj.steps[i + 1].state if i + 1 < len(traj) else traj.x0
        np.testing.assert_array_equal(step.next_state, nxt)
        np.testing.assert_array_equal(
            flow.transition_log_prob(nxt, step.mean, step.sigma, step.dt), step.log_prob)


def test_sde_reports_nonfinite_trajectory():
    def bad(x, t):
        out = np.zeros_like(x)
        out[1] = np.inf
        return out

    with pytest.raises(FloatingPointError, match="trajectory 1"):
        flow.sample_sde(bad, np.zeros((3, 2)), flow.build_schedule(4), np.random.default_rng(0))


def test_marginal_preservation_small():
    # quick version of the acceptance check on fewer samples
    m, s = np.array([0.5, -1.0]), np.array([0.7, 1.3])
    vel = flow.gaussian_flow_velocity(m, s)
    rng = np.random.default_rng(0)
    x = flow.sample_sde(vel, rng.standard_normal((4000, 2)), flow.build_schedule(50), rng).x0
    np.testing.assert_allclose(x.mean(0), m, atol=0.08)
    np.testing.assert_allclose(x.var(0) / s**2, 1.0, atol=0.08)
