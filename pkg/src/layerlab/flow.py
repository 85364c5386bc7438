"""Rectified-flow interpolation, the ODE sampler, and the marginal-preserving SDE.

Conventions: ``t = 1`` is pure noise and ``t = 0`` is data.  The learned
velocity targets ``x1 - x0`` so integrating from ``t`` to ``t - dt`` moves
against it.  :func:`ode_step` takes the time-reversed drift (``-v``) and
adds it, which keeps its arithmetic identical to the textbook Euler form.
"""
from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .numerics import Tensor, as_tensor

DEFAULT_T_CLAMP = (1e-3, 0.96)


def interpolate(x0, x1, t: float):
    """``(1 - t) * x0 + t * x1``; works for arrays and tensors alike."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if np.shape(_raw(x0)) != np.shape(_raw(x1)):
        raise ValueError("x0 and x1 must have the same shape")
    return (1.0 - t) * x0 + t * x1


def _raw(x):
    return x.data if isinstance(x, Tensor) else x


def fm_loss(model: Callable, x0, x1, t, cond=None) -> Tensor:
    """Mean-square flow-matching regression error.

    ``t`` is a scalar or one value per row of a batch.  ``model`` is called
    as ``model(x_t, t, cond)`` and must return a tensor shaped like ``x0``.
    """
    x0 = np.asarray(_raw(x0), dtype=np.float64)
    x1 = np.asarray(_raw(x1), dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError("x0 and x1 must have the same shape")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValueError("t must lie in [0, 1]")
    tt = t_arr.reshape(-1, *([1] * (x0.ndim - 1))) if t_arr.ndim else t_arr
    x_t = (1.0 - tt) * x0 + tt * x1
    v = as_tensor(model(x_t, t_arr, cond))
    if v.shape != x0.shape:
        raise ValueError(f"model output shape {v.shape} != data shape {x0.shape}")
    return (v - (x1 - x0)).square().mean()


def ode_step(x_t, drift, t: float, dt: float):
    """Euler step from ``t`` to ``t - dt``: ``x_t + drift * dt``.

    ``drift`` is the reverse-time velocity, i.e. ``-v`` for a network
    trained on the ``x1 - x0`` target.
    """
    if dt <= 0 or t - dt < -1e-12:
        raise ValueError(f"need dt > 0 and t - dt >= 0, got t={t}, dt={dt}")
    return x_t + drift * dt


def sde_coefficients(t: float, dt: float, sigma: float) -> tuple[float, float]:
    """Multipliers ``(c_x, c_v)`` with ``mean = c_x * x - c_v * v``."""
    if t <= 0:
        raise ValueError(f"SDE mean divides by t; got t={t}")
    if dt < 0:
        raise ValueError("dt must be non-negative")
    s2 = sigma * sigma
    c_x = 1.0 - s2 * dt / (2.0 * t)
    c_v = (1.0 + s2 * (1.0 - t) / (2.0 * t)) * dt
    return c_x, c_v


def sde_mean(x_t, v, t: float, dt: float, sigma: float):
    c_x, c_v = sde_coefficients(t, dt, sigma)
    return x_t * c_x - v * c_v


def transition_log_prob(x_next, mean, sigma: float, dt: float, per_element: bool = False):
    """Gaussian log-density of ``x_next`` under ``N(mean, sigma^2 dt I)``.

    Sums over the trailing axis (so a batch gives one value per row).  With
    ``per_element=True`` the unsummed terms are returned instead.  Accepts
    tensors for ``mean`` so replay can differentiate through it.
    """
    scale = sigma * math.sqrt(dt)
    if scale <= 0:
        raise ValueError("sigma * sqrt(dt) must be positive")
    const = math.log(scale * math.sqrt(2.0 * math.pi))
    diff = x_next - mean
    if isinstance(diff, Tensor):
        terms = diff.square() * (-1.0 / (2.0 * scale * scale)) - const
        return terms if per_element else terms.sum(axis=-1)
    diff = np.asarray(diff, dtype=np.float64)
    # same operation order as the tensor branch so replayed values match bit-for-bit
    terms = (diff * diff) * (-1.0 / (2.0 * scale * scale)) - const
    return terms if per_element else terms.sum(axis=-1)


def sde_step(x_t, v, t: float, dt: float, sigma: float, eps):
    """One stochastic step; returns ``(x_next, mean, log_prob)``."""
    if sigma <= 0:
        raise ValueError("sigma must be positive for a stochastic step")
    x_t = np.asarray(_raw(x_t), dtype=np.float64)
    v = np.asarray(_raw(v), dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x_t.shape:
        raise ValueError("noise must match the state shape")
    mean = sde_mean(x_t, v, t, dt, sigma)
    x_next = mean + sigma * math.sqrt(dt) * eps
    return x_next, mean, transition_log_prob(x_next, mean, sigma, dt)


@dataclass(frozen=True)
class NoiseSchedule:
    timesteps: np.ndarray      # t_0 = 1 > ... > t_T = 0, unclamped grid
    clamped: np.ndarray        # per-step t used for coefficients (length T)
    dts: np.ndarray            # t_i - t_{i+1}
    sigmas: np.ndarray         # a * sqrt(t/(1-t)) at the clamped t
    a: float

    @property
    def n_steps(self) -> int:
        return len(self.dts)


def build_schedule(n_steps: int, a: float = 0.7, t_clamp=DEFAULT_T_CLAMP) -> NoiseSchedule:
    """Uniform grid ``t_i = (T - i)/T``; coefficients use t clamped to ``t_clamp``."""
    if n_steps < 1:
        raise ValueError("need at least one step")
    lo, hi = t_clamp
    if not 0.0 < lo < hi < 1.0:
        raise ValueError(f"t_clamp must satisfy 0 < lo < hi < 1, got {t_clamp}")
    if a <= 0:
        raise ValueError("noise level a must be positive")
    grid = (n_steps - np.arange(n_steps + 1)) / n_steps
    clamped = np.clip(grid[:-1], lo, hi)
    sigmas = a * np.sqrt(clamped / (1.0 - clamped))
    return NoiseSchedule(timesteps=grid, clamped=clamped, dts=grid[:-1] - grid[1:],
                         sigmas=sigmas, a=a)


@dataclass(frozen=True)
class Step:
    t: float
    dt: float
    t_coef: float
    sigma: float
    state: np.ndarray       # x at t, batch x D
    mean: np.ndarray
    noise: np.ndarray
    log_prob: np.ndarray    # behaviour-policy log-prob per row

    @property
    def next_state(self) -> np.ndarray:
        return self.mean + self.sigma * math.sqrt(self.dt) * self.noise


@dataclass(frozen=True)
class Trajectory:
    """A batch of SDE rollouts sharing one schedule (one row per sample)."""

    z_T: np.ndarray
    steps: tuple[Step, ...]
    x0: np.ndarray
    condition: object = None
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def batch(self) -> int:
        return self.z_T.shape[0]

    def select(self, rows) -> "Trajectory":
        rows = np.asarray(rows)
        steps = tuple(Step(s.t, s.dt, s.t_coef, s.sigma, s.state[rows], s.mean[rows],
                           s.noise[rows], s.log_prob[rows]) for s in self.steps)
        return Trajectory(self.z_T[rows], steps, self.x0[rows], self.condition, dict(self.extra))


VelocityFn = Callable[[np.ndarray, float], np.ndarray]


def sample_sde(velocity: VelocityFn, z_T: np.ndarray, schedule: NoiseSchedule,
               rng: np.random.Generator, condition=None) -> Trajectory:
    """Roll out the SDE sampler from noise ``z_T`` (batch x D)."""
    x = np.array(z_T, dtype=np.float64, ndmin=2)
    steps = []
    for i in range(schedule.n_steps):
        t = float(schedule.timesteps[i])
        tc = float(schedule.clamped[i])
        dt = float(schedule.dts[i])
        sigma = float(schedule.sigmas[i])
        v = np.asarray(velocity(x, t), dtype=np.float64)
        eps = rng.standard_normal(x.shape)
        x_next, mean, lp = sde_step(x, v, tc, dt, sigma, eps)
        if not np.all(np.isfinite(x_next)):
            bad = int(np.nonzero(~np.all(np.isfinite(x_next), axis=-1))[0][0])
            raise FloatingPointError(f"non-finite state in trajectory {bad} at step {i}")
        steps.append(Step(t, dt, tc, sigma, x, mean, eps, lp))
        x = x_next
    return Trajectory(np.array(z_T, dtype=np.float64, ndmin=2), tuple(steps), x, condition)


def sample_ode(velocity: VelocityFn, z_T: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    x = np.array(z_T, dtype=np.float64, ndmin=2)
    for i in range(schedule.n_steps):
        t = float(schedule.timesteps[i])
        x = ode_step(x, -np.asarray(velocity(x, t)), t, float(schedule.dts[i]))
    return x


def gaussian_flow_velocity(data_mean, data_std) -> VelocityFn:
    """Exact velocity ``E[x1 - x0 | x_t]`` for ``x0 ~ N(m, s^2)``, ``x1 ~ N(0, 1)`` per dim."""
    m = np.asarray(data_mean, dtype=np.float64)
    s2 = np.asarray(data_std, dtype=np.float64) ** 2

    def velocity(x, t):
        var_t = (1.0 - t) ** 2 * s2 + t * t
        cov = t - (1.0 - t) * s2
        return -m + cov / var_t * (x - (1.0 - t) * m)

    return velocity
