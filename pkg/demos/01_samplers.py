"""Two ways down the same flow.

A Gaussian data distribution has a closed-form velocity field, so we can
watch the deterministic sampler and the noisy one land on the same
marginal, and see what the per-step transition log-probability looks like.
"""
from __future__ import annotations

import numpy as np

from layerlab import flow

mean, std = np.array([0.5, -1.0, 2.0]), np.array([0.7, 1.3, 0.4])
velocity = flow.gaussian_flow_velocity(mean, std)
rng = np.random.default_rng(0)
noise = rng.standard_normal((20_000, 3))

print("target      mean", mean, " std", std)
x_ode = flow.sample_ode(velocity, noise, flow.build_schedule(1000))
print("ODE (1000)  mean", x_ode.mean(0).round(3), " std", x_ode.std(0).round(3))

for a in (0.5, 0.7, 0.9):
    traj = flow.sample_sde(velocity, noise, flow.build_schedule(50, a), rng)
    x = traj.x0
    print(f"SDE a={a}    mean", x.mean(0).round(3), " std", x.std(0).round(3))

# Each stored step carries the log-density of the move it made.  Summed
# over dimensions it grows with D, which is why the trainer rescales it.
traj = flow.sample_sde(velocity, noise[:4], flow.build_schedule(8), rng)
print("\nt      clamped  sigma  log-prob of sample 0")
for s in traj.steps:
    print(f"{s.t:.3f}  {s.t_coef:.3f}    {s.sigma:.3f}  {s.log_prob[0]:+.3f}")
