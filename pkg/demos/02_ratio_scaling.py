"""Why the log-ratio is divided by sqrt(D) rather than D.

A fixed low-rank nudge to a linear velocity field changes the summed
transition log-probability by an amount whose spread grows like sqrt(D).
Dividing by D over-corrects (the spread shrinks like 1/sqrt(D) and the
importance ratio goes flat on big canvases); dividing by sqrt(D) keeps it
roughly constant, so one clip range works at every resolution.
"""
from __future__ import annotations

import numpy as np

from layerlab.grpo import ratio_std_by_dimension

out = ratio_std_by_dimension(dims=(64, 256, 1024, 4096), n_samples=2000)
print(f"{'D':>6} {'std / D':>12} {'std / sqrt(D)':>14}")
for d, mean_std, rescaled in zip(out["dims"], out["spatial-mean"], out["sum-rescale"]):
    print(f"{d:>6} {mean_std:>12.5f} {rescaled:>14.5f}")
slope = np.polyfit(np.log(out["dims"]), np.log(out["spatial-mean"]), 1)[0]
print(f"\nlog-log slope of the per-D version: {slope:.3f} (ideal -0.5)")
