"""The two-phase judge on a group of imperfect decompositions.

Phase 1 scores each sample alone against a rubric.  Phase 2 looks at the
whole group in one labelled grid and re-scores relative to its siblings.
With a judge whose absolute scores bunch together, the second phase is
what gives the policy something to learn from.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from layerlab.grpo import advantages
from layerlab.reward import CompressedOracleJudge, OracleJudge, score_group, to_image, true_quality
from layerlab.scenes import generate_scene

scene, stack, _ = generate_scene(seed=11, n_layers=3)
rng = np.random.default_rng(1)
group = []
for k in range(6):
    s = np.clip(stack + rng.normal(0, 0.05 * k, stack.shape), 0, 1)
    if k % 2:
        s[2, 3] *= 0.2  # a faint, nearly empty layer
    s[0, 3] = 1.0
    group.append(s)

quality = [true_quality(s, scene) for s in group]
for judge in (OracleJudge(), CompressedOracleJudge()):
    rep = score_group(judge, group, scene)
    print(type(judge).__name__)
    print("  true quality ", np.round(quality, 3))
    for name, r in (("phase 1", rep.r_ind), ("phase 2", rep.r_cal)):
        rho = spearmanr(r, quality).statistic
        print(f"  {name:<13}", np.round(r, 3), f" rank agreement {rho:+.2f}",
              " advantages", np.round(advantages(r), 2))

out = Path("demo_outputs")
out.mkdir(exist_ok=True)
to_image(rep.grid).save(out / "judge_grid.png")
print(f"\nthe grid the judge saw: {out / 'judge_grid.png'} ({rep.layout.cols}x{rep.layout.rows})")
