"""Held-out evaluation of a velocity network on a fixed scene set."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import flow, metrics, scenes
from .policy import TRAIN_SEED_LIMIT, Condition, VelocityNet
from .reward import true_quality

HELDOUT_BASE = TRAIN_SEED_LIMIT


@dataclass(frozen=True)
class HeldoutScene:
    seed: int
    condition: Condition
    stack: np.ndarray
    scene: scenes.ToyScene


def heldout_scenes(n: int, layer_range=(scenes.MIN_LAYERS, scenes.MAX_LAYERS),
                   height: int = 32, width: int = 32) -> list[HeldoutScene]:
    """The fixed evaluation set: seeds ``HELDOUT_BASE + k``, layer counts cycling
    through ``layer_range``.  Training streams never draw these seeds."""
    if n <= 0:
        raise ValueError("need at least one held-out scene")
    lo, hi = layer_range
    out = []
    for k in range(n):
        n_layers = lo + k % (hi - lo + 1)
        seed = HELDOUT_BASE + k
        scene, stack, comp = scenes.generate_scene(seed, n_layers, height, width)
        out.append(HeldoutScene(seed, Condition(comp, n_layers), stack, scene))
    return out


def decompose(net: VelocityNet, items: list[HeldoutScene], n_steps: int = 50,
              sampler: str = "ode", seed: int = 0, adapters: bool = True,
              noise_level: float = 0.7) -> list[np.ndarray]:
    """One decomposition per scene.  Scenes sharing a layer count are
    batched; the starting noise depends only on (seed, scene seed)."""
    schedule = flow.build_schedule(n_steps, noise_level)
    preds: list[np.ndarray | None] = [None] * len(items)
    by_layers: dict[int, list[int]] = {}
    for idx, item in enumerate(items):
        by_layers.setdefault(item.condition.n_layers, []).append(idx)
    for n_layers, idxs in sorted(by_layers.items()):
        cond = Condition(np.stack([items[i].condition.composite for i in idxs]), n_layers)
        d = scenes.packed_dim(n_layers, net.height, net.width)
        z = np.stack([np.random.default_rng([seed, items[i].seed]).standard_normal(d)
                      for i in idxs])
        vel = net.velocity_fn(cond, adapters)
        if sampler == "ode":
            x0 = flow.sample_ode(vel, z, schedule)
        elif sampler == "sde":
            x0 = flow.sample_sde(vel, z, schedule, np.random.default_rng([seed, n_layers])).x0
        else:
            raise ValueError(f"unknown sampler {sampler!r}")
        for i, row in zip(idxs, x0):
            preds[i] = scenes.unpack(row, n_layers, net.height, net.width)
    return preds  # type: ignore[return-value]


def evaluate_policy(net: VelocityNet, n_scenes: int = 64, n_steps: int = 50,
                    sampler: str = "ode", seed: int = 0, adapters: bool = True,
                    layer_range=(scenes.MIN_LAYERS, scenes.MAX_LAYERS),
                    png_dir: str | Path | None = None) -> list[metrics.EvalRecord]:
    """Decompose the held-out set and score every result."""
    items = heldout_scenes(n_scenes, layer_range, net.height, net.width)
    preds = decompose(net, items, n_steps, sampler, seed, adapters)
    records = []
    for item, pred in zip(items, preds):
        rec = metrics.evaluate_stack(pred, item.stack, scene_seed=item.seed,
                                     reward=true_quality(pred, item.scene))
        records.append(rec)
        if png_dir is not None:
            scenes.save_pngs(pred, Path(png_dir) / f"scene_{item.seed}")
    return records

