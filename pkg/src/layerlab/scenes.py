"""Synthetic layered scenes, alpha-over compositing and layer packing.

Rasters are ``(channels, H, W)`` float arrays in [0, 1].  A layer stack is
``(L, 4, H, W)`` with RGBA channels; layer 0 is the opaque background.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MIN_LAYERS = 2
MAX_LAYERS = 5
SHAPE_KINDS = ("disc", "rectangle", "ring")
MIN_VISIBLE = 0.2
# scene values sit on this grid so the [0,1] <-> [-1,1] map round-trips exactly
LEVELS = 4096


def quantize(x) -> np.ndarray:
    return np.round(np.asarray(x, dtype=np.float64) * LEVELS) / LEVELS


@dataclass(frozen=True)
class Shape:
    kind: str
    center: tuple[float, float]    # (row, col) in pixels
    size: float                    # radius, or half-extent for rectangles
    color: tuple[float, float, float]
    aspect: float = 1.0            # rectangle width / height

    def mask(self, height: int, width: int) -> np.ndarray:
        rr, cc = np.mgrid[0:height, 0:width] + 0.5
        dr, dc = rr - self.center[0], cc - self.center[1]
        if self.kind == "disc":
            return (dr ** 2 + dc ** 2 <= self.size ** 2).astype(float)
        if self.kind == "ring":
            d2 = dr ** 2 + dc ** 2
            return ((d2 <= self.size ** 2) & (d2 >= (0.5 * self.size) ** 2)).astype(float)
        if self.kind == "rectangle":
            half_h = self.size / np.sqrt(self.aspect)
            half_w = self.size * np.sqrt(self.aspect)
            return ((np.abs(dr) <= half_h) & (np.abs(dc) <= half_w)).astype(float)
        raise ValueError(f"unknown shape kind {self.kind!r}")

    def bbox(self) -> tuple[float, float, float, float]:
        if self.kind == "rectangle":
            hh, hw = self.size / np.sqrt(self.aspect), self.size * np.sqrt(self.aspect)
        else:
            hh = hw = self.size
        r, c = self.center
        return r - hh, c - hw, r + hh, c + hw


@dataclass(frozen=True)
class ToyScene:
    seed: int
    n_layers: int
    height: int
    width: int
    bg_top: tuple[float, float, float]
    bg_bottom: tuple[float, float, float]
    stripe_period: int               # 0 disables stripes
    stripe_color: tuple[float, float, float]
    shapes: tuple[Shape, ...]        # back to front; shape k lives on layer k + 1
    layer_of_shape: tuple[int, ...] = field(default=())

    def background(self) -> np.ndarray:
        """Opaque RGB background of shape (3, H, W)."""
        h, w = self.height, self.width
        frac = (np.arange(h) + 0.5) / h
        top = np.asarray(self.bg_top)[:, None]
        bottom = np.asarray(self.bg_bottom)[:, None]
        column = top * (1.0 - frac) + bottom * frac          # (3, H)
        rgb = np.repeat(column[:, :, None], w, axis=2)
        if self.stripe_period:
            on = (np.arange(w) // self.stripe_period) % 2 == 1
            rgb[:, :, on] = 0.5 * rgb[:, :, on] + 0.5 * np.asarray(self.stripe_color)[:, None, None]
        return quantize(rgb)

    def shape_masks(self) -> np.ndarray:
        return np.stack([s.mask(self.height, self.width) for s in self.shapes]) if self.shapes \
            else np.zeros((0, self.height, self.width))


def _check_alpha(alpha: np.ndarray) -> None:
    if np.any(alpha < 0) or np.any(alpha > 1):
        raise ValueError("alpha values must lie in [0, 1]")


def composite(stack: np.ndarray) -> np.ndarray:
    """Back-to-front alpha-over of an ``(L, 4, H, W)`` stack; returns RGB."""
    stack = np.asarray(stack, dtype=np.float64)
    _check_alpha(stack[:, 3])
    if not np.all(stack[0, 3] == 1.0):
        raise ValueError("layer 0 must be fully opaque")
    out = stack[0, :3].copy()
    for layer in stack[1:]:
        a = layer[3]
        out = layer[:3] * a + out * (1.0 - a)
    return out


def white_composite(layer: np.ndarray) -> np.ndarray:
    """RGBA layer over solid white."""
    layer = np.asarray(layer, dtype=np.float64)
    a = layer[3]
    _check_alpha(a)
    return layer[:3] * a + (1.0 - a)


def ground_truth_stack(scene: ToyScene) -> np.ndarray:
    stack = np.zeros((scene.n_layers, 4, scene.height, scene.width))
    stack[0, :3] = scene.background()
    stack[0, 3] = 1.0
    for k, shape in enumerate(scene.shapes, start=1):
        m = shape.mask(scene.height, scene.width)
        stack[k, :3] = np.asarray(shape.color)[:, None, None] * m
        stack[k, 3] = m
    return stack


def _visible_fractions(masks: np.ndarray) -> np.ndarray:
    fracs = []
    for k in range(len(masks)):
        above = masks[k + 1:].max(axis=0) if k + 1 < len(masks) else 0.0
        area = masks[k].sum()
        fracs.append((masks[k] * (1.0 - above)).sum() / area if area else 0.0)
    return np.asarray(fracs)


def _random_color(rng: np.random.Generator) -> tuple[float, float, float]:
    # saturated colours stay distinguishable from the pastel backgrounds
    hue = rng.uniform(0, 6)
    c = np.clip(np.abs((hue + np.array([0.0, 4.0, 2.0])) % 6 - 3) - 1, 0, 1)
    return tuple(float(x) for x in quantize(0.1 + 0.8 * c * rng.uniform(0.7, 1.0)))


def generate_scene(seed: int, n_layers: int, height: int = 32, width: int = 32,
                   max_tries: int = 200) -> tuple[ToyScene, np.ndarray, np.ndarray]:
    """Deterministic scene for ``seed``: (scene, ground-truth stack, RGB composite)."""
    if not MIN_LAYERS <= n_layers <= MAX_LAYERS:
        raise ValueError(f"n_layers must be in [{MIN_LAYERS}, {MAX_LAYERS}], got {n_layers}")
    rng = np.random.default_rng([seed, n_layers, height, width])
    pastel = lambda: tuple(float(x) for x in quantize(rng.uniform(0.55, 0.95, 3)))  # noqa: E731
    bg_top, bg_bottom, stripe = pastel(), pastel(), pastel()
    period = int(rng.choice([0, 4, 6, 8]))

    n_shapes = n_layers - 1
    lo_size, hi_size = 0.12 * min(height, width), 0.24 * min(height, width)
    for _ in range(max_tries):
        shapes = []
        for _k in range(n_shapes):
            kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
            size = float(rng.uniform(lo_size, hi_size))
            aspect = float(rng.uniform(0.6, 1.6)) if kind == "rectangle" else 1.0
            probe = Shape(kind, (0.0, 0.0), size, (0, 0, 0), aspect)
            r0, c0, r1, c1 = probe.bbox()
            row = float(rng.uniform(-r0 + 0.5, height - r1 - 0.5))
            col = float(rng.uniform(-c0 + 0.5, width - c1 - 0.5))
            shapes.append(Shape(kind, (row, col), size, _random_color(rng), aspect))
        masks = np.stack([s.mask(height, width) for s in shapes])
        if np.all(masks.sum(axis=(1, 2)) > 0) and np.all(_visible_fractions(masks) >= MIN_VISIBLE):
            break
    else:
        raise RuntimeError(f"could not place {n_shapes} shapes for seed {seed}")

    scene = ToyScene(seed, n_layers, height, width, bg_top, bg_bottom, period, stripe,
                     tuple(shapes), tuple(range(1, n_layers)))
    stack = ground_truth_stack(scene)
    return scene, stack, composite(stack)


def sample_layer_count(rng: np.random.Generator, lo: int = MIN_LAYERS, hi: int = MAX_LAYERS) -> int:
    return int(rng.integers(lo, hi + 1))


# -- packing -----------------------------------------------------------------

def to_model_range(x: np.ndarray) -> np.ndarray:
    return 2.0 * np.asarray(x, dtype=np.float64) - 1.0


def from_model_range(x: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(x, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


def packed_dim(n_layers: int, height: int, width: int) -> int:
    return n_layers * 4 * height * width


def pack(stack: np.ndarray) -> np.ndarray:
    """Flatten an ``(L, 4, H, W)`` stack in [0, 1] to a model-range vector."""
    return to_model_range(np.asarray(stack).reshape(-1))


def unpack(vec: np.ndarray, n_layers: int, height: int, width: int) -> np.ndarray:
    """Inverse of :func:`pack`; clamps to [0, 1] and forces layer 0 opaque."""
    vec = np.asarray(vec, dtype=np.float64).reshape(-1)
    if vec.size != packed_dim(n_layers, height, width):
        raise ValueError(f"expected {packed_dim(n_layers, height, width)} values, got {vec.size}")
    stack = from_model_range(vec).reshape(n_layers, 4, height, width)
    stack[0, 3] = 1.0
    return stack


def save_pngs(stack: np.ndarray, directory: str | Path) -> list[Path]:
    """Write ``layer_{k}.png`` (RGBA) and ``composite.png`` (RGB)."""
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    to8 = lambda a: (np.clip(a, 0, 1) * 255 + 0.5).astype(np.uint8)  # noqa: E731
    for k, layer in enumerate(stack):
        p = directory / f"layer_{k}.png"
        Image.fromarray(to8(np.moveaxis(layer, 0, -1))).save(p)
        paths.append(p)
    p = directory / "composite.png"
    Image.fromarray(to8(np.moveaxis(composite(stack), 0, -1))).save(p)
    paths.append(p)
    return paths
