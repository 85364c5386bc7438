"""Velocity-field MLP over packed layer vectors, with low-rank adapters.

The network always works at ``max_layers`` width: the packed state for
``L`` layers is zero-padded on input and the output is sliced back to the
first ``L * 4 * H * W`` entries (layer-major packing makes those exactly
the active layers).  The requested layer count is one-hot appended to the
condition features.
"""
from __future__ import annotations

import logging
import math
from collections.abc import Callable, Iterator
from dataclasses import dataclass

import numpy as np

from . import flow, scenes
from .numerics import AdamW, NumericError, Tensor, backward, no_grad, parameter

log = logging.getLogger(__name__)

N_TIME_FEATURES = 8
HEADS = ("data", "velocity")
# training scenes use seeds below this; held-out sets start at it
TRAIN_SEED_LIMIT = 2 ** 30


@dataclass(frozen=True)
class Condition:
    composite: np.ndarray          # (3, H, W) in [0, 1], or (n, 3, H, W) for one per row
    n_layers: int
    prompt: str | None = None

    def features(self) -> np.ndarray:
        comp = np.asarray(self.composite)
        flat = comp.reshape(-1) if comp.ndim == 3 else comp.reshape(len(comp), -1)
        return scenes.to_model_range(flat)


def time_features(t) -> np.ndarray:
    """Eight sinusoidal features per timestep; returns (n, 8)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = np.pi * np.array([0.5, 1.0, 2.0, 4.0])
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class LoRALinear:
    """``y = x W + b + (alpha/r) (x A^T) B^T`` with A: r x in, B: out x r."""

    def __init__(self, n_in: int, n_out: int, rank: int, alpha: float,
                 rng: np.random.Generator, name: str, init_scale: float = 1.0):
        self.name = name
        self.rank = rank
        self.scale = alpha / rank
        self.weight = parameter(rng.standard_normal((n_in, n_out)) * init_scale / math.sqrt(n_in),
                                name=f"base.{name}.weight")
        self.bias = parameter(np.zeros(n_out), name=f"base.{name}.bias")
        self.lora_a = parameter(rng.standard_normal((rank, n_in)) / math.sqrt(n_in),
                                name=f"adapter.{name}.A")
        self.lora_b = parameter(np.zeros((n_out, rank)), name=f"adapter.{name}.B")

    def __call__(self, x, adapters: bool, out_cols: int | None = None) -> Tensor:
        """Apply the layer to ``x``.

        ``x`` may also be a list of ``(tensor, offset)`` segments standing for
        a wide input that is zero outside them; only the matching weight rows
        are multiplied, which skips the zero padding entirely.
        """
        segments = [(x, 0)] if isinstance(x, Tensor) else list(x)
        w, b, lb = self.weight, self.bias, self.lora_b
        if out_cols is not None:
            w, lb = w.columns(0, out_cols), lb.rows(0, out_cols)
            b = b.reshape(1, -1).columns(0, out_cols)
        y = None
        z = None
        for seg, off in segments:
            k = seg.shape[1]
            whole = off == 0 and k == w.shape[0]
            part = seg @ (w if whole else w.rows(off, off + k))
            y = part if y is None else y + part
            if adapters:
                a = self.lora_a if whole else self.lora_a.columns(off, off + k)
                low = seg @ a.T
                z = low if z is None else z + low
        y = y + b
        if adapters:
            y = y + (z @ lb.T) * self.scale
        return y

    def base_params(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def adapter_params(self) -> list[Tensor]:
        return [self.lora_a, self.lora_b]


class VelocityNet:
    """MLP velocity field ``v(x_t, t | composite, L)`` with LoRA on every layer.

    With ``head="data"`` the last layer estimates the clean sample and the
    velocity is formed as ``(x_t - x0_hat) / max(t, t_floor)``.  A narrow
    MLP cannot carry the 20k-wide identity map that the raw velocity needs
    near t = 0; this form supplies it for free.  ``head="velocity"``
    regresses v directly.
    """

    def __init__(self, height: int = 32, width: int = 32, max_layers: int = scenes.MAX_LAYERS,
                 hidden: tuple[int, ...] = (256, 256, 256), rank: int = 4, alpha: float = 4.0,
                 seed: int = 0, activation: str = "silu", head: str = "data",
                 t_floor: float = 0.05):
        if head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if not 0 < t_floor < 1:
            raise ValueError("t_floor must lie in (0, 1)")
        self.head, self.t_floor = head, t_floor
        self.height, self.width, self.max_layers = height, width, max_layers
        self.hidden = tuple(hidden)
        self.rank, self.alpha, self.seed = rank, alpha, seed
        self.activation = activation
        rng = np.random.default_rng(seed)
        self.d_max = scenes.packed_dim(max_layers, height, width)
        self.n_cond = 3 * height * width + N_TIME_FEATURES + max_layers
        widths = [self.d_max + self.n_cond, *self.hidden, self.d_max]
        self.layers = []
        for k, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = k == len(widths) - 2
            self.layers.append(LoRALinear(a, b, rank, alpha, rng, f"fc{k}",
                                          init_scale=0.1 if last else 1.0))

    # -- parameters ----------------------------------------------------
    def base_params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.base_params()]

    def adapter_params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.adapter_params()]

    def parameters(self) -> list[Tensor]:
        return self.base_params() + self.adapter_params()

    def state_dict(self, prefix: str | None = None) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()
                if prefix is None or p.name.startswith(prefix)}

    def load_state_dict(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        by_name = {p.name: p for p in self.parameters()}
        if strict:
            missing = set(by_name) - set(arrays)
            if missing:
                raise KeyError(f"missing parameters: {sorted(missing)[:4]}")
        for name, arr in arrays.items():
            if name not in by_name:
                continue
            if by_name[name].shape != np.shape(arr):
                raise ValueError(f"shape mismatch for {name}: {np.shape(arr)} vs {by_name[name].shape}")
            by_name[name].data[...] = arr

    def config(self) -> dict:
        return {"height": self.height, "width": self.width, "max_layers": self.max_layers,
                "hidden": list(self.hidden), "rank": self.rank, "alpha": self.alpha,
                "seed": self.seed, "activation": self.activation, "head": self.head,
                "t_floor": self.t_floor}

    def reset_adapters(self, seed: int | None = None) -> None:
        rng = np.random.default_rng(self.seed + 1 if seed is None else seed)
        for layer in self.layers:
            n_in = layer.lora_a.shape[1]
            layer.lora_a.data[...] = rng.standard_normal(layer.lora_a.shape) / math.sqrt(n_in)
            layer.lora_b.data[...] = 0.0

    # -- forward -------------------------------------------------------
    def _act(self, h: Tensor) -> Tensor:
        return h.silu() if self.activation == "silu" else h.tanh()

    def forward(self, x_t, t, cond: Condition, adapters: bool = True) -> Tensor:
        """Velocity for a batch of packed states ``x_t`` (n x D_L)."""
        x = x_t if isinstance(x_t, Tensor) else Tensor(np.atleast_2d(x_t))
        n, d = x.shape
        d_layers = scenes.packed_dim(cond.n_layers, self.height, self.width)
        if d != d_layers:
            raise ValueError(f"state has {d} values but condition asks for "
                             f"{cond.n_layers} layers ({d_layers} values)")
        if not 1 <= cond.n_layers <= self.max_layers:
            raise ValueError(f"layer count {cond.n_layers} outside [1, {self.max_layers}]")
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        onehot = np.zeros((n, self.max_layers))
        onehot[:, cond.n_layers - 1] = 1.0
        side = np.concatenate([np.broadcast_to(cond.features(), (n, 3 * self.height * self.width)),
                               time_features(t_arr), onehot], axis=1)
        # the padded slots of the state are zero, so the first layer only
        # multiplies the active rows plus the side features
        h = self._act(self.layers[0]([(x, 0), (Tensor(side), self.d_max)], adapters))
        for layer in self.layers[1:-1]:
            h = self._act(layer(h, adapters))
        out = self.layers[-1](h, adapters, out_cols=d)
        if self.head == "velocity":
            return out
        # data head: out estimates x0 and v = (x_t - x0_hat) / t
        inv = 1.0 / np.maximum(t_arr, self.t_floor)
        return (x - out) * Tensor(inv[:, None])

    __call__ = forward

    def velocity_fn(self, cond: Condition, adapters: bool = True) -> Callable[[np.ndarray, float], np.ndarray]:
        def velocity(x, t):
            with no_grad():
                return self.forward(x, t, cond, adapters).data
        return velocity

    def snapshot(self) -> "VelocityNet":
        """Independent copy for rollouts while the original keeps training."""
        twin = VelocityNet.__new__(VelocityNet)
        twin.__dict__.update({k: v for k, v in self.__dict__.items() if k != "layers"})
        twin.layers = []
        for layer in self.layers:
            copy = LoRALinear.__new__(LoRALinear)
            copy.name, copy.rank, copy.scale = layer.name, layer.rank, layer.scale
            for attr in ("weight", "bias", "lora_a", "lora_b"):
                src = getattr(layer, attr)
                setattr(copy, attr, parameter(src.data, name=src.name))
            twin.layers.append(copy)
        return twin


def sample_layers(net: VelocityNet, cond: Condition, schedule: flow.NoiseSchedule,
                  rng: np.random.Generator, n: int = 1, method: str = "ode",
                  adapters: bool = True) -> np.ndarray:
    """Decode ``n`` samples into ``(n, L, 4, H, W)`` stacks."""
    d = scenes.packed_dim(cond.n_layers, net.height, net.width)
    z = rng.standard_normal((n, d))
    vel = net.velocity_fn(cond, adapters)
    if method == "ode":
        x0 = flow.sample_ode(vel, z, schedule)
    elif method == "sde":
        x0 = flow.sample_sde(vel, z, schedule, rng).x0
    else:
        raise ValueError(f"unknown sampler {method!r}")
    return np.stack([scenes.unpack(row, cond.n_layers, net.height, net.width) for row in x0])


def scene_stream(seed: int, layer_range=(scenes.MIN_LAYERS, scenes.MAX_LAYERS),
                 height: int = 32, width: int = 32, seed_offset: int = 0) -> Iterator:
    """Endless ``(Condition, ground-truth stack, scene)`` triples."""
    rng = np.random.default_rng(seed)
    while True:
        n_layers = scenes.sample_layer_count(rng, *layer_range)
        scene_seed = seed_offset + int(rng.integers(0, TRAIN_SEED_LIMIT))
        scene, stack, comp = scenes.generate_scene(scene_seed, n_layers, height, width)
        yield Condition(comp, n_layers), stack, scene


def pretrain(net: VelocityNet, source, steps: int, batch_size: int = 16, lr: float = 1e-3,
             seed: int = 0, optimizer: AdamW | None = None,
             callback: Callable[[int, float], None] | None = None) -> list[float]:
    """Fit the base weights with the flow-matching loss; adapters are left alone.

    ``source`` yields ``(Condition, stack, scene)``; every batch shares one
    layer count.  Returns the loss curve.
    """
    rng = np.random.default_rng(seed)
    opt = optimizer or AdamW(net.base_params(), lr=lr, max_grad_norm=1.0)
    losses: list[float] = []
    buckets: dict[int, list] = {}
    for step in range(steps):
        # draws are binned by layer count; the first bin to fill becomes the batch
        while True:
            c, s, _ = next(source)
            bin_ = buckets.setdefault(c.n_layers, [])
            bin_.append((c, scenes.pack(s)))
            if len(bin_) == batch_size:
                break
        conds, xs = zip(*buckets.pop(c.n_layers))
        cond = conds[0]
        x0 = np.stack(xs)
        x1 = rng.standard_normal(x0.shape)
        t = rng.uniform(0.0, 1.0, size=len(xs))
        batch = Condition(np.stack([c.composite for c in conds]), cond.n_layers)

        def model(x_t, t_, _cond=None):
            return net.forward(x_t, t_, batch, adapters=False)

        try:
            loss = flow.fm_loss(model, x0, x1, t)
            grads = backward(loss, opt.params)
        except NumericError as exc:
            raise NumericError(f"pretraining diverged at step {step}: {exc}") from exc
        opt.step(grads)
        losses.append(loss.item())
        if callback is not None:
            callback(step, losses[-1])
    return losses

