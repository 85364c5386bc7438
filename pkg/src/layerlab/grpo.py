"""Group-relative policy optimisation over stored SDE trajectories.

One round: roll out a group of SDE trajectories from a policy snapshot,
score them with a judge, standardise rewards within the group, then replay
the stored transitions under the current adapters to build the clipped
surrogate.  Log-ratios are reduced by summing over the latent and dividing
by sqrt(D) ("sum-rescale") before per-step centring across the group.
"""
from __future__ import annotations

import json
import logging
import math
import time
from collections.abc import Iterator
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import flow, scenes
from .numerics import AdamW, NumericError, Tensor, backward, minimum, no_grad, stack
from .policy import Condition, VelocityNet
from .reward import GroupReport, Judge, score_group, true_quality

log = logging.getLogger(__name__)

RATIO_MODES = ("sum-rescale", "spatial-mean")


@dataclass
class GrpoConfig:
    group_size: int = 16
    clip_eps: float = 0.2
    kl_beta: float = 1e-3
    adv_nu: float = 1e-4
    adv_clip: float = 5.0
    epochs: int = 1
    minibatches: int = 2
    ratio_mode: str = "sum-rescale"
    scale_floor: float = 1e-6
    post_scale: float = 1.0
    lr: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    max_grad_norm: float = 1.0
    train_steps: int = 8
    noise_level: float = 0.7
    t_clamp: tuple[float, float] = flow.DEFAULT_T_CLAMP
    calibrate: bool = True
    grid_cell: int = 64
    judge_retries: int = 3

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.adv_nu <= 0:
            raise ValueError("adv_nu must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.group_size < 1:
            raise ValueError("group_size must be at least 1")
        if not 1 <= self.minibatches <= self.group_size:
            raise ValueError("minibatches must lie in [1, group_size]")
        if self.ratio_mode not in RATIO_MODES:
            raise ValueError(f"ratio_mode must be one of {RATIO_MODES}")
        if self.scale_floor <= 0 or self.post_scale <= 0:
            raise ValueError("scale_floor and post_scale must be positive")
        if self.adv_clip <= 0 or self.kl_beta < 0 or self.lr <= 0:
            raise ValueError("adv_clip and lr must be positive, kl_beta non-negative")


# -- pure pieces -----------------------------------------------------------------

def advantages(rewards, nu: float = 1e-4, c_adv: float = 5.0) -> np.ndarray:
    """Within-group standardised rewards, clipped to ``[-c_adv, c_adv]``.

    Uses the population standard deviation of the group.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise ValueError("empty group")
    if not np.all(np.isfinite(r)):
        raise ValueError("rewards must be finite")
    return np.clip((r - r.mean()) / (r.std() + nu), -c_adv, c_adv)


def reduce_log_ratio(diff_sum, dim: int, mode: str = "sum-rescale"):
    """Scale a summed log-prob difference: by sqrt(D) or by D."""
    if dim <= 0:
        raise ValueError("dimension must be positive")
    if mode == "sum-rescale":
        return diff_sum / math.sqrt(dim)
    if mode == "spatial-mean":
        return diff_sum / float(dim)
    raise ValueError(f"unknown ratio mode {mode!r}")


def normalized_log_ratio(lp_new, lp_old, dim: int | None = None, mode: str = "sum-rescale"):
    """Raw per-step log-ratio from per-element log-probabilities.

    The trailing axis holds the D elements; leading axes are kept.
    """
    if isinstance(lp_new, Tensor):
        d = lp_new.shape[-1]
        diff = lp_new.sum(axis=-1) - np.asarray(lp_old).sum(axis=-1)
    else:
        lp_new, lp_old = np.asarray(lp_new, dtype=np.float64), np.asarray(lp_old, dtype=np.float64)
        d = lp_new.shape[-1]
        diff = lp_new.sum(axis=-1) - lp_old.sum(axis=-1)
    return reduce_log_ratio(diff, dim if dim is not None else d, mode)


def center_per_step(raw, scale_floor: float = 1e-6, post_scale: float = 1.0):
    """Standardise one step's raw log-ratios across the group.

    ``(x - mean) / max(std, floor)`` with the population std.  A group
    whose raw values are all identical maps to exact zeros; as a tensor
    that result still carries the unit gradient of ``x`` so the first
    update of a round is the plain policy gradient.
    """
    if isinstance(raw, Tensor):
        x = raw.data
        if np.all(x == x[0]):
            return (raw - Tensor(x)) * post_scale
        mu = raw.mean()
        centred = raw - mu
        var = centred.square().mean()
        s = math.sqrt(var.item())
        denom = var.sqrt() if s >= scale_floor else Tensor(scale_floor)
        return centred / denom * post_scale
    x = np.asarray(raw, dtype=np.float64)
    if x.size == 0:
        return x.copy()
    if np.all(x == x.reshape(-1)[0]):
        return np.zeros_like(x)
    return (x - x.mean()) / max(float(x.std()), scale_floor) * post_scale


def clipped_objective(ratio, adv, clip_eps: float):
    """Per-term PPO objective ``min(rho A, clip(rho) A)`` (to be maximised)."""
    if isinstance(ratio, Tensor):
        adv_t = Tensor(np.asarray(adv, dtype=np.float64))
        return minimum(ratio * adv_t, ratio.clip(1.0 - clip_eps, 1.0 + clip_eps) * adv_t)
    ratio = np.asarray(ratio, dtype=np.float64)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv)


def clip_binding(ratio: np.ndarray, adv: np.ndarray, clip_eps: float) -> np.ndarray:
    """Terms where the clipped branch is selected and cuts the gradient."""
    return ((adv > 0) & (ratio > 1.0 + clip_eps)) | ((adv < 0) & (ratio < 1.0 - clip_eps))


# -- rollouts ------------------------------------------------------------------

@dataclass
class GroupRollout:
    condition: Condition
    trajectory: flow.Trajectory
    stacks: list[np.ndarray]
    scene: scenes.ToyScene | None = None
    rewards: np.ndarray | None = None
    advantages: np.ndarray | None = None
    report: GroupReport | None = None

    @property
    def size(self) -> int:
        return self.trajectory.batch

    def set_rewards(self, rewards, nu: float, c_adv: float) -> None:
        r = np.asarray(rewards, dtype=np.float64)
        if r.shape != (self.size,):
            raise ValueError(f"need {self.size} rewards, got shape {r.shape}")
        self.rewards = r
        self.advantages = advantages(r, nu, c_adv)

    @property
    def reward_mean(self) -> float:
        return float(np.mean(self.rewards))

    @property
    def reward_std(self) -> float:
        return float(np.std(self.rewards))


def collect_group(policy: VelocityNet, cond: Condition, schedule: flow.NoiseSchedule,
                  group_size: int, rng: np.random.Generator,
                  scene: scenes.ToyScene | None = None) -> GroupRollout:
    """Roll out ``group_size`` SDE trajectories with gradients disabled."""
    d = scenes.packed_dim(cond.n_layers, policy.height, policy.width)
    z = rng.standard_normal((group_size, d))
    try:
        traj = flow.sample_sde(policy.velocity_fn(cond, adapters=True), z, schedule, rng, cond)
    except (FloatingPointError, NumericError) as exc:
        raise NumericError(f"rollout failed: {exc}") from exc
    stacks = [scenes.unpack(row, cond.n_layers, policy.height, policy.width) for row in traj.x0]
    return GroupRollout(cond, traj, stacks, scene)


def replay_log_probs(net: VelocityNet, traj: flow.Trajectory, step: int,
                     cond: Condition, adapters: bool = True):
    """Log-prob of the stored transition at ``step`` under ``net`` (one value per row)."""
    s = traj.steps[step]
    v = net.forward(s.state, s.t, cond, adapters=adapters)
    c_x, c_v = flow.sde_coefficients(s.t_coef, s.dt, s.sigma)
    mean = s.state * c_x - v * c_v
    return flow.transition_log_prob(s.next_state, mean, s.sigma, s.dt)


def raw_log_ratios(net: VelocityNet, traj: flow.Trajectory, cond: Condition,
                   mode: str = "sum-rescale") -> np.ndarray:
    """``(T, batch)`` raw log-ratios of the current adapters vs the stored behaviour."""
    d = traj.x0.shape[1]
    out = []
    with no_grad():
        for i, s in enumerate(traj.steps):
            lp = replay_log_probs(net, traj, i, cond).data
            out.append(reduce_log_ratio(lp - s.log_prob, d, mode))
    return np.asarray(out)


@dataclass
class LossStats:
    loss: float
    policy_loss: float
    kl: float
    clip_frac: float
    ratio_mean: float
    raw_std_per_step: list[float]


def surrogate_loss(rollout: GroupRollout, net: VelocityNet, config: GrpoConfig,
                   rows=None) -> tuple[Tensor, LossStats]:
    """Clipped surrogate with 1/dt reweighting plus the KL penalty.

    ``rows`` selects the group members in this minibatch; centring
    statistics are taken over those rows at each step.
    """
    if rollout.advantages is None:
        raise ValueError("advantages are not set; score the group first")
    traj = rollout.trajectory
    rows = np.arange(rollout.size) if rows is None else np.asarray(rows)
    sub = traj.select(rows)
    adv = rollout.advantages[rows]
    d = traj.x0.shape[1]
    terms, kls = [], []
    ratios, binding, raw_std = [], [], []
    for i, s in enumerate(sub.steps):
        lp_new = replay_log_probs(net, sub, i, rollout.condition, adapters=True)
        with no_grad():
            lp_ref = replay_log_probs(net, sub, i, rollout.condition, adapters=False).data
        raw = reduce_log_ratio(lp_new - s.log_prob, d, config.ratio_mode)
        raw_std.append(float(np.std(raw.data)))
        centred = center_per_step(raw, config.scale_floor, config.post_scale)
        rho = centred.exp()
        if not np.all(np.isfinite(rho.data)):
            raise NumericError(f"non-finite importance ratio at step {i}")
        obj = clipped_objective(rho, adv, config.clip_eps)
        terms.append(obj * (-1.0 / s.dt))
        kls.append(reduce_log_ratio(lp_new - lp_ref, d, "sum-rescale"))
        ratios.append(rho.data)
        binding.append(clip_binding(rho.data, adv, config.clip_eps))
    policy = stack(terms).mean()
    kl = stack(kls).mean()
    loss = policy + kl * config.kl_beta
    stats = LossStats(loss.item(), policy.item(), kl.item(), float(np.mean(binding)),
                      float(np.mean(ratios)), raw_std)
    return loss, stats


def ratio_std_by_dimension(dims=(64, 256, 1024, 4096), n_samples: int = 2000,
                           perturbation: float = 0.05, rank: int = 4, sigma: float = 0.7,
                           dt: float = 0.125, t: float = 0.5, seed: int = 0) -> dict[str, np.ndarray]:
    """Std of the per-step log-ratio across samples for growing latent size.

    For each D a linear velocity ``v = x W`` is adapted by a rank-``rank``
    update whose per-element effect has fixed RMS ``perturbation``; SDE
    transitions are drawn from the base policy and scored under the
    adapted one.  Returns stds for both reduction modes.
    """
    rng = np.random.default_rng(seed)
    out = {"dims": np.asarray(dims), "sum-rescale": [], "spatial-mean": []}
    c_x, c_v = flow.sde_coefficients(t, dt, sigma)
    for d in dims:
        w = rng.standard_normal((d, d)) / math.sqrt(d)
        a = rng.standard_normal((rank, d)) / math.sqrt(d)
        b = rng.standard_normal((d, rank)) * perturbation / math.sqrt(rank)
        x = rng.standard_normal((n_samples, d))
        v_old = x @ w
        v_new = v_old + (x @ a.T) @ b.T
        mean_old = x * c_x - v_old * c_v
        mean_new = x * c_x - v_new * c_v
        x_next = mean_old + sigma * math.sqrt(dt) * rng.standard_normal(x.shape)
        diff = (flow.transition_log_prob(x_next, mean_new, sigma, dt)
                - flow.transition_log_prob(x_next, mean_old, sigma, dt))
        for mode in RATIO_MODES:
            out[mode].append(float(np.std(reduce_log_ratio(diff, d, mode))))
    return {k: np.asarray(v) for k, v in out.items()}


# -- training loop -----------------------------------------------------------------

@dataclass
class RoundMetrics:
    round: int
    n_layers: int
    reward_mean: float
    reward_std: float
    r_ind_mean: float
    quality_mean: float | None
    clip_frac: float
    ratio_mean: float
    kl: float
    loss: float
    grad_norm: float
    ratio_std_per_step: list[float] = field(default_factory=list)
    fell_back: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self))


class GrpoTrainer:
    """Owns the adapted policy, its optimizer and the round counter."""

    def __init__(self, net: VelocityNet, config: GrpoConfig | None = None, seed: int = 0):
        self.net = net
        self.config = config or GrpoConfig()
        for p in net.base_params():
            p.requires_grad = False
        self.optimizer = AdamW(net.adapter_params(), lr=self.config.lr, betas=self.config.betas,
                               weight_decay=self.config.weight_decay,
                               max_grad_norm=self.config.max_grad_norm)
        self.schedule = flow.build_schedule(self.config.train_steps, self.config.noise_level,
                                            self.config.t_clamp)
        self.rng = np.random.default_rng(seed)
        self.round = 0
        self.last_report: GroupReport | None = None

    def score(self, rollout: GroupRollout, judge: Judge) -> GroupReport:
        cfg = self.config
        report = score_group(judge, rollout.stacks, rollout.scene, calibrate=cfg.calibrate,
                             cell=cfg.grid_cell, max_retries=cfg.judge_retries)
        rollout.report = report
        rollout.set_rewards(report.rewards, cfg.adv_nu, cfg.adv_clip)
        return report

    def update(self, rollout: GroupRollout) -> tuple[list[LossStats], list[float]]:
        cfg = self.config
        params = self.net.adapter_params()
        all_stats, norms = [], []
        for _epoch in range(cfg.epochs):
            order = self.rng.permutation(rollout.size)
            for rows in np.array_split(order, cfg.minibatches):
                loss, stats = surrogate_loss(rollout, self.net, cfg, np.sort(rows))
                grads = backward(loss, params)
                norms.append(self.optimizer.step(grads))
                all_stats.append(stats)
        return all_stats, norms

    def train_round(self, source: Iterator, judge: Judge) -> RoundMetrics:
        """Generate, score, and train on one group drawn from ``source``."""
        start = time.time()
        cond, _gt, scene = next(source)
        snapshot = self.net.snapshot()
        rollout = collect_group(snapshot, cond, self.schedule, self.config.group_size,
                                self.rng, scene)
        report = self.score(rollout, judge)
        stats, norms = self.update(rollout)
        quality = None
        if scene is not None:
            quality = float(np.mean([true_quality(s, scene) for s in rollout.stacks]))
        steps = len(stats[0].raw_std_per_step)
        m = RoundMetrics(
            round=self.round,
            n_layers=cond.n_layers,
            reward_mean=rollout.reward_mean,
            reward_std=rollout.reward_std,
            r_ind_mean=float(np.mean(report.r_ind)),
            quality_mean=quality,
            clip_frac=float(np.mean([s.clip_frac for s in stats])),
            ratio_mean=float(np.mean([s.ratio_mean for s in stats])),
            kl=float(np.mean([s.kl for s in stats])),
            loss=float(np.mean([s.loss for s in stats])),
            grad_norm=float(np.mean(norms)),
            ratio_std_per_step=[float(np.mean([s.raw_std_per_step[i] for s in stats]))
                                for i in range(steps)],
            fell_back=report.fell_back,
        )
        self.last_report = report
        log.debug("round %d took %.2fs", self.round, time.time() - start)
        self.round += 1
        return m


def append_metrics(path: str | Path, record: RoundMetrics) -> None:
    with open(path, "a") as fh:
        fh.write(record.to_json() + "\n")


def read_metrics(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
