"""Command-line entry point.

``layerlab {pretrain,train,eval,score,grid,plot} [flags]``.  Every tunable
lives in :class:`RunConfig`; values come from the defaults, then an
optional JSON config file (``--config``), then kebab-case flags.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import shutil
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import flow, metrics, scenes
from .evaluation import evaluate_policy
from .grpo import GrpoConfig, GrpoTrainer, append_metrics, collect_group
from .numerics import AdamW, NumericError, load_checkpoint, save_checkpoint
from .policy import HEADS, Condition, VelocityNet, pretrain, scene_stream
from .reward import JudgeError, build_grid, load_template, make_judge, score_group, to_image

log = logging.getLogger("layerlab")

EXIT_OK, EXIT_CONFIG, EXIT_JUDGE, EXIT_NUMERIC = 0, 2, 3, 4
JUDGE_KINDS = ("oracle", "oracle-compressed", "remote")
SAMPLERS = ("ode", "sde")
PROMPT_PRESETS = ("basic", "detailed")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    height: int = 32
    width: int = 32
    layer_min: int = scenes.MIN_LAYERS
    layer_max: int = scenes.MAX_LAYERS
    hidden: tuple = (256, 256, 256)
    rank: int = 4
    lora_alpha: float = 4.0
    head: str = "data"
    t_floor: float = 0.05
    pretrain_steps: int = 300
    pretrain_batch: int = 16
    pretrain_lr: float = 1e-3
    group_size: int = 16
    train_steps: int = 8
    eval_steps: int = 50
    noise_level: float = 0.7
    clip_eps: float = 0.2
    kl_beta: float = 1e-3
    adv_nu: float = 1e-4
    adv_clip: float = 5.0
    epochs: int = 1
    minibatches: int = 2
    ratio_mode: str = "sum-rescale"
    lr: float = 1e-4
    weight_decay: float = 0.0
    max_grad_norm: float = 1.0
    calibrate: bool = True
    judge: str = "oracle"
    judge_url: str = ""
    judge_model: str = "judge"
    judge_timeout: float = 60.0
    judge_retries: int = 3
    grid_cell: int = 64
    rounds: int = 200
    eval_every: int = 50
    eval_scenes: int = 64
    eval_sampler: str = "ode"
    checkpoint_every: int = 50
    prompt_template: str = "basic"
    system_template: str = ""
    phase1_template: str = ""
    phase2_template: str = ""

    def validate(self) -> "RunConfig":
        def need(ok: bool, msg: str) -> None:
            if not ok:
                raise ConfigError(msg)

        need(self.height >= 4 and self.width >= 4, "height and width must be at least 4")
        need(scenes.MIN_LAYERS <= self.layer_min <= self.layer_max <= scenes.MAX_LAYERS,
             f"layer range must satisfy {scenes.MIN_LAYERS} <= layer_min <= layer_max <= {scenes.MAX_LAYERS}")
        need(len(self.hidden) >= 1 and all(h >= 1 for h in self.hidden),
             "hidden must list at least one positive width")
        need(self.rank >= 1, "rank must be at least 1")
        need(self.lora_alpha > 0, "lora_alpha must be positive")
        need(self.head in HEADS, f"head must be one of {HEADS}")
        need(0 < self.t_floor < 1, "t_floor must lie in (0, 1)")
        need(self.pretrain_steps >= 0, "pretrain_steps must be non-negative")
        need(self.pretrain_batch >= 1, "pretrain_batch must be at least 1")
        need(self.pretrain_lr > 0, "pretrain_lr must be positive")
        need(self.train_steps >= 1 and self.eval_steps >= 1, "step counts must be at least 1")
        need(self.noise_level > 0, "noise_level must be positive")
        need(self.weight_decay >= 0, "weight_decay must be non-negative")
        need(self.max_grad_norm > 0, "max_grad_norm must be positive")
        need(self.judge in JUDGE_KINDS, f"judge must be one of {JUDGE_KINDS}")
        need(self.judge != "remote" or bool(self.judge_url), "the remote judge needs judge_url")
        need(self.judge_timeout > 0, "judge_timeout must be positive")
        need(self.judge_retries >= 0, "judge_retries must be non-negative")
        need(self.grid_cell >= 16, "grid_cell must be at least 16")
        need(self.rounds >= 0, "rounds must be non-negative")
        need(self.eval_every >= 1 and self.checkpoint_every >= 1,
             "eval_every and checkpoint_every must be at least 1")
        need(self.eval_scenes >= 1, "eval_scenes must be at least 1")
        need(self.eval_sampler in SAMPLERS, f"eval_sampler must be one of {SAMPLERS}")
        need(self.prompt_template in PROMPT_PRESETS or Path(self.prompt_template).is_file(),
             f"prompt_template must be one of {PROMPT_PRESETS} or an existing file")
        for key in ("system_template", "phase1_template", "phase2_template"):
            path = getattr(self, key)
            need(not path or Path(path).is_file(), f"{key}: no such file {path!r}")
        try:
            self.grpo_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not 0.7 <= self.noise_level <= 0.9:
            log.warning("noise_level %.3g is outside the usual [0.7, 0.9] range", self.noise_level)
        return self

    def grpo_config(self) -> GrpoConfig:
        return GrpoConfig(
            group_size=self.group_size, clip_eps=self.clip_eps, kl_beta=self.kl_beta,
            adv_nu=self.adv_nu, adv_clip=self.adv_clip, epochs=self.epochs,
            minibatches=self.minibatches, ratio_mode=self.ratio_mode, lr=self.lr,
            weight_decay=self.weight_decay, max_grad_norm=self.max_grad_norm,
            train_steps=self.train_steps, noise_level=self.noise_level,
            calibrate=self.calibrate, grid_cell=self.grid_cell, judge_retries=self.judge_retries)

    @property
    def layer_range(self) -> tuple[int, int]:
        return (self.layer_min, self.layer_max)

    def to_json(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out


_DEFAULTS = RunConfig()
FIELD_NAMES = tuple(f.name for f in fields(RunConfig))


def _coerce(name: str, value):
    """Convert a config-file or flag value to the type of the field's default."""
    default = getattr(_DEFAULTS, name)
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = [v for v in value.replace(" ", "").split(",") if v]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name}: expected a list of integers, got {value!r}")
        return tuple(_coerce_int(name, v) for v in value)
    if isinstance(default, int):
        return _coerce_int(name, value)
    if isinstance(default, float):
        if isinstance(value, bool):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        try:
            out = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{name}: expected a number, got {value!r}") from None
        if not math.isfinite(out):
            raise ConfigError(f"{name}: must be finite")
        return out
    if not isinstance(value, str):
        raise ConfigError(f"{name}: expected a string, got {value!r}")
    return value


def _coerce_int(name: str, value) -> int:
    if isinstance(value, bool):
        raise ConfigError(f"{name}: expected an integer, got {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str):
        try:
            return int(value)
        except ValueError:
            pass
    raise ConfigError(f"{name}: expected an integer, got {value!r}")


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then ``overrides``; validated."""
    values: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold one flat object")
        values.update(raw)
    values.update(overrides or {})
    unknown = sorted(set(values) - set(FIELD_NAMES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    typed = {k: _coerce(k, v) for k, v in values.items()}
    return RunConfig(**typed).validate()


# -- run directory ------------------------------------------------------------------

@contextmanager
def run_lock(out_dir: Path):
    """One command per run directory at a time."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out_dir / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise ConfigError(f"{out_dir} is locked by another layerlab process") from None
    try:
        yield
    finally:
        lock.release()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _update_seeds(out_dir: Path, entries: dict) -> None:
    path = out_dir / "seeds.json"
    seeds = json.loads(path.read_text()) if path.exists() else {}
    seeds.update(entries)
    _write_json(path, seeds)


def build_net(cfg: RunConfig) -> VelocityNet:
    return VelocityNet(height=cfg.height, width=cfg.width, hidden=cfg.hidden, rank=cfg.rank,
                       alpha=cfg.lora_alpha, seed=cfg.seed, head=cfg.head, t_floor=cfg.t_floor)


def net_from_meta(meta: dict) -> VelocityNet:
    kw = {k: v for k, v in meta.items()
          if k in ("height", "width", "max_layers", "rank", "alpha", "seed", "activation",
                   "head", "t_floor")}
    return VelocityNet(hidden=tuple(meta["hidden"]), **kw)


def load_policy(path: str | Path, adapters: bool = True) -> tuple[VelocityNet, dict]:
    """Base or adapter checkpoint -> network.  Adapter files name their base."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    arrays, counters, meta = load_checkpoint(path)
    if meta.get("kind") == "adapters":
        base_path = Path(meta["base"])
        if not base_path.is_absolute():
            base_path = path.parent / base_path
        net, _ = load_policy(base_path)
        if adapters:
            net.load_state_dict({k: v for k, v in arrays.items() if k.startswith("adapter.")},
                                strict=False)
        return net, counters
    if "hidden" not in meta:
        raise ConfigError(f"{path}: checkpoint lacks the network description")
    net = net_from_meta(meta)
    net.load_state_dict(arrays, strict=True)
    return net, counters


def condition_text(cfg: RunConfig) -> str:
    if cfg.prompt_template in PROMPT_PRESETS:
        return load_template(f"condition_{cfg.prompt_template}").strip()
    return Path(cfg.prompt_template).read_text().strip()


def build_judge(cfg: RunConfig):
    if cfg.judge != "remote":
        return make_judge(cfg.judge)
    return make_judge(
        "remote", url=cfg.judge_url, model=cfg.judge_model, timeout=cfg.judge_timeout,
        system_template=load_template("system", cfg.system_template or None),
        phase1_template=load_template("phase1", cfg.phase1_template or None),
        phase2_template=load_template("phase2", cfg.phase2_template or None),
        condition_text=condition_text(cfg))


# -- subcommands -------------------------------------------------------------------

def cmd_pretrain(cfg: RunConfig, force: bool = False, resume: bool = False) -> Path:
    out = Path(cfg.out_dir)
    ckpt = out / "base.ckpt"
    curve = out / "pretrain_loss.csv"
    with run_lock(out):
        net = build_net(cfg)
        opt = AdamW(net.base_params(), lr=cfg.pretrain_lr, max_grad_norm=1.0)
        start = 0
        if ckpt.exists() and resume:
            arrays, counters, meta = load_checkpoint(ckpt)
            if meta.get("hidden") != list(cfg.hidden) or meta.get("height") != cfg.height \
                    or meta.get("width") != cfg.width:
                raise ConfigError("resume: checkpoint network does not match the config")
            net.load_state_dict(arrays, strict=True)
            start = int(counters.get("step", 0))
            opt.load_state_arrays(arrays, int(counters.get("optimizer_step", 0)))
            log.info("resuming pretraining at step %d", start)
        elif ckpt.exists() and not force:
            raise ConfigError(f"{ckpt} exists; pass --force to overwrite or --resume to continue")
        else:
            curve.unlink(missing_ok=True)
        _write_json(out / "pretrain.config.json", cfg.to_json())
        _update_seeds(out, {"pretrain_net": cfg.seed, "pretrain_stream": [cfg.seed, 0]})

        def save(step: int) -> None:
            arrays = {**net.state_dict(), **opt.state_arrays()}
            save_checkpoint(ckpt, arrays, {"step": step, "optimizer_step": opt.step_count},
                            {**net.config(), "kind": "base"})

        if not curve.exists():
            curve.write_text("step,loss\n")
        step = start
        save(step)
        t0 = time.time()
        while step < cfg.pretrain_steps:
            chunk = min(cfg.checkpoint_every, cfg.pretrain_steps - step)
            # each chunk reseeds from (seed, step) so a resumed run is reproducible
            source = scene_stream([cfg.seed, 0, step], cfg.layer_range, cfg.height, cfg.width)
            losses = pretrain(net, source, chunk, batch_size=cfg.pretrain_batch,
                              optimizer=opt, seed=[cfg.seed, 1, step])
            with open(curve, "a") as fh:
                for k, loss in enumerate(losses):
                    fh.write(f"{step + k},{loss!r}\n")
            step += chunk
            save(step)
            log.info("pretrain step %d/%d loss %.4f (%.0fs)", step, cfg.pretrain_steps,
                     float(np.mean(losses)), time.time() - t0)
    return ckpt


def _eval_row(net: VelocityNet, cfg: RunConfig, round_: int) -> dict:
    records = evaluate_policy(net, cfg.eval_scenes, cfg.eval_steps, cfg.eval_sampler,
                              seed=cfg.seed, layer_range=cfg.layer_range)
    return {"round": round_, **metrics.aggregate(records)}


def _save_adapters(path: Path, trainer: GrpoTrainer, base: Path, round_: int) -> None:
    arrays = {**trainer.net.state_dict("adapter."), **trainer.optimizer.state_arrays()}
    save_checkpoint(path, arrays, {"round": round_, "optimizer_step": trainer.optimizer.step_count},
                    {"kind": "adapters", "base": os.path.relpath(base.resolve(), path.parent.resolve())})


TRAIN_OUTPUTS = ("metrics.jsonl", "eval.jsonl", "transcripts.jsonl", "adapters.ckpt",
                 "judge_failure.json")


def cmd_train(cfg: RunConfig, base: str | Path | None = None, force: bool = False) -> Path:
    out = Path(cfg.out_dir)
    base_path = Path(base) if base else out / "base.ckpt"
    metrics_path = out / "metrics.jsonl"
    with run_lock(out):
        if metrics_path.exists() and not force:
            raise ConfigError(f"{metrics_path} exists; pass --force to start over")
        for name in TRAIN_OUTPUTS:
            (out / name).unlink(missing_ok=True)
        shutil.rmtree(out / "adapters", ignore_errors=True)
        net, _ = load_policy(base_path)
        if (net.height, net.width) != (cfg.height, cfg.width):
            raise ConfigError("canvas size in the config does not match the base checkpoint")
        net.reset_adapters()
        _write_json(out / "train.config.json", {**cfg.to_json(), "base": str(base_path)})
        _update_seeds(out, {"train_rng": cfg.seed, "train_stream": [cfg.seed, 2],
                            "eval_noise": cfg.seed, "adapter_init": net.seed + 1})
        judge = build_judge(cfg)
        trainer = GrpoTrainer(net, cfg.grpo_config(), seed=cfg.seed)
        source = scene_stream([cfg.seed, 2], cfg.layer_range, cfg.height, cfg.width)
        eval_path = out / "eval.jsonl"

        def eval_now(round_: int) -> None:
            row = _eval_row(net, cfg, round_)
            with open(eval_path, "a") as fh:
                fh.write(json.dumps(row) + "\n")
            log.info("eval @%d: %s", round_, {k: round(v["mean"], 4) for k, v in row.items()
                                               if isinstance(v, dict)})

        eval_now(0)
        if cfg.rounds == 0:
            return eval_path
        ckpt_dir = out / "adapters"
        ckpt_dir.mkdir(exist_ok=True)
        metrics_path.touch()
        for r in range(cfg.rounds):
            try:
                m = trainer.train_round(source, judge)
            except JudgeError as exc:
                _write_json(out / "judge_failure.json",
                            {"round": trainer.round, "error": str(exc),
                             "last_attempt": exc.transcript[-1] if exc.transcript else None,
                             "transcript": list(exc.transcript)})
                raise
            append_metrics(metrics_path, m)
            with open(out / "transcripts.jsonl", "a") as fh:
                for entry in trainer.last_report.transcript:
                    fh.write(json.dumps({"round": m.round, **entry}, default=str) + "\n")
            done = r + 1
            if done % cfg.checkpoint_every == 0:
                _save_adapters(ckpt_dir / f"round_{done:05d}.ckpt", trainer, base_path, done)
            if done % cfg.eval_every == 0 or done == cfg.rounds:
                eval_now(done)
            log.info("round %d reward %.4f kl %.4g clip %.3f", m.round, m.reward_mean, m.kl,
                     m.clip_frac)
        _save_adapters(out / "adapters.ckpt", trainer, base_path, cfg.rounds)
    return metrics_path


def cmd_eval(cfg: RunConfig, checkpoint: str | Path | None = None, n: int | None = None,
             report: str | Path | None = None, png_dir: str | Path | None = None,
             adapters: bool = True) -> dict:
    out = Path(cfg.out_dir)
    if n is not None and n < 1:
        raise ConfigError("eval needs at least one scene")
    if checkpoint is None:
        checkpoint = out / "adapters.ckpt" if (out / "adapters.ckpt").exists() else out / "base.ckpt"
    net, _ = load_policy(checkpoint, adapters)
    records = evaluate_policy(net, n or cfg.eval_scenes, cfg.eval_steps, cfg.eval_sampler,
                              seed=cfg.seed, adapters=adapters, layer_range=cfg.layer_range,
                              png_dir=png_dir)
    report = Path(report) if report else out / "eval_report.jsonl"
    report.parent.mkdir(parents=True, exist_ok=True)
    return metrics.write_report(records, report, report.with_suffix(".csv"))


def _group_for_scene(cfg: RunConfig, checkpoint, scene_seed: int, n_layers: int, samples: int):
    if not scenes.MIN_LAYERS <= n_layers <= scenes.MAX_LAYERS:
        raise ConfigError(f"n_layers must lie in [{scenes.MIN_LAYERS}, {scenes.MAX_LAYERS}]")
    if samples < 1:
        raise ConfigError("need at least one sample")
    net, _ = load_policy(checkpoint or Path(cfg.out_dir) / "base.ckpt")
    scene, _stack, comp = scenes.generate_scene(scene_seed, n_layers, net.height, net.width)
    cond = Condition(comp, n_layers, condition_text(cfg))
    schedule = flow.build_schedule(cfg.train_steps, cfg.noise_level)
    rollout = collect_group(net, cond, schedule, samples,
                            np.random.default_rng([cfg.seed, scene_seed]), scene)
    return rollout, scene


def cmd_score(cfg: RunConfig, checkpoint=None, scene_seed: int = 0, n_layers: int = 3,
              samples: int | None = None, transcript: str | Path | None = None) -> dict:
    rollout, scene = _group_for_scene(cfg, checkpoint, scene_seed, n_layers,
                                      samples or cfg.group_size)
    try:
        report = score_group(build_judge(cfg), rollout.stacks, scene, calibrate=cfg.calibrate,
                             cell=cfg.grid_cell, max_retries=cfg.judge_retries)
    except JudgeError as exc:
        if transcript:
            _write_json(Path(transcript), list(exc.transcript))
        raise
    rollout.set_rewards(report.rewards, cfg.adv_nu, cfg.adv_clip)
    if transcript:
        _write_json(Path(transcript), report.transcript)
    return {
        "scene_seed": scene_seed, "n_layers": n_layers,
        "phase1": [p.as_dict() for p in report.phase1],
        "r_ind": report.r_ind, "r_cal": report.r_cal, "rewards": report.rewards,
        "advantages": rollout.advantages.tolist(), "fell_back": report.fell_back,
    }


def cmd_grid(cfg: RunConfig, output: str | Path, checkpoint=None, scene_seed: int = 0,
             n_layers: int = 3, samples: int | None = None) -> dict:
    rollout, _ = _group_for_scene(cfg, checkpoint, scene_seed, n_layers, samples or cfg.group_size)
    grid, layout = build_grid([scenes.composite(s) for s in rollout.stacks], cfg.grid_cell)
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    to_image(grid).save(output)
    return {"path": str(output), "rows": layout.rows, "cols": layout.cols, "cell": layout.cell,
            "size": list(grid.shape[1:])}


# -- plotting -----------------------------------------------------------------------

CSV_FIELDS = ("series", "x", "mean", "std")


def series_from_logs(paths) -> list[dict]:
    """Rows ``{series, x, mean, std}`` from metrics/eval JSONL logs or a CSV projection."""
    rows: list[dict] = []
    for path in paths:
        path = Path(path)
        if path.suffix == ".csv":
            with open(path, newline="") as fh:
                reader = csv.DictReader(fh)
                if tuple(reader.fieldnames or ()) != CSV_FIELDS:
                    raise ConfigError(f"{path}: expected columns {','.join(CSV_FIELDS)}")
                for row in reader:
                    rows.append({"series": row["series"], "x": float(row["x"]),
                                 "mean": float(row["mean"]), "std": float(row["std"])})
            continue
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError:
                    raise ConfigError(f"{path}:{lineno}: not JSON") from None
                if "reward_mean" in row:
                    rows.append({"series": "reward", "x": float(row["round"]),
                                 "mean": row["reward_mean"], "std": row["reward_std"]})
                else:
                    for key, agg in row.items():
                        if isinstance(agg, dict) and "mean" in agg:
                            rows.append({"series": f"eval.{key}", "x": float(row["round"]),
                                         "mean": agg["mean"], "std": agg["std"]})
    if not rows:
        raise ConfigError("nothing to plot: the log is empty")
    return rows


def write_series_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(row[k])) if k != "series" else row[k]) for k in CSV_FIELDS})


def cmd_plot(inputs, output: str | Path) -> tuple[Path, Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = series_from_logs(inputs)
    names = list(dict.fromkeys(r["series"] for r in rows))
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    csv_path, svg_path = output.with_suffix(".csv"), output.with_suffix(".svg")
    write_series_csv(rows, csv_path)
    plt.rcParams["svg.hashsalt"] = "layerlab"
    fig, axes = plt.subplots(len(names), 1, figsize=(6, 2.2 * len(names)), squeeze=False)
    for ax, name in zip(axes[:, 0], names):
        pts = [r for r in rows if r["series"] == name]
        x = np.array([p["x"] for p in pts])
        m = np.array([p["mean"] for p in pts])
        s = np.array([p["std"] for p in pts])
        band = ax.fill_between(x, m - s, m + s, alpha=0.25, linewidth=0)
        band.set_gid(f"band-{name}")
        (line,) = ax.plot(x, m, marker="o" if len(x) < 30 else None, markersize=3)
        line.set_gid(f"line-{name}")
        ax.set_ylabel(name, fontsize=8)
        ax.grid(alpha=0.3)
    axes[-1, 0].set_xlabel("round")
    fig.tight_layout()
    fig.savefig(svg_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return svg_path, csv_path


# -- argument parsing ---------------------------------------------------------------

def _config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("run configuration")
    group.add_argument("--config", help="JSON file of flat key/value settings")
    for name in FIELD_NAMES:
        flag = "--" + name.replace("_", "-")
        default = getattr(_DEFAULTS, name)
        if isinstance(default, bool):
            group.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction,
                               default=None)
        else:
            group.add_argument(flag, dest=name, default=None, metavar=type(default).__name__.upper())
    group.add_argument("--no-calibration", dest="calibrate", action="store_false",
                       help="use Phase-1 scores as rewards")
    parser.add_argument("--force", action="store_true", help="overwrite existing outputs")
    parser.add_argument("--log-level", default="INFO")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layerlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="fit the base velocity network")
    _config_flags(p)
    p.add_argument("--steps", dest="pretrain_steps", default=None, help="alias of --pretrain-steps")
    p.add_argument("--resume", action="store_true", help="continue from base.ckpt")

    p = sub.add_parser("train", help="GRPO rounds on top of a base checkpoint")
    _config_flags(p)
    p.add_argument("--base", help="base checkpoint (default: OUT_DIR/base.ckpt)")

    p = sub.add_parser("eval", help="score a checkpoint on the held-out scenes")
    _config_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("-n", "--n", dest="n", type=int)
    p.add_argument("--report")
    p.add_argument("--png-dir")
    p.add_argument("--no-adapters", dest="use_adapters", action="store_false")

    for name, text in (("score", "judge one group of samples"), ("grid", "render a labelled grid")):
        p = sub.add_parser(name, help=text)
        _config_flags(p)
        p.add_argument("--checkpoint")
        p.add_argument("--scene-seed", type=int, default=0)
        p.add_argument("--n-layers", type=int, default=3)
        p.add_argument("--samples", type=int)
        if name == "score":
            p.add_argument("--transcript")
        else:
            p.add_argument("--output", required=True)

    p = sub.add_parser("plot", help="SVG + CSV curves from metrics logs")
    p.add_argument("logs", nargs="*",
                   help="metrics/eval JSONL files, a CSV projection, or run directories")
    p.add_argument("--out-dir", default=_DEFAULTS.out_dir)
    p.add_argument("--output", help="output prefix (default: OUT_DIR/curves)")
    p.add_argument("--log-level", default="INFO")
    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {k: getattr(args, k) for k in FIELD_NAMES if getattr(args, k, None) is not None}
    return load_config(args.config, overrides)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    try:
        if args.command == "plot":
            logs = []
            for item in args.logs or [args.out_dir]:
                if Path(item).is_dir():
                    logs += [p for p in (Path(item) / "metrics.jsonl", Path(item) / "eval.jsonl")
                             if p.exists()]
                else:
                    logs.append(item)
            if not logs:
                raise ConfigError("no logs given and none found in the run directory")
            missing = [p for p in logs if not Path(p).is_file()]
            if missing:
                raise ConfigError(f"log not found: {missing[0]}")
            svg, csv_path = cmd_plot(logs, args.output or Path(args.out_dir) / "curves")
            print(json.dumps({"svg": str(svg), "csv": str(csv_path)}))
            return EXIT_OK
        cfg = _config_from_args(args)
        if args.command == "pretrain":
            print(cmd_pretrain(cfg, force=args.force, resume=args.resume))
        elif args.command == "train":
            print(cmd_train(cfg, base=args.base, force=args.force))
        elif args.command == "eval":
            agg = cmd_eval(cfg, args.checkpoint, args.n, args.report, args.png_dir,
                           args.use_adapters)
            print(json.dumps(agg, indent=2))
        elif args.command == "score":
            print(json.dumps(cmd_score(cfg, args.checkpoint, args.scene_seed, args.n_layers,
                                       args.samples, args.transcript), indent=2))
        elif args.command == "grid":
            print(json.dumps(cmd_grid(cfg, args.output, args.checkpoint, args.scene_seed,
                                      args.n_layers, args.samples)))
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except JudgeError as exc:
        log.error("judge failure: %s", exc)
        if exc.transcript:
            log.error("last attempt: %s", json.dumps(exc.transcript[-1], default=str))
        return EXIT_JUDGE
    except (NumericError, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    return EXIT_OK


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
