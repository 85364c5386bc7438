"""Held-out evaluation metrics for layer decompositions."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .scenes import white_composite

BLANK_THRESH = 0.01
GLAZE_BAND = 0.6
MID_ALPHA = (0.2, 0.8)


def alpha_masses(stack: np.ndarray) -> np.ndarray:
    """Mean alpha of each foreground layer (fraction of the canvas covered)."""
    return np.asarray(stack)[1:, 3].mean(axis=(1, 2))


def is_blank(alpha: np.ndarray, blank_thresh: float = BLANK_THRESH) -> bool:
    return float(np.mean(alpha)) < blank_thresh


def is_glazed(alpha: np.ndarray, glaze_band: float = GLAZE_BAND) -> bool:
    lo, hi = MID_ALPHA
    return float(np.mean((alpha > lo) & (alpha < hi))) > glaze_band


def bad_layer_count(stack: np.ndarray, blank_thresh: float = BLANK_THRESH,
                    glaze_band: float = GLAZE_BAND) -> int:
    """Foreground layers that are blank or glazed (each counted once)."""
    if not (0 < blank_thresh < 1 and 0 < glaze_band < 1):
        raise ValueError("thresholds must lie in (0, 1)")
    return sum(1 for layer in np.asarray(stack)[1:]
               if is_blank(layer[3], blank_thresh) or is_glazed(layer[3], glaze_band))


def normalized_entropy(masses) -> float:
    """H(p) / ln(n) of a non-negative mass vector; one entry gives 1.0."""
    m = np.asarray(masses, dtype=np.float64)
    total = m.sum()
    if total <= 0:
        warnings.warn("all alpha mass is zero; evenness reported as 0", RuntimeWarning,
                      stacklevel=2)
        return 0.0
    if m.size == 1:
        return 1.0
    p = m[m > 0] / total
    return float(-(p * np.log(p)).sum() / math.log(m.size))


def distribution_evenness(stack: np.ndarray) -> float:
    return normalized_entropy(alpha_masses(stack))


def layer0_quality(pred: np.ndarray, true: np.ndarray) -> float:
    """``1 - mean |pred - true|`` clamped to [0, 1]."""
    pred, true = np.asarray(pred, dtype=np.float64), np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {true.shape}")
    return float(np.clip(1.0 - np.mean(np.abs(pred - true)), 0.0, 1.0))


def ssim(a: np.ndarray, b: np.ndarray, win: int = 7, data_range: float = 1.0) -> float:
    """Mean SSIM over channels with a uniform ``win x win`` window.

    Inputs are ``(C, H, W)`` or ``(H, W)``.  Uses the sample-covariance
    correction and K1 = 0.01, K2 = 0.03.  Border pixels whose window would
    leave the image are excluded from the mean.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < win:
        raise ValueError(f"raster {a.shape[-2:]} smaller than the {win}x{win} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    n = win * win
    cov_norm = n / (n - 1.0)
    pad = win // 2
    vals = []
    for x, y in zip(a, b):
        f = lambda z: uniform_filter(z, size=win, mode="reflect")  # noqa: E731
        ux, uy = f(x), f(y)
        vx = cov_norm * (f(x * x) - ux * ux)
        vy = cov_norm * (f(y * y) - uy * uy)
        vxy = cov_norm * (f(x * y) - ux * uy)
        s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux ** 2 + uy ** 2 + c1) * (vx + vy + c2))
        vals.append(s[pad:-pad, pad:-pad].mean())
    return float(np.mean(vals))


def _white_rgb(stack: np.ndarray) -> np.ndarray:
    return np.stack([white_composite(layer) for layer in np.asarray(stack)])


def l1_matrix(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Mean |.| between white-composited layers; entry [i, j] is pred i vs gt j."""
    p, g = _white_rgb(pred), _white_rgb(gt)
    return np.abs(p[:, None] - g[None, :]).mean(axis=(2, 3, 4))


def best_match_l1(pred: np.ndarray, gt: np.ndarray, direction: str = "pred_to_gt"):
    """Per-layer L1 against the closest counterpart layer.

    ``pred_to_gt`` scores every predicted layer against its nearest
    ground-truth layer; ``gt_to_pred`` does the reverse.  Returns
    ``(mean, per_slot)`` where slots follow the scored stack's order.
    """
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("stacks must be non-empty")
    d = l1_matrix(pred, gt)
    if direction == "pred_to_gt":
        slots = d.min(axis=1)
    elif direction == "gt_to_pred":
        slots = d.min(axis=0)
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return float(slots.mean()), slots


def fixed_index_l1(pred: np.ndarray, gt: np.ndarray) -> float:
    if len(pred) != len(gt):
        raise ValueError("fixed-index L1 needs equal layer counts")
    return float(np.mean(np.diag(l1_matrix(pred, gt))))


@dataclass
class EvalRecord:
    scene_seed: int
    n_layers: int
    bad_layers: int
    distrib: float
    layer0_quality: float
    ssim: float
    best_match_l1: float
    best_match_slots: list[float] = field(default_factory=list)
    reward: float | None = None


def evaluate_stack(pred: np.ndarray, gt: np.ndarray, scene_seed: int = -1,
                   reward: float | None = None) -> EvalRecord:
    pred = np.asarray(pred)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        distrib = distribution_evenness(pred)
    mean_l1, slots = best_match_l1(pred, gt)
    return EvalRecord(
        scene_seed=scene_seed,
        n_layers=len(pred),
        bad_layers=bad_layer_count(pred),
        distrib=distrib,
        layer0_quality=layer0_quality(pred[0, :3], gt[0, :3]),
        ssim=ssim(pred[0, :3], gt[0, :3]),
        best_match_l1=mean_l1,
        best_match_slots=[float(x) for x in slots],
        reward=reward,
    )


AGG_FIELDS = ("bad_layers", "distrib", "layer0_quality", "ssim", "best_match_l1", "reward")


def aggregate(records: list[EvalRecord]) -> dict[str, dict[str, float]]:
    out = {}
    for name in AGG_FIELDS:
        vals = [getattr(r, name) for r in records if getattr(r, name) is not None]
        if vals:
            arr = np.asarray(vals, dtype=np.float64)
            out[name] = {"mean": float(arr.mean()), "std": float(arr.std()), "n": len(vals)}
    return out


def write_report(records: list[EvalRecord], path: str | Path, csv_path: str | Path | None = None) -> dict:
    """One JSON line per scene plus a final ``{"aggregate": ...}`` line."""
    agg = aggregate(records)
    path = Path(path)
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r)) + "\n")
        fh.write(json.dumps({"aggregate": agg}) + "\n")
    if csv_path is not None:
        cols = ["scene_seed", "n_layers", "bad_layers", "distrib", "layer0_quality", "ssim",
                "best_match_l1", "reward"]
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in records:
                w.writerow([getattr(r, c) for c in cols])
    return agg


def read_report(path: str | Path) -> tuple[list[EvalRecord], dict]:
    records, agg = [], {}
    with open(path) as fh:
        for line in fh:
            row = json.loads(line)
            if "aggregate" in row:
                agg = row["aggregate"]
            else:
                records.append(EvalRecord(**row))
    return records, agg
