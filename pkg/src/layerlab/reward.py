"""Two-phase judge protocol: rubric scoring, grid calibration, and judges.

Judges speak text.  :func:`phase1_score` and :func:`phase2_calibrate` own
validation and retries, so the programmatic oracle and the remote client
go through exactly the same parsing path.
"""
from __future__ import annotations

import base64
import io
import json
import logging
import math
import os
import re
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import metrics
from .scenes import ToyScene, composite, white_composite

log = logging.getLogger(__name__)

CRITERIA = ("semantic_separation", "alpha_cleanliness", "background_inpainting",
            "feature_distribution", "content_validity")
MAX_CRITERION = 5
MAX_TOTAL = MAX_CRITERION * len(CRITERIA)
DEFAULT_RETRIES = 3
CLEAN_ALPHA_TOL = 0.1


class ReplyError(ValueError):
    """A judge reply failed validation."""


class JudgeError(RuntimeError):
    """A judge kept failing after all retries.

    ``transcript`` holds every attempt made for the group so far.
    """

    transcript: list | tuple = ()


@dataclass(frozen=True)
class RubricScore:
    semantic_separation: int
    alpha_cleanliness: int
    background_inpainting: int
    feature_distribution: int
    content_validity: int
    total: int

    def __post_init__(self):
        for name in CRITERIA:
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise ReplyError(f"{name} must be an integer, got {v!r}")
            if not 0 <= v <= MAX_CRITERION:
                raise ReplyError(f"{name}={v} outside 0-{MAX_CRITERION}")
        if self.total != sum(getattr(self, n) for n in CRITERIA):
            raise ReplyError(f"total {self.total} != criterion sum")

    @classmethod
    def from_criteria(cls, values) -> "RubricScore":
        values = [int(v) for v in values]
        return cls(*values, total=sum(values))

    @property
    def normalized(self) -> float:
        return self.total / MAX_TOTAL

    def as_dict(self) -> dict[str, int]:
        return {n: int(getattr(self, n)) for n in (*CRITERIA, "total")}


# -- reply parsing ------------------------------------------------------------

_FENCE = re.compile(r"^```(?:json)?\s*(.*?)\s*```$", re.S)
_DECIMAL = re.compile(r"^\+?(\d+(\.\d*)?|\.\d+)$", re.ASCII)


def parse_rubric_reply(text: str) -> RubricScore:
    """Parse a JSON rubric reply; code fences around the object are tolerated."""
    body = text.strip()
    m = _FENCE.match(body)
    if m:
        body = m.group(1)
    try:
        obj = json.loads(body)
    except json.JSONDecodeError as exc:
        raise ReplyError(f"reply is not JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ReplyError("reply must be a JSON object")
    keys = set(CRITERIA) | {"total"}
    if set(obj) != keys:
        raise ReplyError(f"expected keys {sorted(keys)}, got {sorted(obj)}")
    return RubricScore(**{k: obj[k] for k in keys})


def parse_calibration_reply(text: str, n: int) -> list[float]:
    """Exactly ``n`` comma-separated decimals in [0, 1]."""
    tokens = [tok.strip() for tok in text.strip().split(",")]
    if len(tokens) != n:
        raise ReplyError(f"expected {n} values, got {len(tokens)}")
    out = []
    for tok in tokens:
        if not _DECIMAL.match(tok):
            raise ReplyError(f"not a decimal: {tok!r}")
        v = float(tok)
        if not 0.0 <= v <= 1.0:
            raise ReplyError(f"value {v} outside [0, 1]")
        out.append(v)
    return out


# -- labelled grid ------------------------------------------------------------

DIGITS = {
    "0": ["111", "101", "101", "101", "111"],
    "1": ["010", "110", "010", "010", "111"],
    "2": ["111", "001", "111", "100", "111"],
    "3": ["111", "001", "111", "001", "111"],
    "4": ["101", "101", "111", "001", "001"],
    "5": ["111", "100", "111", "001", "111"],
    "6": ["111", "100", "111", "101", "111"],
    "7": ["111", "001", "010", "010", "010"],
    "8": ["111", "101", "111", "101", "111"],
    "9": ["111", "101", "111", "001", "111"],
}
_GLYPHS = {d: np.array([[c == "1" for c in row] for row in rows]) for d, rows in DIGITS.items()}
LABEL_INK = 0.05


def glyph_scale(cell: int) -> int:
    return max(1, min(4, cell // 16))


def render_label(index: int, scale: int = 4) -> np.ndarray:
    """Boolean ink mask for the decimal digits of ``index`` (5*scale tall)."""
    digits = [np.kron(_GLYPHS[d], np.ones((scale, scale), dtype=bool)) for d in str(index)]
    gap = np.zeros((5 * scale, scale), dtype=bool)
    parts = []
    for k, g in enumerate(digits):
        if k:
            parts.append(gap)
        parts.append(g)
    return np.concatenate(parts, axis=1)


@dataclass(frozen=True)
class GridLayout:
    n: int
    cols: int
    rows: int
    cell: int
    margin: int

    @classmethod
    def for_group(cls, n: int, cell: int, margin: int | None = None) -> "GridLayout":
        if n < 1:
            raise ValueError("grid needs at least one sample")
        if cell < 16:
            raise ValueError(f"cell size {cell} px is too small to hold a label")
        cols = math.ceil(math.sqrt(n))
        rows = math.ceil(n / cols)
        return cls(n, cols, rows, cell, max(2, cell // 16) if margin is None else margin)

    @property
    def shape(self) -> tuple[int, int]:
        m, c = self.margin, self.cell
        return self.rows * (c + m) + m, self.cols * (c + m) + m

    def origin(self, index: int) -> tuple[int, int]:
        """Top-left pixel (row, col) of cell ``index``."""
        if not 0 <= index < self.n:
            raise IndexError(index)
        r, c = divmod(index, self.cols)
        return self.margin + r * (self.cell + self.margin), self.margin + c * (self.cell + self.margin)

    def index_at(self, y: int, x: int) -> int | None:
        """Cell index covering pixel (y, x), or None for margins and empty slots."""
        step = self.cell + self.margin
        r, ry = divmod(y - self.margin, step)
        c, cx = divmod(x - self.margin, step)
        if y < self.margin or x < self.margin or ry >= self.cell or cx >= self.cell:
            return None
        if r >= self.rows or c >= self.cols:
            return None
        idx = r * self.cols + c
        return idx if idx < self.n else None


def _resize_nearest(img: np.ndarray, size: int) -> np.ndarray:
    _, h, w = img.shape
    rows = np.minimum((np.arange(size) + 0.5) * h / size, h - 1).astype(int)
    cols = np.minimum((np.arange(size) + 0.5) * w / size, w - 1).astype(int)
    return img[:, rows][:, :, cols]


def build_grid(composites, cell: int = 64, margin: int | None = None) -> tuple[np.ndarray, GridLayout]:
    """Tile RGB composites left-to-right, top-to-bottom with index labels.

    Returns the ``(3, H, W)`` grid raster and its layout.
    """
    composites = [np.asarray(c, dtype=np.float64) for c in composites]
    layout = GridLayout.for_group(len(composites), cell, margin)
    grid = np.ones((3, *layout.shape))
    scale = glyph_scale(cell)
    for k, img in enumerate(composites):
        y, x = layout.origin(k)
        grid[:, y:y + cell, x:x + cell] = _resize_nearest(img, cell)
        ink = render_label(k, scale)
        pad = scale
        lh, lw = ink.shape[0] + 2 * pad, min(ink.shape[1] + 2 * pad, cell)
        grid[:, y:y + lh, x:x + lw] = 1.0
        ink = ink[:, :lw - 2 * pad]
        region = grid[:, y + pad:y + pad + ink.shape[0], x + pad:x + pad + ink.shape[1]]
        region[:, ink] = LABEL_INK
    return grid, layout


def read_label(grid: np.ndarray, layout: GridLayout, index: int) -> int:
    """Decode the numeral printed in cell ``index`` by glyph matching."""
    scale = glyph_scale(layout.cell)
    y, x = layout.origin(index)
    y, x = y + scale, x + scale
    digits = []
    while True:
        patch = grid[0, y:y + 5 * scale:scale, x:x + 3 * scale:scale] < 0.5
        if patch.shape != (5, 3) or not patch.any():
            break
        match = [d for d, g in _GLYPHS.items() if np.array_equal(g, patch)]
        if not match:
            break
        digits.append(match[0])
        x += 4 * scale
    if not digits:
        raise ValueError(f"no label found in cell {index}")
    return int("".join(digits))


def to_image(raster: np.ndarray):
    """PIL image of an RGB ``(3, H, W)`` or RGBA ``(4, H, W)`` raster in [0, 1]."""
    from PIL import Image

    arr = (np.clip(np.moveaxis(np.asarray(raster), 0, -1), 0, 1) * 255 + 0.5).astype(np.uint8)
    return Image.fromarray(arr)


def encode_png(raster: np.ndarray) -> str:
    """Base-64 PNG of a channel-first raster."""
    buf = io.BytesIO()
    to_image(raster).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


# -- prompt templates ---------------------------------------------------------

REQUIRED_PLACEHOLDERS = {
    "phase1": ("{num_layers}",),
    "phase2": ("{G}", "{Gm1}", "{scores_csv}"),
    "system": (),
}


def load_template(name: str, path: str | Path | None = None) -> str:
    if path is not None:
        text = Path(path).read_text()
    else:
        text = resources.files("layerlab").joinpath("prompts", f"{name}.txt").read_text()
    for ph in REQUIRED_PLACEHOLDERS.get(name, ()):
        if ph not in text:
            raise ValueError(f"template {name!r} lacks placeholder {ph}")
    return text


def fill_template(template: str, **values) -> str:
    for key, val in values.items():
        template = template.replace("{" + key + "}", str(val))
    return template


def format_scores(scores) -> str:
    return ", ".join(f"{s:.2f}" for s in scores)


# -- judges ---------------------------------------------------------------------

class Judge(Protocol):
    def rubric_reply(self, composite_rgb: np.ndarray, layers: np.ndarray,
                     scene: ToyScene | None = None) -> str: ...

    def calibration_reply(self, grid: np.ndarray, phase1: list[float],
                          stacks: list[np.ndarray] | None = None,
                          scene: ToyScene | None = None) -> str: ...


def _quantize(value: float) -> int:
    return int(min(MAX_CRITERION, max(0, math.floor(value * MAX_CRITERION + 0.5))))


def soft_iou(alpha: np.ndarray, mask: np.ndarray) -> float:
    union = np.maximum(alpha, mask).sum()
    return float(np.minimum(alpha, mask).sum() / union) if union > 0 else 0.0


def criterion_values(layers: np.ndarray, scene: ToyScene) -> dict[str, float]:
    """Unquantised criterion values in [0, 1] against the known scene."""
    layers = np.asarray(layers)
    if len(layers) != scene.n_layers:
        raise ValueError(f"decomposition has {len(layers)} layers, scene has {scene.n_layers}")
    fg = layers[1:, 3]
    nonblank = [not metrics.is_blank(a) for a in fg]
    masses = fg.mean(axis=(1, 2))
    clean = np.minimum(np.abs(fg), np.abs(1.0 - fg)) <= CLEAN_ALPHA_TOL
    bg_err = np.mean(np.abs(layers[0, :3] - scene.background()))
    masks = scene.shape_masks()
    iou = np.array([[soft_iou(a, m) for a in fg] for m in masks])
    rows, cols = linear_sum_assignment(-iou)
    return {
        "semantic_separation": float(iou[rows, cols].sum() / len(masks)),
        "alpha_cleanliness": float(clean.mean()),
        "background_inpainting": float(1.0 - min(1.0, bg_err)),
        "feature_distribution": metrics.normalized_entropy(masses) if masses.sum() > 0 else 0.0,
        "content_validity": float(np.mean(nonblank)),
    }


def true_quality(layers: np.ndarray, scene: ToyScene) -> float:
    """Mean unquantised criterion value; the oracle's notion of quality."""
    return float(np.mean(list(criterion_values(layers, scene).values())))


def oracle_judge(composite_rgb: np.ndarray, layers: np.ndarray, scene: ToyScene) -> RubricScore:
    """Programmatic rubric score with access to the ground-truth scene."""
    vals = criterion_values(layers, scene)
    return RubricScore.from_criteria(_quantize(vals[c]) for c in CRITERIA)


class OracleJudge:
    """Deterministic judge: rubric from :func:`oracle_judge`, calibration
    from the unquantised quality of every sample in the group."""

    def rubric_reply(self, composite_rgb, layers, scene=None) -> str:
        if scene is None:
            raise ValueError("the oracle judge needs the ground-truth scene")
        return json.dumps(oracle_judge(composite_rgb, layers, scene).as_dict())

    def calibration_reply(self, grid, phase1, stacks=None, scene=None) -> str:
        if stacks is None or scene is None:
            raise ValueError("the oracle judge needs the group's stacks and scene")
        return ", ".join(f"{true_quality(s, scene):.4f}" for s in stacks)


def rank_scores(values) -> np.ndarray:
    """Average ranks scaled to [0, 1] (all-equal groups map to 0.5)."""
    from scipy.stats import rankdata

    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2 or np.all(values == values[0]):
        return np.full(len(values), 0.5)
    return (rankdata(values) - 1.0) / (len(values) - 1.0)


class CompressedOracleJudge(OracleJudge):
    """Score-compression scenario: rubric totals squeezed into a 0.05-wide
    band, while calibration returns true-quality ranks."""

    band_low = 0.72
    band_width = 0.05

    def rubric_reply(self, composite_rgb, layers, scene=None) -> str:
        if scene is None:
            raise ValueError("the oracle judge needs the ground-truth scene")
        q = true_quality(layers, scene)
        squeezed = self.band_low + self.band_width * q
        total = int(min(math.floor(squeezed * MAX_TOTAL), math.floor((self.band_low + self.band_width) * MAX_TOTAL)))
        base, extra = divmod(total, len(CRITERIA))
        crit = [base + (1 if k < extra else 0) for k in range(len(CRITERIA))]
        return json.dumps(RubricScore.from_criteria(crit).as_dict())

    def calibration_reply(self, grid, phase1, stacks=None, scene=None) -> str:
        if stacks is None or scene is None:
            raise ValueError("the oracle judge needs the group's stacks and scene")
        ranks = rank_scores([true_quality(s, scene) for s in stacks])
        return ", ".join(f"{r:.4f}" for r in ranks)


@dataclass
class RemoteJudge:
    """HTTP client for a VLM judge.

    Each call POSTs ``{"model", "system", "prompt", "images"}`` (images as
    base-64 PNG) and reads free text back, either as a JSON ``{"text": ...}``
    body or as the raw response body.  ``condition_text``, when set, is sent
    along as ``"condition"`` so the judge sees the decomposition prompt.
    """

    url: str
    model: str = "judge"
    timeout: float = 60.0
    api_key_env: str = "JUDGE_API_KEY"
    system_template: str | None = None
    phase1_template: str | None = None
    phase2_template: str | None = None
    condition_text: str | None = None
    transport: object = None

    def __post_init__(self):
        self.system_template = self.system_template or load_template("system")
        self.phase1_template = self.phase1_template or load_template("phase1")
        self.phase2_template = self.phase2_template or load_template("phase2")
        for name, text in (("phase1", self.phase1_template), ("phase2", self.phase2_template)):
            for ph in REQUIRED_PLACEHOLDERS[name]:
                if ph not in text:
                    raise ValueError(f"template {name!r} lacks placeholder {ph}")

    def _post(self, prompt: str, images: list[str]) -> str:
        import httpx

        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        payload = {"model": self.model, "system": self.system_template,
                   "prompt": prompt, "images": images}
        if self.condition_text:
            payload["condition"] = self.condition_text
        with httpx.Client(timeout=self.timeout, transport=self.transport) as client:
            resp = client.post(self.url, json=payload, headers=headers)
            resp.raise_for_status()
        try:
            body = resp.json()
        except ValueError:
            return resp.text
        if isinstance(body, dict) and isinstance(body.get("text"), str):
            return body["text"]
        return resp.text

    def rubric_reply(self, composite_rgb, layers, scene=None) -> str:
        images = [encode_png(composite_rgb)] + [encode_png(white_composite(l)) for l in layers]
        prompt = fill_template(self.phase1_template, num_layers=len(layers))
        return self._post(prompt, images)

    def calibration_reply(self, grid, phase1, stacks=None, scene=None) -> str:
        n = len(phase1)
        prompt = fill_template(self.phase2_template, G=n, Gm1=n - 1, scores_csv=format_scores(phase1))
        return self._post(prompt, [encode_png(grid)])


def make_judge(kind: str, **kwargs) -> Judge:
    if kind == "oracle":
        return OracleJudge()
    if kind == "oracle-compressed":
        return CompressedOracleJudge()
    if kind == "remote":
        return RemoteJudge(**kwargs)
    raise ValueError(f"unknown judge kind {kind!r}")


# -- protocol -------------------------------------------------------------------

def _retryable() -> tuple[type[BaseException], ...]:
    import httpx

    return (ReplyError, httpx.HTTPError, OSError, TimeoutError)


def phase1_score(judge: Judge, composite_rgb: np.ndarray, layers: np.ndarray,
                 scene: ToyScene | None = None, max_retries: int = DEFAULT_RETRIES,
                 transcript: list | None = None) -> RubricScore:
    """Rubric score with validation; malformed replies are retried."""
    last = None
    for attempt in range(max_retries + 1):
        reply = None
        try:
            reply = judge.rubric_reply(composite_rgb, layers, scene)
            score = parse_rubric_reply(reply)
        except _retryable() as exc:
            last = exc
            _log(transcript, "phase1", attempt, reply, str(exc))
            continue
        _log(transcript, "phase1", attempt, reply, None)
        return score
    raise JudgeError(f"phase-1 scoring failed after {max_retries + 1} attempts: {last}")


def phase2_calibrate(judge: Judge, grid: np.ndarray, phase1: list[float],
                     stacks: list[np.ndarray] | None = None, scene: ToyScene | None = None,
                     max_retries: int = DEFAULT_RETRIES,
                     transcript: list | None = None) -> tuple[list[float], bool]:
    """Relative re-scores; returns ``(scores, fell_back)``.

    When every attempt fails validation the Phase-1 scores come back
    unchanged and the fallback is recorded in the transcript.
    """
    n = len(phase1)
    last = None
    for attempt in range(max_retries + 1):
        reply = None
        try:
            reply = judge.calibration_reply(grid, list(phase1), stacks, scene)
            scores = parse_calibration_reply(reply, n)
        except _retryable() as exc:
            last = exc
            _log(transcript, "phase2", attempt, reply, str(exc))
            continue
        _log(transcript, "phase2", attempt, reply, None)
        return scores, False
    log.warning("phase-2 calibration fell back to phase-1 scores: %s", last)
    _log(transcript, "phase2", max_retries + 1, None, "fallback to phase-1 scores")
    return [float(s) for s in phase1], True


def _log(transcript, phase, attempt, reply, error):
    if transcript is not None:
        transcript.append({"phase": phase, "attempt": attempt, "reply": reply, "error": error,
                           "time": time.time()})


@dataclass
class GroupReport:
    phase1: list[RubricScore]
    r_ind: list[float]
    r_cal: list[float] | None
    rewards: list[float]
    grid: np.ndarray | None = None
    layout: GridLayout | None = None
    fell_back: bool = False
    transcript: list = field(default_factory=list)


def score_group(judge: Judge, stacks: list[np.ndarray], scene: ToyScene | None = None,
                calibrate: bool = True, cell: int = 64, max_retries: int = DEFAULT_RETRIES) -> GroupReport:
    """Phase 1 for every sample, then (optionally) one Phase-2 grid request."""
    transcript: list = []
    composites = [composite(s) for s in stacks]
    try:
        phase1 = [phase1_score(judge, c, s, scene, max_retries, transcript)
                  for c, s in zip(composites, stacks)]
    except JudgeError as exc:
        exc.transcript = transcript
        raise
    r_ind = [p.normalized for p in phase1]
    if not calibrate:
        return GroupReport(phase1, r_ind, None, list(r_ind), transcript=transcript)
    grid, layout = build_grid(composites, cell)
    r_cal, fell_back = phase2_calibrate(judge, grid, r_ind, stacks, scene, max_retries, transcript)
    return GroupReport(phase1, r_ind, r_cal, list(r_cal), grid, layout, fell_back, transcript)
