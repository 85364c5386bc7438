"""layerlab: flow-matching layer decomposition with group-relative policy optimisation.

Everything runs on numpy in 64-bit floats at toy scale (32x32 RGBA layers).
"""
from __future__ import annotations

__version__ = "0.1.0"

from .numerics import AdamW, NumericError, Tensor, backward, gradient_check, no_grad
from .flow import build_schedule, sample_ode, sample_sde, transition_log_prob
from .scenes import composite, generate_scene, pack, unpack
from .policy import Condition, VelocityNet, pretrain
from .grpo import GrpoConfig, GrpoTrainer, advantages
from .reward import OracleJudge, RubricScore, score_group
from .metrics import evaluate_stack

__all__ = [
    "AdamW", "NumericError", "Tensor", "backward", "gradient_check", "no_grad",
    "build_schedule", "sample_ode", "sample_sde", "transition_log_prob",
    "composite", "generate_scene", "pack", "unpack",
    "Condition", "VelocityNet", "pretrain",
    "GrpoConfig", "GrpoTrainer", "advantages",
    "OracleJudge", "RubricScore", "score_group", "evaluate_stack",
]
