"""Context-window extension for small decoder-only transformers, with
hidden-state restoration distillation, drift metrics and a numpy autodiff
core."""

from .model import DecoderModel, ModelConfig, PositionPlan, forward_trace
from .rope import extend_abf, extend_pi, rope_bound
from .drift import attention_kld, drift_report, hidden_similarity
from .positions import SkipConfig, cream_skip, uniform_skip
from .trainer import TrainPlan, Trainer, loss_long, loss_s2l, loss_short, train_step

__version__ = "0.1.0"

__all__ = [
    "DecoderModel",
    "ModelConfig",
    "PositionPlan",
    "forward_trace",
    "extend_abf",
    "extend_pi",
    "rope_bound",
    "attention_kld",
    "drift_report",
    "hidden_similarity",
    "SkipConfig",
    "cream_skip",
    "uniform_skip",
    "TrainPlan",
    "Trainer",
    "loss_long",
    "loss_s2l",
    "loss_short",
    "train_step",
]
