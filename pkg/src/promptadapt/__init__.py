"""Weakly supervised self-training for promptable segmentation models."""
from .adapt import TrainConfig, run_adaptation, train_supervised
from .data import Sample, make_toy_domain, split
from .errors import ConfigurationError, DegenerateInputError, TrainingFault
from .evaluate import EvalReport, cross_prompt_matrix, evaluate
from .lora import compression_ratio, inject, merged_model
from .losses import LossConfig, total_loss
from .model import SegmentationModel, build_model, build_toy_model
from .prompts import BoxPrompt, CoarseMaskPrompt, PointPrompt, PromptSet, prompts_from_masks

__version__ = "0.1.0"

__all__ = [
    "BoxPrompt",
    "CoarseMaskPrompt",
    "ConfigurationError",
    "DegenerateInputError",
    "EvalReport",
    "LossConfig",
    "PointPrompt",
    "PromptSet",
    "Sample",
    "SegmentationModel",
    "TrainConfig",
    "TrainingFault",
    "build_model",
    "build_toy_model",
    "compression_ratio",
    "cross_prompt_matrix",
    "evaluate",
    "inject",
    "make_toy_domain",
    "merged_model",
    "prompts_from_masks",
    "run_adaptation",
    "split",
    "total_loss",
    "train_supervised",
]
