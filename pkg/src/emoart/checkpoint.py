"""Checkpoint container: config, category names, normalization constants,
parameters and training metadata in one ``torch.save`` file."""

from __future__ import annotations

import pickle
from pathlib import Path

import torch

from .dataset import CATEGORY_NAMES
from .exceptions import ValidationError
from .estimator import EmotionRecognizer
from .losses import LossWeights
from .model import EmotionFusionNet, ModelConfig

CHECKPOINT_FORMAT = "emoart-checkpoint/1"


def save_checkpoint(est: EmotionRecognizer, path, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "format": CHECKPOINT_FORMAT,
        "model_config": est.model_.config.to_dict(),
        "estimator_params": est.get_params(),
        "categories": list(getattr(est, "categories_", CATEGORY_NAMES)),
        "norm_mean": list(est.norm_mean_),
        "norm_std": list(est.norm_std_),
        "loss_weights": {
            "lambda_discrete": est.loss_weights_.lambda_discrete,
            "lambda_continuous": est.loss_weights_.lambda_continuous,
            "category_weights": list(est.loss_weights_.category_weights),
        },
        "state_dict": est.model_.state_dict(),
        "metadata": {
            "best_epoch": getattr(est, "best_epoch_", None),
            "seed": est.random_state,
            "loss_curve": [r.train_loss for r in getattr(est, "history_", [])],
            "history": [r.to_dict() for r in getattr(est, "history_", [])],
            **(metadata or {}),
        },
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> EmotionRecognizer:
    """Rebuild a fitted :class:`EmotionRecognizer` without touching pretrained weight files."""
    path = Path(path)
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as e:
        raise ValidationError(f"cannot load checkpoint {path}: {e}") from e
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path} is not an {CHECKPOINT_FORMAT} checkpoint")
    est = EmotionRecognizer(**blob["estimator_params"])
    model = EmotionFusionNet(ModelConfig.from_dict(blob["model_config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    est.model_ = model
    est.categories_ = tuple(blob["categories"])
    est.norm_mean_ = tuple(blob["norm_mean"])
    est.norm_std_ = tuple(blob["norm_std"])
    est.loss_weights_ = LossWeights(**blob["loss_weights"])
    est.best_epoch_ = blob["metadata"].get("best_epoch")
    est.checkpoint_metadata_ = blob["metadata"]
    return est
