"""Training objective: weighted squared error on the discrete scores plus
smooth-L1 on valence/arousal/dominance."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .dataset import NUM_CATEGORIES, DatasetManifest, category_index
from .exceptions import ValidationError

SMOOTH_L1_BETA = 1.0
DEFAULT_SMOOTHING = 1.2


@dataclass(frozen=True)
class LossWeights:
    lambda_discrete: float = 0.5
    lambda_continuous: float = 0.5
    category_weights: tuple[float, ...] = field(default=(1.0,) * NUM_CATEGORIES)

    def __post_init__(self):
        if self.lambda_discrete < 0 or self.lambda_continuous < 0:
            raise ValidationError("loss lambdas must be non-negative")
        if self.lambda_discrete + self.lambda_continuous <= 0:
            raise ValidationError("lambda_discrete + lambda_continuous must be positive")
        object.__setattr__(self, "category_weights", tuple(float(w) for w in self.category_weights))
        _check_weights(self.category_weights)


def _check_weights(w) -> None:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (NUM_CATEGORIES,):
        raise ValidationError(f"category_weights must have length {NUM_CATEGORIES}, got {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValidationError("category_weights must be strictly positive and finite")


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValidationError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def discrete_loss(scores, targets, weights) -> torch.Tensor:
    """``(1/B) * sum_b sum_k w_k (scores_bk - targets_bk)^2``."""
    scores = _as_tensor(scores)
    targets = _as_tensor(targets, scores)
    _same_shape(scores, targets, "discrete_loss")
    if scores.ndim != 2 or scores.shape[1] != NUM_CATEGORIES:
        raise ValidationError(f"discrete scores must be B x {NUM_CATEGORIES}, got {tuple(scores.shape)}")
    _check_weights(weights.detach().cpu().numpy() if isinstance(weights, torch.Tensor) else weights)
    w = _as_tensor(weights, scores).to(scores.device)
    return ((scores - targets) ** 2 * w).sum(dim=1).mean()


def smooth_l1(x: torch.Tensor) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < SMOOTH_L1_BETA, 0.5 * x**2 / SMOOTH_L1_BETA, ax - 0.5 * SMOOTH_L1_BETA)


def continuous_loss(pred, target) -> torch.Tensor:
    """Mean smooth-L1 over all B x 3 entries, transition at |x| = 1."""
    pred = _as_tensor(pred)
    target = _as_tensor(target, pred)
    _same_shape(pred, target, "continuous_loss")
    if pred.ndim != 2 or pred.shape[1] != 3:
        raise ValidationError(f"VAD predictions must be B x 3, got {tuple(pred.shape)}")
    return smooth_l1(pred - target).mean()


def combined_loss(scores, vad_pred, targets_disc, targets_vad, weights: LossWeights):
    """Weighted sum of both parts; returns ``(total, discrete, continuous)``."""
    d = discrete_loss(scores, targets_disc, weights.category_weights)
    c = continuous_loss(vad_pred, targets_vad)
    return weights.lambda_discrete * d + weights.lambda_continuous * c, d, c


def make_category_weights(
    train_manifest: DatasetManifest, c: float = DEFAULT_SMOOTHING
) -> tuple[float, ...]:
    """Frequency-balancing weights ``1 / ln(c + p_k)``; rarer categories weigh more.

    ``p_k`` is the fraction of persons carrying category ``k``. ``c`` must exceed 1
    so that unseen categories still get a finite positive weight.
    """
    if c <= 1.0:
        raise ValidationError(f"smoothing constant must exceed 1, got {c}")
    counts = np.zeros(NUM_CATEGORIES)
    n = 0
    for _, person in train_manifest.iter_persons():
        n += 1
        for name in person.categories:
            counts[category_index(name)] += 1
    if n == 0:
        raise ValidationError("cannot derive category weights from a manifest with no persons")
    return tuple(1.0 / math.log(c + p) for p in counts / n)
