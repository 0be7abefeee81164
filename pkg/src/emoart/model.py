"""Two-branch body/context fusion network."""

from __future__ import annotations

import os
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torchvision import models

from .dataset import (
    DEFAULT_VAD_SCALE,
    IMAGENET_MEAN,
    IMAGENET_STD,
    NUM_CATEGORIES,
    SUPPORTED_BODY_SIDES,
    ImageRecord,
    PersonAnnotation,
    extract_body_crop,
    load_image,
    preprocess_context,
)
from .exceptions import ConfigError, ValidationError, WeightsError

BACKBONES = {
    "resnet18": (models.resnet18, 512),
    "resnet50": (models.resnet50, 2048),
}
CONTEXT_PRETRAINING = ("scene_centric", "object_centric")
# scheme name used for the weight files of each pretraining kind
PRETRAINING_SCHEME = {"object_centric": "imagenet", "scene_centric": "places365"}


def default_weights_dir() -> Path:
    return Path(os.environ.get("EMOART_WEIGHTS", Path.home() / ".cache" / "emoart" / "weights"))


def weight_file(weights_dir, backbone: str, scheme: str) -> Path:
    return Path(weights_dir) / f"{backbone}_{scheme}.pt"


@dataclass(frozen=True)
class ModelConfig:
    body_backbone: str = "resnet18"
    context_backbone: str = "resnet18"
    context_pretraining: str = "scene_centric"
    body_crop_side: int = 128
    context_side: int = 224
    fusion_hidden: int = 256
    dropout: float = 0.5
    pretrained: bool = True
    weights_dir: str | None = None

    def __post_init__(self):
        for name in ("body_backbone", "context_backbone"):
            if getattr(self, name) not in BACKBONES:
                raise ConfigError(
                    f"unknown backbone {getattr(self, name)!r}; expected one of {sorted(BACKBONES)}"
                )
        if self.context_pretraining not in CONTEXT_PRETRAINING:
            raise ConfigError(
                f"context_pretraining must be one of {CONTEXT_PRETRAINING}, "
                f"got {self.context_pretraining!r}"
            )
        if self.body_crop_side < 1 or self.context_side < 1:
            raise ConfigError("input sides must be positive")
        if self.fusion_hidden < 1:
            raise ConfigError("fusion_hidden must be a positive integer")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def inw(self) -> bool:
        """Object-centric (ImageNet) weights in the context branch."""
        return self.context_pretraining == "object_centric"

    @property
    def supported(self) -> bool:
        return self.body_crop_side in SUPPORTED_BODY_SIDES

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class PredictionResult:
    discrete_scores: np.ndarray
    vad_pred: np.ndarray

    def __post_init__(self):
        if np.shape(self.discrete_scores) != (NUM_CATEGORIES,):
            raise ValidationError(
                f"discrete_scores must have length {NUM_CATEGORIES}, "
                f"got shape {np.shape(self.discrete_scores)}"
            )
        if np.shape(self.vad_pred) != (3,):
            raise ValidationError(f"vad_pred must have length 3, got {np.shape(self.vad_pred)}")


def _trunk(backbone: str) -> nn.Module:
    ctor, _ = BACKBONES[backbone]
    net = ctor(weights=None)
    # global average pooling is already the last trunk op; drop the classifier
    net.fc = nn.Identity()
    return net


def load_trunk_weights(trunk: nn.Module, path: Path) -> None:
    if not path.is_file():
        raise WeightsError(
            f"missing pretrained weight file {path}; run `emoart fetch-weights` "
            "or set pretrained=false for random initialization"
        )
    state = torch.load(path, map_location="cpu", weights_only=True)
    state = {k: v for k, v in state.items() if not k.startswith("fc.")}
    missing, unexpected = trunk.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise WeightsError(
            f"{path} does not match the trunk: missing={missing[:3]}, unexpected={unexpected[:3]}"
        )


class EmotionFusionNet(nn.Module):
    """Body encoder + context encoder, concatenated into a shared hidden layer
    feeding a 26-way discrete head and a 3-way VAD head.

    ``forward`` takes channels-last ``B x H x W x 3`` batches.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.body_encoder = _trunk(config.body_backbone)
        self.context_encoder = _trunk(config.context_backbone)
        body_dim = BACKBONES[config.body_backbone][1]
        context_dim = BACKBONES[config.context_backbone][1]
        self.feature_dims = (body_dim, context_dim)
        self.fusion = nn.Sequential(
            nn.Linear(body_dim + context_dim, config.fusion_hidden),
            nn.BatchNorm1d(config.fusion_hidden),
            nn.ReLU(inplace=True),
            nn.Dropout(config.dropout),
        )
        self.discrete_head = nn.Linear(config.fusion_hidden, NUM_CATEGORIES)
        self.vad_head = nn.Linear(config.fusion_hidden, 3)
        # start VAD regression at the centre of the annotation scale
        nn.init.constant_(self.vad_head.bias, sum(DEFAULT_VAD_SCALE) / 2)

    def encode(self, body: torch.Tensor, context: torch.Tensor):
        if body.ndim != 4 or context.ndim != 4 or body.shape[-1] != 3 or context.shape[-1] != 3:
            raise ValidationError(
                f"expected B x H x W x 3 inputs, got {tuple(body.shape)} and {tuple(context.shape)}"
            )
        if body.shape[0] != context.shape[0]:
            raise ValidationError(
                f"batch size mismatch: body {body.shape[0]} vs context {context.shape[0]}"
            )
        body_feat = self.body_encoder(body.permute(0, 3, 1, 2).contiguous())
        context_feat = self.context_encoder(context.permute(0, 3, 1, 2).contiguous())
        return body_feat, context_feat

    def fuse(self, body_feat: torch.Tensor, context_feat: torch.Tensor):
        hidden = self.fusion(torch.cat([body_feat, context_feat], dim=1))
        return self.discrete_head(hidden), self.vad_head(hidden)

    def forward(self, body: torch.Tensor, context: torch.Tensor):
        return self.fuse(*self.encode(body, context))


def build_model(config: ModelConfig, seed: int | None = None) -> EmotionFusionNet:
    """Construct the network and load pretrained trunks.

    The body trunk always uses object-centric (ImageNet) weights; the context
    trunk uses whichever scheme ``config.context_pretraining`` names. With
    ``pretrained=False`` both trunks stay randomly initialized.
    """
    if seed is not None:
        torch.manual_seed(seed)
    if not config.supported:
        warnings.warn(
            f"body_crop_side={config.body_crop_side} is outside the supported "
            f"{SUPPORTED_BODY_SIDES}",
            stacklevel=2,
        )
    model = EmotionFusionNet(config)
    if config.pretrained:
        wdir = Path(config.weights_dir) if config.weights_dir else default_weights_dir()
        load_trunk_weights(model.body_encoder, weight_file(wdir, config.body_backbone, "imagenet"))
        scheme = PRETRAINING_SCHEME[config.context_pretraining]
        load_trunk_weights(
            model.context_encoder, weight_file(wdir, config.context_backbone, scheme)
        )
    else:
        warnings.warn("pretrained=False: backbones use random initialization", stacklevel=2)
    return model


def forward(model: EmotionFusionNet, body, context):
    """Run the network on numpy or torch batches; returns ``(scores B x 26, vad B x 3)``."""
    body = torch.as_tensor(np.asarray(body, dtype=np.float32)) if isinstance(body, np.ndarray) else body
    context = (
        torch.as_tensor(np.asarray(context, dtype=np.float32))
        if isinstance(context, np.ndarray)
        else context
    )
    return model(body, context)


@torch.no_grad()
def predict_batch(
    model: EmotionFusionNet,
    items: Sequence[tuple[ImageRecord, PersonAnnotation]],
    mean=IMAGENET_MEAN,
    std=IMAGENET_STD,
    batch_size: int = 32,
) -> list[PredictionResult]:
    """Predict every ``(record, person)`` pair, batching the forward passes."""
    if model.training:
        raise ValidationError("predict requires the model in inference mode (call .eval())")
    cfg = model.config
    results: list[PredictionResult] = []
    cache: dict = {}
    for start in range(0, len(items), batch_size):
        chunk = items[start : start + batch_size]
        bodies, contexts = [], []
        for record, person in chunk:
            if record.image_id not in cache:
                image = load_image(record.path)
                cache = {
                    record.image_id: (
                        image,
                        preprocess_context(record, cfg.context_side, mean, std, image=image),
                    )
                }
            image, context = cache[record.image_id]
            bodies.append(
                extract_body_crop(record, person, cfg.body_crop_side, mean, std, image=image)
            )
            contexts.append(context)
        scores, vad = model(torch.from_numpy(np.stack(bodies)), torch.from_numpy(np.stack(contexts)))
        for s, v in zip(scores.numpy(), vad.numpy()):
            results.append(PredictionResult(s.astype(np.float64), v.astype(np.float64)))
    return results


def predict(
    model: EmotionFusionNet,
    record: ImageRecord,
    person: PersonAnnotation,
    mean=IMAGENET_MEAN,
    std=IMAGENET_STD,
) -> PredictionResult:
    return predict_batch(model, [(record, person)], mean, std, batch_size=1)[0]


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
