"""Context-aware emotion recognition for people in photographs and artworks."""

from .dataset import (
    CATEGORY_NAMES,
    NUM_CATEGORIES,
    BoundingBox,
    DatasetManifest,
    ImageRecord,
    PersonAnnotation,
    VadTriple,
    parse_manifest,
    write_manifest,
)
from .estimator import EmotionRecognizer
from .metrics import MetricsReport, average_precision, compare_reports
from .model import ModelConfig, PredictionResult, build_model
from .stylize import StyleTransfer, stylize_image

__version__ = "0.1.0"

__all__ = [
    "CATEGORY_NAMES",
    "NUM_CATEGORIES",
    "BoundingBox",
    "DatasetManifest",
    "EmotionRecognizer",
    "ImageRecord",
    "MetricsReport",
    "ModelConfig",
    "PersonAnnotation",
    "PredictionResult",
    "StyleTransfer",
    "VadTriple",
    "average_precision",
    "build_model",
    "compare_reports",
    "parse_manifest",
    "stylize_image",
    "write_manifest",
]
