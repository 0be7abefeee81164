"""Dataset stylization by feature-statistics transfer.

The baseline stylizer encodes both images with a fixed, exactly invertible
per-pixel network (affine squeeze, logit, orthonormal opponent-colour 1x1
convolution), renormalizes each content feature channel to interpolated
content/style mean and std, and decodes. Because decoding inverts encoding,
re-encoding the output recovers the target statistics exactly (up to float
rounding). Decoded pixels can overshoot [0, 1] by at most ``SQUEEZE_EPS``;
they are clipped only when written to disk.

Other stylizers can be plugged in with :func:`register_stylizer`.
"""

from __future__ import annotations

import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .dataset import (
    DatasetManifest,
    ImageRecord,
    load_image,
    resize_bilinear,
    save_image,
    validate_bbox,
)
from .exceptions import TrainingError, ValidationError

log = logging.getLogger(__name__)

SQUEEZE_EPS = 1.0 / 512.0
FLAT_CHANNEL_STD = 1e-6
STYLIZER_FORMAT = "emoart-stylizer/1"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}

_OPPONENT = np.array(
    [
        [1 / math.sqrt(3), 1 / math.sqrt(3), 1 / math.sqrt(3)],
        [1 / math.sqrt(2), -1 / math.sqrt(2), 0.0],
        [1 / math.sqrt(6), 1 / math.sqrt(6), -2 / math.sqrt(6)],
    ]
)


class FeatureEncoder(nn.Module):
    def __init__(self):
        super().__init__()
        self.mix = nn.Conv2d(3, 3, kernel_size=1, bias=False).double()
        with torch.no_grad():
            self.mix.weight.copy_(torch.from_numpy(_OPPONENT)[:, :, None, None])
        self.requires_grad_(False)

    def forward(self, x):
        squeezed = SQUEEZE_EPS + (1.0 - 2.0 * SQUEEZE_EPS) * x
        return self.mix(torch.logit(squeezed))


class FeatureDecoder(nn.Module):
    def __init__(self):
        super().__init__()
        self.unmix = nn.Conv2d(3, 3, kernel_size=1, bias=False).double()
        with torch.no_grad():
            self.unmix.weight.copy_(torch.from_numpy(_OPPONENT.T.copy())[:, :, None, None])
        self.requires_grad_(False)

    def forward(self, f):
        return (torch.sigmoid(self.unmix(f)) - SQUEEZE_EPS) / (1.0 - 2.0 * SQUEEZE_EPS)


def _to_batch(image: np.ndarray) -> torch.Tensor:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError(f"expected an H x W x 3 image, got shape {image.shape}")
    return torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None]


def _channel_stats(f: torch.Tensor):
    flat = f[0].reshape(3, -1)
    return flat.mean(dim=1), flat.std(dim=1, unbiased=False)


class FeatureStatsStylizer:
    """Adaptive-instance-normalization style transfer on an invertible colour encoder."""

    name = "feature_stats"

    def __init__(self, encoder: FeatureEncoder | None = None, decoder: FeatureDecoder | None = None):
        self.encoder = encoder or FeatureEncoder()
        self.decoder = decoder or FeatureDecoder()

    @torch.no_grad()
    def encode(self, image: np.ndarray) -> torch.Tensor:
        return self.encoder(_to_batch(image))

    def feature_stats(self, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel mean and std of the encoder features."""
        mean, std = _channel_stats(self.encode(image))
        return mean.numpy(), std.numpy()

    @torch.no_grad()
    def stylize(self, content: np.ndarray, style: np.ndarray, strength: float = 1.0) -> np.ndarray:
        if not (0.0 <= strength <= 1.0):
            raise ValidationError(f"strength must lie in [0, 1], got {strength}")
        content = np.asarray(content, dtype=np.float64)
        if strength == 0.0:
            return content.copy()
        fc = self.encode(content)
        fs = self.encode(style)
        mc, sc = _channel_stats(fc)
        ms, ss = _channel_stats(fs)
        z = (fc - mc[:, None, None]) / sc.clamp_min(FLAT_CHANNEL_STD)[:, None, None]
        flat = sc < FLAT_CHANNEL_STD
        if flat.any():
            # a flat channel has no structure to keep; borrow the style's texture
            h, w = content.shape[:2]
            zs = (fs - ms[:, None, None]) / ss.clamp_min(FLAT_CHANNEL_STD)[:, None, None]
            zs = resize_bilinear(zs[0].permute(1, 2, 0).numpy(), h, w)
            zs = torch.from_numpy(zs).permute(2, 0, 1)[None]
            zm, zsd = _channel_stats(zs)
            zs = (zs - zm[:, None, None]) / zsd.clamp_min(FLAT_CHANNEL_STD)[:, None, None]
            z = torch.where(flat[:, None, None], zs, z)
        target_mean = (1.0 - strength) * mc + strength * ms
        target_std = (1.0 - strength) * sc + strength * ss
        f = z * target_std[:, None, None] + target_mean[:, None, None]
        return self.decoder(f)[0].permute(1, 2, 0).numpy()

    def save(self, path) -> Path:
        """Write encoder/decoder weights in the checkpoint container format."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "format": STYLIZER_FORMAT,
                "stylizer_id": self.name,
                "squeeze_eps": SQUEEZE_EPS,
                "encoder": self.encoder.state_dict(),
                "decoder": self.decoder.state_dict(),
            },
            path,
        )
        return path

    @classmethod
    def load(cls, path) -> "FeatureStatsStylizer":
        blob = torch.load(path, map_location="cpu", weights_only=True)
        if blob.get("format") != STYLIZER_FORMAT:
            raise ValidationError(f"{path} is not a stylizer checkpoint")
        enc, dec = FeatureEncoder(), FeatureDecoder()
        enc.load_state_dict(blob["encoder"])
        dec.load_state_dict(blob["decoder"])
        return cls(enc, dec)


STYLIZERS: dict[str, Callable[[], object]] = {FeatureStatsStylizer.name: FeatureStatsStylizer}


def register_stylizer(name: str, factory: Callable[[], object]) -> None:
    """Register a stylizer factory; instances need ``stylize(content, style, strength)``."""
    STYLIZERS[name] = factory


def get_stylizer(name: str):
    try:
        return STYLIZERS[name]()
    except KeyError:
        raise ValidationError(f"unregistered stylizer {name!r}; known: {sorted(STYLIZERS)}") from None


def stylize_image(content, style, strength: float = 1.0, stylizer: str = "feature_stats") -> np.ndarray:
    """Transfer ``style`` onto ``content``. Output keeps the content's pixel size."""
    return get_stylizer(stylizer).stylize(content, style, strength)


# -- dataset jobs ------------------------------------------------------------


@dataclass(frozen=True)
class StyleCorpus:
    paths: tuple[Path, ...]
    sampling_seed: int = 0

    def __post_init__(self):
        if not self.paths:
            raise ValidationError("style corpus is empty")

    @classmethod
    def from_dir(cls, directory, sampling_seed: int = 0) -> "StyleCorpus":
        directory = Path(directory)
        if not directory.is_dir():
            raise ValidationError(f"style directory {directory} does not exist")
        paths = sorted(p for p in directory.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
        return cls(tuple(paths), sampling_seed)

    def style_id(self, index: int) -> str:
        return self.paths[index].name

    def check_readable(self) -> None:
        for p in self.paths:
            load_image(p)


def assign_styles(n_items: int, n_styles: int, seed: int) -> list[int]:
    """Uniform style sampling without replacement within each corpus-sized chunk."""
    rng = np.random.default_rng(seed)
    out: list[int] = []
    while len(out) < n_items:
        out.extend(int(i) for i in rng.permutation(n_styles))
    return out[:n_items]


@dataclass(frozen=True)
class StylizationJob:
    source: DatasetManifest
    styles: StyleCorpus
    output_dir: Path
    stylizer_id: str = "feature_stats"
    strength: float = 1.0
    workers: int = 1

    def __post_init__(self):
        if not (0.0 <= self.strength <= 1.0):
            raise ValidationError(f"strength must lie in [0, 1], got {self.strength}")
        if self.stylizer_id not in STYLIZERS:
            raise ValidationError(f"unregistered stylizer {self.stylizer_id!r}")
        object.__setattr__(self, "output_dir", Path(self.output_dir))


class StylizationError(TrainingError):
    def __init__(self, failures: dict):
        self.failures = failures
        first = next(iter(failures.items()))
        super().__init__(
            f"{len(failures)} image(s) failed to stylize (first: {first[0]}: {first[1]}); "
            "re-run the job to resume"
        )


def _output_name(image_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", image_id) + ".png"


def _read_log(path: Path) -> dict:
    done = {}
    if path.is_file():
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                entry = json.loads(line)
                done[entry["image_id"]] = entry
    return done


def stylize_dataset(job: StylizationJob) -> DatasetManifest:
    """Stylize every image of ``job.source`` into ``job.output_dir``.

    Annotations pass through untouched; only paths and ``source_tag`` change.
    Progress is appended to ``job_log.jsonl`` so an interrupted job resumes
    where it stopped.
    """
    out_dir = job.output_dir
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "job_log.jsonl"
    previous = _read_log(log_path)

    records = job.source.records
    assignment = assign_styles(len(records), len(job.styles.paths), job.styles.sampling_seed)
    stylizer = get_stylizer(job.stylizer_id)
    style_cache: dict[int, np.ndarray] = {}

    def work(i: int):
        record = records[i]
        target = image_dir / _output_name(record.image_id)
        style_index = assignment[i]
        style_id = job.styles.style_id(style_index)
        prev = previous.get(record.image_id)
        if prev and prev["status"] == "ok" and prev["style_id"] == style_id and target.is_file():
            return i, target, style_id, "skipped"
        try:
            content = load_image(record.path)
            if content.shape[:2] != (record.height, record.width):
                raise ValidationError("image size differs from manifest")
            if style_index not in style_cache:
                style_cache[style_index] = load_image(job.styles.paths[style_index])
            out = stylizer.stylize(content, style_cache[style_index], job.strength)
            if out.shape != content.shape:
                raise ValidationError(f"stylizer changed geometry {content.shape} -> {out.shape}")
            save_image(out, target)
        except Exception as e:  # noqa: BLE001 - failures are reported per image
            return i, target, style_id, f"error: {e}"
        return i, target, style_id, "ok"

    new_records: list[ImageRecord | None] = [None] * len(records)
    failures = {}
    with log_path.open("a", encoding="utf-8") as log_file, ThreadPoolExecutor(
        max_workers=max(1, job.workers)
    ) as pool:
        for i, target, style_id, status in pool.map(work, range(len(records))):
            record = records[i]
            if status != "skipped":
                log_file.write(
                    json.dumps({"image_id": record.image_id, "style_id": style_id, "status": status})
                    + "\n"
                )
                log_file.flush()
            if status.startswith("error"):
                failures[record.image_id] = status
                continue
            new_records[i] = ImageRecord(
                record.image_id, target.resolve(), record.width, record.height, record.persons
            )
    if failures:
        raise StylizationError(failures)
    # bboxes stay valid because geometry is unchanged; re-check anyway
    for r in new_records:
        for p in r.persons:
            validate_bbox(tuple(p.bbox), r.width, r.height)
    return job.source.with_records(new_records, source_tag=f"{job.source.source_tag}-s")


class StyleTransfer(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` on style images, ``transform`` content images.

    Each content image gets one style, drawn with :func:`assign_styles`.
    """

    def __init__(self, strength: float = 1.0, stylizer: str = "feature_stats", random_state: int = 0):
        self.strength = strength
        self.stylizer = stylizer
        self.random_state = random_state

    def fit(self, X: Sequence[np.ndarray], y=None):
        if len(X) == 0:
            raise ValidationError("need at least one style image")
        self.styles_ = [np.asarray(s, dtype=np.float64) for s in X]
        self.stylizer_ = get_stylizer(self.stylizer)
        return self

    def transform(self, X: Sequence[np.ndarray]) -> list[np.ndarray]:
        check_is_fitted(self, "styles_")
        assignment = assign_styles(len(X), len(self.styles_), self.random_state)
        return [
            self.stylizer_.stylize(img, self.styles_[k], self.strength)
            for img, k in zip(X, assignment)
        ]
