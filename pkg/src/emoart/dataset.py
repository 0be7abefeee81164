"""Annotation data model, manifest I/O and image preprocessing.

Manifests are JSON Lines files. The first line is a header object::

    {"_manifest": "emoart-manifest/1", "split": "train", "source_tag": "EMOTIC",
     "vad_scale": [1.0, 10.0]}

and every following line is one image record::

    {"image_id": "img_0001", "path": "images/img_0001.jpg", "width": 640,
     "height": 480, "persons": [{"bbox": [10, 10, 50, 80],
     "categories": ["Happiness"], "vad": [7.0, 5.0, 6.0]}]}

``path`` is relative to the directory holding the manifest. The first entry
of ``categories`` is treated as the predominant one where that matters.
Image tensors are ``H x W x 3`` float32 arrays.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .exceptions import ManifestError, ValidationError

MANIFEST_FORMAT = "emoart-manifest/1"

CATEGORY_NAMES = (
    "Affection",
    "Anger",
    "Annoyance",
    "Anticipation",
    "Aversion",
    "Confidence",
    "Disapproval",
    "Disconnection",
    "Disquietment",
    "Doubt/Confusion",
    "Embarrassment",
    "Engagement",
    "Esteem",
    "Excitement",
    "Fatigue",
    "Fear",
    "Happiness",
    "Pain",
    "Peace",
    "Pleasure",
    "Sadness",
    "Sensitivity",
    "Suffering",
    "Surprise",
    "Sympathy",
    "Yearning",
)
NUM_CATEGORIES = len(CATEGORY_NAMES)
VAD_DIMENSIONS = ("valence", "arousal", "dominance")
DEFAULT_VAD_SCALE = (1.0, 10.0)

# conventional natural-image constants, used when no training statistics exist
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

SUPPORTED_BODY_SIDES = (128, 224)
BBOX_CLIP_TOLERANCE = 2.0
SPLITS = ("train", "val", "test")


class EmotionCategory(NamedTuple):
    id: int
    name: str


CATEGORIES = tuple(EmotionCategory(i, n) for i, n in enumerate(CATEGORY_NAMES))
_CATEGORY_INDEX = {c.name: c.id for c in CATEGORIES}


def category_index(name: str) -> int:
    try:
        return _CATEGORY_INDEX[name]
    except KeyError:
        raise ValidationError(f"unknown emotion category {name!r}") from None


class VadTriple(NamedTuple):
    valence: float
    arousal: float
    dominance: float


class BoundingBox(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def pixel_bounds(self) -> tuple[int, int, int, int]:
        """Integer pixel window covering the box (floor of the start, ceil of the end)."""
        return (
            int(math.floor(self.x1)),
            int(math.floor(self.y1)),
            int(math.ceil(self.x2)),
            int(math.ceil(self.y2)),
        )

    def flip(self, image_width: float) -> "BoundingBox":
        return BoundingBox(image_width - self.x2, self.y1, image_width - self.x1, self.y2)


@dataclass(frozen=True)
class PersonAnnotation:
    bbox: BoundingBox
    categories: tuple[str, ...]
    vad: VadTriple

    def multi_hot(self) -> np.ndarray:
        target = np.zeros(NUM_CATEGORIES, dtype=np.float32)
        for name in self.categories:
            target[category_index(name)] = 1.0
        return target


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    path: Path
    width: int
    height: int
    persons: tuple[PersonAnnotation, ...] = ()


@dataclass(frozen=True)
class DatasetManifest:
    split: str
    records: tuple[ImageRecord, ...]
    source_tag: str
    vad_scale: tuple[float, float] = DEFAULT_VAD_SCALE
    categories: tuple[str, ...] = CATEGORY_NAMES

    def __len__(self) -> int:
        return len(self.records)

    @property
    def n_persons(self) -> int:
        return sum(len(r.persons) for r in self.records)

    def iter_persons(self) -> Iterator[tuple[ImageRecord, PersonAnnotation]]:
        """Yield ``(record, person)`` pairs; images without persons are skipped."""
        for record in self.records:
            for person in record.persons:
                yield record, person

    def with_records(self, records, **changes) -> "DatasetManifest":
        return replace(self, records=tuple(records), **changes)


# -- validation --------------------------------------------------------------


def validate_bbox(bbox: Sequence[float], width: int, height: int) -> BoundingBox:
    """Check a raw ``[x1, y1, x2, y2]`` against the image and clip small overshoots.

    Boxes overshooting the image by at most ``BBOX_CLIP_TOLERANCE`` pixels are
    clipped silently; anything further out is an error.
    """
    if len(bbox) != 4:
        raise ValidationError(f"bbox must have 4 coordinates, got {len(bbox)}")
    x1, y1, x2, y2 = (float(v) for v in bbox)
    if not all(math.isfinite(v) for v in (x1, y1, x2, y2)):
        raise ValidationError("bbox has non-finite coordinates")
    if not (x1 < x2 and y1 < y2):
        raise ValidationError(f"degenerate bounding box {list(bbox)}")
    tol = BBOX_CLIP_TOLERANCE
    if x1 < -tol or y1 < -tol or x2 > width + tol or y2 > height + tol:
        raise ValidationError(
            f"bounding box {list(bbox)} lies outside the {width}x{height} image"
        )
    x1, y1 = max(x1, 0.0), max(y1, 0.0)
    x2, y2 = min(x2, float(width)), min(y2, float(height))
    if x2 - x1 < 1.0 or y2 - y1 < 1.0:
        raise ValidationError(f"bounding box {list(bbox)} has area below one pixel")
    return BoundingBox(_tidy(x1), _tidy(y1), _tidy(x2), _tidy(y2))


def _tidy(v: float):
    return int(v) if float(v).is_integer() else v


def validate_categories(names: Sequence[str]) -> tuple[str, ...]:
    if isinstance(names, str) or len(names) == 0:
        raise ValidationError("person needs a non-empty list of categories")
    if len(set(names)) != len(names):
        raise ValidationError(f"duplicate categories in {list(names)}")
    for n in names:
        category_index(n)
    return tuple(names)


def validate_vad(vad: Sequence[float], scale=DEFAULT_VAD_SCALE) -> VadTriple:
    if len(vad) != 3:
        raise ValidationError(f"vad needs 3 values, got {len(vad)}")
    lo, hi = scale
    values = tuple(float(v) for v in vad)
    for name, v in zip(VAD_DIMENSIONS, values):
        if not (lo <= v <= hi):
            raise ValidationError(f"{name} {v} outside annotation scale [{lo}, {hi}]")
    return VadTriple(*values)


def make_person(bbox, categories, vad, width, height, vad_scale=DEFAULT_VAD_SCALE):
    return PersonAnnotation(
        bbox=validate_bbox(bbox, width, height),
        categories=validate_categories(categories),
        vad=validate_vad(vad, vad_scale),
    )


# -- manifest I/O ------------------------------------------------------------


def _record_from_obj(obj, root: Path, vad_scale) -> ImageRecord:
    if not isinstance(obj, dict):
        raise ValidationError("record must be a JSON object")
    missing = {"image_id", "path", "width", "height", "persons"} - obj.keys()
    if missing:
        raise ValidationError(f"record missing fields {sorted(missing)}")
    width, height = obj["width"], obj["height"]
    if not (isinstance(width, int) and isinstance(height, int)) or width < 1 or height < 1:
        raise ValidationError(f"invalid image size {width!r}x{height!r}")
    persons = []
    for p in obj["persons"]:
        try:
            persons.append(
                make_person(p["bbox"], p["categories"], p["vad"], width, height, vad_scale)
            )
        except KeyError as e:
            raise ValidationError(f"person missing field {e.args[0]!r}") from None
    return ImageRecord(
        image_id=str(obj["image_id"]),
        path=Path(os.path.normpath(root / obj["path"])),
        width=width,
        height=height,
        persons=tuple(persons),
    )


def parse_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Load and validate a manifest file.

    Errors carry the offending (1-based) line number.
    """
    path = Path(path)
    root = path.parent.resolve()
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ManifestError(f"cannot read manifest: {e}", path=path) from e

    header = None
    records: list[ImageRecord] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"malformed line: {e.msg}", line=lineno, path=path) from None
        if header is None:
            if not isinstance(obj, dict) or obj.get("_manifest") != MANIFEST_FORMAT:
                raise ManifestError(
                    f"first line must be a {MANIFEST_FORMAT!r} header", line=lineno, path=path
                )
            header = obj
            if header.get("split") not in SPLITS:
                raise ManifestError(
                    f"split must be one of {SPLITS}, got {header.get('split')!r}",
                    line=lineno,
                    path=path,
                )
            try:
                scale = header.get("vad_scale", DEFAULT_VAD_SCALE)
                vad_scale = (float(scale[0]), float(scale[1]))
                categories = tuple(header.get("categories", CATEGORY_NAMES))
                for name in categories:
                    category_index(name)
            except (TypeError, ValueError, IndexError) as e:
                raise ManifestError(f"bad header: {e}", line=lineno, path=path) from None
            continue
        try:
            record = _record_from_obj(obj, root, vad_scale)
        except ValidationError as e:
            raise ManifestError(str(e), line=lineno, path=path) from None
        for person in record.persons:
            for name in person.categories:
                if name not in categories:
                    raise ManifestError(
                        f"category {name!r} not declared in manifest header", line=lineno, path=path
                    )
        if record.image_id in seen:
            raise ManifestError(f"duplicate image_id {record.image_id!r}", line=lineno, path=path)
        if check_files and not record.path.is_file():
            raise ManifestError(f"image file not found: {record.path}", line=lineno, path=path)
        seen.add(record.image_id)
        records.append(record)
    if header is None:
        raise ManifestError("empty manifest", path=path)
    return DatasetManifest(
        split=header["split"],
        records=tuple(records),
        source_tag=str(header.get("source_tag", "")),
        vad_scale=vad_scale,
        categories=categories,
    )


def _num(v):
    return int(v) if float(v).is_integer() else float(v)


def record_to_obj(record: ImageRecord, root: Path) -> dict:
    return {
        "image_id": record.image_id,
        "path": Path(os.path.relpath(record.path, root)).as_posix(),
        "width": record.width,
        "height": record.height,
        "persons": [
            {
                "bbox": [_num(v) for v in p.bbox],
                "categories": list(p.categories),
                "vad": [float(v) for v in p.vad],
            }
            for p in record.persons
        ],
    }


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    root = path.parent.resolve()
    header = {
        "_manifest": MANIFEST_FORMAT,
        "split": manifest.split,
        "source_tag": manifest.source_tag,
        "vad_scale": list(manifest.vad_scale),
    }
    if tuple(manifest.categories) != CATEGORY_NAMES:
        header["categories"] = list(manifest.categories)
    lines = [json.dumps(header)]
    lines += [json.dumps(record_to_obj(r, root), ensure_ascii=False) for r in manifest.records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# -- image preprocessing -----------------------------------------------------


def load_image(path) -> np.ndarray:
    """Read an image as an ``H x W x 3`` float64 array in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as e:
        raise ValidationError(f"unreadable image {path}: {e}") from e
    return arr / 255.0


def save_image(image: np.ndarray, path) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres and edge clamping, no antialiasing."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] == (out_h, out_w):
        return image.copy()
    t = torch.from_numpy(image.copy()).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(out_h, out_w), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def crop(image: np.ndarray, bbox: BoundingBox) -> np.ndarray:
    h, w = image.shape[:2]
    x1, y1, x2, y2 = bbox.pixel_bounds()
    x1, y1 = max(x1, 0), max(y1, 0)
    x2, y2 = min(x2, w), min(y2, h)
    if x2 <= x1 or y2 <= y1:
        raise ValidationError(f"bounding box {tuple(bbox)} does not overlap {w}x{h} image")
    return image[y1:y2, x1:x2]


def flip_horizontal(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[:, ::-1])


def normalize(image: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    return ((image - mean) / std).astype(np.float32)


def _check_image_matches(record: ImageRecord, image: np.ndarray) -> None:
    if image.shape[:2] != (record.height, record.width):
        raise ValidationError(
            f"{record.image_id}: image is {image.shape[1]}x{image.shape[0]}, "
            f"manifest says {record.width}x{record.height}"
        )


def extract_body_crop(
    record: ImageRecord,
    person: PersonAnnotation,
    side: int = 128,
    mean=IMAGENET_MEAN,
    std=IMAGENET_STD,
    image: np.ndarray | None = None,
) -> np.ndarray:
    """Crop the person's box, resample it to ``side x side`` and normalize.

    ``image`` may be passed to avoid re-reading the file for multi-person images.
    """
    if side not in SUPPORTED_BODY_SIDES:
        warnings.warn(f"body crop side {side} is not a supported configuration", stacklevel=2)
    if person not in record.persons:
        raise ValidationError(f"person does not belong to record {record.image_id}")
    if image is None:
        image = load_image(record.path)
    _check_image_matches(record, image)
    return normalize(resize_bilinear(crop(image, person.bbox), side, side), mean, std)


def preprocess_context(
    record: ImageRecord,
    side: int = 224,
    mean=IMAGENET_MEAN,
    std=IMAGENET_STD,
    image: np.ndarray | None = None,
) -> np.ndarray:
    if image is None:
        image = load_image(record.path)
    _check_image_matches(record, image)
    return normalize(resize_bilinear(image, side, side), mean, std)


@dataclass(frozen=True)
class AugmentParams:
    flip: bool
    gain: np.ndarray = field(repr=False)
    offset: np.ndarray = field(repr=False)


def draw_augmentation(seed: int, flip_prob: float = 0.5, jitter: float = 0.1) -> AugmentParams:
    rng = np.random.default_rng(seed)
    flip = bool(rng.random() < flip_prob)
    gain = rng.uniform(1.0 - jitter, 1.0 + jitter, size=3)
    offset = rng.uniform(-jitter, jitter, size=3)
    return AugmentParams(flip, gain, offset)


def augment(
    body: np.ndarray,
    context: np.ndarray,
    seed: int,
    flip_prob: float = 0.5,
    jitter: float = 0.1,
) -> tuple[np.ndarray, np.ndarray]:
    """Joint horizontal flip plus per-channel gain/offset jitter, fully determined by ``seed``.

    The same draw is applied to body and context so both views stay consistent.
    """
    params = draw_augmentation(seed, flip_prob, jitter)
    out = []
    for img in (body, context):
        if params.flip:
            img = flip_horizontal(img)
        out.append((img * params.gain + params.offset).astype(np.float32))
    return out[0], out[1]


def compute_channel_stats(manifest: DatasetManifest, side: int = 64):
    """Per-channel pixel mean/std over a split, measured on images resampled to ``side``."""
    if not manifest.records:
        return IMAGENET_MEAN, IMAGENET_STD
    total = np.zeros(3)
    total_sq = np.zeros(3)
    n = 0
    for record in manifest.records:
        img = resize_bilinear(load_image(record.path), side, side).reshape(-1, 3)
        total += img.sum(0)
        total_sq += (img**2).sum(0)
        n += img.shape[0]
    mean = total / n
    std = np.sqrt(np.maximum(total_sq / n - mean**2, 1e-12))
    std = np.maximum(std, 1e-3)
    return tuple(float(v) for v in mean), tuple(float(v) for v in std)
