"""Converters from external annotation formats to emoart manifests.

``csv``
    ``<in>/annotations.csv`` with header
    ``image_id,path,width,height,x1,y1,x2,y2,categories,valence,arousal,dominance``.
    One row per person (rows sharing ``image_id`` form one image; a row with
    empty box fields is an image without persons). ``categories`` is
    ``;``-separated, predominant first. ``path`` is relative to ``<in>``;
    empty width/height are read from the image.

``emotic-mat``
    The EMOTIC release layout: ``<in>/Annotations/Annotations.mat`` plus the
    image folders under ``<in>/emotic/``. Train persons use the single
    annotator's labels, val/test persons the combined labels.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import (
    DEFAULT_VAD_SCALE,
    DatasetManifest,
    ImageRecord,
    make_person,
)
from .exceptions import ValidationError

log = logging.getLogger(__name__)

SOURCE_FORMATS = ("csv", "emotic-mat")
CSV_COLUMNS = (
    "image_id", "path", "width", "height", "x1", "y1", "x2", "y2",
    "categories", "valence", "arousal", "dominance",
)


def _image_size(path: Path) -> tuple[int, int]:
    try:
        with Image.open(path) as im:
            return im.size
    except OSError as e:
        raise ValidationError(f"cannot read image size of {path}: {e}") from e


def convert_csv(in_dir, split="test", source_tag="", vad_scale=DEFAULT_VAD_SCALE) -> DatasetManifest:
    in_dir = Path(in_dir).resolve()
    table = in_dir / "annotations.csv"
    if not table.is_file():
        raise ValidationError(f"{table} not found")
    images: dict[str, dict] = {}
    with table.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValidationError(f"{table}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            image_id = row["image_id"].strip()
            entry = images.get(image_id)
            if entry is None:
                path = in_dir / row["path"].strip()
                if row["width"].strip() and row["height"].strip():
                    size = (int(row["width"]), int(row["height"]))
                else:
                    size = _image_size(path)
                entry = images[image_id] = {"path": path, "size": size, "persons": []}
            if not row["x1"].strip():
                continue
            try:
                entry["persons"].append(
                    make_person(
                        [float(row[k]) for k in ("x1", "y1", "x2", "y2")],
                        [c.strip() for c in row["categories"].split(";") if c.strip()],
                        [float(row[k]) for k in ("valence", "arousal", "dominance")],
                        *entry["size"],
                        vad_scale=vad_scale,
                    )
                )
            except (ValidationError, ValueError) as e:
                raise ValidationError(f"{table}:{lineno}: {e}") from None
    records = [
        ImageRecord(image_id, e["path"], e["size"][0], e["size"][1], tuple(e["persons"]))
        for image_id, e in images.items()
    ]
    return DatasetManifest(split, tuple(records), source_tag, vad_scale)


def _as_list(x):
    if x is None:
        return []
    if isinstance(x, np.ndarray):
        return list(x.ravel())
    return [x]


def _str_list(x) -> list[str]:
    return [str(v) for v in _as_list(x)]


def _emotic_person(p, split):
    if split == "train":
        cats = _str_list(p.annotations_categories.categories)
        cont = p.annotations_continuous
    else:
        cats = _str_list(p.combined_categories)
        cont = p.combined_continuous
    vad = [float(np.asarray(getattr(cont, k)).ravel()[0]) for k in ("valence", "arousal", "dominance")]
    bbox = [float(v) for v in np.asarray(p.body_bbox).ravel()[:4]]
    return bbox, cats, vad


def convert_emotic_mat(in_dir, split="train", source_tag="EMOTIC") -> DatasetManifest:
    """Read ``Annotations.mat``. Persons with unusable labels are dropped and counted."""
    from scipy.io import loadmat

    in_dir = Path(in_dir).resolve()
    mat_path = in_dir / "Annotations" / "Annotations.mat"
    if not mat_path.is_file():
        raise ValidationError(f"{mat_path} not found")
    mat = loadmat(mat_path, squeeze_me=True, struct_as_record=False)
    if split not in mat:
        raise ValidationError(f"{mat_path} has no {split!r} split")
    records = []
    dropped = 0
    seen = set()
    for entry in _as_list(mat[split]):
        folder, filename = str(entry.folder), str(entry.filename)
        image_id = f"{folder}/{filename}"
        if image_id in seen:
            continue
        seen.add(image_id)
        width, height = int(entry.image_size.n_col), int(entry.image_size.n_row)
        persons = []
        for p in _as_list(entry.person):
            try:
                bbox, cats, vad = _emotic_person(p, split)
                persons.append(make_person(bbox, cats, vad, width, height))
            except (ValidationError, AttributeError, IndexError, ValueError) as e:
                dropped += 1
                log.debug("dropping person in %s: %s", image_id, e)
        records.append(
            ImageRecord(image_id, in_dir / "emotic" / folder / filename, width, height, tuple(persons))
        )
    if dropped:
        log.warning("dropped %d person(s) with unusable annotations", dropped)
    return DatasetManifest(split, tuple(records), source_tag)


def convert(source_format: str, in_dir, split: str, source_tag: str | None = None) -> DatasetManifest:
    if source_format == "csv":
        return convert_csv(in_dir, split, source_tag or "")
    if source_format == "emotic-mat":
        return convert_emotic_mat(in_dir, split, source_tag or "EMOTIC")
    raise ValidationError(f"unknown source format {source_format!r}; expected one of {SOURCE_FORMATS}")
