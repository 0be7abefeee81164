"""Explicit ingestion of pretrained trunk weights into the local weight store."""

from __future__ import annotations

import logging
import shutil
import tempfile
import urllib.request
from pathlib import Path

import torch

from .exceptions import WeightsError
from .model import BACKBONES, _trunk, default_weights_dir, weight_file

log = logging.getLogger(__name__)

SCHEMES = ("imagenet", "places365")
PLACES365_URL = "http://places2.csail.mit.edu/models_places365/{backbone}_places365.pth.tar"


def default_url(backbone: str, scheme: str) -> str:
    if scheme == "imagenet":
        from torchvision.models import get_model_weights

        return get_model_weights(backbone).DEFAULT.url
    return PLACES365_URL.format(backbone=backbone)


def clean_state_dict(blob) -> dict:
    """Unwrap ``{"state_dict": ...}`` containers, strip ``module.`` and drop the classifier."""
    if isinstance(blob, dict) and "state_dict" in blob:
        blob = blob["state_dict"]
    if not isinstance(blob, dict):
        raise WeightsError("weight file does not hold a state dict")
    out = {}
    for k, v in blob.items():
        k = k.removeprefix("module.")
        if not k.startswith("fc."):
            out[k] = v
    return out


def _download(url: str, dest: Path) -> None:
    log.info("downloading %s", url)
    try:
        with urllib.request.urlopen(url) as resp, dest.open("wb") as fh:
            shutil.copyfileobj(resp, fh)
    except OSError as e:
        raise WeightsError(f"download of {url} failed: {e}") from e


def fetch_weights(backbone: str, scheme: str, weights_dir=None, source=None) -> Path:
    """Store trunk weights as ``<weights_dir>/<backbone>_<scheme>.pt``.

    ``source`` is a local file or URL; by default the published torchvision
    (ImageNet) or Places365 release is downloaded.
    """
    if backbone not in BACKBONES:
        raise WeightsError(f"unknown backbone {backbone!r}")
    if scheme not in SCHEMES:
        raise WeightsError(f"unknown pretraining scheme {scheme!r}; expected one of {SCHEMES}")
    weights_dir = Path(weights_dir) if weights_dir else default_weights_dir()
    source = source or default_url(backbone, scheme)
    with tempfile.TemporaryDirectory() as tmp:
        if Path(source).is_file():
            local = Path(source)
        elif "://" in str(source):
            local = Path(tmp) / "download"
            _download(str(source), local)
        else:
            raise WeightsError(f"weight source {source} is neither a file nor a URL")
        try:
            blob = torch.load(local, map_location="cpu", weights_only=True)
        except Exception as e:  # noqa: BLE001 - any unpickling failure means a bad file
            raise WeightsError(f"cannot read weights from {source}: {e}") from e
    state = clean_state_dict(blob)
    trunk = _trunk(backbone)
    try:
        trunk.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise WeightsError(f"weights from {source} do not fit {backbone}: {e}") from e
    target = weight_file(weights_dir, backbone, scheme)
    target.parent.mkdir(parents=True, exist_ok=True)
    torch.save(trunk.state_dict(), target)
    return target
