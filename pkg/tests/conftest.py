import sys
import warnings
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from emoart.dataset import DatasetManifest, ImageRecord, make_person, save_image  # noqa: E402
from emoart.synthetic import make_synthetic_dataset  # noqa: E402


@pytest.fixture(autouse=True)
def _quiet_random_init():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="pretrained=False")
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_image(path, array):
    save_image(array, path)
    return Path(path).resolve()


@pytest.fixture
def tiny_record(tmp_path):
    """A 64x48 random image with one annotated person."""
    img = np.random.default_rng(0).random((48, 64, 3))
    path = write_image(tmp_path / "img.png", img)
    person = make_person([10, 5, 40, 45], ["Happiness", "Excitement"], [7.0, 5.0, 6.0], 64, 48)
    return ImageRecord("img", path, 64, 48, (person,))


@pytest.fixture(scope="session")
def synth8(tmp_path_factory):
    return make_synthetic_dataset(tmp_path_factory.mktemp("synth8"), 8, seed=1)


@pytest.fixture(scope="session")
def synth64(tmp_path_factory):
    return make_synthetic_dataset(tmp_path_factory.mktemp("synth64"), 64, seed=0)


@pytest.fixture(scope="session")
def fake_weights(tmp_path_factory):
    """Random resnet18 trunk weights stored under both pretraining schemes."""
    from emoart.model import _trunk, weight_file

    wdir = tmp_path_factory.mktemp("weights")
    for seed, scheme in ((1, "imagenet"), (2, "places365")):
        torch.manual_seed(seed)
        torch.save(_trunk("resnet18").state_dict(), weight_file(wdir, "resnet18", scheme))
    return wdir


def toy_manifest(records, split="train", tag="TOY"):
    return DatasetManifest(split, tuple(records), tag)


# (criterion number, title, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {title}{' - ' + detail if detail else ''}")
