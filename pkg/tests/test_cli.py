import json

import numpy as np
import pytest
import torch
from scipy.io import savemat

from emoart.cli import run
from emoart.dataset import MANIFEST_FORMAT, parse_manifest
from emoart.metrics import MetricsReport
from emoart.model import weight_file
from emoart.synthetic import make_synthetic_dataset
from conftest import write_image

TOY_CFG = """\
# small enough for a CPU smoke run
pretrained = false
context_side = 32
epochs = 1
batch_size = 4
"""


def cli(*args):
    with pytest.raises(SystemExit) as e:
        run([str(a) for a in args])
    return e.value.code


@pytest.fixture
def toy_cfg(tmp_path):
    path = tmp_path / "toy.cfg"
    path.write_text(TOY_CFG)
    return path


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_data")
    make_synthetic_dataset(root / "train", 8, seed=1)
    make_synthetic_dataset(root / "art", 6, seed=2, split="test", source_tag="ART")
    return root


class TestConvert:
    def _csv(self, d, rows):
        header = "image_id,path,width,height,x1,y1,x2,y2,categories,valence,arousal,dominance\n"
        (d / "annotations.csv").write_text(header + "\n".join(rows) + "\n")

    def test_csv(self, tmp_path, capsys):
        d = tmp_path / "odor"
        write_image(d / "a.png", np.zeros((40, 50, 3)))
        write_image(d / "b.png", np.zeros((30, 30, 3)))
        self._csv(d, [
            "a,a.png,50,40,1,2,20,30,Happiness;Peace,7,5,6",
            "a,a.png,50,40,25,2,49,39,Sadness,3,4,5",
            "b,b.png,,,,,,,,,,",
        ])
        out = tmp_path / "m.jsonl"
        assert cli("convert", "--from", "csv", "--in", d, "--out", out, "--split", "test", "--source-tag", "ODOR-e") == 0
        m = parse_manifest(out)
        assert m.source_tag == "ODOR-e" and m.split == "test"
        assert [len(r.persons) for r in m.records] == [2, 0]
        assert m.records[1].width == 30 and m.records[0].persons[0].categories == ("Happiness", "Peace")
        assert "2 records (2 persons)" in capsys.readouterr().out

    def test_csv_bad_category(self, tmp_path, capsys):
        d = tmp_path / "bad"
        write_image(d / "a.png", np.zeros((40, 50, 3)))
        self._csv(d, ["a,a.png,50,40,1,2,20,30,Glee,7,5,6"])
        assert cli("convert", "--from", "csv", "--in", d, "--out", tmp_path / "m.jsonl") == 2
        assert "annotations.csv:2" in capsys.readouterr().err

    def test_emotic_mat(self, tmp_path):
        d = tmp_path / "emotic_root"
        write_image(d / "emotic" / "mscoco" / "x.jpg", np.zeros((60, 80, 3)))
        write_image(d / "emotic" / "framesdb" / "y.jpg", np.zeros((50, 50, 3)))

        def person(bbox, cats, vad):
            return {
                "body_bbox": np.array(bbox, dtype=float),
                "annotations_categories": {"categories": np.array(cats, dtype=object)},
                "annotations_continuous": dict(zip(("valence", "arousal", "dominance"), vad)),
            }

        train = np.empty(2, dtype=object)
        train[0] = {
            "filename": "x.jpg", "folder": "mscoco", "image_size": {"n_col": 80, "n_row": 60},
            "person": np.array([person([1, 1, 30, 50], ["Happiness", "Excitement"], [7, 6, 5]),
                                person([40, 5, 79, 59], ["Fear"], [2, 8, 3]),
                                person([40, 5, 79, 59], ["NotACategory"], [2, 8, 3])], dtype=object),
        }
        train[1] = {
            "filename": "y.jpg", "folder": "framesdb", "image_size": {"n_col": 50, "n_row": 50},
            "person": person([0, 0, 50, 50], ["Peace"], [6, 2, 5]),
        }
        (d / "Annotations").mkdir(parents=True)
        savemat(d / "Annotations" / "Annotations.mat", {"train": train})
        out = tmp_path / "emotic.jsonl"
        assert cli("convert", "--from", "emotic-mat", "--in", d, "--out", out, "--split", "train") == 0
        m = parse_manifest(out)
        assert m.source_tag == "EMOTIC"
        assert [r.image_id for r in m.records] == ["mscoco/x.jpg", "framesdb/y.jpg"]
        assert [len(r.persons) for r in m.records] == [2, 1]
        assert m.records[0].persons[0].categories == ("Happiness", "Excitement")
        assert tuple(m.records[1].persons[0].vad) == (6, 2, 5)

    def test_unknown_format(self, tmp_path):
        assert cli("convert", "--from", "xml", "--in", tmp_path, "--out", tmp_path / "m.jsonl") == 2


class TestFetchWeights:
    def test_local_file(self, tmp_path):
        from torchvision import models
        src = tmp_path / "resnet18-full.pth"
        torch.save({"state_dict": {f"module.{k}": v for k, v in models.resnet18().state_dict().items()}}, src)
        assert cli("fetch-weights", "--backbone", "resnet18", "--scheme", "places365",
                   "--source", src, "--weights-dir", tmp_path / "w") == 0
        stored = torch.load(weight_file(tmp_path / "w", "resnet18", "places365"), weights_only=True)
        assert not any(k.startswith("fc.") for k in stored)

    def test_wrong_architecture(self, tmp_path):
        from torchvision import models
        src = tmp_path / "r50.pth"
        torch.save(models.resnet50().state_dict(), src)
        assert cli("fetch-weights", "--backbone", "resnet18", "--scheme", "imagenet",
                   "--source", src, "--weights-dir", tmp_path / "w") == 2

    def test_train_without_weights_explains(self, data, tmp_path, capsys):
        cfg = tmp_path / "pre.cfg"
        cfg.write_text(TOY_CFG.replace("pretrained = false", f"pretrained = true\nweights_dir = {tmp_path / 'none'}"))
        assert cli("--config", cfg, "train", "--train", data / "train" / "manifest.jsonl", "--out", tmp_path / "r") == 2
        assert "fetch-weights" in capsys.readouterr().err


class TestWorkflow:
    def test_train_evaluate_predict_compare(self, data, toy_cfg, tmp_path, capsys):
        train_m = data / "train" / "manifest.jsonl"
        art_m = data / "art" / "manifest.jsonl"
        run_dir = tmp_path / "run"
        assert cli("--config", toy_cfg, "--seed", 3, "train", "--train", train_m, "--val", train_m, "--out", run_dir) == 0
        assert {p.name for p in run_dir.iterdir()} >= {"checkpoint.pt", "run_record.json", "config.cfg"}
        assert "seed = 3" in (run_dir / "config.cfg").read_text()

        ckpt = run_dir / "checkpoint.pt"
        assert cli("evaluate", "--checkpoint", ckpt, "--manifest", train_m, "--out", tmp_path / "a.json") == 0
        assert cli("evaluate", "--checkpoint", ckpt, "--manifest", art_m, "--out", tmp_path / "b.json") == 0
        out = capsys.readouterr().out
        assert "mAP=" in out and "[ART]" in out
        rep = MetricsReport.load(tmp_path / "b.json")
        assert rep.source_tag == "ART" and rep.n_persons == 6 and len(rep.config_hash) == 16

        assert cli("predict", "--checkpoint", ckpt, "--manifest", art_m, "--out", tmp_path / "p.jsonl") == 0
        lines = [json.loads(x) for x in (tmp_path / "p.jsonl").read_text().splitlines()]
        assert len(lines) == 6 and len(lines[0]["discrete_scores"]) == 26 and len(lines[0]["vad"]) == 3

        assert cli("compare", tmp_path / "a.json", tmp_path / "b.json") == 0
        out = capsys.readouterr().out
        assert "mean_ap" in out and "mean_vad_error" in out and "ap.Happiness" not in out
        assert cli("compare", "--all", tmp_path / "a.json", tmp_path / "b.json") == 0
        assert "ap.Happiness" in capsys.readouterr().out

    def test_stylize(self, data, tmp_path):
        styles = tmp_path / "styles"
        for i in range(3):
            write_image(styles / f"s{i}.png", np.random.default_rng(i).random((20, 30, 3)))
        out = tmp_path / "styl"
        assert cli("--seed", 4, "--workers", 2, "stylize", "--manifest", data / "art" / "manifest.jsonl",
                   "--styles", styles, "--out", out, "--strength", 0.5) == 0
        m = parse_manifest(out / "manifest.jsonl")
        assert m.source_tag == "ART-s" and len(m.records) == 6
        assert len((out / "job_log.jsonl").read_text().splitlines()) == 6

    def test_ablate(self, data, toy_cfg, tmp_path, capsys):
        train_m = data / "train" / "manifest.jsonl"
        args = ["--config", toy_cfg, "ablate", "--grid", "224b", "--train", train_m,
                "--eval", train_m, "--eval", data / "art" / "manifest.jsonl", "--out", tmp_path / "abl"]
        assert cli(*args) == 0
        table = capsys.readouterr().out
        assert "AP_SYNTH↑" in table and "VAD_ART↓" in table and table.count("ResNet-18") == 2
        assert (tmp_path / "abl" / "ablation.md").read_text().strip() == table.strip()

    def test_ablate_needs_training_data(self, data, toy_cfg, tmp_path):
        assert cli("--config", toy_cfg, "ablate", "--eval", data / "art" / "manifest.jsonl", "--out", tmp_path) == 2


class TestExitCodes:
    def test_help(self, capsys):
        assert cli("--help") == 0
        out = capsys.readouterr().out
        for cmd in ("convert", "fetch-weights", "train", "evaluate", "predict", "stylize", "ablate", "compare"):
            assert cmd in out

    def test_unknown_option(self):
        assert cli("train", "--bogus") == 2

    def test_invalid_manifest(self, tmp_path, toy_cfg, capsys):
        img = write_image(tmp_path / "a.png", np.zeros((100, 100, 3)))
        (tmp_path / "m.jsonl").write_text(
            json.dumps({"_manifest": MANIFEST_FORMAT, "split": "train", "source_tag": "T"}) + "\n"
            + json.dumps({"image_id": "a", "path": img.name, "width": 100, "height": 100,
                          "persons": [{"bbox": [50, 10, 10, 80], "categories": ["Pain"], "vad": [5, 5, 5]}]}) + "\n"
        )
        assert cli("--config", toy_cfg, "train", "--train", tmp_path / "m.jsonl", "--out", tmp_path / "r") == 2
        err = capsys.readouterr().err
        assert "degenerate bounding box" in err and ":2" in err

    def test_invalid_config_value(self, tmp_path, data):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("epochs = 0\n")
        assert cli("--config", cfg, "train", "--train", data / "train" / "manifest.jsonl", "--out", tmp_path) == 2

    def test_divergence_is_runtime_error(self, data, tmp_path, capsys):
        cfg = tmp_path / "hot.cfg"
        cfg.write_text(TOY_CFG + "optimizer = sgd\nlearning_rate = 1e30\n")
        assert cli("--config", cfg, "train", "--train", data / "train" / "manifest.jsonl", "--out", tmp_path / "r") == 3
        assert "batch" in capsys.readouterr().err

    def test_missing_checkpoint(self, tmp_path):
        assert cli("evaluate", "--checkpoint", tmp_path / "none.pt", "--manifest", tmp_path / "m.jsonl") == 2

    def test_corrupt_checkpoint(self, tmp_path, data):
        (tmp_path / "c.pt").write_bytes(b"garbage")
        assert cli("evaluate", "--checkpoint", tmp_path / "c.pt", "--manifest", data / "art" / "manifest.jsonl") == 2
