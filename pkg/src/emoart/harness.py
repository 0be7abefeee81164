"""Experiment plumbing: training configs, runs, evaluation and ablation grids."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import CATEGORY_NAMES, DatasetManifest, parse_manifest
from .estimator import LR_SCHEDULES, NORMALIZATIONS, OPTIMIZERS, EmotionRecognizer
from .exceptions import ConfigError, EmoartError, ValidationError
from .losses import DEFAULT_SMOOTHING
from .metrics import MetricsReport, compare_reports
from .model import ModelConfig

log = logging.getLogger(__name__)

# fields that never change results, left out of the config hash
NON_SEMANTIC = {"workers", "device"}
PATH_FIELDS = {"train_manifest", "val_manifest", "weights_dir"}


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lambda_discrete: float = 0.5
    lambda_continuous: float = 0.5
    weight_smoothing: float = DEFAULT_SMOOTHING
    balance_categories: bool = True
    epochs: int = 25
    batch_size: int = 32
    optimizer: str = "adam"
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_schedule: str = "step"
    lr_step: int = 7
    lr_gamma: float = 0.1
    augment: bool = True
    jitter: float = 0.1
    bn_recalibration: int = 512
    normalization: str = "dataset"
    freeze_body: bool = False
    freeze_context: bool = False
    seed: int = 0
    train_manifest: str | None = None
    val_manifest: str | None = None
    workers: int = 0
    device: str = "cpu"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.bn_recalibration < 0:
            raise ConfigError("bn_recalibration must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"normalization must be one of {NORMALIZATIONS}")
        if self.lambda_discrete < 0 or self.lambda_continuous < 0 or (
            self.lambda_discrete + self.lambda_continuous <= 0
        ):
            raise ConfigError("loss lambdas must be non-negative with a positive sum")

    # flat key/value view: model fields and training fields side by side
    def to_flat(self) -> dict:
        flat = self.model.to_dict()
        for f in fields(self):
            if f.name != "model":
                flat[f.name] = getattr(self, f.name)
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        model_keys = {f.name for f in fields(ModelConfig)}
        train_keys = {f.name for f in fields(cls)} - {"model"}
        unknown = set(flat) - model_keys - train_keys
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        model = ModelConfig(**{k: v for k, v in flat.items() if k in model_keys})
        return cls(model=model, **{k: v for k, v in flat.items() if k in train_keys})

    def with_overrides(self, **overrides) -> "TrainConfig":
        flat = self.to_flat()
        flat.update({k: v for k, v in overrides.items() if v is not None})
        return TrainConfig.from_flat(flat)

    @property
    def inw(self) -> bool:
        return self.model.inw

    @property
    def body_224(self) -> bool:
        return self.model.body_crop_side == 224


def _parse_value(raw: str):
    raw = raw.strip()
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    if raw.lower() in ("none", "null", ""):
        return None
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def read_config(path) -> TrainConfig:
    """Read a flat ``key = value`` config file. ``#`` starts a comment."""
    path = Path(path)
    flat = {}
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        flat[key.strip()] = _parse_value(value)
    base = path.parent.resolve()
    for key in PATH_FIELDS & flat.keys():
        if flat[key] is not None:
            flat[key] = str(base / flat[key])
    try:
        return TrainConfig.from_flat(flat)
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from e


def write_config(config: TrainConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for key, value in config.to_flat().items():
        if value is None:
            text = "none"
        elif isinstance(value, bool):
            text = str(value).lower()
        elif isinstance(value, str):
            text = value
        else:
            text = json.dumps(value)
        lines.append(f"{key} = {text}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def config_hash(config: TrainConfig) -> str:
    """Stable digest of the result-relevant config fields (paths resolved first)."""
    flat = {k: v for k, v in config.to_flat().items() if k not in NON_SEMANTIC}
    for key in PATH_FIELDS:
        if flat.get(key) is not None:
            flat[key] = os.path.realpath(os.path.expanduser(flat[key]))
    blob = json.dumps(flat, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def estimator_from_config(config: TrainConfig) -> EmotionRecognizer:
    flat = config.to_flat()
    flat["random_state"] = flat.pop("seed")
    for key in ("train_manifest", "val_manifest"):
        flat.pop(key)
    return EmotionRecognizer(**flat)


@dataclass
class RunRecord:
    config_hash: str
    epochs: list
    best_epoch: int | None
    wall_clock_seconds: float
    checkpoint: str
    hyperparameters: dict

    def to_dict(self):
        return asdict(self)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _load_manifest(m) -> DatasetManifest:
    return m if isinstance(m, DatasetManifest) else parse_manifest(m)


def train(config: TrainConfig, out_dir, train_manifest=None, val_manifest=None):
    """Fit a model per ``config`` and write ``checkpoint.pt``, ``run_record.json``
    and the resolved ``config.cfg`` into ``out_dir``.

    Manifests default to the paths in the config; already-loaded manifests may be
    passed instead. Returns ``(checkpoint_path, RunRecord)``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_src = train_manifest or config.train_manifest
    if train_src is None:
        raise ConfigError("no training manifest given")
    train_m = _load_manifest(train_src)
    val_src = val_manifest or config.val_manifest
    val_m = _load_manifest(val_src) if val_src is not None else None

    digest = config_hash(config)
    write_config(config, out_dir / "config.cfg")
    est = estimator_from_config(config)
    t0 = time.perf_counter()
    est.fit(train_m, X_val=val_m)
    wall = time.perf_counter() - t0
    ckpt = save_checkpoint(est, out_dir / "checkpoint.pt", {"config_hash": digest})
    record = RunRecord(
        config_hash=digest,
        epochs=[r.to_dict() for r in est.history_],
        best_epoch=est.best_epoch_,
        wall_clock_seconds=wall,
        checkpoint=str(ckpt),
        hyperparameters=config.to_flat(),
    )
    record.save(out_dir / "run_record.json")
    return ckpt, record


def evaluate(checkpoint, manifest, predominant_only: bool = False) -> MetricsReport:
    """Score a saved model on a manifest."""
    est = load_checkpoint(checkpoint) if not isinstance(checkpoint, EmotionRecognizer) else checkpoint
    m = _load_manifest(manifest)
    ckpt_categories = tuple(getattr(est, "categories_", CATEGORY_NAMES))
    if tuple(m.categories) != ckpt_categories:
        raise ValidationError(
            f"category-set mismatch: checkpoint has {len(ckpt_categories)} categories, "
            f"manifest declares {len(m.categories)}"
        )
    digest = getattr(est, "checkpoint_metadata_", {}).get("config_hash", "")
    return est.evaluate(m, source_tag=m.source_tag, config_hash=digest, predominant_only=predominant_only)


# -- ablations ---------------------------------------------------------------

_BACKBONE_LABEL = {"resnet18": "ResNet-18", "resnet50": "ResNet-50"}


def ablation_grid(base: TrainConfig, toggles: Sequence[str] = ("inw", "224b")) -> list[TrainConfig]:
    """Every on/off combination of the toggles, baseline first (row order of the tables)."""
    unknown = set(toggles) - {"inw", "224b"}
    if unknown:
        raise ConfigError(f"unknown ablation toggles {sorted(unknown)}")
    base_model = replace(base.model, context_pretraining="scene_centric", body_crop_side=128)
    grid = [replace(base, model=base_model)]
    for toggle in toggles:
        extra = []
        for cfg in grid:
            if toggle == "inw":
                m = replace(cfg.model, context_pretraining="object_centric")
            else:
                m = replace(cfg.model, body_crop_side=224)
            extra.append(replace(cfg, model=m))
        grid += extra
    # baseline, single toggles, then combinations
    return sorted(grid, key=lambda c: (int(c.inw) + int(c.body_224), not c.inw))


@dataclass
class AblationRow:
    config: TrainConfig
    config_hash: str
    reports: list = field(default_factory=list)
    error: str | None = None
    deltas: list = field(default_factory=list)

    @property
    def model_label(self) -> str:
        return _BACKBONE_LABEL.get(self.config.model.body_backbone, self.config.model.body_backbone)


@dataclass
class AblationTable:
    rows: list
    eval_tags: list

    def __len__(self):
        return len(self.rows)

    def header(self) -> list[str]:
        return (
            ["Model", "INW", "224B"]
            + [f"AP_{t}↑" for t in self.eval_tags]
            + [f"VAD_{t}↓" for t in self.eval_tags]
        )

    def cells(self) -> list[list[str]]:
        out = []
        for row in self.rows:
            base = [row.model_label, "✓" if row.config.inw else "", "✓" if row.config.body_224 else ""]
            if row.error is not None:
                out.append(base + ["ERR"] * (2 * len(self.eval_tags)))
                continue
            aps = [f"{100 * r.mean_ap:.2f}" for r in row.reports]
            vads = [f"{r.mean_vad_error:.2f}" for r in row.reports]
            out.append(base + aps + vads)
        return out

    def render(self) -> str:
        header, cells = self.header(), self.cells()
        widths = [max(len(h), *(len(c[i]) for c in cells)) if cells else len(h) for i, h in enumerate(header)]
        fmt = lambda row: "| " + " | ".join(v.ljust(w) for v, w in zip(row, widths)) + " |"  # noqa: E731
        lines = [fmt(header), "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
        lines += [fmt(c) for c in cells]
        errors = [f"{r.config_hash}: {r.error}" for r in self.rows if r.error]
        if errors:
            lines += ["", "failed cells:"] + [f"  {e}" for e in errors]
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "eval_tags": self.eval_tags,
            "header": self.header(),
            "rows": [
                {
                    "config_hash": r.config_hash,
                    "inw": r.config.inw,
                    "224b": r.config.body_224,
                    "model": r.model_label,
                    "error": r.error,
                    "reports": [rep.to_dict() for rep in r.reports],
                    "delta_vs_first": [
                        {d.name: d.delta for d in diff.deltas if d.name in ("mean_ap", "mean_vad_error")}
                        for diff in r.deltas
                    ],
                }
                for r in self.rows
            ],
        }


def run_ablation(
    grid: Sequence[TrainConfig],
    eval_manifests: Sequence,
    out_dir,
    train_manifest=None,
    val_manifest=None,
    reuse: bool = True,
) -> AblationTable:
    """Train (or reuse) one model per config and evaluate each on every eval set.

    Runs live in ``out_dir/<config hash>``; an existing checkpoint there is reused
    when ``reuse`` is set. A failing cell is recorded in its row and the table is
    still produced.
    """
    if not grid:
        raise ConfigError("ablation grid is empty")
    out_dir = Path(out_dir)
    evals = [_load_manifest(m) for m in eval_manifests]
    train_m = _load_manifest(train_manifest) if train_manifest is not None else None
    val_m = _load_manifest(val_manifest) if val_manifest is not None else None
    rows = []
    for cfg in grid:
        digest = config_hash(cfg)
        row = AblationRow(cfg, digest)
        run_dir = out_dir / digest
        ckpt = run_dir / "checkpoint.pt"
        try:
            if not (reuse and ckpt.is_file()):
                ckpt, _ = train(cfg, run_dir, train_m, val_m)
            est = load_checkpoint(ckpt)
            row.reports = [evaluate(est, m) for m in evals]
        except EmoartError as e:
            row.error = str(e)
        except Exception as e:  # noqa: BLE001 - keep the table going
            row.error = f"{type(e).__name__}: {e}"
        rows.append(row)
    first = rows[0]
    for row in rows:
        if row.error is None and first.error is None:
            row.deltas = [compare_reports(a, b) for a, b in zip(first.reports, row.reports)]
    table = AblationTable(rows, [m.source_tag or f"set{i}" for i, m in enumerate(evals)])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.md").write_text(table.render() + "\n", encoding="utf-8")
    (out_dir / "ablation.json").write_text(json.dumps(table.to_dict(), indent=2) + "\n", encoding="utf-8")
    return table
