"""Average precision per emotion category and VAD regression error."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import CATEGORY_NAMES, NUM_CATEGORIES, VAD_DIMENSIONS, PersonAnnotation
from .exceptions import ValidationError

REPORT_FORMAT = "emoart-report/1"


def average_precision(scores, labels) -> float:
    """Non-interpolated AP: mean of precision@r over the ranks r of the positives.

    Ranking is by descending score; ties keep the original (ascending index) order.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValidationError(f"scores/labels length mismatch: {scores.size} vs {labels.size}")
    if not np.isin(labels, (0, 1)).all():
        raise ValidationError("labels must be binary")
    labels = labels.astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValidationError("average precision is undefined without positive labels")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    precision_at_hits = np.arange(1, n_pos + 1) / ranks
    return float(precision_at_hits.mean())


@dataclass
class MetricsReport:
    per_category_ap: list  # float, or None for categories without positives
    mean_ap: float
    per_dim_vad_error: list
    mean_vad_error: float
    n_persons: int
    source_tag: str = ""
    excluded_categories: list = field(default_factory=list)
    categories: list = field(default_factory=lambda: list(CATEGORY_NAMES))
    config_hash: str = ""
    predominant_only: bool = False

    def to_dict(self) -> dict:
        return {"_report": REPORT_FORMAT, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        if d.pop("_report", REPORT_FORMAT) != REPORT_FORMAT:
            raise ValidationError("not an emoart metrics report")
        return cls(**d)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def summary(self) -> str:
        dims = ", ".join(f"{n[0].upper()}={e:.2f}" for n, e in zip(VAD_DIMENSIONS, self.per_dim_vad_error))
        return (
            f"[{self.source_tag or 'unnamed'}] persons={self.n_persons} "
            f"mAP={100 * self.mean_ap:.2f} VAD={self.mean_vad_error:.2f} ({dims})"
        )


def _stack(preds) -> tuple[np.ndarray, np.ndarray]:
    scores = np.array([p.discrete_scores for p in preds], dtype=np.float64).reshape(-1, NUM_CATEGORIES)
    vad = np.array([p.vad_pred for p in preds], dtype=np.float64).reshape(-1, 3)
    return scores, vad


def label_matrix(truths: Sequence[PersonAnnotation], predominant_only: bool = False) -> np.ndarray:
    if predominant_only:
        return np.stack([_first_only(t) for t in truths]) if truths else np.zeros((0, NUM_CATEGORIES))
    return np.stack([t.multi_hot() for t in truths]) if truths else np.zeros((0, NUM_CATEGORIES))


def _first_only(t: PersonAnnotation) -> np.ndarray:
    row = np.zeros(NUM_CATEGORIES, dtype=np.float32)
    row[CATEGORY_NAMES.index(t.categories[0])] = 1.0
    return row


def evaluate_discrete(preds, truths, predominant_only: bool = False):
    """Per-category AP over all persons and their mean.

    Returns ``(per_category_ap, mean_ap, excluded)`` where categories with no
    positive are ``None`` in the list, left out of the mean, and named in ``excluded``.
    """
    if len(preds) != len(truths):
        raise ValidationError(f"{len(preds)} predictions for {len(truths)} annotations")
    scores, _ = _stack(preds)
    labels = label_matrix(truths, predominant_only)
    per_cat: list = []
    excluded: list = []
    for k, name in enumerate(CATEGORY_NAMES):
        if labels[:, k].sum() == 0:
            per_cat.append(None)
            excluded.append(name)
        else:
            per_cat.append(average_precision(scores[:, k], labels[:, k]))
    included = [a for a in per_cat if a is not None]
    mean_ap = float(np.mean(included)) if included else math.nan
    return per_cat, mean_ap, excluded


def evaluate_vad(preds, truths):
    """Mean absolute error per dimension and averaged over the three."""
    if len(preds) != len(truths):
        raise ValidationError(f"{len(preds)} predictions for {len(truths)} annotations")
    if not preds:
        raise ValidationError("cannot compute VAD error on an empty set")
    _, vad = _stack(preds)
    target = np.array([tuple(t.vad) for t in truths], dtype=np.float64)
    per_dim = np.abs(vad - target).mean(axis=0)
    return [float(v) for v in per_dim], float(per_dim.mean())


def evaluate_predictions(preds, truths, source_tag="", config_hash="", predominant_only=False) -> MetricsReport:
    per_cat, mean_ap, excluded = evaluate_discrete(preds, truths, predominant_only)
    per_dim, mean_vad = evaluate_vad(preds, truths)
    return MetricsReport(
        per_category_ap=per_cat,
        mean_ap=mean_ap,
        per_dim_vad_error=per_dim,
        mean_vad_error=mean_vad,
        n_persons=len(truths),
        source_tag=source_tag,
        excluded_categories=excluded,
        config_hash=config_hash,
        predominant_only=predominant_only,
    )


@dataclass
class MetricDelta:
    name: str
    a: float | None
    b: float | None
    delta: float | None
    higher_is_better: bool

    @property
    def improved(self) -> bool | None:
        if self.delta is None:
            return None
        return self.delta > 0 if self.higher_is_better else self.delta < 0


@dataclass
class ReportDiff:
    source_a: str
    source_b: str
    deltas: list

    def __getitem__(self, name: str) -> MetricDelta:
        for d in self.deltas:
            if d.name == name:
                return d
        raise KeyError(name)

    def render(self) -> str:
        lines = [f"{'metric':<28}{'a':>10}{'b':>10}{'delta':>10}"]
        for d in self.deltas:
            arrow = "↑" if d.higher_is_better else "↓"
            fmt = lambda v: "-" if v is None else f"{v:.2f}"  # noqa: E731
            lines.append(f"{d.name + ' ' + arrow:<28}{fmt(d.a):>10}{fmt(d.b):>10}{fmt(d.delta):>10}")
        return "\n".join(lines)


def _delta(name, a, b, higher_is_better):
    if a is None or b is None or (isinstance(a, float) and math.isnan(a)) or (
        isinstance(b, float) and math.isnan(b)
    ):
        return MetricDelta(name, a, b, None, higher_is_better)
    return MetricDelta(name, a, b, b - a, higher_is_better)


def compare_reports(a: MetricsReport, b: MetricsReport) -> ReportDiff:
    """Deltas ``b - a`` for every metric. AP values are on the percent scale."""
    if list(a.categories) != list(b.categories):
        raise ValidationError("reports use different category sets")
    pct = lambda v: None if v is None else 100.0 * v  # noqa: E731
    deltas = [
        _delta("mean_ap", pct(a.mean_ap), pct(b.mean_ap), True),
        _delta("mean_vad_error", a.mean_vad_error, b.mean_vad_error, False),
    ]
    for dim, ea, eb in zip(VAD_DIMENSIONS, a.per_dim_vad_error, b.per_dim_vad_error):
        deltas.append(_delta(f"vad_error.{dim}", ea, eb, False))
    for name, pa, pb in zip(a.categories, a.per_category_ap, b.per_category_ap):
        deltas.append(_delta(f"ap.{name}", pct(pa), pct(pb), True))
    return ReportDiff(a.source_tag, b.source_tag, deltas)
