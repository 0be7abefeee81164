"""Command line entry point (``emoart``).

Exit codes: 0 success, 2 validation error, 3 runtime/training error.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import harness
from .checkpoint import load_checkpoint
from .convert import SOURCE_FORMATS, convert as convert_source
from .dataset import SPLITS, write_manifest, parse_manifest
from .exceptions import EmoartError, TrainingError, ValidationError
from .metrics import MetricsReport, compare_reports
from .stylize import STYLIZERS, StyleCorpus, StylizationJob, stylize_dataset
from .weights import SCHEMES, fetch_weights


class Context:
    def __init__(self, config, seed, device, workers):
        self.config_path = config
        self.seed = seed
        self.device = device
        self.workers = workers

    def train_config(self, **overrides) -> harness.TrainConfig:
        base = harness.read_config(self.config_path) if self.config_path else harness.TrainConfig()
        return base.with_overrides(seed=self.seed, device=self.device, workers=self.workers, **overrides)


@click.group()
@click.option("--config", "config", type=click.Path(dir_okay=False), help="Flat key = value training config.")
@click.option("--seed", type=int, default=None)
@click.option("--device", default=None, help="torch device, e.g. cpu or cuda:0")
@click.option("--workers", type=int, default=None, help="data-loading / stylization workers")
@click.option("-v", "--verbose", count=True)
@click.pass_context
def main(ctx, config, seed, device, workers, verbose):
    """Emotion recognition for people in photographs and artworks."""
    logging.basicConfig(
        level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    ctx.obj = Context(config, seed, device, workers)


@main.command()
@click.option("--from", "source_format", type=click.Choice(SOURCE_FORMATS), required=True)
@click.option("--in", "in_dir", type=click.Path(file_okay=False), required=True)
@click.option("--out", "out", type=click.Path(dir_okay=False), required=True)
@click.option("--split", type=click.Choice(SPLITS), default="train", show_default=True)
@click.option("--source-tag", default=None)
def convert(source_format, in_dir, out, split, source_tag):
    """Convert external annotations into a manifest."""
    manifest = convert_source(source_format, in_dir, split, source_tag)
    write_manifest(manifest, out)
    click.echo(f"wrote {len(manifest)} records ({manifest.n_persons} persons) to {out}")


@main.command("fetch-weights")
@click.option("--backbone", type=click.Choice(["resnet18", "resnet50"]), required=True)
@click.option("--scheme", type=click.Choice(SCHEMES), required=True)
@click.option("--source", default=None, help="Local file or URL (default: the official release).")
@click.option("--weights-dir", default=None, type=click.Path(file_okay=False))
def fetch_weights_cmd(backbone, scheme, source, weights_dir):
    """Ingest pretrained trunk weights for offline use."""
    path = fetch_weights(backbone, scheme, weights_dir, source)
    click.echo(f"stored {path}")


@main.command()
@click.option("--train", "train_manifest", type=click.Path(dir_okay=False), default=None)
@click.option("--val", "val_manifest", type=click.Path(dir_okay=False), default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.pass_obj
def train(obj, train_manifest, val_manifest, epochs, out_dir):
    """Train a model and save the best checkpoint."""
    cfg = obj.train_config(
        train_manifest=str(Path(train_manifest).resolve()) if train_manifest else None,
        val_manifest=str(Path(val_manifest).resolve()) if val_manifest else None,
        epochs=epochs,
    )
    ckpt, record = harness.train(cfg, out_dir)
    last = record.epochs[-1]
    click.echo(
        f"trained {len(record.epochs)} epoch(s), final loss {last['train_loss']:.4f}, "
        f"best epoch {record.best_epoch}; checkpoint {ckpt}"
    )


@main.command()
@click.option("--checkpoint", type=click.Path(dir_okay=False, exists=True), required=True)
@click.option("--manifest", type=click.Path(dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write the report here.")
@click.option("--predominant-only", is_flag=True, help="Use only the first listed category per person.")
def evaluate(checkpoint, manifest, out, predominant_only):
    """Compute per-category AP and VAD error."""
    report = harness.evaluate(checkpoint, manifest, predominant_only)
    if out:
        report.save(out)
    click.echo(report.summary())
    for name, ap in zip(report.categories, report.per_category_ap):
        if ap is not None:
            click.echo(f"  {name:<16} AP {100 * ap:6.2f}")
    if report.excluded_categories:
        click.echo(f"  excluded (no positives): {', '.join(report.excluded_categories)}")


@main.command()
@click.option("--checkpoint", type=click.Path(dir_okay=False, exists=True), required=True)
@click.option("--manifest", type=click.Path(dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="JSON Lines output (default stdout).")
def predict(checkpoint, manifest, out):
    """Write per-person scores and VAD estimates."""
    est = load_checkpoint(checkpoint)
    m = parse_manifest(manifest)
    items = list(m.iter_persons())
    preds = est.predict(items)
    lines = []
    for (record, person), p in zip(items, preds):
        lines.append(
            json.dumps(
                {
                    "image_id": record.image_id,
                    "bbox": list(person.bbox),
                    "discrete_scores": dict(zip(est.categories_, map(float, p.discrete_scores))),
                    "vad": [float(v) for v in p.vad_pred],
                }
            )
        )
    text = "\n".join(lines) + ("\n" if lines else "")
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        click.echo(text, nl=False)


@main.command()
@click.option("--manifest", type=click.Path(dir_okay=False), required=True)
@click.option("--styles", type=click.Path(file_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--strength", type=click.FloatRange(0.0, 1.0), default=1.0, show_default=True)
@click.option("--stylizer", type=click.Choice(sorted(STYLIZERS)), default="feature_stats", show_default=True)
@click.pass_obj
def stylize(obj, manifest, styles, out_dir, strength, stylizer):
    """Build a stylized copy of a dataset (e.g. EMOTIC -> EMOTIC-s)."""
    job = StylizationJob(
        source=parse_manifest(manifest),
        styles=StyleCorpus.from_dir(styles, obj.seed or 0),
        output_dir=Path(out_dir),
        stylizer_id=stylizer,
        strength=strength,
        workers=obj.workers or 1,
    )
    result = stylize_dataset(job)
    path = write_manifest(result, Path(out_dir) / "manifest.jsonl")
    click.echo(f"stylized {len(result)} images; manifest {path}")


@main.command()
@click.option("--eval", "eval_manifests", multiple=True, required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--grid", default="inw,224b", show_default=True, help="Comma-separated toggles.")
@click.option("--train", "train_manifest", type=click.Path(dir_okay=False), default=None)
@click.option("--val", "val_manifest", type=click.Path(dir_okay=False), default=None)
@click.option("--no-reuse", is_flag=True, help="Retrain even if a run directory has a checkpoint.")
@click.pass_obj
def ablate(obj, eval_manifests, out_dir, grid, train_manifest, val_manifest, no_reuse):
    """Train/evaluate an on/off grid and print a comparison table."""
    base = obj.train_config(
        train_manifest=str(Path(train_manifest).resolve()) if train_manifest else None,
        val_manifest=str(Path(val_manifest).resolve()) if val_manifest else None,
    )
    if base.train_manifest is None:
        raise click.UsageError("no training manifest: pass --train or set train_manifest in --config")
    toggles = [t.strip().lower() for t in grid.split(",") if t.strip()]
    table = harness.run_ablation(
        harness.ablation_grid(base, toggles), eval_manifests, out_dir, reuse=not no_reuse
    )
    click.echo(table.render())


@main.command()
@click.argument("report_a", type=click.Path(dir_okay=False, exists=True))
@click.argument("report_b", type=click.Path(dir_okay=False, exists=True))
@click.option("--all", "show_all", is_flag=True, help="Include per-category AP deltas.")
def compare(report_a, report_b, show_all):
    """Show metric deltas (B - A); AP on the percent scale."""
    diff = compare_reports(MetricsReport.load(report_a), MetricsReport.load(report_b))
    if not show_all:
        diff.deltas = [d for d in diff.deltas if not d.name.startswith("ap.")]
    click.echo(f"A={diff.source_a} B={diff.source_b}")
    click.echo(diff.render())


def run(argv=None):
    """Console-script wrapper mapping exceptions to exit codes."""
    try:
        main.main(args=argv, standalone_mode=False)
    except click.exceptions.Abort:
        sys.exit(1)
    except click.ClickException as e:
        e.show()
        sys.exit(2)
    except EmoartError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(e.exit_code)
    except (OSError, RuntimeError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(TrainingError.exit_code)
    except ValueError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(ValidationError.exit_code)
    sys.exit(0)


if __name__ == "__main__":
    run()
