"""Procedural toy datasets for smoke tests and demos.

Each image is a noisy textured background with one coloured "person"
rectangle; the rectangle's colour encodes the emotion category and its VAD
values sit near a per-category centre.

    python -m emoart.synthetic OUT_DIR [--images 64] [--seed 0]
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from .dataset import DatasetManifest, ImageRecord, make_person, save_image, write_manifest

# category -> (RGB colour, VAD centre)
PALETTE = {
    "Happiness": ((0.95, 0.85, 0.10), (8.0, 6.5, 6.5)),
    "Sadness": ((0.10, 0.20, 0.85), (2.5, 3.5, 4.0)),
    "Anger": ((0.85, 0.10, 0.10), (2.5, 8.0, 7.0)),
    "Peace": ((0.10, 0.75, 0.30), (7.0, 2.5, 5.5)),
}


def make_synthetic_dataset(
    out_dir,
    n_images: int = 64,
    size: tuple[int, int] = (96, 96),
    seed: int = 0,
    split: str = "train",
    source_tag: str = "SYNTH",
    categories=tuple(PALETTE),
) -> DatasetManifest:
    """Write ``n_images`` PNGs plus ``manifest.jsonl`` into ``out_dir``.

    Categories cycle so every category gets the same number of persons.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    width, height = size
    records = []
    for i in range(n_images):
        name = categories[i % len(categories)]
        colour, vad_centre = PALETTE[name]
        ys, xs = np.mgrid[0:height, 0:width] / max(width, height)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        background = 0.45 + 0.1 * np.sin(6 * xs[..., None] + 4 * ys[..., None] + phase)
        background = background + rng.normal(0, 0.04, size=(height, width, 3))
        bw = int(rng.integers(width // 4, width // 2))
        bh = int(rng.integers(height // 3, (2 * height) // 3))
        x1 = int(rng.integers(0, width - bw))
        y1 = int(rng.integers(0, height - bh))
        image = background.copy()
        person = np.asarray(colour) + rng.normal(0, 0.03, size=(bh, bw, 3))
        image[y1 : y1 + bh, x1 : x1 + bw] = person
        path = out_dir / "images" / f"synth_{i:04d}.png"
        save_image(np.clip(image, 0, 1), path)
        vad = np.clip(np.asarray(vad_centre) + rng.normal(0, 0.3, size=3), 1.0, 10.0)
        records.append(
            ImageRecord(
                f"synth_{i:04d}",
                path.resolve(),
                width,
                height,
                (make_person([x1, y1, x1 + bw, y1 + bh], [name], vad.round(3).tolist(), width, height),),
            )
        )
    manifest = DatasetManifest(split, tuple(records), source_tag)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


def main(argv=None):
    parser = argparse.ArgumentParser(description="write a synthetic emotion dataset")
    parser.add_argument("out_dir")
    parser.add_argument("--images", type=int, default=64)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--split", default="train")
    parser.add_argument("--source-tag", default="SYNTH")
    args = parser.parse_args(argv)
    m = make_synthetic_dataset(args.out_dir, args.images, seed=args.seed, split=args.split, source_tag=args.source_tag)
    print(f"wrote {len(m)} images to {args.out_dir}/manifest.jsonl")


if __name__ == "__main__":
    main()
