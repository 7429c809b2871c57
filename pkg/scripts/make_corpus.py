"""Generate a small synthetic slide corpus for pipeline demos.

Writes a directory tree the CLI can consume end to end:

    <out>/slides/  PNG rasters with JSON sidecars
    <out>/masks/   rectangle polygon masks over known texture regions
    <out>/seeds/   per-class seed patches derived from those masks

Slides are mosaics of 224x224 cells drawn from two procedural "tissue"
textures plus plain white. Every slide keeps a white column so the
per-slide Otsu threshold lands between background and tissue instead of
between the two textures.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from spider.curation import SeedSet, save_seeds
from spider.slide import PATCH_SIZE, RegionMask, SlideRaster, mask_patches, save_slide


def ribbons(n: int, rng) -> np.ndarray:
    y = np.arange(n)[:, None] + np.zeros((1, n))
    wave = 0.5 + 0.5 * np.sin(y / 8.0)
    cell = np.empty((n, n, 3))
    cell[..., 0] = 200 + 45 * wave
    cell[..., 1] = 115 + 65 * wave
    cell[..., 2] = 155 + 55 * wave
    cell += rng.normal(0, 7, size=cell.shape)
    return np.clip(cell, 0, 255).astype(np.uint8)


def specks(n: int, rng) -> np.ndarray:
    cell = np.full((n, n, 3), 225.0)
    for _ in range(n * n // 110):
        cx, cy, r = rng.integers(0, n), rng.integers(0, n), rng.integers(3, 8)
        yy, xx = np.ogrid[:n, :n]
        blob = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        cell[blob] = (95 + rng.normal(0, 10), 60 + rng.normal(0, 10), 130 + rng.normal(0, 10))
    cell += rng.normal(0, 5, size=cell.shape)
    return np.clip(cell, 0, 255).astype(np.uint8)


PAINTERS = {"rib": ribbons, "spk": specks}

# Slides 0 and 1 have fixed layouts so the mask rectangles below always
# cover the intended texture; later slides are shuffled per seed.
FIXED_LAYOUTS = [
    [["rib", "rib", "white"], ["spk", "spk", "white"], ["rib", "spk", "white"]],
    [["spk", "spk", "white"], ["rib", "rib", "white"], ["spk", "rib", "white"]],
]

# class -> (slide index, cell row, column span) for a 2-cell rectangle mask
MASK_CELLS = {"rib": (0, 0), "spk": (0, 1)}


def build_pixels(layout, rng) -> np.ndarray:
    n = PATCH_SIZE
    pixels = np.full((len(layout) * n, len(layout[0]) * n, 3), 255, dtype=np.uint8)
    for r, row in enumerate(layout):
        for c, kind in enumerate(row):
            if kind != "white":
                pixels[r * n : (r + 1) * n, c * n : (c + 1) * n] = PAINTERS[kind](n, rng)
    return pixels


def random_layout(rng) -> list[list[str]]:
    layout = [[str(rng.choice(["rib", "spk"])) for _ in range(2)] + ["white"] for _ in range(3)]
    # guarantee both textures somewhere on the slide
    flat = [k for row in layout for k in row]
    if "rib" not in flat:
        layout[0][0] = "rib"
    if "spk" not in flat:
        layout[1][0] = "spk"
    return layout


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, help="corpus root directory")
    ap.add_argument("--slides", type=int, default=8)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args(argv)

    if args.slides < 2:
        ap.error("--slides must be >= 2 (slide-level splitting needs both sides)")
    root = Path(args.out)
    for sub in ("slides", "masks", "seeds"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)

    store = {}
    for s in range(args.slides):
        layout = FIXED_LAYOUTS[s] if s < len(FIXED_LAYOUTS) else random_layout(rng)
        slide = SlideRaster(
            slide_id=f"slide{s:03d}", pixels=build_pixels(layout, rng),
            mpp=0.5, organ="skin",
        )
        save_slide(slide, root / "slides" / f"{slide.slide_id}.png")
        store[slide.slide_id] = slide

    total_seeds = 0
    for label, (slide_idx, row) in MASK_CELLS.items():
        slide = store[f"slide{slide_idx:03d}"]
        x0, y0 = 0, row * PATCH_SIZE
        x1, y1 = 2 * PATCH_SIZE, (row + 1) * PATCH_SIZE
        mask = RegionMask(
            slide_id=slide.slide_id, class_label=label,
            polygons=[[(x0, y0), (x1, y0), (x1, y1), (x0, y1)]],
        )
        (root / "masks" / f"{label}.json").write_text(
            json.dumps(
                {"slide_id": mask.slide_id, "class_label": label,
                 "polygons": [[[x, y] for x, y in poly] for poly in mask.polygons]},
                indent=2,
            )
            + "\n"
        )
        patches = mask_patches(slide, mask)
        save_seeds(
            SeedSet(class_label=label, organ="skin", patches=patches),
            root / "seeds" / f"{label}.jsonl",
        )
        total_seeds += len(patches)

    print(
        f"wrote {args.slides} slides, {len(MASK_CELLS)} masks, "
        f"{total_seeds} seed patches under {root}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
