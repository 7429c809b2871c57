"""Fixture corpus for review-client end-to-end tests.

Writes one textured slide and a single candidate queue with an exact
candidate count, so a test (or a person poking at the UI) can drive a
complete review session against `spider serve`:

    python3 scripts/make_review_fixture.py --out /tmp/fix --candidates 20
    spider serve --queues /tmp/fix/queues --slides /tmp/fix/slides
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from spider.curation import Candidate, CandidateQueue, save_queue
from spider.slide import PATCH_SIZE, PatchRef, SlideRaster, save_slide


def cell_texture(n: int, rng, hue: int) -> np.ndarray:
    """Distinct-looking cell: tinted gradient plus noise, hue-rotated."""
    ramp = np.linspace(60, 200, n)
    base = np.empty((n, n, 3))
    base[..., (hue + 0) % 3] = ramp[None, :]
    base[..., (hue + 1) % 3] = ramp[:, None]
    base[..., (hue + 2) % 3] = 120
    base += rng.normal(0, 12, size=base.shape)
    return np.clip(base, 0, 255).astype(np.uint8)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--candidates", type=int, default=20)
    ap.add_argument("--class-label", default="lesion")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if args.candidates < 1:
        ap.error("--candidates must be >= 1")

    root = Path(args.out)
    (root / "slides").mkdir(parents=True, exist_ok=True)
    (root / "queues").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)

    cols = 5
    rows = -(-args.candidates // cols)
    n = PATCH_SIZE
    pixels = np.full((rows * n, cols * n, 3), 255, dtype=np.uint8)
    candidates = []
    for i in range(args.candidates):
        r, c = divmod(i, cols)
        pixels[r * n : (r + 1) * n, c * n : (c + 1) * n] = cell_texture(n, rng, i % 3)
        candidates.append(
            Candidate(
                patch=PatchRef("fixture000", x=c * n, y=r * n),
                score=round(1.0 - 0.01 * i, 4),
            )
        )

    slide = SlideRaster(slide_id="fixture000", pixels=pixels, mpp=0.5, organ="skin")
    save_slide(slide, root / "slides" / "fixture000.png")
    save_queue(
        CandidateQueue(class_label=args.class_label, candidates=candidates),
        root / "queues" / f"{args.class_label}.jsonl",
    )
    print(
        f"wrote 1 slide ({rows}x{cols} cells) and a {args.candidates}-candidate "
        f"'{args.class_label}' queue under {root}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
