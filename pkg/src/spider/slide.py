"""Slide rasters, polygon masks, patch grids, and tissue filtering.

A slide is a flat RGB image plus a JSON sidecar carrying its id, organ tag
and microns-per-pixel. Patches are addressed by `PatchRef`, the key that
every later stage (embedding, retrieval, verification, training) joins on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

PATCH_SIZE = 224
DEFAULT_LEVEL = "20X"
DEFAULT_PAD_VALUE = 255
DEFAULT_MIN_COVERAGE = 0.5

# A patch counts as background when at least this fraction of its pixels is
# at least as bright as the slide-level Otsu threshold. Counting the
# threshold value itself as bright keeps degenerate single-value slides
# (threshold == the lone value) classified as background.
BACKGROUND_BRIGHT_FRACTION = 0.9

ORGANS = ("skin", "colorectal", "thorax", "breast", "other")

SLIDE_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass(frozen=True, slots=True)
class PatchRef:
    """Coordinate of one square patch: (slide, top-left corner, size, level)."""

    slide_id: str
    x: int
    y: int
    size: int = PATCH_SIZE
    level: str = DEFAULT_LEVEL

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError(f"patch size must be positive, got {self.size}")

    def to_dict(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "x": self.x,
            "y": self.y,
            "size": self.size,
            "level": self.level,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PatchRef":
        return cls(
            slide_id=str(d["slide_id"]),
            x=int(d["x"]),
            y=int(d["y"]),
            size=int(d.get("size", PATCH_SIZE)),
            level=str(d.get("level", DEFAULT_LEVEL)),
        )


@dataclass
class SlideRaster:
    """In-memory RGB slide with identity and acquisition metadata."""

    slide_id: str
    pixels: np.ndarray  # H x W x 3, uint8
    mpp: float | None = None
    organ: str = "other"

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError("slide pixels must be H x W x 3")
        if self.height < 1 or self.width < 1:
            raise ValueError("slide must be at least 1 x 1")
        if self.organ not in ORGANS:
            raise ValueError(f"unknown organ {self.organ!r}, expected one of {ORGANS}")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass
class RegionMask:
    """Polygon annotation delineating one class region on a slide."""

    slide_id: str
    class_label: str
    polygons: list[list[tuple[float, float]]]

    def __post_init__(self):
        if not self.polygons:
            raise ValueError("mask must contain at least one polygon")
        for poly in self.polygons:
            if len(poly) < 3:
                raise ValueError("mask polygons need at least 3 vertices")


@dataclass(frozen=True, slots=True)
class TissueVerdict:
    patch: PatchRef
    bright_fraction: float
    is_tissue: bool


def load_slide(image_path: str | Path) -> SlideRaster:
    """Load a flat slide image with its `<stem>.json` metadata sidecar."""
    image_path = Path(image_path)
    sidecar = image_path.with_suffix(".json")
    if not sidecar.exists():
        raise FileNotFoundError(f"missing slide sidecar {sidecar}")
    meta = json.loads(sidecar.read_text())
    pixels = np.asarray(Image.open(image_path).convert("RGB"))
    return SlideRaster(
        slide_id=str(meta["slide_id"]),
        pixels=pixels,
        mpp=None if meta.get("mpp") is None else float(meta["mpp"]),
        organ=str(meta.get("organ", "other")),
    )


def save_slide(slide: SlideRaster, image_path: str | Path) -> None:
    image_path = Path(image_path)
    Image.fromarray(slide.pixels).save(image_path)
    sidecar = image_path.with_suffix(".json")
    sidecar.write_text(
        json.dumps({"slide_id": slide.slide_id, "organ": slide.organ, "mpp": slide.mpp})
        + "\n"
    )


def load_mask(path: str | Path) -> RegionMask:
    """Load a polygon mask JSON: {slide_id, class_label, polygons: [[[x,y],...],...]}."""
    d = json.loads(Path(path).read_text())
    polygons = [[(float(x), float(y)) for x, y in poly] for poly in d["polygons"]]
    return RegionMask(
        slide_id=str(d["slide_id"]),
        class_label=str(d["class_label"]),
        polygons=polygons,
    )


class SlideStore:
    """Lazy directory-backed lookup of slides by id.

    Scans sidecar JSONs once; image pixels are decoded on first access and
    kept in memory (slides are immutable after load).
    """

    def __init__(self, slides_dir: str | Path):
        self.slides_dir = Path(slides_dir)
        self._paths: dict[str, Path] = {}
        self._loaded: dict[str, SlideRaster] = {}
        for image_path in sorted(self.slides_dir.iterdir()):
            if image_path.suffix.lower() not in SLIDE_IMAGE_SUFFIXES:
                continue
            sidecar = image_path.with_suffix(".json")
            if not sidecar.exists():
                continue
            meta = json.loads(sidecar.read_text())
            self._paths[str(meta["slide_id"])] = image_path

    def slide_ids(self) -> list[str]:
        return sorted(self._paths)

    def __contains__(self, slide_id: str) -> bool:
        return slide_id in self._paths

    def get(self, slide_id: str) -> SlideRaster:
        if slide_id not in self._loaded:
            if slide_id not in self._paths:
                raise KeyError(f"unknown slide {slide_id!r}")
            self._loaded[slide_id] = load_slide(self._paths[slide_id])
        return self._loaded[slide_id]


def grayscale_u8(pixels: np.ndarray) -> np.ndarray:
    """Integer Rec.601 luma: floor(0.299 R + 0.587 G + 0.114 B + 0.5).

    Rounding is half-away-from-zero on non-negative input, which keeps the
    conversion bit-exact across platforms.
    """
    rgb = pixels.astype(np.float64)
    y = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.floor(y + 0.5).astype(np.uint8)


def slide_histogram(slide: SlideRaster) -> np.ndarray:
    """256-bin grayscale histogram over the whole slide."""
    gray = grayscale_u8(slide.pixels)
    return np.bincount(gray.ravel(), minlength=256)


def otsu_threshold(histogram: Sequence[int] | np.ndarray) -> int:
    """Threshold maximizing between-class variance of {<= t} vs {> t}.

    Ties are broken toward the smallest t. The comparison is done in exact
    integer arithmetic (the variance is a ratio of integers once the constant
    total^2 factor is dropped), so the argmax is reproducible bit-for-bit.
    A single populated bin has no two-class split; its bin value is returned.
    """
    h = [int(c) for c in histogram]
    if len(h) != 256:
        raise ValueError(f"histogram must have 256 bins, got {len(h)}")
    if any(c < 0 for c in h):
        raise ValueError("histogram counts must be non-negative")
    populated = [v for v, c in enumerate(h) if c > 0]
    if not populated:
        raise ValueError("empty histogram")
    if len(populated) == 1:
        return populated[0]

    total = sum(h)
    total_sum = sum(v * c for v, c in enumerate(h))

    best_t = 0
    best_num = -1  # variance numerator (S0*w1 - S1*w0)^2
    best_den = 1  # variance denominator w0*w1
    w0 = 0
    s0 = 0
    for t in range(256):
        w0 += h[t]
        s0 += t * h[t]
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            num, den = 0, 1
        else:
            d = s0 * w1 - (total_sum - s0) * w0
            num, den = d * d, w0 * w1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def grid_patches(slide: SlideRaster, size: int = PATCH_SIZE) -> list[PatchRef]:
    """Non-overlapping patch grid in row-major order; edge strips are dropped."""
    if size < 1:
        raise ValueError("patch size must be >= 1")
    cols = slide.width // size
    rows = slide.height // size
    return [
        PatchRef(slide.slide_id, x=c * size, y=r * size, size=size)
        for r in range(rows)
        for c in range(cols)
    ]


def classify_tissue(
    slide: SlideRaster, patch: PatchRef, slide_threshold: int
) -> TissueVerdict:
    """Tissue/background verdict for one fully in-bounds patch.

    bright_fraction is the share of patch pixels whose grayscale value is at
    or above the slide-level threshold; the patch is background when that
    share reaches BACKGROUND_BRIGHT_FRACTION.
    """
    if (
        patch.x < 0
        or patch.y < 0
        or patch.x + patch.size > slide.width
        or patch.y + patch.size > slide.height
    ):
        raise ValueError(f"patch out of slide bounds: {patch}")
    block = slide.pixels[patch.y : patch.y + patch.size, patch.x : patch.x + patch.size]
    gray = grayscale_u8(block)
    bright_fraction = float(np.count_nonzero(gray >= slide_threshold)) / gray.size
    return TissueVerdict(
        patch=patch,
        bright_fraction=bright_fraction,
        is_tissue=bright_fraction < BACKGROUND_BRIGHT_FRACTION,
    )


def rasterize_polygons(
    polygons: Iterable[Sequence[tuple[float, float]]], width: int, height: int
) -> np.ndarray:
    """Pixel-center scanline fill (even-odd rule) of a polygon union.

    Pixel (i, j) is set when its center (i + 0.5, j + 0.5) lies inside any
    polygon. Edges exactly on a scanline follow the half-open convention
    (min_y <= y < max_y), which keeps shared edges from double-counting.
    """
    mask = np.zeros((height, width), dtype=bool)
    for poly in polygons:
        pts = [(float(x), float(y)) for x, y in poly]
        if pts[0] == pts[-1]:
            pts = pts[:-1]
        n = len(pts)
        edges = [(pts[i], pts[(i + 1) % n]) for i in range(n)]
        for j in range(height):
            yc = j + 0.5
            xs = []
            for (x1, y1), (x2, y2) in edges:
                if y1 == y2:
                    continue
                if min(y1, y2) <= yc < max(y1, y2):
                    xs.append(x1 + (yc - y1) * (x2 - x1) / (y2 - y1))
            if not xs:
                continue
            xs.sort()
            row = mask[j]
            for a, b in zip(xs[0::2], xs[1::2]):
                lo = max(0, int(np.ceil(a - 0.5)))
                hi = min(width, int(np.ceil(b - 0.5)))
                if hi > lo:
                    row[lo:hi] = True
    return mask


def mask_patches(
    slide: SlideRaster,
    mask: RegionMask,
    size: int = PATCH_SIZE,
    min_coverage: float = DEFAULT_MIN_COVERAGE,
) -> list[PatchRef]:
    """Grid patches whose rasterized coverage by the mask is >= min_coverage."""
    if mask.slide_id != slide.slide_id:
        raise ValueError(
            f"slide mismatch: mask is for {mask.slide_id!r}, slide is {slide.slide_id!r}"
        )
    if not 0 < min_coverage <= 1:
        raise ValueError("min_coverage must be in (0, 1]")
    region = rasterize_polygons(mask.polygons, slide.width, slide.height)
    cols = slide.width // size
    rows = slide.height // size
    if rows == 0 or cols == 0:
        return []
    counts = (
        region[: rows * size, : cols * size]
        .reshape(rows, size, cols, size)
        .sum(axis=(1, 3))
    )
    cell_area = size * size
    out = []
    for r in range(rows):
        for c in range(cols):
            if counts[r, c] / cell_area >= min_coverage:
                out.append(PatchRef(slide.slide_id, x=c * size, y=r * size, size=size))
    return out


def read_patch(
    slide: SlideRaster, patch: PatchRef, pad_value: int = DEFAULT_PAD_VALUE
) -> np.ndarray:
    """size x size x 3 pixel block; anything outside the slide is pad_value."""
    s = patch.size
    block = np.full((s, s, 3), pad_value, dtype=np.uint8)
    x0 = max(patch.x, 0)
    y0 = max(patch.y, 0)
    x1 = min(patch.x + s, slide.width)
    y1 = min(patch.y + s, slide.height)
    if x1 > x0 and y1 > y0:
        block[y0 - patch.y : y1 - patch.y, x0 - patch.x : x1 - patch.x] = slide.pixels[
            y0:y1, x0:x1
        ]
    return block
