"""Whole-slide inference: label map, colored overlay, tissue proportions.

The slide is tiled on the same non-overlapping grid used for curation,
background cells are skipped via the slide-level Otsu verdict, and every
tissue cell is classified with its surrounding context grid. Aggregating
the per-cell labels gives a coarse segmentation mask and per-class area
fractions.
"""

from __future__ import annotations

import colorsys
import io
import json
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from .dataset import ContextSpec, context_refs
from .embedder import Embedder
from .model import HeadModel, head_forward, softmax_probs
from .slide import (
    PATCH_SIZE,
    PatchRef,
    SlideRaster,
    classify_tissue,
    grid_patches,
    otsu_threshold,
    read_patch,
    slide_histogram,
)

BACKGROUND = -1

LEGEND_ROW_HEIGHT = 20
LEGEND_SWATCH_WIDTH = 28


@dataclass
class LabelMap:
    slide_id: str
    patch_size: int
    class_list: list[str]
    cells: np.ndarray  # rows x cols int16, class index or BACKGROUND
    confidences: np.ndarray  # rows x cols float32, 0.0 on background cells

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.int16)
        self.confidences = np.asarray(self.confidences, dtype=np.float32)
        if self.cells.shape != self.confidences.shape or self.cells.ndim != 2:
            raise ValueError("cells and confidences must share a 2-D shape")
        tissue = self.cells != BACKGROUND
        if tissue.any():
            conf = self.confidences[tissue]
            if (conf <= 0).any() or (conf > 1).any():
                raise ValueError("tissue confidences must lie in (0, 1]")

    @property
    def rows(self) -> int:
        return self.cells.shape[0]

    @property
    def cols(self) -> int:
        return self.cells.shape[1]


@dataclass
class ProportionReport:
    fractions: dict[str, float]
    tissue_patch_count: int
    background_patch_count: int


def segment_slide(
    slide: SlideRaster,
    model: HeadModel,
    class_list: list[str],
    embedder: Embedder,
    context: ContextSpec | None = None,
) -> LabelMap:
    """Classify every tissue cell of the slide grid with its context.

    Context cells are embedded once per run (shared between neighboring
    centrals, off-slide cells padded), so the output is independent of the
    cell visit order.
    """
    context = context or ContextSpec()
    if embedder.dim != model.config.embed_dim:
        raise ValueError(
            f"embedder dim {embedder.dim} does not match checkpoint embed_dim "
            f"{model.config.embed_dim}"
        )
    if len(class_list) != model.config.num_classes:
        raise ValueError("class list does not match checkpoint num_classes")
    size = PATCH_SIZE
    grid = grid_patches(slide, size)
    rows = slide.height // size
    cols = slide.width // size
    cells = np.full((rows, cols), BACKGROUND, dtype=np.int16)
    confidences = np.zeros((rows, cols), dtype=np.float32)
    if not grid:
        return LabelMap(slide.slide_id, size, list(class_list), cells, confidences)

    threshold = otsu_threshold(slide_histogram(slide))
    tissue = [
        ref for ref in grid if classify_tissue(slide, ref, threshold).is_tissue
    ]

    needed: list[PatchRef] = []
    seen: set[tuple[int, int]] = set()
    for ref in tissue:
        for cell in context_refs(ref, context):
            key = (cell.x, cell.y)
            if key not in seen:
                seen.add(key)
                needed.append(cell)
    blocks = [read_patch(slide, cell, pad_value=context.pad_value) for cell in needed]
    vectors = embedder.embed_blocks(blocks) if blocks else []
    memo = {(cell.x, cell.y): vec for cell, vec in zip(needed, vectors)}

    for ref in tissue:
        tokens = np.stack([memo[(c.x, c.y)] for c in context_refs(ref, context)])
        logits, _ = head_forward(model, tokens)
        idx = int(np.argmax(logits))
        r, c = ref.y // size, ref.x // size
        cells[r, c] = idx
        confidences[r, c] = softmax_probs(logits)[idx]
    return LabelMap(slide.slide_id, size, list(class_list), cells, confidences)


def default_palette(class_list: list[str]) -> dict[str, tuple[int, int, int]]:
    """Evenly spaced hues around the color wheel, one per class."""
    k = len(class_list)
    palette = {}
    for i, label in enumerate(class_list):
        r, g, b = colorsys.hsv_to_rgb(i / k if k else 0.0, 0.85, 1.0)
        palette[label] = (round(r * 255), round(g * 255), round(b * 255))
    return palette


def render_overlay(
    slide: SlideRaster,
    label_map: LabelMap,
    palette: dict[str, tuple[int, int, int]] | None = None,
    alpha: float = 0.4,
) -> bytes:
    """PNG of the slide with class-tinted tissue cells and a legend strip.

    Pure function of its inputs; at alpha 0 the slide pixels pass through
    unchanged (uint8 to float64 and back is exact).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    palette = default_palette(label_map.class_list) if palette is None else palette
    missing = [c for c in label_map.class_list if c not in palette]
    if missing:
        raise ValueError(f"palette missing entry for classes: {missing}")

    size = label_map.patch_size
    out = slide.pixels.astype(np.float64)
    for r in range(label_map.rows):
        for c in range(label_map.cols):
            idx = int(label_map.cells[r, c])
            if idx == BACKGROUND:
                continue
            color = np.array(palette[label_map.class_list[idx]], dtype=np.float64)
            block = out[r * size : (r + 1) * size, c * size : (c + 1) * size]
            block *= 1.0 - alpha
            block += alpha * color
    body = np.clip(np.rint(out), 0, 255).astype(np.uint8)

    legend_h = LEGEND_ROW_HEIGHT * max(1, len(label_map.class_list))
    legend = Image.new("RGB", (slide.width, legend_h), (255, 255, 255))
    draw = ImageDraw.Draw(legend)
    for i, label in enumerate(label_map.class_list):
        y0 = i * LEGEND_ROW_HEIGHT
        draw.rectangle(
            [2, y0 + 2, LEGEND_SWATCH_WIDTH, y0 + LEGEND_ROW_HEIGHT - 3],
            fill=palette[label],
            outline=(0, 0, 0),
        )
        draw.text((LEGEND_SWATCH_WIDTH + 6, y0 + 4), label, fill=(0, 0, 0))

    canvas = Image.new("RGB", (slide.width, slide.height + legend_h))
    canvas.paste(Image.fromarray(body), (0, 0))
    canvas.paste(legend, (0, slide.height))
    buf = io.BytesIO()
    canvas.save(buf, format="PNG")
    return buf.getvalue()


def proportions(label_map: LabelMap) -> ProportionReport:
    """Per-class fractions over tissue cells (background is not a class)."""
    flat = label_map.cells.ravel()
    background = int(np.count_nonzero(flat == BACKGROUND))
    tissue = flat.size - background
    fractions = {}
    for i, label in enumerate(label_map.class_list):
        count = int(np.count_nonzero(flat == i))
        fractions[label] = count / tissue if tissue else 0.0
    return ProportionReport(
        fractions=fractions,
        tissue_patch_count=tissue,
        background_patch_count=background,
    )


def labels_payload(label_map: LabelMap) -> dict:
    return {
        "grid": [label_map.rows, label_map.cols],
        "classes": list(label_map.class_list),
        "cells": label_map.cells.tolist(),
        "confidences": [
            [round(float(v), 6) for v in row] for row in label_map.confidences
        ],
    }


def save_labels(label_map: LabelMap, path) -> None:
    with open(path, "w") as f:
        json.dump(labels_payload(label_map), f, indent=2, sort_keys=True)
        f.write("\n")
