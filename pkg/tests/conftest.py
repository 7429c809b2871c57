"""Shared fixtures: tiny synthetic slides, embedding caches, and manifests.

Slides are built from two visually distinct procedural textures (soft
horizontal ribbons and dark specks on a light field) plus plain white for
background regions, so tissue filtering, retrieval, and classification all
have real signal to work with at desk scale.
"""

import numpy as np
import pytest

from spider.dataset import ContextSpec, DatasetManifest, LabeledPatch
from spider.embedder import EmbeddingCache
from spider.slide import PATCH_SIZE, PatchRef, SlideRaster

# Verdict lines pushed by the acceptance tests; echoed after the run since
# pytest's fd capture would swallow them mid-test.
ACCEPTANCE_VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_VERDICTS:
            terminalreporter.write_line(line)


def ribbons_texture(n: int, seed: int = 0) -> np.ndarray:
    """Soft pink horizontal bands, vaguely stroma-like."""
    rng = np.random.default_rng(seed)
    y = np.arange(n)[:, None] + np.zeros((1, n))
    wave = 0.5 + 0.5 * np.sin(y / 9.0)
    base = np.empty((n, n, 3), dtype=np.float64)
    base[..., 0] = 205 + 40 * wave
    base[..., 1] = 120 + 60 * wave
    base[..., 2] = 160 + 50 * wave
    base += rng.normal(0, 6, size=base.shape)
    return np.clip(base, 0, 255).astype(np.uint8)


def specks_texture(n: int, seed: int = 1) -> np.ndarray:
    """Dark violet nuclei-like dots on a pale field."""
    rng = np.random.default_rng(seed)
    img = np.full((n, n, 3), (225, 205, 225), dtype=np.float64)
    for _ in range(max(1, (n * n) // 160)):
        cy, cx = rng.integers(0, n, size=2)
        r = int(rng.integers(2, 5))
        yy, xx = np.ogrid[:n, :n]
        disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[disk] = (70, 40, 110)
    img += rng.normal(0, 5, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


TEXTURES = {"ribbons": ribbons_texture, "specks": specks_texture}


def build_slide(
    slide_id: str,
    cell_kinds: list[list[str]],
    size: int = PATCH_SIZE,
    organ: str = "skin",
    seed: int = 0,
) -> SlideRaster:
    """Compose a slide from a grid of texture names ("white" for background)."""
    rows, cols = len(cell_kinds), len(cell_kinds[0])
    pixels = np.full((rows * size, cols * size, 3), 255, dtype=np.uint8)
    for r, row in enumerate(cell_kinds):
        for c, kind in enumerate(row):
            if kind == "white":
                continue
            tex = TEXTURES[kind](size, seed=seed + 7 * r + c)
            pixels[r * size : (r + 1) * size, c * size : (c + 1) * size] = tex
    return SlideRaster(slide_id=slide_id, pixels=pixels, mpp=0.5, organ=organ)


@pytest.fixture
def white_slide() -> SlideRaster:
    n = 2 * PATCH_SIZE
    return SlideRaster(
        slide_id="white", pixels=np.full((n, n, 3), 255, dtype=np.uint8), organ="skin"
    )


@pytest.fixture
def textured_slide() -> SlideRaster:
    return build_slide(
        "tex0",
        [
            ["ribbons", "ribbons", "specks"],
            ["ribbons", "specks", "specks"],
            ["white", "white", "white"],
        ],
    )


def lattice_central(slide_id: str, i: int, j: int, size: int = PATCH_SIZE) -> PatchRef:
    """Centrals spaced five cells apart, so 5 x 5 contexts never overlap."""
    return PatchRef(slide_id=slide_id, x=(5 * i + 2) * size, y=(5 * j + 2) * size, size=size)


def build_manifest_and_cache(
    n_slides: int,
    per_slide: int,
    class_list: list[str],
    dim: int,
    seed: int = 0,
    grid: int = 1,
    train_slides: int | None = None,
    signal: float = 1.0,
    noise: float = 0.05,
) -> tuple[DatasetManifest, EmbeddingCache]:
    """Synthetic labeled corpus with class-prototype central embeddings.

    Classes cycle across each slide's centrals; every slide sees every class
    so a slide-level split cannot starve one. Prototypes are orthogonal
    one-hot blocks scaled by `signal` plus N(0, noise) jitter. With grid > 1
    the non-central context cells get pure noise.
    """
    rng = np.random.default_rng(seed)
    k = len(class_list)
    block = dim // k
    cache = EmbeddingCache(dim=dim)
    patches = []
    spec = ContextSpec(grid=grid)
    cut = n_slides if train_slides is None else train_slides
    for s in range(n_slides):
        slide_id = f"s{s:03d}"
        split = "train" if s < cut else "test"
        for p in range(per_slide):
            label_idx = p % k
            central = lattice_central(slide_id, p % 8, p // 8)
            patches.append(
                LabeledPatch(
                    patch=central,
                    class_label=class_list[label_idx],
                    split=split if train_slides is not None else None,
                )
            )
            from spider.dataset import context_refs

            for idx, ref in enumerate(context_refs(central, spec)):
                vec = rng.normal(0, noise, size=dim)
                if idx == spec.central_index:
                    vec[label_idx * block : (label_idx + 1) * block] += signal
                cache.put(ref, vec)
    manifest = DatasetManifest(
        organ="skin",
        patches=patches,
        context=spec,
        class_list=list(class_list),
        split_seed=seed if train_slides is not None else None,
        ratio=None,
    )
    return manifest, cache
