"""Dataset compilation: labels, slide-level split, and context geometry.

Verified patches become a manifest of labeled centrals. Splitting assigns
whole slides to train or test (no slide ever contributes to both) while
chasing the requested patch-count ratio; each central carries a g x g grid
of context cells around it, off-slide cells padded white when materialized.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .curation import SeedSet
from .slide import DEFAULT_PAD_VALUE, PatchRef, SlideRaster, read_patch

log = logging.getLogger(__name__)

CONTEXT_GRIDS = (1, 3, 5)
DEFAULT_CONTEXT_GRID = 5
SPLIT_TRAIN = "train"
SPLIT_TEST = "test"

# Slide counts up to this bound are split by exhaustive assignment search;
# beyond it a greedy largest-first pass with local refinement takes over.
EXHAUSTIVE_SPLIT_LIMIT = 16

RATIO_TOLERANCE = 0.03  # flagged when the achieved ratio misses by more


@dataclass(frozen=True, slots=True)
class ContextSpec:
    """g x g grid of cell displacements around a central patch."""

    grid: int = DEFAULT_CONTEXT_GRID
    pad_value: int = DEFAULT_PAD_VALUE

    def __post_init__(self):
        if self.grid not in CONTEXT_GRIDS:
            raise ValueError(f"context grid must be one of {CONTEXT_GRIDS}")

    @property
    def offsets(self) -> list[tuple[int, int]]:
        r = (self.grid - 1) // 2
        return [(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]

    @property
    def central_index(self) -> int:
        return (self.grid * self.grid - 1) // 2


@dataclass
class LabeledPatch:
    patch: PatchRef
    class_label: str
    split: str | None = None  # "train" | "test" | None before splitting


@dataclass
class DatasetManifest:
    organ: str
    patches: list[LabeledPatch]
    context: ContextSpec = field(default_factory=ContextSpec)
    class_list: list[str] = field(default_factory=list)
    split_seed: int | None = None
    ratio: float | None = None

    def __post_init__(self):
        labels = {lp.class_label for lp in self.patches}
        missing = labels - set(self.class_list)
        if missing:
            raise ValueError(f"labels missing from class_list: {sorted(missing)}")

    def slide_ids(self) -> list[str]:
        return sorted({lp.patch.slide_id for lp in self.patches})

    def split_patches(self, split: str) -> list[LabeledPatch]:
        return [lp for lp in self.patches if lp.split == split]


def compile_manifest(
    accepted: Iterable[tuple[PatchRef, str]],
    seeds: Sequence[SeedSet],
    context: ContextSpec | None = None,
    class_list: Sequence[str] | None = None,
) -> DatasetManifest:
    """Merge seeds with verification-accepted patches into one manifest.

    A patch accepted under two different classes is a labeling conflict and
    rejected outright. Entries are ordered by (slide_id, y, x) so repeated
    compilation is deterministic.
    """
    label_of: dict[PatchRef, str] = {}
    conflicts: list[PatchRef] = []

    def add(patch: PatchRef, label: str):
        prev = label_of.get(patch)
        if prev is not None and prev != label:
            conflicts.append(patch)
        else:
            label_of[patch] = label

    for seed_set in seeds:
        for patch in seed_set.patches:
            add(patch, seed_set.class_label)
    for patch, label in accepted:
        add(patch, label)
    if conflicts:
        listing = ", ".join(str(p) for p in sorted(set(conflicts), key=str))
        raise ValueError(f"cross-class conflict for patches: {listing}")

    organ = seeds[0].organ if seeds else "other"
    ordered = sorted(label_of.items(), key=lambda kv: (kv[0].slide_id, kv[0].y, kv[0].x))
    classes = (
        list(class_list)
        if class_list is not None
        else sorted({label for _, label in ordered})
    )
    return DatasetManifest(
        organ=organ,
        patches=[LabeledPatch(patch=p, class_label=l) for p, l in ordered],
        context=context or ContextSpec(),
        class_list=classes,
    )


def _split_objective(
    assignment: Mapping[str, str],
    slide_counts: Mapping[str, int],
    slide_class_counts: Mapping[str, Mapping[str, int]],
    ratio: float,
) -> tuple[float, float]:
    """(overall deviation, patch-weighted per-class deviation), both to minimize."""
    total = sum(slide_counts.values())
    train_total = sum(
        slide_counts[s] for s, side in assignment.items() if side == SPLIT_TRAIN
    )
    overall_dev = abs(train_total / total - ratio)

    class_totals: dict[str, int] = {}
    class_train: dict[str, int] = {}
    for s, per_class in slide_class_counts.items():
        for label, n in per_class.items():
            class_totals[label] = class_totals.get(label, 0) + n
            if assignment[s] == SPLIT_TRAIN:
                class_train[label] = class_train.get(label, 0) + n
    class_dev = 0.0
    for label, n in class_totals.items():
        frac = class_train.get(label, 0) / n
        class_dev += (n / total) * abs(frac - ratio)
    return overall_dev, class_dev


def _exhaustive_assignment(slide_ids, slide_counts, slide_class_counts, ratio):
    best = None
    best_key = None
    n = len(slide_ids)
    for bits in range(1, (1 << n) - 1):  # both splits non-empty
        assignment = {
            s: (SPLIT_TRAIN if bits & (1 << i) else SPLIT_TEST)
            for i, s in enumerate(slide_ids)
        }
        key = (*_split_objective(assignment, slide_counts, slide_class_counts, ratio), bits)
        if best_key is None or key < best_key:
            best, best_key = assignment, key
    return best


def _greedy_assignment(slide_ids, slide_counts, slide_class_counts, ratio, seed):
    rng = np.random.default_rng(seed)
    tiebreak = {s: rng.random() for s in sorted(slide_ids)}
    order = sorted(slide_ids, key=lambda s: (-slide_counts[s], tiebreak[s]))

    assignment: dict[str, str] = {}
    train = 0
    placed = 0
    total = sum(slide_counts.values())
    for s in order:
        # place where the running train fraction lands closer to the target
        frac_if_train = (train + slide_counts[s]) / (placed + slide_counts[s])
        frac_if_test = train / (placed + slide_counts[s])
        if abs(frac_if_train - ratio) <= abs(frac_if_test - ratio):
            assignment[s] = SPLIT_TRAIN
            train += slide_counts[s]
        else:
            assignment[s] = SPLIT_TEST
        placed += slide_counts[s]

    for side in (SPLIT_TRAIN, SPLIT_TEST):
        if not any(v == side for v in assignment.values()):
            smallest = min(order, key=lambda s: (slide_counts[s], s))
            assignment[smallest] = side

    # local refinement: single moves, then pairwise swaps, while they improve
    def objective(a):
        return _split_objective(a, slide_counts, slide_class_counts, ratio)

    improved = True
    while improved:
        improved = False
        current = objective(assignment)
        for s in order:
            flipped = dict(assignment)
            flipped[s] = SPLIT_TEST if assignment[s] == SPLIT_TRAIN else SPLIT_TRAIN
            if all(side in flipped.values() for side in (SPLIT_TRAIN, SPLIT_TEST)):
                cand = objective(flipped)
                if cand < current:
                    assignment, current, improved = flipped, cand, True
        for a in order:
            for b in order:
                if assignment[a] == SPLIT_TRAIN and assignment[b] == SPLIT_TEST:
                    swapped = dict(assignment)
                    swapped[a], swapped[b] = SPLIT_TEST, SPLIT_TRAIN
                    cand = objective(swapped)
                    if cand < current:
                        assignment, current, improved = swapped, cand, True
    return assignment


def split_slides(
    manifest: DatasetManifest, ratio: float, seed: int
) -> DatasetManifest:
    """Assign whole slides to train/test targeting a patch-count ratio.

    Small corpora are solved exactly over all slide assignments (both sides
    non-empty); larger ones use greedy largest-slide-first placement with
    seeded tie shuffling plus a move/swap refinement pass. Deterministic for
    a fixed seed either way. A miss beyond RATIO_TOLERANCE is logged, since
    slide granularity sometimes makes the target unreachable.
    """
    if not 0 < ratio < 1:
        raise ValueError("ratio must be in (0, 1)")
    slide_ids = manifest.slide_ids()
    if len(slide_ids) < 2:
        raise ValueError("cannot split: need at least 2 slides")

    slide_counts: dict[str, int] = {s: 0 for s in slide_ids}
    slide_class_counts: dict[str, dict[str, int]] = {s: {} for s in slide_ids}
    for lp in manifest.patches:
        s = lp.patch.slide_id
        slide_counts[s] += 1
        per = slide_class_counts[s]
        per[lp.class_label] = per.get(lp.class_label, 0) + 1

    if len(slide_ids) <= EXHAUSTIVE_SPLIT_LIMIT:
        assignment = _exhaustive_assignment(
            slide_ids, slide_counts, slide_class_counts, ratio
        )
    else:
        assignment = _greedy_assignment(
            slide_ids, slide_counts, slide_class_counts, ratio, seed
        )

    total = sum(slide_counts.values())
    train_total = sum(
        slide_counts[s] for s, side in assignment.items() if side == SPLIT_TRAIN
    )
    deviation = abs(train_total / total - ratio)
    if deviation > RATIO_TOLERANCE:
        log.warning(
            "split ratio miss: achieved %.3f vs target %.3f (slide granularity)",
            train_total / total,
            ratio,
        )

    patches = [
        LabeledPatch(
            patch=lp.patch,
            class_label=lp.class_label,
            split=assignment[lp.patch.slide_id],
        )
        for lp in manifest.patches
    ]
    return DatasetManifest(
        organ=manifest.organ,
        patches=patches,
        context=manifest.context,
        class_list=list(manifest.class_list),
        split_seed=seed,
        ratio=ratio,
    )


def context_refs(central: PatchRef, spec: ContextSpec) -> list[PatchRef]:
    """Row-major g^2 patch refs; off-slide coordinates are allowed."""
    return [
        PatchRef(
            slide_id=central.slide_id,
            x=central.x + dx * central.size,
            y=central.y + dy * central.size,
            size=central.size,
            level=central.level,
        )
        for dx, dy in spec.offsets
    ]


def materialize_context(
    slide: SlideRaster, central: PatchRef, spec: ContextSpec
) -> np.ndarray:
    """Assemble the g*size x g*size context image around a central patch."""
    g, s = spec.grid, central.size
    canvas = np.empty((g * s, g * s, 3), dtype=np.uint8)
    for i, ref in enumerate(context_refs(central, spec)):
        r, c = divmod(i, g)
        canvas[r * s : (r + 1) * s, c * s : (c + 1) * s] = read_patch(
            slide, ref, spec.pad_value
        )
    return canvas


def unique_patch_count(
    manifest: DatasetManifest,
    slide_sizes: Mapping[str, tuple[int, int]] | None = None,
) -> int:
    """Cardinality of the union of all context refs, off-slide pads excluded.

    Right/bottom bounds can only be checked when slide dimensions are known;
    without them only negative-coordinate refs are excluded.
    """
    union: set[PatchRef] = set()
    for lp in manifest.patches:
        for ref in context_refs(lp.patch, manifest.context):
            if ref.x < 0 or ref.y < 0:
                continue
            if slide_sizes is not None:
                w, h = slide_sizes[ref.slide_id]
                if ref.x + ref.size > w or ref.y + ref.size > h:
                    continue
            union.add(ref)
    return len(union)


def class_stats(
    manifest: DatasetManifest, unique_patches: int | None = None
) -> dict:
    """Per-class train/test counts plus corpus totals."""
    per_class = {
        label: {SPLIT_TRAIN: 0, SPLIT_TEST: 0, "total": 0}
        for label in manifest.class_list
    }
    train = test = 0
    for lp in manifest.patches:
        row = per_class[lp.class_label]
        row["total"] += 1
        if lp.split == SPLIT_TRAIN:
            row[SPLIT_TRAIN] += 1
            train += 1
        elif lp.split == SPLIT_TEST:
            row[SPLIT_TEST] += 1
            test += 1
    return {
        "organ": manifest.organ,
        "per_class": per_class,
        "train": train,
        "test": test,
        "total_central_patches": len(manifest.patches),
        "total_unique_patches": unique_patches,
        "total_slides": len(manifest.slide_ids()),
        "total_classes": len(manifest.class_list),
    }


def save_manifest(manifest: DatasetManifest, path) -> None:
    """Header line then one line per central patch, canonical key order."""
    with open(path, "w") as f:
        f.write(
            json.dumps(
                {
                    "organ": manifest.organ,
                    "class_list": manifest.class_list,
                    "context_grid": manifest.context.grid,
                    "pad_value": manifest.context.pad_value,
                    "split_seed": manifest.split_seed,
                    "ratio": manifest.ratio,
                },
                separators=(",", ":"),
            )
            + "\n"
        )
        for lp in manifest.patches:
            f.write(
                json.dumps(
                    {
                        "slide_id": lp.patch.slide_id,
                        "x": lp.patch.x,
                        "y": lp.patch.y,
                        "size": lp.patch.size,
                        "level": lp.patch.level,
                        "class_label": lp.class_label,
                        "split": lp.split,
                    },
                    separators=(",", ":"),
                )
                + "\n"
            )


def load_manifest(path) -> DatasetManifest:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"manifest file {path} is empty")
    header = json.loads(lines[0])
    patches = []
    for line in lines[1:]:
        if not line.strip():
            continue
        d = json.loads(line)
        patches.append(
            LabeledPatch(
                patch=PatchRef.from_dict(d),
                class_label=d["class_label"],
                split=d["split"],
            )
        )
    return DatasetManifest(
        organ=header["organ"],
        patches=patches,
        context=ContextSpec(
            grid=int(header["context_grid"]), pad_value=int(header["pad_value"])
        ),
        class_list=list(header["class_list"]),
        split_seed=header.get("split_seed"),
        ratio=header.get("ratio"),
    )
