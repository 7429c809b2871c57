"""Seed expansion by similarity retrieval and per-class candidate queues.

A small expert-annotated seed set per class is queried against the corpus
index; the union of neighbors (minus the seeds themselves and anything that
failed the tissue filter) becomes a review queue ordered best-first so that
likely positives reach reviewers early.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .slide import PatchRef
from .vindex import METRIC_L2, VectorIndex

DEFAULT_K_PER_SEED = 50
DEFAULT_CAP = 20_000

STATUS_PENDING = "pending"
STATUS_ACCEPTED = "accepted"
STATUS_REJECTED = "rejected"
STATUSES = (STATUS_PENDING, STATUS_ACCEPTED, STATUS_REJECTED)


@dataclass
class SeedSet:
    class_label: str
    organ: str
    patches: list[PatchRef]

    def __post_init__(self):
        if not self.patches:
            raise ValueError(f"empty seed set for class {self.class_label!r}")


@dataclass
class Candidate:
    patch: PatchRef
    score: float
    status: str = STATUS_PENDING
    patch_id: int = 0  # index id, used only for deterministic tie ordering

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"malformed status {self.status!r}")


@dataclass
class CandidateQueue:
    class_label: str
    candidates: list[Candidate] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for cand in self.candidates:
            if cand.patch in seen:
                raise ValueError(f"duplicate candidate {cand.patch}")
            seen.add(cand.patch)

    def __len__(self) -> int:
        return len(self.candidates)

    def find(self, patch: PatchRef) -> Candidate | None:
        for cand in self.candidates:
            if cand.patch == patch:
                return cand
        return None


def retrieve_candidates(
    seeds: SeedSet,
    index: VectorIndex,
    embeddings: Mapping[PatchRef, np.ndarray],
    k_per_seed: int = DEFAULT_K_PER_SEED,
    cap: int = DEFAULT_CAP,
    is_tissue: Callable[[PatchRef], bool] | None = None,
) -> CandidateQueue:
    """Union of top-k neighbors over all seeds, deduplicated at best score.

    Queue scores are similarity-oriented: cosine similarity as-is, negated
    distance for L2 indexes, so descending score is always best-first.
    Candidates are ordered by descending score, then ascending patch id, and
    truncated to `cap`.
    """
    if k_per_seed < 1:
        raise ValueError("k_per_seed must be >= 1")
    seed_keys = set(seeds.patches)
    best: dict[PatchRef, tuple[float, int]] = {}
    for seed in seeds.patches:
        if seed not in embeddings:
            raise KeyError(f"no embedding for seed patch {seed}")
        for nb in index.query(embeddings[seed], k_per_seed):
            ref = index.patch_for(nb.patch_id)
            if ref in seed_keys:
                continue
            if is_tissue is not None and not is_tissue(ref):
                continue
            score = -nb.score if index.metric == METRIC_L2 else nb.score
            prev = best.get(ref)
            if prev is None or score > prev[0]:
                best[ref] = (score, nb.patch_id)
    ordered = sorted(best.items(), key=lambda kv: (-kv[1][0], kv[1][1]))[:cap]
    return CandidateQueue(
        class_label=seeds.class_label,
        candidates=[
            Candidate(patch=ref, score=score, patch_id=pid)
            for ref, (score, pid) in ordered
        ],
    )


def queue_stats(queue: CandidateQueue) -> dict:
    counts = {STATUS_PENDING: 0, STATUS_ACCEPTED: 0, STATUS_REJECTED: 0}
    for cand in queue.candidates:
        counts[cand.status] += 1
    decided = counts[STATUS_ACCEPTED] + counts[STATUS_REJECTED]
    rate = counts[STATUS_ACCEPTED] / decided if decided else None
    return {
        "pending": counts[STATUS_PENDING],
        "accepted": counts[STATUS_ACCEPTED],
        "rejected": counts[STATUS_REJECTED],
        "total": len(queue),
        "acceptance_rate": rate,
    }


def save_queue(queue: CandidateQueue, path) -> None:
    """One candidate per line: {class_label, slide_id, x, y, size, score, status}."""
    with open(path, "w") as f:
        for cand in queue.candidates:
            f.write(
                json.dumps(
                    {
                        "class_label": queue.class_label,
                        "slide_id": cand.patch.slide_id,
                        "x": cand.patch.x,
                        "y": cand.patch.y,
                        "size": cand.patch.size,
                        "score": cand.score,
                        "status": cand.status,
                    },
                    separators=(",", ":"),
                )
                + "\n"
            )


def load_queue(path) -> CandidateQueue:
    candidates = []
    class_label = None
    for i, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        d = json.loads(line)
        if class_label is None:
            class_label = d["class_label"]
        elif d["class_label"] != class_label:
            raise ValueError(f"mixed class labels in queue file {path}")
        candidates.append(
            Candidate(
                patch=PatchRef(
                    slide_id=d["slide_id"], x=int(d["x"]), y=int(d["y"]), size=int(d["size"])
                ),
                score=float(d["score"]),
                status=d["status"],
                patch_id=i,
            )
        )
    if class_label is None:
        raise ValueError(f"queue file {path} is empty")
    return CandidateQueue(class_label=class_label, candidates=candidates)


def save_seeds(seeds: SeedSet, path) -> None:
    with open(path, "w") as f:
        for patch in seeds.patches:
            f.write(
                json.dumps(
                    {
                        "class_label": seeds.class_label,
                        "organ": seeds.organ,
                        **patch.to_dict(),
                    },
                    separators=(",", ":"),
                )
                + "\n"
            )


def load_seeds(path) -> SeedSet:
    patches = []
    class_label = None
    organ = "other"
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        class_label = d["class_label"]
        organ = d.get("organ", organ)
        patches.append(PatchRef.from_dict(d))
    if class_label is None:
        raise ValueError(f"seed file {path} is empty")
    return SeedSet(class_label=class_label, organ=organ, patches=patches)
