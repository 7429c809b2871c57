"""Verification service: binary accept/reject review over candidate queues.

Reviewers pull the next pending candidate (exclusive within a lease TTL),
look at it inside a 9 x 9 patch context image, and post a verdict. Every
verdict is appended to a JSONL log before queue state changes, so replaying
the log reconstructs the service exactly; identical re-posts are idempotent
and later decisions supersede earlier ones per (patch, class).
"""

from __future__ import annotations

import io
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from fastapi import FastAPI, HTTPException, Query, Response
from fastapi.middleware.cors import CORSMiddleware
from PIL import Image, ImageDraw
from pydantic import BaseModel

from .curation import (
    STATUS_ACCEPTED,
    STATUS_PENDING,
    STATUS_REJECTED,
    CandidateQueue,
    queue_stats,
)
from .slide import PATCH_SIZE, PatchRef, SlideStore, read_patch

log = logging.getLogger(__name__)

VERDICT_ACCEPT = "accept"
VERDICT_REJECT = "reject"
VERDICTS = (VERDICT_ACCEPT, VERDICT_REJECT)

DEFAULT_LEASE_TTL = 120.0  # seconds

REVIEW_GRID = 9
REVIEW_IMAGE_SIZE = REVIEW_GRID * PATCH_SIZE  # 2016
HIGHLIGHT_WIDTH = 4
HIGHLIGHT_COLOR = (255, 32, 32)

_STATUS_OF_VERDICT = {VERDICT_ACCEPT: STATUS_ACCEPTED, VERDICT_REJECT: STATUS_REJECTED}


@dataclass(frozen=True)
class Decision:
    patch: PatchRef
    class_label: str
    verdict: str
    reviewer_id: str
    timestamp_ms: int
    seq: int

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValueError(f"malformed verdict {self.verdict!r}")

    def to_line(self) -> str:
        payload = {
            "seq": self.seq,
            "slide_id": self.patch.slide_id,
            "x": self.patch.x,
            "y": self.patch.y,
            "size": self.patch.size,
            "level": self.patch.level,
            "class_label": self.class_label,
            "verdict": self.verdict,
            "reviewer": self.reviewer_id,
            "ts_ms": self.timestamp_ms,
        }
        return json.dumps(payload, separators=(",", ":"), sort_keys=True)

    @classmethod
    def from_line(cls, line: str) -> "Decision":
        d = json.loads(line)
        return cls(
            patch=PatchRef(
                slide_id=d["slide_id"],
                x=int(d["x"]),
                y=int(d["y"]),
                size=int(d["size"]),
                level=d.get("level", "20X"),
            ),
            class_label=d["class_label"],
            verdict=d["verdict"],
            reviewer_id=d["reviewer"],
            timestamp_ms=int(d["ts_ms"]),
            seq=int(d["seq"]),
        )


class DecisionLog:
    """Append-only JSONL decision log with torn-tail recovery.

    Each append is flushed and fsynced before returning. A torn final line
    (partial write from a crash) is dropped at open; appends then resume
    from the last intact record.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.decisions: list[Decision] = []
        good_bytes = 0
        if self.path.exists():
            raw = self.path.read_bytes()
            offset = 0
            for line in raw.splitlines(keepends=True):
                stripped = line.strip()
                if stripped:
                    try:
                        decision = Decision.from_line(stripped.decode("utf-8"))
                    except (ValueError, KeyError, UnicodeDecodeError) as exc:
                        if offset + len(line) >= len(raw):
                            log.warning("dropping torn log tail: %s", exc)
                            break
                        raise ValueError(f"corrupt decision log {self.path}") from exc
                    if self.decisions and decision.seq <= self.decisions[-1].seq:
                        raise ValueError(f"corrupt decision log {self.path}: seq not increasing")
                    self.decisions.append(decision)
                offset += len(line)
                good_bytes = offset
        self._fh = open(self.path, "ab")
        self._fh.truncate(good_bytes)

    @property
    def next_seq(self) -> int:
        return self.decisions[-1].seq + 1 if self.decisions else 1

    def append(self, decision: Decision) -> None:
        if self.decisions and decision.seq <= self.decisions[-1].seq:
            raise ValueError("seq must be strictly increasing")
        self._fh.write(decision.to_line().encode("utf-8") + b"\n")
        self._fh.flush()
        os.fsync(self._fh.fileno())
        self.decisions.append(decision)

    def close(self) -> None:
        self._fh.close()


def effective_decisions(decisions: list[Decision]) -> dict[tuple[PatchRef, str], Decision]:
    """Fold a decision stream: the latest seq per (patch, class) wins."""
    latest: dict[tuple[PatchRef, str], Decision] = {}
    for d in decisions:
        latest[(d.patch, d.class_label)] = d
    return latest


def accepted_set(decisions: list[Decision]) -> set[tuple[PatchRef, str]]:
    return {
        key
        for key, d in effective_decisions(decisions).items()
        if d.verdict == VERDICT_ACCEPT
    }


class QueueDrained(Exception):
    pass


class UnknownQueue(KeyError):
    pass


class UnknownCandidate(KeyError):
    pass


class VerifyService:
    """Queue dispatch, lease bookkeeping, and durable decision recording.

    `clock` (monotonic seconds) drives lease expiry and is injectable for
    tests; `now_ms` stamps decisions with wall-clock UTC milliseconds.
    """

    def __init__(
        self,
        queues: dict[str, CandidateQueue],
        decision_log: DecisionLog,
        slides: SlideStore | None = None,
        lease_ttl: float = DEFAULT_LEASE_TTL,
        clock: Callable[[], float] = time.monotonic,
        now_ms: Callable[[], int] = lambda: int(time.time() * 1000),
    ):
        self.queues = queues
        self.log = decision_log
        self.slides = slides
        self.lease_ttl = lease_ttl
        self.clock = clock
        self.now_ms = now_ms
        # (class_label, patch) -> (reviewer_id, expiry in clock seconds)
        self._leases: dict[tuple[str, PatchRef], tuple[str, float]] = {}
        self._replay()

    def _replay(self) -> None:
        for key, decision in effective_decisions(self.log.decisions).items():
            patch, class_label = decision.patch, decision.class_label
            queue = self.queues.get(class_label)
            cand = queue.find(patch) if queue is not None else None
            if cand is None:
                log.warning("log decision for unknown candidate %s/%s", class_label, patch)
                continue
            cand.status = _STATUS_OF_VERDICT[decision.verdict]

    def _purge_leases(self, now: float) -> None:
        expired = [k for k, (_, expiry) in self._leases.items() if expiry <= now]
        for k in expired:
            del self._leases[k]

    def next_candidate(self, queue_id: str, reviewer_id: str):
        """Highest-priority pending candidate not leased to someone else.

        The lease holder is re-served its own candidate until it decides or
        the lease lapses. Returns None when the queue is drained for this
        reviewer.
        """
        queue = self.queues.get(queue_id)
        if queue is None:
            raise UnknownQueue(queue_id)
        now = self.clock()
        self._purge_leases(now)
        for cand in queue.candidates:
            if cand.status != STATUS_PENDING:
                continue
            lease = self._leases.get((queue_id, cand.patch))
            if lease is not None and lease[0] != reviewer_id:
                continue
            self._leases[(queue_id, cand.patch)] = (reviewer_id, now + self.lease_ttl)
            return cand
        return None

    def post_decision(
        self, patch: PatchRef, class_label: str, verdict: str, reviewer_id: str
    ) -> int:
        """Record a verdict; returns the decision seq.

        Re-posting the payload of the currently effective decision returns
        its existing seq without writing; anything else appends and wins.
        """
        if verdict not in VERDICTS:
            raise ValueError(f"malformed verdict {verdict!r}")
        queue = self.queues.get(class_label)
        if queue is None:
            raise UnknownQueue(class_label)
        cand = queue.find(patch)
        if cand is None:
            raise UnknownCandidate(f"unknown candidate {patch} in queue {class_label!r}")
        current = effective_decisions(self.log.decisions).get((patch, class_label))
        if (
            current is not None
            and current.verdict == verdict
            and current.reviewer_id == reviewer_id
        ):
            return current.seq
        decision = Decision(
            patch=patch,
            class_label=class_label,
            verdict=verdict,
            reviewer_id=reviewer_id,
            timestamp_ms=self.now_ms(),
            seq=self.log.next_seq,
        )
        self.log.append(decision)
        cand.status = _STATUS_OF_VERDICT[verdict]
        self._leases.pop((class_label, patch), None)
        return decision.seq

    def stats(self, queue_id: str) -> dict:
        queue = self.queues.get(queue_id)
        if queue is None:
            raise UnknownQueue(queue_id)
        out = queue_stats(queue)
        out["queue_id"] = queue_id
        reviewers: dict[str, int] = {}
        for d in self.log.decisions:
            if d.class_label == queue_id:
                reviewers[d.reviewer_id] = reviewers.get(d.reviewer_id, 0) + 1
        out["decisions_logged"] = sum(reviewers.values())
        out["reviewers"] = dict(sorted(reviewers.items()))
        return out

    def queue_summaries(self) -> list[dict]:
        return [self.stats(queue_id) for queue_id in sorted(self.queues)]


def render_context(slides: SlideStore, central: PatchRef) -> bytes:
    """2016 x 2016 PNG: the 9 x 9 patch neighborhood with the center outlined.

    Off-slide cells are padded white; the central cell sits at grid (4, 4).
    """
    slide = slides.get(central.slide_id)
    size = central.size
    radius = (REVIEW_GRID - 1) // 2
    canvas = Image.new("RGB", (REVIEW_GRID * size, REVIEW_GRID * size), (255, 255, 255))
    for row in range(REVIEW_GRID):
        for col in range(REVIEW_GRID):
            ref = PatchRef(
                slide_id=central.slide_id,
                x=central.x + (col - radius) * size,
                y=central.y + (row - radius) * size,
                size=size,
                level=central.level,
            )
            block = read_patch(slide, ref, pad_value=255)
            canvas.paste(Image.fromarray(block), (col * size, row * size))
    draw = ImageDraw.Draw(canvas)
    x0, y0 = radius * size, radius * size
    draw.rectangle(
        [x0, y0, x0 + size - 1, y0 + size - 1],
        outline=HIGHLIGHT_COLOR,
        width=HIGHLIGHT_WIDTH,
    )
    buf = io.BytesIO()
    canvas.save(buf, format="PNG")
    return buf.getvalue()


def candidate_payload(queue_id: str, cand) -> dict:
    ref = cand.patch
    return {
        "queue_id": queue_id,
        "slide_id": ref.slide_id,
        "x": ref.x,
        "y": ref.y,
        "size": ref.size,
        "level": ref.level,
        "score": cand.score,
        "status": cand.status,
        "context_url": (
            f"/api/patches/context.png?slide_id={ref.slide_id}&x={ref.x}&y={ref.y}"
        ),
    }


class DecisionIn(BaseModel):
    slide_id: str
    x: int
    y: int
    size: int = PATCH_SIZE
    level: str = "20X"
    class_label: str
    verdict: str
    reviewer: str


def build_app(service: VerifyService) -> FastAPI:
    """FastAPI wiring over the service; permissive CORS for browser clients."""
    app = FastAPI(title="spider verification service")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    app.state.service = service

    @app.get("/api/queues")
    def list_queues():
        return service.queue_summaries()

    @app.get("/api/queues/{queue_id}/next")
    def next_candidate(queue_id: str, reviewer: str = Query(min_length=1)):
        try:
            cand = service.next_candidate(queue_id, reviewer)
        except UnknownQueue:
            raise HTTPException(status_code=404, detail="unknown queue")
        if cand is None:
            return {"queue_id": queue_id, "drained": True, "candidate": None}
        return {
            "queue_id": queue_id,
            "drained": False,
            "candidate": candidate_payload(queue_id, cand),
            "lease_ttl": service.lease_ttl,
        }

    @app.post("/api/decisions")
    def post_decision(body: DecisionIn):
        if body.verdict not in VERDICTS:
            raise HTTPException(status_code=400, detail="malformed verdict")
        patch = PatchRef(
            slide_id=body.slide_id, x=body.x, y=body.y, size=body.size, level=body.level
        )
        try:
            seq = service.post_decision(patch, body.class_label, body.verdict, body.reviewer)
        except UnknownQueue:
            raise HTTPException(status_code=404, detail="unknown queue")
        except UnknownCandidate:
            raise HTTPException(status_code=404, detail="unknown candidate")
        return {"seq": seq, "verdict": body.verdict}

    @app.get("/api/patches/context.png")
    def context_png(slide_id: str, x: int, y: int):
        if service.slides is None or slide_id not in service.slides:
            raise HTTPException(status_code=404, detail="unknown slide")
        png = render_context(service.slides, PatchRef(slide_id=slide_id, x=x, y=y))
        return Response(content=png, media_type="image/png")

    @app.get("/api/queues/{queue_id}/stats")
    def stats(queue_id: str):
        try:
            return service.stats(queue_id)
        except UnknownQueue:
            raise HTTPException(status_code=404, detail="unknown queue")

    return app
