"""Exact nearest-neighbor index over patch embeddings.

A flat scan is exact, trivially testable against brute force, and fast
enough at desk scale. Scores are Euclidean distance (ascending) for the L2
metric and cosine similarity (descending) for cosine; ties break toward the
smaller patch id so rankings are reproducible across platforms.

On-disk format (little-endian):
    magic "SPIX" | version u32 = 1 | metric u8 (0 = L2, 1 = cosine)
    dim u32 | count u64
    count x u64 ids
    count x dim f32 vectors, row-major
    JSON trailer mapping id -> PatchRef dict
    trailer length u64 at EOF
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedder import Embedding
from .slide import PatchRef

MAGIC = b"SPIX"
VERSION = 1

METRIC_L2 = "l2"
METRIC_COSINE = "cosine"
_METRIC_CODES = {METRIC_L2: 0, METRIC_COSINE: 1}
_METRIC_NAMES = {v: k for k, v in _METRIC_CODES.items()}

_HEADER = struct.Struct("<4sIBIQ")


@dataclass(frozen=True, slots=True)
class Neighbor:
    patch_id: int
    score: float  # distance for L2, similarity for cosine


class VectorIndex:
    def __init__(
        self,
        metric: str,
        dim: int,
        ids: np.ndarray,
        vectors: np.ndarray,
        id_map: dict[int, PatchRef],
    ):
        if metric not in _METRIC_CODES:
            raise ValueError(f"unknown metric {metric!r}")
        self.metric = metric
        self.dim = dim
        self.ids = np.ascontiguousarray(ids, dtype=np.uint64)
        self.vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        self.id_map = id_map
        if self.vectors.shape != (len(self.ids), dim):
            raise ValueError("vectors shape does not match ids/dim")

    def __len__(self) -> int:
        return len(self.ids)

    def patch_for(self, patch_id: int) -> PatchRef:
        return self.id_map[int(patch_id)]

    def query(self, query: np.ndarray, k: int) -> list[Neighbor]:
        """Top-k neighbors, best first, ties by ascending patch id."""
        if k < 1:
            raise ValueError("k must be >= 1")
        n = len(self.ids)
        if n == 0:
            return []
        q = np.asarray(query, dtype=np.float64).ravel()
        if q.shape != (self.dim,):
            raise ValueError(
                f"query dimension mismatch: got {q.shape[0]}, index dim {self.dim}"
            )
        vecs = self.vectors.astype(np.float64)
        if self.metric == METRIC_L2:
            scores = np.sqrt(np.sum((vecs - q) ** 2, axis=1))
            order = np.lexsort((self.ids, scores))
        else:
            norm = np.linalg.norm(q)
            qn = q / norm if norm > 0 else q
            scores = vecs @ qn
            order = np.lexsort((self.ids, -scores))
        top = order[: min(k, n)]
        return [Neighbor(int(self.ids[i]), float(scores[i])) for i in top]


def index_build(embeddings: list[Embedding], metric: str = METRIC_COSINE) -> VectorIndex:
    """Build a flat index; cosine vectors are L2-normalized at insert.

    Patch ids are assigned sequentially in input order, so a given corpus
    ordering always produces the same index.
    """
    if metric not in _METRIC_CODES:
        raise ValueError(f"unknown metric {metric!r}")
    if not embeddings:
        return VectorIndex(
            metric, 0, np.zeros(0, dtype=np.uint64), np.zeros((0, 0), np.float32), {}
        )
    dim = len(embeddings[0].vector)
    seen: set[PatchRef] = set()
    vectors = np.empty((len(embeddings), dim), dtype=np.float32)
    id_map: dict[int, PatchRef] = {}
    for i, emb in enumerate(embeddings):
        vec = np.asarray(emb.vector, dtype=np.float64).ravel()
        if vec.shape != (dim,):
            raise ValueError(
                f"mixed dimensions: entry {i} has dim {vec.shape[0]}, expected {dim}"
            )
        if emb.patch in seen:
            raise ValueError(f"duplicate patch key: {emb.patch}")
        seen.add(emb.patch)
        if metric == METRIC_COSINE:
            norm = np.linalg.norm(vec)
            if norm > 0:
                vec = vec / norm
        vectors[i] = vec.astype(np.float32)
        id_map[i] = emb.patch
    ids = np.arange(len(embeddings), dtype=np.uint64)
    return VectorIndex(metric, dim, ids, vectors, id_map)


def write_vector_file(
    path,
    metric: str,
    dim: int,
    ids: np.ndarray,
    vectors: np.ndarray,
    id_map: dict[int, PatchRef],
) -> None:
    ids = np.ascontiguousarray(ids, dtype=np.uint64)
    vectors = np.ascontiguousarray(vectors, dtype=np.float32)
    trailer = json.dumps(
        {str(i): ref.to_dict() for i, ref in sorted(id_map.items())},
        separators=(",", ":"),
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, _METRIC_CODES[metric], dim, len(ids)))
        if sys_is_big_endian():
            f.write(ids.byteswap().tobytes())
            f.write(vectors.byteswap().tobytes())
        else:
            f.write(ids.tobytes())
            f.write(vectors.tobytes())
        f.write(trailer)
        f.write(struct.pack("<Q", len(trailer)))


def sys_is_big_endian() -> bool:
    return np.dtype("<u8") != np.dtype("=u8")


def read_vector_file(path):
    """Parse the binary layout; returns (metric, dim, ids, vectors, id_map)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("unexpected EOF: file shorter than header")
    magic, version, metric_code, dim, count = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC or version != VERSION or metric_code not in _METRIC_NAMES:
        raise ValueError("corrupt or incompatible index file")
    ids_off = _HEADER.size
    vecs_off = ids_off + 8 * count
    trailer_end = len(raw) - 8
    data_end = vecs_off + 4 * count * dim
    if trailer_end < data_end:
        raise ValueError("unexpected EOF: truncated vector data")
    (trailer_len,) = struct.unpack_from("<Q", raw, trailer_end)
    if data_end + trailer_len != trailer_end:
        raise ValueError("unexpected EOF: trailer length does not match file size")
    ids = np.frombuffer(raw, dtype="<u8", count=count, offset=ids_off).astype(np.uint64)
    vectors = (
        np.frombuffer(raw, dtype="<f4", count=count * dim, offset=vecs_off)
        .astype(np.float32)
        .reshape(count, dim)
    )
    try:
        trailer = json.loads(raw[data_end:trailer_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"corrupt or incompatible index file: bad trailer ({exc})")
    id_map = {int(i): PatchRef.from_dict(d) for i, d in trailer.items()}
    return _METRIC_NAMES[metric_code], dim, ids, vectors, id_map


def index_save(index: VectorIndex, path) -> None:
    write_vector_file(path, index.metric, index.dim, index.ids, index.vectors, index.id_map)


def index_load(path) -> VectorIndex:
    metric, dim, ids, vectors, id_map = read_vector_file(path)
    return VectorIndex(metric, dim, ids, vectors, id_map)
