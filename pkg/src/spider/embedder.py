"""Patch embedders: a deterministic built-in extractor and a remote HTTP one.

The built-in "mock" backend is a pure function of pixel content (histograms,
pooled grayscale, channel statistics), good enough to separate visually
distinct textures and fully reproducible, so the rest of the pipeline can be
exercised and tested without any ML runtime. The remote backend speaks a
minimal JSON protocol (GET /info, POST /embed with base64 PNGs) to whatever
service hosts a real frozen extractor.
"""

from __future__ import annotations

import base64
import io
import os
import time
from dataclasses import dataclass

import httpx
import numpy as np
from PIL import Image

from .slide import PatchRef, grayscale_u8

ENV_REMOTE_URL = "SPIDER_EMBEDDER_URL"

MIN_DIM = 8
HIST_BINS = 32  # per channel
POOL_GRID = 16

# 3 x 32 histogram bins + 16 x 16 pooled grayscale + mean/std per channel
BASE_FEATURES = 3 * HIST_BINS + POOL_GRID * POOL_GRID + 6

DEFAULT_RETRIES = 3
RETRY_BACKOFF_S = 0.2


class TransportError(Exception):
    """Retriable connection-level failure talking to a remote embedder."""


class RemoteEmbedderError(Exception):
    """Non-retriable remote failure (bad config or server-reported error)."""


@dataclass
class EmbedderConfig:
    backend: str = "mock"  # "mock" | "remote"
    dim: int = 1024
    normalize: bool = True
    remote_url: str | None = None
    batch_size: int = 64
    retries: int = DEFAULT_RETRIES

    def __post_init__(self):
        if self.backend not in ("mock", "remote"):
            raise ValueError(f"unknown embedder backend {self.backend!r}")
        if self.dim < MIN_DIM:
            raise ValueError(f"dim too small: {self.dim} < {MIN_DIM}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def backend_id(self) -> str:
        return f"{self.backend}-{self.dim}"


@dataclass
class Embedding:
    patch: PatchRef
    vector: np.ndarray


def _pooled_grayscale(gray: np.ndarray) -> np.ndarray:
    """POOL_GRID x POOL_GRID block means over integer-split row/col ranges."""
    n = gray.shape[0]
    edges = (np.arange(POOL_GRID + 1) * n) // POOL_GRID
    g = gray.astype(np.float64)
    out = np.empty((POOL_GRID, POOL_GRID), dtype=np.float64)
    for i in range(POOL_GRID):
        for j in range(POOL_GRID):
            out[i, j] = g[edges[i] : edges[i + 1], edges[j] : edges[j + 1]].mean()
    return out


def embed_mock(pixels: np.ndarray, dim: int, normalize: bool) -> np.ndarray:
    """Deterministic feature vector for one square RGB block.

    Layout of the base features, in order:
      [0:96)    per-channel 32-bin histograms (R, G, B), each summing to 1
      [96:352)  16 x 16 average-pooled grayscale, scaled to [0, 1]
      [352:358) per-channel mean/255 and std/255, interleaved (R, G, B)
    The base vector is tiled and truncated to `dim` (truncated when dim is
    below the base feature count), then optionally L2-normalized.
    """
    if dim < MIN_DIM:
        raise ValueError(f"dim too small: {dim} < {MIN_DIM}")
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.shape[0] != pixels.shape[1]:
        raise ValueError("expected a square H x H x 3 block")

    n_px = pixels.shape[0] * pixels.shape[1]
    feats = np.empty(BASE_FEATURES, dtype=np.float64)
    for c in range(3):
        counts = np.bincount(pixels[:, :, c].ravel() >> 3, minlength=HIST_BINS)
        feats[c * HIST_BINS : (c + 1) * HIST_BINS] = counts / n_px
    gray = grayscale_u8(pixels)
    feats[96:352] = _pooled_grayscale(gray).ravel() / 255.0
    for c in range(3):
        chan = pixels[:, :, c].astype(np.float64)
        feats[352 + 2 * c] = chan.mean() / 255.0
        feats[352 + 2 * c + 1] = chan.std() / 255.0

    reps = -(-dim // BASE_FEATURES)  # ceil
    vec = np.tile(feats, reps)[:dim]
    if normalize:
        vec = vec / np.linalg.norm(vec)
    return vec.astype(np.float32)


def _encode_png(pixels: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def resolve_remote_url(config: EmbedderConfig) -> str:
    url = os.environ.get(ENV_REMOTE_URL) or config.remote_url
    if not url:
        raise RemoteEmbedderError(
            f"no remote embedder URL (set remote_url or {ENV_REMOTE_URL})"
        )
    return url.rstrip("/")


def _request_with_retries(send, retries: int):
    last = None
    for attempt in range(retries):
        try:
            return send()
        except (httpx.TransportError, ConnectionError) as exc:
            last = exc
            if attempt + 1 < retries:
                time.sleep(RETRY_BACKOFF_S * (attempt + 1))
    raise TransportError(f"remote embedder unreachable after {retries} attempts: {last}")


def remote_info(config: EmbedderConfig) -> dict:
    url = resolve_remote_url(config)
    resp = _request_with_retries(
        lambda: httpx.get(f"{url}/info", timeout=30.0), config.retries
    )
    if resp.status_code // 100 != 2:
        raise RemoteEmbedderError(f"embedder /info failed ({resp.status_code}): {resp.text}")
    return resp.json()


def embed_remote(blocks: list[np.ndarray], config: EmbedderConfig) -> list[np.ndarray]:
    """Embed pixel blocks through the remote service, order preserved.

    Connection failures are retried up to config.retries; a server dim that
    disagrees with config.dim is a fatal configuration error.
    """
    info = remote_info(config)
    server_dim = int(info["dim"])
    if server_dim != config.dim:
        raise RemoteEmbedderError(
            f"dimension mismatch: server reports dim {server_dim}, config wants {config.dim}"
        )
    url = resolve_remote_url(config)
    out: list[np.ndarray] = []
    for start in range(0, len(blocks), config.batch_size):
        batch = blocks[start : start + config.batch_size]
        payload = {"patches": [_encode_png(b) for b in batch]}
        resp = _request_with_retries(
            lambda: httpx.post(f"{url}/embed", json=payload, timeout=120.0),
            config.retries,
        )
        if resp.status_code // 100 != 2:
            raise RemoteEmbedderError(
                f"embedder /embed failed ({resp.status_code}): {resp.text}"
            )
        vectors = resp.json()["vectors"]
        if len(vectors) != len(batch):
            raise RemoteEmbedderError(
                f"server returned {len(vectors)} vectors for {len(batch)} patches"
            )
        for v in vectors:
            vec = np.asarray(v, dtype=np.float32)
            if vec.shape != (config.dim,):
                raise RemoteEmbedderError(f"server vector has shape {vec.shape}")
            if config.normalize:
                norm = float(np.linalg.norm(vec.astype(np.float64)))
                if norm > 0:
                    vec = (vec.astype(np.float64) / norm).astype(np.float32)
            out.append(vec)
    return out


class Embedder:
    """Uniform facade over the configured backend."""

    def __init__(self, config: EmbedderConfig):
        self.config = config

    @property
    def dim(self) -> int:
        return self.config.dim

    def embed_blocks(self, blocks: list[np.ndarray]) -> list[np.ndarray]:
        if self.config.backend == "mock":
            return [
                embed_mock(b, self.config.dim, self.config.normalize) for b in blocks
            ]
        return embed_remote(blocks, self.config)


class EmbeddingCache:
    """PatchRef -> vector mapping, persisted in the shared vector-file layout.

    The on-disk form is exactly the index binary format (see spider.vindex),
    so a cache file can be opened directly as a flat index.
    """

    def __init__(self, dim: int, metric: str = "cosine"):
        self.dim = dim
        self.metric = metric
        self._vectors: dict[PatchRef, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, patch: PatchRef) -> bool:
        return patch in self._vectors

    def __getitem__(self, patch: PatchRef) -> np.ndarray:
        return self._vectors[patch]

    def get(self, patch: PatchRef):
        return self._vectors.get(patch)

    def put(self, patch: PatchRef, vector: np.ndarray) -> None:
        vec = np.asarray(vector, dtype=np.float32)
        if vec.shape != (self.dim,):
            raise ValueError(f"vector shape {vec.shape} does not match dim {self.dim}")
        self._vectors[patch] = vec

    def patches(self) -> list[PatchRef]:
        return list(self._vectors)

    def save(self, path) -> None:
        from . import vindex

        refs = list(self._vectors)
        ids = np.arange(len(refs), dtype=np.uint64)
        vecs = (
            np.stack([self._vectors[r] for r in refs])
            if refs
            else np.zeros((0, self.dim), dtype=np.float32)
        )
        vindex.write_vector_file(
            path, self.metric, self.dim, ids, vecs, {int(i): r for i, r in zip(ids, refs)}
        )

    @classmethod
    def load(cls, path) -> "EmbeddingCache":
        from . import vindex

        metric, dim, ids, vectors, id_map = vindex.read_vector_file(path)
        cache = cls(dim=dim, metric=metric)
        row_of = {int(i): row for row, i in enumerate(ids)}
        for i, ref in id_map.items():
            cache._vectors[ref] = vectors[row_of[int(i)]]
        return cache
