"""Reference embedding service speaking the remote-embedder protocol.

Stands in for a GPU-backed foundation-model endpoint: GET /info reports the
vector dimension, POST /embed maps base64 PNG patches to vectors. Backed by
the deterministic mock features, it exists so the remote transport path can
be exercised end to end without heavyweight weights.
"""

import base64
import io

import numpy as np
from fastapi import FastAPI, HTTPException
from PIL import Image
from pydantic import BaseModel

from .embedder import EmbedderConfig, embed_mock

SERVER_NAME = "spider-mock-embedder"


class EmbedIn(BaseModel):
    patches: list[str]


def build_embed_app(dim: int = 1024, normalize: bool = True) -> FastAPI:
    EmbedderConfig(backend="mock", dim=dim, normalize=normalize)  # validates dim
    app = FastAPI(title=SERVER_NAME)

    @app.get("/info")
    def info():
        return {"dim": dim, "name": SERVER_NAME}

    @app.post("/embed")
    def embed(body: EmbedIn):
        vectors = []
        for encoded in body.patches:
            try:
                raw = base64.b64decode(encoded, validate=True)
                pixels = np.asarray(Image.open(io.BytesIO(raw)).convert("RGB"))
            except Exception:
                raise HTTPException(status_code=400, detail="undecodable patch")
            vectors.append(embed_mock(pixels, dim, normalize).tolist())
        return {"vectors": vectors}

    return app
