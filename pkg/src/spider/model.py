"""Context-aware classification head over frozen patch embeddings.

Per-patch embeddings for a g x g grid of cells are projected to a small
hidden width, given learned position embeddings, mixed by one single-head
self-attention layer with a feed-forward block (post-layer-norm ordering),
and the central token's final representation is classified. Smaller context
grids reuse the position slots of the corresponding central cells of the
full grid, so one trained table serves every ablation context.

Checkpoint layout: u32 header length, UTF-8 JSON header (schema version,
config, class list, seed, parameter order), then the parameters as one
little-endian float32 blob concatenated row-major in PARAM_ORDER.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SCHEMA_VERSION = 1

PARAM_ORDER = (
    "w_in",
    "b_in",
    "pos",
    "w_q",
    "b_q",
    "w_k",
    "b_k",
    "w_v",
    "b_v",
    "w_o",
    "b_o",
    "ln_attn_g",
    "ln_attn_b",
    "w_ff1",
    "b_ff1",
    "w_ff2",
    "b_ff2",
    "ln_ff_g",
    "ln_ff_b",
    "w_out",
    "b_out",
)


@dataclass
class HeadConfig:
    embed_dim: int = 1024
    hidden: int = 128
    layers: int = 1
    heads: int = 1
    intermediate: int = 128
    max_positions: int = 25
    dropout_hidden: float = 0.5
    dropout_attn: float = 0.3
    dropout_head: float = 0.3
    num_classes: int = 2

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError("hidden must be divisible by heads")
        if self.layers != 1 or self.heads != 1:
            raise ValueError("only a single layer with a single head is supported")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        g = math.isqrt(self.max_positions)
        if g * g != self.max_positions or g % 2 == 0:
            raise ValueError("max_positions must be the square of an odd grid size")

    @property
    def max_grid(self) -> int:
        return math.isqrt(self.max_positions)


def parameter_shapes(config: HeadConfig) -> dict[str, tuple[int, ...]]:
    e, h, i, k = config.embed_dim, config.hidden, config.intermediate, config.num_classes
    return {
        "w_in": (e, h),
        "b_in": (h,),
        "pos": (config.max_positions, h),
        "w_q": (h, h),
        "b_q": (h,),
        "w_k": (h, h),
        "b_k": (h,),
        "w_v": (h, h),
        "b_v": (h,),
        "w_o": (h, h),
        "b_o": (h,),
        "ln_attn_g": (h,),
        "ln_attn_b": (h,),
        "w_ff1": (h, i),
        "b_ff1": (i,),
        "w_ff2": (i, h),
        "b_ff2": (h,),
        "ln_ff_g": (h,),
        "ln_ff_b": (h,),
        "w_out": (h, k),
        "b_out": (k,),
    }


def parameter_count(config: HeadConfig) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(config).values())


class HeadModel:
    def __init__(self, config: HeadConfig, params: dict[str, Tensor], dtype=np.float32):
        self.config = config
        self.params = params
        self.dtype = dtype
        shapes = parameter_shapes(config)
        for name, shape in shapes.items():
            if name not in params or params[name].data.shape != shape:
                raise ValueError(f"parameter {name!r} missing or has wrong shape")

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype) -> "HeadModel":
        return HeadModel(
            self.config,
            {n: ad.parameter(p.data.astype(dtype)) for n, p in self.params.items()},
            dtype=dtype,
        )


def head_init(config: HeadConfig, seed: int, dtype=np.float32) -> HeadModel:
    """Fan-scaled uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        if name == "pos":
            limit = 1.0 / math.sqrt(config.hidden)
            data = rng.uniform(-limit, limit, size=shape)
        elif len(shape) == 2:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-limit, limit, size=shape)
        elif name.endswith("_g"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = ad.parameter(data.astype(dtype))
    return HeadModel(config, params, dtype=dtype)


def grid_position_ids(g: int, max_grid: int) -> list[int]:
    """Position slots for a g x g token grid: the central sub-grid cells."""
    if g % 2 == 0 or g > max_grid:
        raise ValueError(f"token grid {g} not supported (max {max_grid})")
    off = (max_grid - g) // 2
    return [(off + r) * max_grid + (off + c) for r in range(g) for c in range(g)]


def _validate_tokens(config: HeadConfig, tokens: np.ndarray) -> int:
    if tokens.ndim != 2 or tokens.shape[1] != config.embed_dim:
        raise ValueError(
            f"tokens must be T x {config.embed_dim}, got {tokens.shape}"
        )
    t = tokens.shape[0]
    if t > config.max_positions:
        raise ValueError(f"{t} tokens exceed max_positions {config.max_positions}")
    g = math.isqrt(t)
    if g * g != t or g % 2 == 0:
        raise ValueError(f"token count {t} is not an odd square grid")
    return g


def forward_graph(
    model: HeadModel,
    tokens: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Run the head on one token grid; returns (logits tensor 1 x K, attention T x T)."""
    cfg = model.config
    g = _validate_tokens(cfg, tokens)
    if train_mode and rng is None:
        raise ValueError("train_mode requires an rng for dropout")
    pos_ids = grid_position_ids(g, cfg.max_grid)
    central = (g * g - 1) // 2
    p = model.params

    tok = ad.constant(np.asarray(tokens, dtype=model.dtype))
    x = ad.add(ad.add(ad.matmul(tok, p["w_in"]), p["b_in"]), ad.gather_rows(p["pos"], pos_ids))

    q = ad.add(ad.matmul(x, p["w_q"]), p["b_q"])
    k = ad.add(ad.matmul(x, p["w_k"]), p["b_k"])
    v = ad.add(ad.matmul(x, p["w_v"]), p["b_v"])
    head_dim = cfg.hidden // cfg.heads
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(head_dim))
    probs = ad.softmax_rows(scores)
    attention = probs.data.copy()
    if train_mode:
        probs = ad.dropout(probs, cfg.dropout_attn, rng)
    attn_out = ad.add(ad.matmul(ad.matmul(probs, v), p["w_o"]), p["b_o"])
    if train_mode:
        attn_out = ad.dropout(attn_out, cfg.dropout_hidden, rng)
    x = ad.layer_norm(ad.add(x, attn_out), p["ln_attn_g"], p["ln_attn_b"])

    ff = ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(x, p["w_ff1"]), p["b_ff1"])), p["w_ff2"]), p["b_ff2"])
    if train_mode:
        ff = ad.dropout(ff, cfg.dropout_hidden, rng)
    x = ad.layer_norm(ad.add(x, ff), p["ln_ff_g"], p["ln_ff_b"])

    rep = ad.gather_rows(x, [central])
    if train_mode:
        rep = ad.dropout(rep, cfg.dropout_head, rng)
    logits = ad.add(ad.matmul(rep, p["w_out"]), p["b_out"])
    return logits, attention


def head_forward(
    model: HeadModel,
    tokens: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Logits (K,) and the attention map (T x T) for one token grid."""
    logits, attention = forward_graph(model, tokens, train_mode=train_mode, rng=rng)
    out = logits.data.reshape(-1)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite logits")
    return out, attention


def head_backward(
    model: HeadModel,
    tokens: np.ndarray,
    true_class: int,
    smoothing: float = 0.0,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and per-parameter gradients for one example.

    Dropout stays off unless train_mode is set with a seeded rng, so the
    gradient is a deterministic function of (parameters, tokens, class).
    """
    model.zero_grad()
    logits, _ = forward_graph(model, tokens, train_mode=train_mode, rng=rng)
    loss = ad.smoothed_cross_entropy(logits, true_class, smoothing)
    loss.backward()
    grads = {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in model.params.items()
    }
    return float(loss.data), grads


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def save_checkpoint(model: HeadModel, path, class_list: list[str], seed: int) -> None:
    header = {
        "schema_version": SCHEMA_VERSION,
        "config": asdict(model.config),
        "class_list": list(class_list),
        "seed": seed,
        "param_order": list(PARAM_ORDER),
    }
    blob = b"".join(
        np.ascontiguousarray(model.params[n].data, dtype="<f4").tobytes()
        for n in PARAM_ORDER
    )
    header_bytes = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(blob)


def load_checkpoint(path, dtype=np.float32) -> tuple[HeadModel, list[str], int]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError("unexpected EOF: checkpoint shorter than header length")
    (header_len,) = struct.unpack_from("<I", raw, 0)
    if len(raw) < 4 + header_len:
        raise ValueError("unexpected EOF: truncated checkpoint header")
    header = json.loads(raw[4 : 4 + header_len].decode("utf-8"))
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ValueError("corrupt or incompatible checkpoint")
    config = HeadConfig(**header["config"])
    shapes = parameter_shapes(config)
    expected = sum(int(np.prod(s)) for s in shapes.values())
    blob = raw[4 + header_len :]
    if len(blob) != 4 * expected:
        raise ValueError("unexpected EOF: truncated parameter blob")
    flat = np.frombuffer(blob, dtype="<f4")
    params: dict[str, Tensor] = {}
    offset = 0
    for name in header["param_order"]:
        shape = shapes[name]
        n = int(np.prod(shape))
        params[name] = ad.parameter(
            flat[offset : offset + n].reshape(shape).astype(dtype)
        )
        offset += n
    model = HeadModel(config, params, dtype=dtype)
    return model, list(header["class_list"]), int(header["seed"])
