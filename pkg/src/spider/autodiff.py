"""Minimal reverse-mode autodiff over dense numpy arrays.

Just enough machinery for the classification head: a `Tensor` wrapping an
ndarray, a handful of primitives with closed-form vector-Jacobian products,
and tape-based backprop. Ops preserve the dtype of their inputs, so the same
graph runs in float32 for production and float64 for gradient checks.
Gradients never flow into constants (tensors with requires_grad=False and no
parents), which is how the frozen extractor's embeddings stay untouched.
"""

from __future__ import annotations

import numpy as np

_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self):
        return self.data.shape

    def detach(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Backprop from this (scalar) tensor through the recorded graph."""
        if not self._parents:
            raise RuntimeError("backward without a recorded forward graph")
        if self.data.size != 1:
            raise RuntimeError("backward requires a scalar loss")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad and not t._parents:
        return  # constant leaf: no gradient recorded
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(out_data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; b may be a 1-D bias broadcast over the rows of a."""
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, g)
        if b.data.ndim < g.ndim:
            _accumulate(b, g.sum(axis=tuple(range(g.ndim - b.data.ndim))))
        else:
            _accumulate(b, g)

    return _make(out_data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    def backward(g):
        _accumulate(a, g * s)

    return _make(a.data * s, (a,), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g.T)

    return _make(a.data.T, (a,), backward)


def gather_rows(a: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    out_data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accumulate(a, full)

    return _make(out_data, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out_data = gain.data * xhat + bias.data

    def backward(g):
        _accumulate(bias, g.sum(axis=tuple(range(g.ndim - 1))))
        _accumulate(gain, (g * xhat).sum(axis=tuple(range(g.ndim - 1))))
        dxhat = g * gain.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        _accumulate(x, dx)

    return _make(out_data, (x, gain, bias), backward)


def softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * probs).sum(axis=-1, keepdims=True)
        _accumulate(x, probs * (g - dot))

    return _make(probs, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    # tanh-form gaussian-gated activation
    u = _GELU_C * (x.data + _GELU_A * x.data**3)
    t = np.tanh(u)
    out_data = 0.5 * x.data * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data**2)
        dt = (1.0 - t**2) * du
        _accumulate(x, g * (0.5 * (1.0 + t) + 0.5 * x.data * dt))

    return _make(out_data, (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the mask is drawn once at forward time."""
    if p <= 0.0:
        return x
    if p >= 1.0:
        raise ValueError("dropout probability must be < 1")
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    out_data = x.data * keep

    def backward(g):
        _accumulate(x, g * keep)

    return _make(out_data, (x,), backward)


def smoothed_cross_entropy(logits: Tensor, true_class: int, smoothing: float) -> Tensor:
    """Label-smoothed cross entropy on a single logit row.

    Target distribution is (1 - smoothing) * onehot + smoothing / K; the
    gradient is the classic softmax(logits) - target.
    """
    x = logits.data.reshape(-1)
    k = x.shape[0]
    if k < 2:
        raise ValueError("need at least 2 classes")
    if not 0 <= smoothing < 1:
        raise ValueError("smoothing must be in [0, 1)")
    if not (0 <= true_class < k):
        raise ValueError(f"true_class {true_class} out of range for K={k}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite logits")

    target = np.full(k, smoothing / k, dtype=x.dtype)
    target[true_class] += 1.0 - smoothing
    shifted = x - x.max()
    log_probs = shifted - np.log(np.exp(shifted).sum())
    loss = -(target * log_probs).sum()

    def backward(g):
        probs = np.exp(log_probs)
        _accumulate(logits, (g * (probs - target)).reshape(logits.data.shape))

    return _make(np.asarray(loss), (logits,), backward)
