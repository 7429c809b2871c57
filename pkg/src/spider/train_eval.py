"""Head training, evaluation, and the context-size ablation.

Embeddings stay frozen; only the head trains. Batches are processed one
example at a time in a fixed order, so the batch loss is exactly the mean
of per-example losses and the batch gradient is exactly the mean of
per-example gradients regardless of how examples are grouped.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .dataset import ContextSpec, DatasetManifest, LabeledPatch, context_refs
from .embedder import EmbeddingCache
from .model import (
    PARAM_ORDER,
    HeadConfig,
    HeadModel,
    forward_graph,
    head_forward,
    head_init,
)

log = logging.getLogger(__name__)

CONTEXT_TABLE_LABELS = {
    5: "Large (1120 x 1120)",
    3: "Medium (672 x 672)",
    1: "No Context (224 x 224)",
}


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 256
    lr_max: float = 4e-4
    warmup_epochs: int = 1
    weight_decay: float = 0.01
    label_smoothing: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    dropout: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")


def lr_at(step: int, total_steps: int, warmup_steps: int, lr_max: float) -> float:
    """Learning rate after `step` optimizer updates (1-based during training).

    Linear ramp to lr_max over the warmup, then a cosine arc to exactly 0
    at step == total_steps.
    """
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= warmup_steps < total_steps:
        raise ValueError("warmup_steps must be smaller than total_steps")
    if step < 0 or step > total_steps:
        raise ValueError("step out of range")
    if step < warmup_steps:
        return lr_max * step / warmup_steps
    if step == warmup_steps:
        return lr_max
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return 0.5 * lr_max * (1.0 + math.cos(math.pi * progress))


def smoothed_ce(logits: np.ndarray, true_class: int, smoothing: float) -> float:
    """Label-smoothed cross entropy of one logit vector, computed in float64."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    k = z.shape[0]
    if k < 2:
        raise ValueError("need at least 2 classes")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must lie in [0, 1)")
    if not 0 <= true_class < k:
        raise ValueError("true_class out of range")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    target = np.full(k, smoothing / k)
    target[true_class] += 1.0 - smoothing
    log_probs = z - (z.max() + np.log(np.exp(z - z.max()).sum()))
    return float(-(target * log_probs).sum())


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)

    Moments are kept in float64; with lr == 0 parameters are bitwise
    unchanged.
    """

    def __init__(
        self,
        param_shapes: Mapping[str, tuple[int, ...]],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {n: np.zeros(s, dtype=np.float64) for n, s in param_shapes.items()}
        self._v = {n: np.zeros(s, dtype=np.float64) for n, s in param_shapes.items()}

    def step(self, params: Mapping[str, ad.Tensor], grads: Mapping[str, np.ndarray], lr: float):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, m in self._m.items():
            p = params[name]
            g = np.asarray(grads[name], dtype=np.float64)
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape mismatch for {name!r}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v = self._v[name]
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if lr == 0.0:
                continue
            m_hat = m / bc1
            v_hat = v / bc2
            update = m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype)


def scoped_manifest(manifest: DatasetManifest, grid: int | None) -> DatasetManifest:
    """The manifest itself, or a copy rescoped to a different context grid."""
    if grid is None or grid == manifest.context.grid:
        return manifest
    return DatasetManifest(
        organ=manifest.organ,
        patches=manifest.patches,
        context=ContextSpec(grid=grid, pad_value=manifest.context.pad_value),
        class_list=manifest.class_list,
        split_seed=manifest.split_seed,
        ratio=manifest.ratio,
    )


def tokens_for(
    patch: LabeledPatch, spec: ContextSpec, cache: EmbeddingCache
) -> np.ndarray:
    """Stack the context-cell embeddings of one central, row-major."""
    rows = []
    for ref in context_refs(patch.patch, spec):
        vec = cache.get(ref)
        if vec is None:
            raise ValueError(f"missing embedding for patch {ref}")
        rows.append(vec)
    return np.stack(rows)


@dataclass
class StepStats:
    step: int
    lr: float
    loss: float


@dataclass
class TrainResult:
    model: HeadModel
    class_list: list[str]
    history: list[StepStats]
    steps_per_epoch: int
    total_steps: int


def train(
    manifest: DatasetManifest,
    cache: EmbeddingCache,
    head_config: HeadConfig,
    train_config: TrainConfig,
    model: HeadModel | None = None,
    grid: int | None = None,
) -> TrainResult:
    """Fit the head on the manifest's train split.

    One shuffled pass per epoch; the final short batch is kept. Every
    per-step learning rate satisfies lr == lr_at(step). `grid` narrows or
    widens the context without touching the manifest on disk.
    """
    manifest = scoped_manifest(manifest, grid)
    examples = manifest.split_patches("train")
    if not examples:
        raise ValueError("manifest has no train split")
    class_list = manifest.class_list
    if head_config.num_classes != len(class_list):
        raise ValueError("num_classes does not match the manifest class list")
    class_index = {label: i for i, label in enumerate(class_list)}

    tokens = [tokens_for(lp, manifest.context, cache) for lp in examples]
    labels = [class_index[lp.class_label] for lp in examples]

    if model is None:
        model = head_init(head_config, train_config.seed)
    optimizer = AdamW(
        {n: p.data.shape for n, p in model.params.items()},
        beta1=train_config.beta1,
        beta2=train_config.beta2,
        eps=train_config.eps,
        weight_decay=train_config.weight_decay,
    )
    steps_per_epoch = math.ceil(len(examples) / train_config.batch_size)
    total_steps = train_config.epochs * steps_per_epoch
    warmup_steps = train_config.warmup_epochs * steps_per_epoch

    shuffle_rng = np.random.default_rng(train_config.seed)
    dropout_rng = np.random.default_rng(train_config.seed + 1)
    history: list[StepStats] = []
    step = 0
    for _ in range(train_config.epochs):
        order = shuffle_rng.permutation(len(examples))
        for start in range(0, len(examples), train_config.batch_size):
            batch = order[start : start + train_config.batch_size]
            step += 1
            lr = lr_at(step, total_steps, warmup_steps, lr_max=train_config.lr_max)
            loss_sum = 0.0
            grad_sum = {n: np.zeros_like(p.data, dtype=np.float64) for n, p in model.params.items()}
            for idx in batch:
                model.zero_grad()
                logits, _ = forward_graph(
                    model,
                    tokens[idx],
                    train_mode=train_config.dropout,
                    rng=dropout_rng if train_config.dropout else None,
                )
                loss = ad.smoothed_cross_entropy(
                    logits, labels[idx], train_config.label_smoothing
                )
                loss.backward()
                loss_sum += float(loss.data)
                for name, p in model.params.items():
                    if p.grad is not None:
                        grad_sum[name] += p.grad
            scale = 1.0 / len(batch)
            grads = {n: g * scale for n, g in grad_sum.items()}
            optimizer.step(model.params, grads, lr)
            history.append(StepStats(step=step, lr=lr, loss=loss_sum * scale))
    return TrainResult(
        model=model,
        class_list=list(class_list),
        history=history,
        steps_per_epoch=steps_per_epoch,
        total_steps=total_steps,
    )


@dataclass
class ClassReport:
    label: str
    support: int
    accuracy: float  # recall of the class
    precision: float
    f1: float


@dataclass
class EvalReport:
    class_list: list[str]
    confusion: list[list[int]]  # rows true, columns predicted
    per_class: list[ClassReport]
    micro_accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    total: int

    def to_dict(self) -> dict:
        return {
            "class_list": self.class_list,
            "confusion": self.confusion,
            "per_class": [
                {
                    "label": c.label,
                    "support": c.support,
                    "accuracy": c.accuracy,
                    "precision": c.precision,
                    "f1": c.f1,
                }
                for c in self.per_class
            ],
            "micro_accuracy": self.micro_accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "total": self.total,
        }


def report_from_confusion(
    confusion: np.ndarray, class_list: Sequence[str]
) -> EvalReport:
    """Metrics from a confusion matrix (rows true, columns predicted).

    Per-class accuracy is recall. Zero-denominator precision, recall, or F1
    is reported as 0.0 rather than NaN.
    """
    cm = np.asarray(confusion, dtype=np.int64)
    k = len(class_list)
    if cm.shape != (k, k):
        raise ValueError("confusion matrix does not match the class list")
    if (cm < 0).any():
        raise ValueError("confusion counts must be non-negative")
    total = int(cm.sum())
    per_class: list[ClassReport] = []
    for i, label in enumerate(class_list):
        tp = int(cm[i, i])
        support = int(cm[i].sum())
        predicted = int(cm[:, i].sum())
        recall = tp / support if support else 0.0
        precision = tp / predicted if predicted else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class.append(
            ClassReport(label=label, support=support, accuracy=recall, precision=precision, f1=f1)
        )
    micro = float(np.trace(cm)) / total if total else 0.0
    return EvalReport(
        class_list=list(class_list),
        confusion=cm.tolist(),
        per_class=per_class,
        micro_accuracy=micro,
        macro_precision=float(np.mean([c.precision for c in per_class])) if k else 0.0,
        macro_recall=float(np.mean([c.accuracy for c in per_class])) if k else 0.0,
        macro_f1=float(np.mean([c.f1 for c in per_class])) if k else 0.0,
        total=total,
    )


def evaluate(
    model: HeadModel,
    manifest: DatasetManifest,
    cache: EmbeddingCache,
    class_list: Sequence[str],
    split: str = "test",
    grid: int | None = None,
) -> EvalReport:
    """Confusion-matrix metrics over one split; ties break to the lower index."""
    if list(class_list) != list(manifest.class_list):
        raise ValueError("class list does not match the manifest")
    manifest = scoped_manifest(manifest, grid)
    examples = manifest.split_patches(split)
    if not examples:
        raise ValueError(f"manifest has no {split} split")
    class_index = {label: i for i, label in enumerate(class_list)}
    k = len(class_list)
    cm = np.zeros((k, k), dtype=np.int64)
    for lp in examples:
        logits, _ = head_forward(model, tokens_for(lp, manifest.context, cache))
        cm[class_index[lp.class_label], int(np.argmax(logits))] += 1
    return report_from_confusion(cm, class_list)


@dataclass
class AblationRow:
    context: str
    grid: int
    micro_accuracy: float
    macro_f1: float


def ablate(
    manifest: DatasetManifest,
    cache: EmbeddingCache,
    head_config: HeadConfig,
    train_config: TrainConfig,
    grids: Sequence[int] = (5, 3, 1),
) -> list[AblationRow]:
    """Retrain from the same seed at each context size and evaluate.

    Only the context grid changes between runs; positions smaller grids see
    are the central slots of the full table, so rows are comparable.
    """
    rows: list[AblationRow] = []
    for g in grids:
        scoped = scoped_manifest(manifest, g)
        result = train(scoped, cache, head_config, train_config)
        report = evaluate(result.model, scoped, cache, manifest.class_list)
        rows.append(
            AblationRow(
                context=CONTEXT_TABLE_LABELS.get(g, f"{g} x {g}"),
                grid=g,
                micro_accuracy=report.micro_accuracy,
                macro_f1=report.macro_f1,
            )
        )
        log.info("ablation grid=%d accuracy=%.4f", g, report.micro_accuracy)
    return rows
