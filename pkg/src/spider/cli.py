"""Command-line entry point: one subcommand per pipeline stage.

Every stage reads and writes plain artifacts (JSONL, the shared vector-file
binary, PNG) so runs are diffable and byte-identical for fixed inputs and
seed. A key = value config file supplies defaults; flags override it.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import curation, dataset, segmenter, train_eval, verifysvc, vindex
from .embedder import Embedder, EmbedderConfig, Embedding, EmbeddingCache
from .model import HeadConfig, head_init, load_checkpoint, save_checkpoint
from .slide import (
    PATCH_SIZE,
    PatchRef,
    SlideStore,
    classify_tissue,
    grid_patches,
    load_slide,
    otsu_threshold,
    read_patch,
    slide_histogram,
)

log = logging.getLogger(__name__)

DEFAULT_DECISION_LOG = "decisions.log"

_TRUE_WORDS = {"1", "true", "yes", "on"}
_FALSE_WORDS = {"0", "false", "no", "off"}


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in _TRUE_WORDS:
        return True
    if lowered in _FALSE_WORDS:
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class PipelineConfig:
    """Typed view of the key = value config file; flags override fields."""

    slides_dir: str | None = None
    masks_dir: str | None = None
    cache_dir: str | None = None
    queues_dir: str | None = None
    out_dir: str | None = None
    embedder_backend: str = "mock"
    embedder_dim: int = 1024
    embedder_normalize: bool = True
    embedder_batch_size: int = 32
    embedder_retries: int = 3
    embedder_url: str | None = None
    index_metric: str = "cosine"
    k_per_seed: int = curation.DEFAULT_K_PER_SEED
    cap: int = curation.DEFAULT_CAP
    ratio: float = 0.8
    split_seed: int = 0
    context_grid: int = dataset.DEFAULT_CONTEXT_GRID
    epochs: int = 10
    batch_size: int = 256
    lr_max: float = 4e-4
    warmup_epochs: int = 1
    weight_decay: float = 0.01
    label_smoothing: float = 0.2
    hidden: int = 128
    intermediate: int = 128
    serve_port: int = 8080
    lease_ttl: float = verifysvc.DEFAULT_LEASE_TTL

    # config-file key -> (attribute, parser)
    KEYS = {
        "slides_dir": ("slides_dir", str),
        "masks_dir": ("masks_dir", str),
        "cache_dir": ("cache_dir", str),
        "queues_dir": ("queues_dir", str),
        "out_dir": ("out_dir", str),
        "embedder.backend": ("embedder_backend", str),
        "embedder.dim": ("embedder_dim", int),
        "embedder.normalize": ("embedder_normalize", _parse_bool),
        "embedder.batch_size": ("embedder_batch_size", int),
        "embedder.retries": ("embedder_retries", int),
        "embedder.url": ("embedder_url", str),
        "index.metric": ("index_metric", str),
        "curation.k_per_seed": ("k_per_seed", int),
        "curation.cap": ("cap", int),
        "split.ratio": ("ratio", float),
        "split.seed": ("split_seed", int),
        "context.grid": ("context_grid", int),
        "train.epochs": ("epochs", int),
        "train.batch_size": ("batch_size", int),
        "train.lr_max": ("lr_max", float),
        "train.warmup_epochs": ("warmup_epochs", int),
        "train.weight_decay": ("weight_decay", float),
        "train.label_smoothing": ("label_smoothing", float),
        "head.hidden": ("hidden", int),
        "head.intermediate": ("intermediate", int),
        "serve.port": ("serve_port", int),
        "serve.lease_ttl": ("lease_ttl", float),
    }

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        cfg = cls()
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in cls.KEYS:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            attr, cast = cls.KEYS[key]
            try:
                setattr(cfg, attr, cast(value.strip("\"'")))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad value for {key}: {exc}")
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for attr in ("slides_dir", "masks_dir", "cache_dir", "queues_dir", "out_dir"):
            value = getattr(self, attr)
            if value is not None and not Path(value).is_dir():
                raise ValueError(f"configured {attr} does not exist: {value}")

    def to_file(self, path: str | Path) -> None:
        """Canonical serialization: sorted keys, one per line."""
        defaults = PipelineConfig()
        lines = []
        for key in sorted(self.KEYS):
            attr, _ = self.KEYS[key]
            value = getattr(self, attr)
            if value is None and getattr(defaults, attr) is None:
                continue
            lines.append(f"{key} = {value}")
        Path(path).write_text("\n".join(lines) + "\n")


def _pick(flag_value, config_value):
    return config_value if flag_value is None else flag_value


def _map_ordered(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _print(args, text: str) -> None:
    if not args.as_json:
        print(text)


def _embedder_config(args, cfg: PipelineConfig) -> EmbedderConfig:
    return EmbedderConfig(
        backend=_pick(args.backend, cfg.embedder_backend),
        dim=_pick(args.dim, cfg.embedder_dim),
        normalize=cfg.embedder_normalize if args.normalize is None else args.normalize,
        batch_size=cfg.embedder_batch_size,
        retries=cfg.embedder_retries,
        remote_url=_pick(args.remote_url, cfg.embedder_url),
    )


def _add_embedder_flags(sub) -> None:
    sub.add_argument("--backend", choices=["mock", "remote"], default=None)
    sub.add_argument("--dim", type=int, default=None)
    sub.add_argument(
        "--no-normalize", dest="normalize", action="store_const", const=False,
        default=None, help="skip L2 normalization of embeddings",
    )
    sub.add_argument("--remote-url", default=None)


# ---------------------------------------------------------------- tile

def save_tiles(path, records: list[dict]) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, separators=(",", ":"), sort_keys=True) + "\n")


def load_tiles(path) -> list[dict]:
    records = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            records.append(json.loads(line))
    return records


def tile_refs(records: list[dict], tissue_only: bool = True) -> list[PatchRef]:
    return [
        PatchRef(slide_id=r["slide_id"], x=r["x"], y=r["y"], size=r["size"])
        for r in records
        if r["is_tissue"] or not tissue_only
    ]


def cmd_tile(args, cfg: PipelineConfig):
    store = SlideStore(_require(args.slides, cfg.slides_dir, "--slides"))
    size = args.size
    records = []
    summaries = []
    for slide_id in store.slide_ids():
        slide = store.get(slide_id)
        threshold = otsu_threshold(slide_histogram(slide))
        tissue = 0
        patches = grid_patches(slide, size)
        for ref in patches:
            verdict = classify_tissue(slide, ref, threshold)
            tissue += int(verdict.is_tissue)
            records.append(
                {
                    "slide_id": slide_id,
                    "x": ref.x,
                    "y": ref.y,
                    "size": ref.size,
                    "threshold": threshold,
                    "bright_fraction": round(verdict.bright_fraction, 6),
                    "is_tissue": verdict.is_tissue,
                }
            )
        summaries.append(
            {
                "slide_id": slide_id,
                "threshold": threshold,
                "patches": len(patches),
                "tissue": tissue,
                "background": len(patches) - tissue,
            }
        )
        _print(
            args,
            f"{slide_id}: {len(patches)} patches, {tissue} tissue, "
            f"{len(patches) - tissue} background (threshold {threshold})",
        )
    save_tiles(args.out, records)
    _print(args, f"wrote {len(records)} patch records to {args.out}")
    return {"out": str(args.out), "slides": summaries, "patches": len(records)}


# ---------------------------------------------------------------- embed

def _context_union(manifest: dataset.DatasetManifest) -> list[PatchRef]:
    union = {
        ref
        for lp in manifest.patches
        for ref in dataset.context_refs(lp.patch, manifest.context)
    }
    return sorted(union, key=lambda r: (r.slide_id, r.y, r.x))


def cmd_embed(args, cfg: PipelineConfig):
    store = SlideStore(_require(args.slides, cfg.slides_dir, "--slides"))
    if (args.tiles is None) == (args.manifest is None):
        raise ValueError("pass exactly one of --tiles or --manifest")
    if args.tiles:
        refs = sorted(
            tile_refs(load_tiles(args.tiles), tissue_only=True),
            key=lambda r: (r.slide_id, r.y, r.x),
        )
        pad = 255
    else:
        manifest = dataset.load_manifest(args.manifest)
        refs = _context_union(manifest)
        pad = manifest.context.pad_value

    econfig = _embedder_config(args, cfg)
    embedder = Embedder(econfig)
    metric = _pick(args.metric, cfg.index_metric)
    cache = EmbeddingCache(dim=econfig.dim, metric=metric)

    def block_of(ref: PatchRef) -> np.ndarray:
        return read_patch(store.get(ref.slide_id), ref, pad_value=pad)

    blocks = _map_ordered(block_of, refs, args.threads)
    for ref, vec in zip(refs, embedder.embed_blocks(blocks)):
        cache.put(ref, vec)
    cache.save(args.out)
    meta = {
        "backend": econfig.backend_id,
        "dim": econfig.dim,
        "normalize": econfig.normalize,
        "count": len(cache),
    }
    Path(str(args.out) + ".meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n"
    )
    _print(args, f"embedded {len(cache)} patches ({econfig.backend_id}) to {args.out}")
    return {"out": str(args.out), **meta}


# ---------------------------------------------------------------- index

def cmd_index(args, cfg: PipelineConfig):
    cache = EmbeddingCache.load(args.cache)
    refs = sorted(cache.patches(), key=lambda r: (r.slide_id, r.y, r.x))
    metric = _pick(args.metric, cfg.index_metric)
    index = vindex.index_build(
        [Embedding(patch=r, vector=cache[r]) for r in refs], metric=metric
    )
    vindex.index_save(index, args.out)
    _print(args, f"indexed {len(refs)} vectors ({metric}, dim {cache.dim}) to {args.out}")
    return {"out": str(args.out), "count": len(refs), "metric": metric, "dim": cache.dim}


# ---------------------------------------------------------------- retrieve

def cmd_retrieve(args, cfg: PipelineConfig):
    index = vindex.index_load(args.index)
    cache = EmbeddingCache.load(args.cache)
    seeds = curation.load_seeds(args.seeds)
    is_tissue = None
    if args.tiles:
        tissue = set(tile_refs(load_tiles(args.tiles), tissue_only=True))
        is_tissue = lambda ref: ref in tissue
    queue = curation.retrieve_candidates(
        seeds,
        index,
        cache,
        k_per_seed=_pick(args.k_per_seed, cfg.k_per_seed),
        cap=_pick(args.cap, cfg.cap),
        is_tissue=is_tissue,
    )
    curation.save_queue(queue, args.out)
    stats = curation.queue_stats(queue)
    _print(
        args,
        f"queue {queue.class_label!r}: {stats['total']} candidates "
        f"from {len(seeds.patches)} seeds, saved to {args.out}",
    )
    return {"out": str(args.out), "class_label": queue.class_label, **stats}


# ---------------------------------------------------------------- serve

def _load_queue_dir(queues_dir: Path, log_name: str) -> dict[str, curation.CandidateQueue]:
    queues: dict[str, curation.CandidateQueue] = {}
    for path in sorted(queues_dir.glob("*.jsonl")):
        if path.name == log_name:
            continue
        queue = curation.load_queue(path)
        if queue.class_label in queues:
            raise ValueError(f"duplicate queue for class {queue.class_label!r}")
        queues[queue.class_label] = queue
    if not queues:
        raise ValueError(f"no queue files in {queues_dir}")
    return queues


def cmd_serve(args, cfg: PipelineConfig):
    import uvicorn

    queues_dir = Path(_require(args.queues, cfg.queues_dir, "--queues"))
    log_path = Path(args.log) if args.log else queues_dir / DEFAULT_DECISION_LOG
    queues = _load_queue_dir(queues_dir, log_path.name)
    store = SlideStore(_require(args.slides, cfg.slides_dir, "--slides"))
    service = verifysvc.VerifyService(
        queues,
        verifysvc.DecisionLog(log_path),
        slides=store,
        lease_ttl=_pick(args.ttl, cfg.lease_ttl),
    )
    app = verifysvc.build_app(service)
    port = _pick(args.port, cfg.serve_port)
    _print(args, f"serving {len(queues)} queue(s) on http://{args.host}:{port}")
    uvicorn.run(app, host=args.host, port=port, log_level="info" if args.verbose else "warning")
    return None


# ---------------------------------------------------------------- compile

def cmd_compile(args, cfg: PipelineConfig):
    queues_dir = Path(_require(args.queues, cfg.queues_dir, "--queues"))
    log_path = Path(args.log) if args.log else queues_dir / DEFAULT_DECISION_LOG
    queues = _load_queue_dir(queues_dir, log_path.name)
    if log_path.exists():
        decisions = verifysvc.DecisionLog(log_path)
        decisions.close()
        for (patch, class_label), d in verifysvc.effective_decisions(
            decisions.decisions
        ).items():
            queue = queues.get(class_label)
            cand = queue.find(patch) if queue is not None else None
            if cand is not None:
                cand.status = (
                    curation.STATUS_ACCEPTED
                    if d.verdict == verifysvc.VERDICT_ACCEPT
                    else curation.STATUS_REJECTED
                )
    accepted = [
        (cand.patch, label)
        for label, queue in sorted(queues.items())
        for cand in queue.candidates
        if cand.status == curation.STATUS_ACCEPTED
    ]
    seed_paths = sorted(
        p for p in Path(args.seeds).iterdir() if p.suffix in (".json", ".jsonl")
    )
    seeds = [curation.load_seeds(p) for p in seed_paths]
    if not seeds:
        raise ValueError(f"no seed files in {args.seeds}")
    grid = _pick(args.grid, cfg.context_grid)
    manifest = dataset.compile_manifest(
        accepted, seeds, context=dataset.ContextSpec(grid=grid)
    )
    dataset.save_manifest(manifest, args.out)
    _print(
        args,
        f"compiled {len(manifest.patches)} centrals "
        f"({len(accepted)} accepted + seeds) to {args.out}",
    )
    return {
        "out": str(args.out),
        "centrals": len(manifest.patches),
        "accepted": len(accepted),
        "classes": manifest.class_list,
    }


# ---------------------------------------------------------------- split

def cmd_split(args, cfg: PipelineConfig):
    manifest = dataset.load_manifest(args.manifest)
    ratio = _pick(args.ratio, cfg.ratio)
    seed = args.seed if args.seed is not None else cfg.split_seed
    split = dataset.split_slides(manifest, ratio=ratio, seed=seed)
    dataset.save_manifest(split, args.out)
    stats = dataset.class_stats(split)
    total = stats["train"] + stats["test"]
    achieved = stats["train"] / total if total else 0.0
    _print(
        args,
        f"split {stats['total_slides']} slides: {stats['train']} train / "
        f"{stats['test']} test patches (achieved {achieved:.3f}, target {ratio})",
    )
    return {"out": str(args.out), "ratio": ratio, "achieved": achieved, **stats}


# ---------------------------------------------------------------- stats

def cmd_stats(args, cfg: PipelineConfig):
    manifest = dataset.load_manifest(args.manifest)
    slide_sizes = None
    slides_dir = args.slides or cfg.slides_dir
    if slides_dir:
        store = SlideStore(slides_dir)
        slide_sizes = {
            sid: (store.get(sid).width, store.get(sid).height)
            for sid in manifest.slide_ids()
        }
    unique = dataset.unique_patch_count(manifest, slide_sizes)
    stats = dataset.class_stats(manifest, unique_patches=unique)
    if not args.as_json:
        width = max([len(c) for c in manifest.class_list] + [5])
        print(f"Organ: {stats['organ']}    Context: {manifest.context.grid}x{manifest.context.grid}")
        print()
        print(f"{'Class':<{width}}  {'Train':>8}  {'Test':>8}  {'Total Central':>14}")
        for label in manifest.class_list:
            row = stats["per_class"][label]
            print(f"{label:<{width}}  {row['train']:>8}  {row['test']:>8}  {row['total']:>14}")
        print(f"{'Total':<{width}}  {stats['train']:>8}  {stats['test']:>8}  {stats['total_central_patches']:>14}")
        print()
        print(f"Total Unique Patches  {unique}")
        print(f"Total Slides          {stats['total_slides']}")
        print(f"Total Classes         {stats['total_classes']}")
    return stats


# ---------------------------------------------------------------- train

def _train_config(args, cfg: PipelineConfig, seed: int) -> train_eval.TrainConfig:
    return train_eval.TrainConfig(
        epochs=_pick(args.epochs, cfg.epochs),
        batch_size=_pick(args.batch_size, cfg.batch_size),
        lr_max=_pick(args.lr_max, cfg.lr_max),
        warmup_epochs=_pick(args.warmup_epochs, cfg.warmup_epochs),
        weight_decay=_pick(args.weight_decay, cfg.weight_decay),
        label_smoothing=_pick(args.label_smoothing, cfg.label_smoothing),
        seed=seed,
        dropout=not args.no_dropout,
    )


def _head_config(args, cfg: PipelineConfig, embed_dim: int, num_classes: int) -> HeadConfig:
    return HeadConfig(
        embed_dim=embed_dim,
        hidden=_pick(args.hidden, cfg.hidden),
        intermediate=_pick(args.intermediate, cfg.intermediate),
        num_classes=num_classes,
    )


def _add_train_flags(sub) -> None:
    sub.add_argument("--epochs", type=int, default=None)
    sub.add_argument("--batch-size", type=int, default=None)
    sub.add_argument("--lr-max", type=float, default=None)
    sub.add_argument("--warmup-epochs", type=int, default=None)
    sub.add_argument("--weight-decay", type=float, default=None)
    sub.add_argument("--label-smoothing", type=float, default=None)
    sub.add_argument("--hidden", type=int, default=None)
    sub.add_argument("--intermediate", type=int, default=None)
    sub.add_argument("--no-dropout", action="store_true")


def _epoch_losses(result: train_eval.TrainResult) -> list[float]:
    losses = [s.loss for s in result.history]
    per_epoch = result.steps_per_epoch
    return [
        float(np.mean(losses[i : i + per_epoch]))
        for i in range(0, len(losses), per_epoch)
    ]


def _write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss"])
        for s in history:
            writer.writerow([s.step, repr(s.lr), repr(s.loss)])


def cmd_train(args, cfg: PipelineConfig):
    manifest = dataset.load_manifest(args.manifest)
    cache = EmbeddingCache.load(args.cache)
    seed = args.seed if args.seed is not None else cfg.split_seed
    head_config = _head_config(args, cfg, cache.dim, len(manifest.class_list))
    train_config = _train_config(args, cfg, seed)
    result = train_eval.train(
        manifest, cache, head_config, train_config, grid=args.context
    )
    save_checkpoint(result.model, args.out, result.class_list, seed)
    history_path = args.history or f"{args.out}.history.csv"
    _write_history(history_path, result.history)
    epoch_losses = _epoch_losses(result)
    for i, loss in enumerate(epoch_losses, start=1):
        _print(args, f"epoch {i:>3}: mean loss {loss:.6f}")
    _print(args, f"saved checkpoint to {args.out} ({result.total_steps} steps)")
    return {
        "out": str(args.out),
        "history": str(history_path),
        "total_steps": result.total_steps,
        "epoch_mean_loss": epoch_losses,
        "final_lr": result.history[-1].lr,
        "classes": result.class_list,
    }


# ---------------------------------------------------------------- eval

def _print_report(args, report: train_eval.EvalReport) -> None:
    if args.as_json:
        return
    width = max([len(c) for c in report.class_list] + [5])
    print(f"{'Class':<{width}}  {'Support':>8}  {'Accuracy':>9}  {'Precision':>9}  {'F1':>7}")
    for row in report.per_class:
        print(
            f"{row.label:<{width}}  {row.support:>8}  {row.accuracy:>9.4f}  "
            f"{row.precision:>9.4f}  {row.f1:>7.4f}"
        )
    print(
        f"{'Total':<{width}}  {report.total:>8}  {report.micro_accuracy:>9.4f}  "
        f"{report.macro_precision:>9.4f}  {report.macro_f1:>7.4f}"
    )
    print("(Total row: micro accuracy, macro precision, macro F1)")


def _write_report_csv(path, report: train_eval.EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "support", "accuracy", "precision", "f1"])
        for row in report.per_class:
            writer.writerow([row.label, row.support, row.accuracy, row.precision, row.f1])
        writer.writerow(
            ["Total", report.total, report.micro_accuracy, report.macro_precision, report.macro_f1]
        )


def cmd_eval(args, cfg: PipelineConfig):
    manifest = dataset.load_manifest(args.manifest)
    cache = EmbeddingCache.load(args.cache)
    model, class_list, _ = load_checkpoint(args.ckpt)
    report = train_eval.evaluate(
        model, manifest, cache, class_list, split=args.split, grid=args.context
    )
    _print_report(args, report)
    payload = report.to_dict()
    if args.csv:
        _write_report_csv(args.csv, report)
        _print(args, f"wrote report CSV to {args.csv}")
        payload["csv"] = str(args.csv)
    return payload


# ---------------------------------------------------------------- ablate

def _parse_contexts(text: str) -> tuple[int, ...]:
    try:
        grids = tuple(int(part) for part in text.split(","))
    except ValueError:
        raise ValueError(f"bad context list {text!r}, expected e.g. 5,3,1")
    for g in grids:
        if g not in dataset.CONTEXT_GRIDS:
            raise ValueError(f"unsupported context grid {g}, choose from {dataset.CONTEXT_GRIDS}")
    return grids


def cmd_ablate(args, cfg: PipelineConfig):
    manifest = dataset.load_manifest(args.manifest)
    cache = EmbeddingCache.load(args.cache)
    seed = args.seed if args.seed is not None else cfg.split_seed
    head_config = _head_config(args, cfg, cache.dim, len(manifest.class_list))
    train_config = _train_config(args, cfg, seed)
    rows = train_eval.ablate(
        manifest, cache, head_config, train_config, grids=_parse_contexts(args.contexts)
    )
    payload = {
        "rows": [
            {
                "context": r.context,
                "grid": r.grid,
                "micro_accuracy": r.micro_accuracy,
                "macro_f1": r.macro_f1,
            }
            for r in rows
        ]
    }
    if not args.as_json:
        width = max(len(r.context) for r in rows)
        print(f"{'Context':<{width}}  {'Accuracy':>9}  {'Macro F1':>9}")
        for r in rows:
            print(f"{r.context:<{width}}  {r.micro_accuracy:>9.4f}  {r.macro_f1:>9.4f}")
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        _print(args, f"wrote ablation report to {args.out}")
        payload["out"] = str(args.out)
    return payload


# ---------------------------------------------------------------- segment

def cmd_segment(args, cfg: PipelineConfig):
    slide = load_slide(args.slide)
    model, class_list, _ = load_checkpoint(args.ckpt)
    econfig = EmbedderConfig(
        backend=_pick(args.backend, cfg.embedder_backend),
        dim=model.config.embed_dim,
        normalize=cfg.embedder_normalize if args.normalize is None else args.normalize,
        batch_size=cfg.embedder_batch_size,
        retries=cfg.embedder_retries,
        remote_url=_pick(args.remote_url, cfg.embedder_url),
    )
    grid = _pick(args.grid, cfg.context_grid)
    label_map = segmenter.segment_slide(
        slide,
        model,
        class_list,
        Embedder(econfig),
        context=dataset.ContextSpec(grid=grid),
    )
    png = segmenter.render_overlay(slide, label_map, alpha=args.alpha)
    Path(args.out).write_bytes(png)
    if args.labels:
        segmenter.save_labels(label_map, args.labels)
    report = segmenter.proportions(label_map)
    for label in class_list:
        _print(args, f"{label}: {report.fractions[label]:.4f}")
    _print(
        args,
        f"tissue {report.tissue_patch_count} / background {report.background_patch_count} "
        f"cells, overlay at {args.out}",
    )
    return {
        "out": str(args.out),
        "labels": str(args.labels) if args.labels else None,
        "fractions": report.fractions,
        "tissue_patch_count": report.tissue_patch_count,
        "background_patch_count": report.background_patch_count,
    }


# ---------------------------------------------------------------- wiring

def _require(flag_value, config_value, flag_name: str) -> str:
    value = _pick(flag_value, config_value)
    if value is None:
        raise ValueError(f"{flag_name} required (flag or config)")
    return value


def build_parser() -> argparse.ArgumentParser:
    # Global flags are accepted both before and after the subcommand;
    # SUPPRESS keeps the subparser from clobbering a top-level value.
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="key = value config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed for all randomness")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker cap for parallel stages")
    common.add_argument("--json", dest="as_json", action="store_true", default=argparse.SUPPRESS, help="machine-readable output")
    common.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(
        prog="spider",
        parents=[common],
        description="Patch curation, verification, and context-aware classification pipeline.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    def add_parser(name: str, help_text: str):
        return sub.add_parser(name, parents=[common], help=help_text)

    p = add_parser("tile", "grid a slide directory into patches with tissue verdicts")
    p.add_argument("--slides", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=PATCH_SIZE)
    p.set_defaults(func=cmd_tile)

    p = add_parser("embed", "embed tissue patches or manifest context cells")
    p.add_argument("--slides", default=None)
    p.add_argument("--tiles", default=None, help="tile records; embeds tissue patches")
    p.add_argument("--manifest", default=None, help="manifest; embeds all context cells")
    p.add_argument("--out", required=True)
    p.add_argument("--metric", choices=[vindex.METRIC_COSINE, vindex.METRIC_L2], default=None)
    _add_embedder_flags(p)
    p.set_defaults(func=cmd_embed)

    p = add_parser("index", "build an exact search index from an embedding cache")
    p.add_argument("--cache", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metric", choices=[vindex.METRIC_COSINE, vindex.METRIC_L2], default=None)
    p.set_defaults(func=cmd_index)

    p = add_parser("retrieve", "build a review queue from seed patches")
    p.add_argument("--index", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--seeds", required=True, help="seed-set JSON file")
    p.add_argument("--out", required=True)
    p.add_argument("--k-per-seed", type=int, default=None)
    p.add_argument("--cap", type=int, default=None)
    p.add_argument("--tiles", default=None, help="restrict candidates to tissue patches")
    p.set_defaults(func=cmd_retrieve)

    p = add_parser("serve", "run the verification HTTP service")
    p.add_argument("--queues", default=None, help="directory of queue .jsonl files")
    p.add_argument("--slides", default=None)
    p.add_argument("--log", default=None, help=f"decision log (default <queues>/{DEFAULT_DECISION_LOG})")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--ttl", type=float, default=None, help="candidate lease TTL seconds")
    p.set_defaults(func=cmd_serve)

    p = add_parser("compile", "merge seeds and accepted candidates into a manifest")
    p.add_argument("--queues", default=None)
    p.add_argument("--seeds", required=True, help="directory of seed-set JSON files")
    p.add_argument("--log", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=int, choices=dataset.CONTEXT_GRIDS, default=None)
    p.set_defaults(func=cmd_compile)

    p = add_parser("split", "assign slides to train/test chasing a patch ratio")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratio", type=float, default=None)
    p.set_defaults(func=cmd_split)

    p = add_parser("stats", "dataset summary table")
    p.add_argument("--manifest", required=True)
    p.add_argument("--slides", default=None, help="slide dir for exact unique-patch bounds")
    p.set_defaults(func=cmd_stats)

    p = add_parser("train", "train the context head on the manifest train split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--context", type=int, choices=dataset.CONTEXT_GRIDS, default=None,
                   help="override the manifest context grid")
    p.add_argument("--history", default=None, help="history CSV path (default <out>.history.csv)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = add_parser("eval", "evaluate a checkpoint on a manifest split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=[dataset.SPLIT_TRAIN, dataset.SPLIT_TEST], default=dataset.SPLIT_TEST)
    p.add_argument("--context", type=int, choices=dataset.CONTEXT_GRIDS, default=None)
    p.add_argument("--csv", default=None, help="also write the report as CSV")
    p.set_defaults(func=cmd_eval)

    p = add_parser("ablate", "retrain per context size and compare accuracies")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--contexts", default="5,3,1", help="comma list of grids, e.g. 5,3,1")
    p.add_argument("--out", default=None, help="optional JSON report path")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = add_parser("segment", "classify every tissue cell of one slide")
    p.add_argument("--slide", required=True, help="slide image path (with JSON sidecar)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="overlay PNG path")
    p.add_argument("--labels", default=None, help="label-map JSON path")
    p.add_argument("--alpha", type=float, default=0.4)
    p.add_argument("--grid", type=int, choices=dataset.CONTEXT_GRIDS, default=None)
    _add_embedder_flags(p)
    p.set_defaults(func=cmd_segment)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (
        ("config", None), ("seed", None), ("threads", None),
        ("as_json", False), ("verbose", False),
    ):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.threads is None:
        args.threads = os.cpu_count() or 1
    try:
        cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
        payload = args.func(args, cfg)
    except Exception as exc:  # runtime failure -> exit 1, usage errors exit 2 upstream
        if args.verbose:
            log.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.as_json and payload is not None:
        print(json.dumps(payload, indent=2, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
