"""Contrastive pretraining loop with the three assimilation modes.

* baseline_two_expert: two expert-transformed views per anchor.
* A1_replace: one expert view plus one weak-transformed cached generated view.
* A2_multiview: two expert views plus m cached generated views appended as
  extra positives (weak-transformed by default).

Every stochastic choice is drawn from a stream keyed by
(seed, epoch, anchor id, view slot), so metric logs are reproducible
byte-for-byte for a fixed seed regardless of batch scheduling.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .batching import MultiviewBatch, append_generated, build_two_view, layout_anchor_ids
from .evaluation import embed_images, knn_accuracy
from .losses import LossConfig, compute_loss
from .modelzoo import MlpPredictor, encode, save_checkpoint
from .viewgen import TransformConfig, expert_transform, per_sample_rng

logger = logging.getLogger(__name__)

ASSIMILATIONS = ("baseline_two_expert", "A1_replace", "A2_multiview")
VIEW_SOURCES = ("expert", "w_search_cache", "w_perturb_cache")

_TWO_VIEW_VARIANTS = ("simclr", "infonce", "simsiam")
_A2_VARIANTS = ("a2_simclr", "a2_infonce", "a2_full", "a2_simsiam")

# Stream tags far outside the anchor-id range so they can never collide with
# a per-sample transform stream.
_SHUFFLE_TAG = 0x53484646
_KNN_REF_TAG = 0x4B4E4E52


@dataclass
class TrainConfig:
    assimilation: str = "baseline_two_expert"
    view_source: str = "expert"
    # desk-scale defaults; the paper-scale presets below carry their own
    # values. Weight decay stays off here: on the small tanh encoder it pulls
    # the head into the constant-embedding collapse
    lr: float = 0.03
    weight_decay: float = 0.0
    momentum: float = 0.9
    cosine_decay: bool = True
    batch_size: int = 64
    epochs: int = 50
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    views_per_anchor: int = 1
    weak_transform_on_generated: bool = True
    eval_every: int = 5
    knn_k: int = 5
    knn_reference_size: int = 1000

    def __post_init__(self):
        if self.assimilation not in ASSIMILATIONS:
            raise ValueError(f"unknown assimilation mode {self.assimilation!r}")
        if self.view_source not in VIEW_SOURCES:
            raise ValueError(f"unknown view source {self.view_source!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.assimilation == "A2_multiview":
            if self.loss.variant not in _A2_VARIANTS:
                raise ValueError(
                    f"A2 assimilation needs an A2 loss variant, got {self.loss.variant!r}")
        elif self.loss.variant not in _TWO_VIEW_VARIANTS:
            raise ValueError(
                f"{self.assimilation} needs a two-view loss variant, got {self.loss.variant!r}")
        if self.assimilation != "baseline_two_expert" and self.view_source == "expert":
            raise ValueError(f"{self.assimilation} needs a cached view source")


def preset_cifar10() -> TrainConfig:
    """Full-scale reference hyperparameters (not run in CI)."""
    return TrainConfig(lr=0.015, weight_decay=5e-5, momentum=0.9, cosine_decay=True,
                       batch_size=128, epochs=800, loss=LossConfig(variant="infonce", tau=0.5))


def preset_cifar100() -> TrainConfig:
    return TrainConfig(lr=0.5, weight_decay=1e-4, momentum=0.9, cosine_decay=True,
                       batch_size=512, epochs=1200, loss=LossConfig(variant="simclr", tau=0.5))


def preset_tinyimagenet() -> TrainConfig:
    return TrainConfig(lr=0.5, weight_decay=1e-4, momentum=0.9, cosine_decay=True,
                       batch_size=512, epochs=1000, loss=LossConfig(variant="simclr", tau=0.5))


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr * (1 + cos(pi * step / total_steps)) / 2, clamped past the end."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step > total_steps:
        logger.warning("cosine_lr: step %d past total_steps %d, clamping to 0", step, total_steps)
        return 0.0
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def _cached_view(cache, anchor_id: int, rng, dtype) -> torch.Tensor:
    if cache is None:
        raise ValueError("this assimilation mode needs a view cache")
    try:
        _, images = cache.record(int(anchor_id))
    except KeyError as exc:
        raise RuntimeError(f"view cache has no record for anchor id {int(anchor_id)}") from exc
    pick = int(rng.integers(0, len(images)))
    return torch.as_tensor(images[pick], dtype=dtype)


def assemble_views(images: torch.Tensor, anchor_ids, cfg: TrainConfig, cache,
                   epoch: int) -> MultiviewBatch:
    """Build the view batch for one step (no embeddings yet)."""
    n = len(images)
    full_cfg = TransformConfig.full()
    weak_cfg = TransformConfig.weak()
    dtype = images.dtype

    def expert(i: int, slot: int) -> torch.Tensor:
        rng = per_sample_rng(cfg.seed, epoch, int(anchor_ids[i]), slot)
        return expert_transform(images[i], full_cfg, rng)

    def generated(i: int, slot: int) -> torch.Tensor:
        rng = per_sample_rng(cfg.seed, epoch, int(anchor_ids[i]), slot)
        view = _cached_view(cache, anchor_ids[i], rng, dtype)
        if cfg.weak_transform_on_generated:
            view = expert_transform(view, weak_cfg, rng)
        return view

    if cfg.assimilation == "baseline_two_expert":
        rows = [expert(i, 0) for i in range(n)] + [expert(i, 1) for i in range(n)]
        index_map = build_two_view(n)
    elif cfg.assimilation == "A1_replace":
        rows = [expert(i, 0) for i in range(n)] + [generated(i, 1) for i in range(n)]
        index_map = build_two_view(n)
    else:  # A2_multiview
        m = cfg.views_per_anchor
        rows = [expert(i, 0) for i in range(n)] + [expert(i, 1) for i in range(n)]
        for i in range(n):
            rows.extend(generated(i, 2 + t) for t in range(m))
        index_map = append_generated(build_two_view(n), m)
        # reorder: generated rows were built anchor-major, which matches
        # append_generated's layout (base + a*m + t)
    return MultiviewBatch(
        index_map=index_map,
        anchor_ids=layout_anchor_ids(anchor_ids,
                                     cfg.views_per_anchor if cfg.assimilation == "A2_multiview" else 0),
        views=torch.stack(rows),
    )


def train_step(batch: MultiviewBatch, encoder, optimizer, cfg: TrainConfig,
               predictor=None) -> float:
    """One forward/backward/SGD update; returns the scalar loss."""
    batch.embeddings = encode(encoder, batch.views)
    loss = compute_loss(batch, cfg.loss, predictor)
    if not torch.isfinite(loss):
        raise RuntimeError(
            f"non-finite loss ({float(loss)}) on batch of {batch.index_map.size} views, "
            f"variant={cfg.loss.variant}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def _format_float(x: float) -> str:
    return repr(float(x))


def pretrain(encoder, train_images: torch.Tensor, train_labels: np.ndarray,
             eval_images: torch.Tensor, eval_labels: np.ndarray,
             anchor_ids, cfg: TrainConfig, cache=None, out_dir=None) -> dict:
    """Run the full pretraining loop.

    Logs (step, epoch, lr, loss, knn5_acc) rows; the 5-NN column is filled on
    the last step of every eval epoch. Writes ``metrics.csv`` and
    ``encoder.ckpt`` into ``out_dir`` when given. Returns the rows plus paths.
    """
    predictor = None
    params = list(encoder.parameters())
    if cfg.loss.variant in ("simsiam", "a2_simsiam"):
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed + 7)
            predictor = MlpPredictor(encoder.output_shape[0], dtype=encoder.dtype)
        params = params + list(predictor.parameters())
    optimizer = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum,
                                weight_decay=cfg.weight_decay)

    anchor_ids = np.asarray(anchor_ids)
    n = len(train_images)
    batch_starts = list(range(0, n, cfg.batch_size))
    steps_per_epoch = sum(1 for s in batch_starts if min(cfg.batch_size, n - s) >= 2)
    total_steps = cfg.epochs * steps_per_epoch

    # fixed class-agnostic reference subset for the periodic 5-NN eval
    # (a plain prefix would be class-ordered on our datasets)
    ref_idx = per_sample_rng(cfg.seed, _KNN_REF_TAG).permutation(n)[
        :min(cfg.knn_reference_size, n)]
    rows = []
    step = 0
    for epoch in range(cfg.epochs):
        order = per_sample_rng(cfg.seed, _SHUFFLE_TAG, epoch).permutation(n)
        for start in batch_starts:
            take = order[start:start + cfg.batch_size]
            if len(take) < 2:
                continue
            lr = cosine_lr(step, total_steps, cfg.lr) if cfg.cosine_decay else cfg.lr
            for group in optimizer.param_groups:
                group["lr"] = lr
            batch = assemble_views(train_images[take], anchor_ids[take], cfg, cache, epoch)
            loss = train_step(batch, encoder, optimizer, cfg, predictor)
            rows.append({"step": step, "epoch": epoch, "lr": lr, "loss": loss, "knn5_acc": None})
            step += 1
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            with torch.no_grad():
                ref_z = embed_images(encoder, train_images[ref_idx])
                test_z = embed_images(encoder, eval_images)
            acc = knn_accuracy(ref_z, train_labels[ref_idx], test_z, eval_labels, cfg.knn_k)
            rows[-1]["knn5_acc"] = acc

    result = {"rows": rows, "final_knn5": next(
        (r["knn5_acc"] for r in reversed(rows) if r["knn5_acc"] is not None), None)}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.csv")
        write_metrics_csv(metrics_path, rows)
        ckpt_path = os.path.join(out_dir, "encoder.ckpt")
        save_checkpoint(encoder, ckpt_path, seed=cfg.seed)
        result["metrics_path"] = metrics_path
        result["checkpoint_path"] = ckpt_path
    return result


def write_metrics_csv(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write("step,epoch,lr,loss,knn5_acc\n")
        for r in rows:
            knn = "" if r["knn5_acc"] is None else _format_float(r["knn5_acc"])
            fh.write(f"{r['step']},{r['epoch']},{_format_float(r['lr'])},"
                     f"{_format_float(r['loss'])},{knn}\n")


def read_metrics_csv(path) -> list[dict]:
    rows = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            vals = line.rstrip("\n").split(",")
            row = dict(zip(header, vals))
            rows.append({
                "step": int(row["step"]),
                "epoch": int(row["epoch"]),
                "lr": float(row["lr"]),
                "loss": float(row["loss"]),
                "knn5_acc": float(row["knn5_acc"]) if row["knn5_acc"] else None,
            })
    return rows
