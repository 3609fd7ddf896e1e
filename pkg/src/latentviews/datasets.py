"""Procedural blob dataset.

Classes are defined by prototype latents of the analytic generator; each
sample jitters its class prototype and decodes it to an image. Every image
therefore lies exactly on the generator manifold (the planted latent is kept
alongside), which keeps inversion well-posed at desk scale. Stored on disk as
plain ``.npy`` arrays plus a ``meta.json``, both byte-deterministic for a
fixed seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import torch

from .modelzoo import generate


@dataclass
class BlobDataset:
    images: np.ndarray      # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray      # (N,) int64
    latents: np.ndarray     # (N, M) float32, the planted generator latents
    anchor_ids: np.ndarray  # (N,) int64, globally unique

    def __len__(self) -> int:
        return len(self.images)

    def images_tensor(self, dtype=torch.float64) -> torch.Tensor:
        return torch.as_tensor(self.images, dtype=dtype)


def _render(generator, latents: np.ndarray, dtype, chunk: int = 256) -> np.ndarray:
    out = []
    with torch.no_grad():
        for lo in range(0, len(latents), chunk):
            w = torch.as_tensor(latents[lo:lo + chunk], dtype=dtype)
            out.append(generate(generator, w).cpu().numpy().astype(np.float32))
    return np.concatenate(out)


def make_blob_dataset(generator, n_classes: int, train_per_class: int,
                      test_per_class: int, seed: int = 0,
                      prototype_scale: float = 1.2, latent_jitter: float = 0.35):
    """(train, test, prototypes): class-balanced splits of decoded latents."""
    if n_classes < 1 or train_per_class < 1 or test_per_class < 1:
        raise ValueError("n_classes and per-class counts must be positive")
    rng = np.random.default_rng(seed)
    latent_dim = generator.input_shape[0]
    prototypes = rng.normal(0.0, prototype_scale, (n_classes, latent_dim))

    def sample_split(per_class: int, id_offset: int) -> BlobDataset:
        labels = np.repeat(np.arange(n_classes), per_class)
        jitter = rng.normal(0.0, latent_jitter, (len(labels), latent_dim))
        latents = prototypes[labels] + jitter
        images = _render(generator, latents, generator.dtype)
        return BlobDataset(
            images=images,
            labels=labels.astype(np.int64),
            latents=latents.astype(np.float32),
            anchor_ids=(id_offset + np.arange(len(labels))).astype(np.int64),
        )

    train = sample_split(train_per_class, id_offset=0)
    test = sample_split(test_per_class, id_offset=len(train))
    return train, test, prototypes


_SPLIT_ARRAYS = ("images", "labels", "latents", "anchor_ids")


def save_dataset(dirpath, train: BlobDataset, test: BlobDataset, meta: dict) -> None:
    os.makedirs(dirpath, exist_ok=True)
    for split_name, split in (("train", train), ("test", test)):
        for arr_name in _SPLIT_ARRAYS:
            np.save(os.path.join(dirpath, f"{split_name}_{arr_name}.npy"),
                    getattr(split, arr_name))
    with open(os.path.join(dirpath, "meta.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_dataset(dirpath):
    def load_split(split_name: str) -> BlobDataset:
        arrays = {name: np.load(os.path.join(dirpath, f"{split_name}_{name}.npy"))
                  for name in _SPLIT_ARRAYS}
        return BlobDataset(**arrays)

    with open(os.path.join(dirpath, "meta.json")) as fh:
        meta = json.load(fh)
    return load_split("train"), load_split("test"), meta
