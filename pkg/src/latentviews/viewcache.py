"""On-disk store of generated views so contrastive training never touches the
generator.

File layout: 8-byte magic, little-endian uint32 header length, JSON header,
then a flat float32 little-endian payload. Records are fixed-size (n latents
followed by n images per anchor, anchors in sorted-id order), so any anchor
can be read by offset. A CRC-32 over the payload is stored in the header and
verified on open; writes go through a temp file plus rename so a failed write
never leaves a partial file behind.

The same format with ``image_shape = null`` (latents only) stores inversion
results.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
import time
import zlib

import numpy as np
import torch

from . import viewgen
from .viewgen import _as_embed, per_sample_rng, stable_norm

logger = logging.getLogger(__name__)

MAGIC = b"LVVCACHE"
VERSION = 1


class CacheFormatError(ValueError):
    """File is not a readable view cache."""


class CacheVersionError(CacheFormatError):
    """Cache was written by an incompatible format version."""


class CacheChecksumError(CacheFormatError):
    """Payload bytes do not match the stored checksum."""


class ViewCache:
    """Validated in-memory view of a cache file with per-record access."""

    def __init__(self, header: dict, payload: bytes):
        self.header = header
        self._payload = payload
        self.anchor_ids = list(header["anchor_ids"])
        self._pos = {aid: i for i, aid in enumerate(self.anchor_ids)}
        self.views_per_anchor = int(header["views_per_anchor"])
        self.latent_dim = int(header["latent_dim"])
        self.image_shape = None if header["image_shape"] is None else tuple(header["image_shape"])
        lat_floats = self.views_per_anchor * self.latent_dim
        img_floats = 0 if self.image_shape is None else \
            self.views_per_anchor * int(np.prod(self.image_shape))
        self._lat_bytes = lat_floats * 4
        self._rec_bytes = (lat_floats + img_floats) * 4

    def __len__(self) -> int:
        return len(self.anchor_ids)

    def __contains__(self, anchor_id) -> bool:
        return anchor_id in self._pos

    def record(self, anchor_id):
        """(latents [n, M], images [n, C, H, W] or None) for one anchor."""
        if anchor_id not in self._pos:
            raise KeyError(f"anchor id {anchor_id} not in cache")
        start = self._pos[anchor_id] * self._rec_bytes
        raw = self._payload[start:start + self._rec_bytes]
        latents = np.frombuffer(raw[:self._lat_bytes], dtype="<f4").reshape(
            self.views_per_anchor, self.latent_dim).copy()
        images = None
        if self.image_shape is not None:
            images = np.frombuffer(raw[self._lat_bytes:], dtype="<f4").reshape(
                self.views_per_anchor, *self.image_shape).copy()
        return latents, images

    def __iter__(self):
        for aid in self.anchor_ids:
            latents, images = self.record(aid)
            yield aid, latents, images


def write_cache(path, entries: dict, dataset_id: str = "", generator_hash: str = "") -> int:
    """Atomically write per-anchor (latents, images) records; returns the CRC-32.

    ``entries`` maps anchor id -> (latents [n, M], images [n, C, H, W] or None);
    all records must agree on n and shapes. Images may be None for a
    latents-only cache, but consistently so.
    """
    if not entries:
        raise ValueError("refusing to write an empty cache")
    ids = sorted(entries)
    first_lat, first_img = entries[ids[0]]
    first_lat = np.asarray(first_lat, dtype=np.float32)
    n, latent_dim = first_lat.shape
    image_shape = None if first_img is None else tuple(np.asarray(first_img).shape[1:])

    chunks = []
    for aid in ids:
        lat, img = entries[aid]
        lat = np.ascontiguousarray(np.asarray(lat, dtype="<f4"))
        if lat.shape != (n, latent_dim):
            raise ValueError(f"anchor {aid}: latents shape {lat.shape} != {(n, latent_dim)}")
        chunks.append(lat.tobytes())
        if image_shape is None:
            if img is not None:
                raise ValueError(f"anchor {aid}: unexpected images in a latents-only cache")
        else:
            img = np.ascontiguousarray(np.asarray(img, dtype="<f4"))
            if img.shape != (n, *image_shape):
                raise ValueError(f"anchor {aid}: images shape {img.shape} != {(n, *image_shape)}")
            chunks.append(img.tobytes())
    payload = b"".join(chunks)
    checksum = zlib.crc32(payload)

    header = {
        "magic": "latentviews-viewcache",
        "version": VERSION,
        "dataset_id": dataset_id,
        "generator_hash": generator_hash,
        "views_per_anchor": n,
        "image_shape": None if image_shape is None else list(image_shape),
        "latent_dim": latent_dim,
        "anchor_ids": [int(a) for a in ids],
        "payload_crc32": checksum,
        "payload_bytes": len(payload),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(header_bytes)))
            fh.write(header_bytes)
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return checksum


def read_cache(path) -> ViewCache:
    """Open and validate a cache file (magic, version, checksum)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CacheFormatError(f"{path}: not a view cache (bad magic)")
        raw_len = fh.read(4)
        if len(raw_len) != 4:
            raise CacheFormatError(f"{path}: truncated header")
        (header_len,) = struct.unpack("<I", raw_len)
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CacheFormatError(f"{path}: unreadable header ({exc})") from exc
        payload = fh.read()
    if header.get("version") != VERSION:
        raise CacheVersionError(
            f"{path}: cache version {header.get('version')} not supported "
            f"(this build reads version {VERSION})")
    if len(payload) != header["payload_bytes"]:
        raise CacheFormatError(
            f"{path}: payload is {len(payload)} bytes, header says {header['payload_bytes']}")
    checksum = zlib.crc32(payload)
    if checksum != header["payload_crc32"]:
        raise CacheChecksumError(
            f"{path}: payload checksum {checksum} != stored {header['payload_crc32']}")
    return ViewCache(header, payload)


def generate_and_cache(images: torch.Tensor, anchor_ids, mode: str, path, *,
                       g, e=None, f=None, cfg=None, seed: int = 0,
                       inversions=None, dataset_id: str = "", generator_hash: str = "",
                       max_skip_fraction: float = 0.01) -> dict:
    """Generate n views per anchor with w_search or w_perturb and cache them.

    Inversions come either from the inverter ``e`` or from ``inversions``, a
    mapping anchor id -> latent (e.g. a precomputed inversion cache).
    Per-anchor failures are skipped and logged; more than ``max_skip_fraction``
    of skips fails the whole run. Returns summary stats including the mean
    boundary residual (w_search) or the sigma used (w_perturb).
    """
    if mode not in ("w_search", "w_perturb"):
        raise ValueError(f"unknown generator op {mode!r}")
    if mode == "w_search" and f is None:
        raise ValueError("w_search caching needs the encoder f")
    if e is None and inversions is None:
        raise ValueError("view generation needs an inverter e or precomputed inversions")
    if cfg is None:
        cfg = viewgen.WSearchConfig() if mode == "w_search" else viewgen.PerturbConfig()

    t0 = time.perf_counter()
    entries: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    residuals = []
    skipped = []
    for idx, aid in enumerate(anchor_ids):
        aid = int(aid)
        x = images[idx]
        rng = per_sample_rng(seed, aid)
        if inversions is not None:
            latent = torch.as_tensor(np.asarray(inversions[aid]).reshape(-1), dtype=x.dtype)
            invert = lambda _x, _w=latent: _w  # noqa: E731 - per-anchor constant
        else:
            invert = e
        try:
            if mode == "w_search":
                pairs = viewgen.w_search(x, f, g, invert, cfg, rng)
                latents = torch.stack([w for w, _ in pairs])
                views = torch.stack([img for _, img in pairs])
                embed = _as_embed(f)
                with torch.no_grad():
                    z0 = embed(x)
                    zs = embed(views)
                    dists = stable_norm(zs - z0.unsqueeze(0), dim=-1)
                residuals.append(float((dists - cfg.epsilon1).abs().mean()))
            else:
                latents, views = viewgen.w_perturb_with_latents(x, g, invert, cfg, rng)
            entries[aid] = (latents.cpu().numpy().astype(np.float32),
                            views.cpu().numpy().astype(np.float32))
        except Exception as exc:  # noqa: BLE001 - per-anchor isolation is the point
            logger.warning("view generation failed for anchor %d: %s", aid, exc)
            skipped.append(aid)

    total = len(list(anchor_ids))
    if total and len(skipped) / total > max_skip_fraction:
        raise RuntimeError(
            f"view generation skipped {len(skipped)}/{total} anchors "
            f"(> {max_skip_fraction:.0%}); first failures: {skipped[:5]}")
    checksum = write_cache(path, entries, dataset_id=dataset_id, generator_hash=generator_hash)
    summary = {
        "mode": mode,
        "n_anchors": total,
        "n_skipped": len(skipped),
        "views_per_anchor": cfg.n_views if mode == "w_search" else cfg.count,
        "wall_clock_s": time.perf_counter() - t0,
        "checksum": checksum,
    }
    if mode == "w_search":
        summary["mean_boundary_residual"] = float(np.mean(residuals)) if residuals else None
    else:
        summary["sigma"] = cfg.sigma
    return summary
