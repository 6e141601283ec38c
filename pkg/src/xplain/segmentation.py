"""Image segmentation into superpixels for surrogate-based methods.

Two deterministic modes: a rectangular grid (default) and a SLIC-style
k-means over per-pixel (channel..., lam*x, lam*y) feature vectors with a
fixed iteration count and seeded initialization. Segment ids are always
relabeled contiguous from 0 with every id nonempty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .rng import XorShift64Star


@dataclass
class SegmentationConfig:
    mode: str = "grid"  # "grid" or "slic"
    grid_size: int = 4
    slic_k: int = 16
    slic_lam: float = 1.0
    slic_iters: int = 10
    seed: int = 0


@dataclass
class Segmentation:
    ids: np.ndarray  # (H, W) int array, values 0..nr_segments-1
    nr_segments: int

    def pixels_of(self, segment_id: int) -> np.ndarray:
        return self.ids == segment_id


def _relabel(ids: np.ndarray) -> Segmentation:
    """Relabel by first row-major occurrence; drops empty ids."""
    mapping: dict[int, int] = {}
    out = np.empty_like(ids)
    flat_in = ids.reshape(-1)
    flat_out = out.reshape(-1)
    for i, v in enumerate(flat_in):
        v = int(v)
        if v not in mapping:
            mapping[v] = len(mapping)
        flat_out[i] = mapping[v]
    return Segmentation(out, len(mapping))


def segment(image: np.ndarray, cfg: SegmentationConfig) -> Segmentation:
    """Partition an (H, W, C) image into superpixels."""
    if image.ndim != 3:
        raise ConfigError(f"segment expects an HxWxC image, got shape {image.shape}")
    h, w, _ = image.shape
    if cfg.mode == "grid":
        g = int(cfg.grid_size)
        if g < 1:
            raise ConfigError("grid_size must be >= 1")
        cols = math.ceil(w / g)
        rows_idx = np.arange(h) // g
        cols_idx = np.arange(w) // g
        ids = rows_idx[:, None] * cols + cols_idx[None, :]
        return _relabel(ids)
    if cfg.mode == "slic":
        return _slic(image, cfg)
    raise ConfigError(f"unknown segmentation mode {cfg.mode!r}")


def _slic(image: np.ndarray, cfg: SegmentationConfig) -> Segmentation:
    h, w, c = image.shape
    k = int(cfg.slic_k)
    if k < 1:
        raise ConfigError("slic_k must be >= 1")
    yy, xx = np.mgrid[0:h, 0:w]
    feats = np.concatenate(
        [
            image.astype(np.float64).reshape(h * w, c),
            (cfg.slic_lam * xx).reshape(-1, 1).astype(np.float64),
            (cfg.slic_lam * yy).reshape(-1, 1).astype(np.float64),
        ],
        axis=1,
    )
    rng = XorShift64Star(cfg.seed)
    n = h * w
    # seeded init: k distinct pixel indices drawn from the stream
    chosen: list[int] = []
    while len(chosen) < min(k, n):
        idx = int(rng.uniform(0, n))
        if idx not in chosen:
            chosen.append(idx)
    centers = feats[chosen].copy()
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(int(cfg.slic_iters)):
        d2 = ((feats[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        for j in range(centers.shape[0]):
            members = feats[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return _relabel(assign.reshape(h, w))
