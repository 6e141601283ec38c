"""Rendering saliency tensors as RGB images.

All renderers return values in [0, 1] per channel and guard the
zero-saliency case by mapping to the renderer's neutral color (white,
black or mid-gray) instead of dividing by zero. Colormaps are explicit
piecewise-linear tables so output is bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ConfigError, ShapeError
from .saliency import Saliency
from .segmentation import Segmentation
from .tensor import Tensor


@dataclass
class RGBImage:
    pixels: np.ndarray  # (H, W, 3) float64 in [0, 1]

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim != 3 or p.shape[2] != 3:
            raise ShapeError(f"RGB image must be HxWx3, got {p.shape}")
        if p.size and (p.min() < 0.0 or p.max() > 1.0):
            raise ShapeError("RGB values outside [0, 1]")
        self.pixels = p

    @property
    def shape(self):
        return self.pixels.shape


@dataclass
class Colormap:
    name: str
    positions: tuple[float, ...]
    colors: tuple[tuple[float, float, float], ...]

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Piecewise-linear lookup; values are clipped to the table range."""
        v = np.clip(values, self.positions[0], self.positions[-1])
        table = np.asarray(self.colors, dtype=np.float64)
        out = np.empty(v.shape + (3,), dtype=np.float64)
        for ch in range(3):
            out[..., ch] = np.interp(v, self.positions, table[:, ch])
        return out


# Diverging red-white-blue map over [-1, 1], point-symmetric around 0.
DIVERGING = Colormap(
    "diverging",
    (-1.0, -0.5, 0.0, 0.5, 1.0),
    ((0.0, 0.0, 0.5), (0.0, 0.0, 1.0), (1.0, 1.0, 1.0), (1.0, 0.0, 0.0), (0.5, 0.0, 0.0)),
)

GRAY = Colormap("gray", (0.0, 1.0), ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)))

# Jet-like intensity map over [0, 1] for blended overlays.
JETLIKE = Colormap(
    "jetlike",
    (0.0, 0.25, 0.5, 0.75, 1.0),
    ((0.0, 0.0, 0.5), (0.0, 1.0, 1.0), (0.0, 1.0, 0.0), (1.0, 1.0, 0.0), (1.0, 0.0, 0.0)),
)


def _image_values(e: Saliency) -> np.ndarray:
    """Saliency as (H, W, C); accepts a leading batch axis of 1."""
    arr = e.tensor.data
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim == 2:  # flat vectors render as a single pixel row
        arr = arr.reshape(1, -1, 1)
    if arr.ndim != 3:
        raise ShapeError(f"saliency is not image-shaped: {e.tensor.shape}")
    return np.asarray(arr, dtype=np.float64)


def _channel_sum(e: Saliency) -> np.ndarray:
    return _image_values(e).sum(axis=2)


def _channel_abs_sum(e: Saliency) -> np.ndarray:
    return np.abs(_image_values(e)).sum(axis=2)


def to_heatmap(e: Saliency) -> RGBImage:
    """Diverging map of the channel-summed saliency; zero maps to white."""
    v = _channel_sum(e)
    peak = np.abs(v).max()
    v = v / peak if peak > 0 else np.zeros_like(v)
    return RGBImage(DIVERGING.apply(v))


def to_graymap(e: Saliency) -> RGBImage:
    """Gray ramp of the absolute channel sum; zero maps to black."""
    v = _channel_abs_sum(e)
    peak = v.max()
    v = v / peak if peak > 0 else np.zeros_like(v)
    return RGBImage(GRAY.apply(v))


def scale_input(e: Saliency, x_raw: RGBImage) -> RGBImage:
    """Darken the raw input by normalized absolute saliency."""
    v = _channel_abs_sum(e)
    peak = v.max()
    scale = v / peak if peak > 0 else np.zeros_like(v)
    if scale.shape != x_raw.shape[:2]:
        raise ShapeError(f"saliency {scale.shape} does not match image {x_raw.shape[:2]}")
    return RGBImage(x_raw.pixels * scale[:, :, None])


def mask_input(e: Saliency, seg: Segmentation, x_raw: RGBImage, top_k: int = 50) -> RGBImage:
    """Keep the top_k segments by peak absolute saliency, zero the rest."""
    v = _channel_abs_sum(e)
    if seg.ids.shape != v.shape:
        raise ShapeError(f"segmentation {seg.ids.shape} does not match saliency {v.shape}")
    top_k = max(0, min(int(top_k), seg.nr_segments))
    scores = [(float(v[seg.ids == sid].max()), sid) for sid in range(seg.nr_segments)]
    scores.sort(key=lambda t: (-t[0], t[1]))
    keep = {sid for _, sid in scores[:top_k]}
    mask = np.isin(seg.ids, sorted(keep))
    return RGBImage(x_raw.pixels * mask[:, :, None])


def gaussian_blur(v: np.ndarray, sigma: float = 3.0) -> np.ndarray:
    """Separable Gaussian, kernel truncated at ceil(3*sigma), edges clamped."""
    radius = int(np.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    kernel /= kernel.sum()
    out = v.astype(np.float64)
    for axis in (0, 1):
        moved = np.moveaxis(out, axis, 0)
        padded = np.pad(moved, [(radius, radius)] + [(0, 0)] * (moved.ndim - 1), mode="edge")
        blurred = np.empty_like(moved)
        for i in range(moved.shape[0]):
            window = padded[i : i + 2 * radius + 1]
            blurred[i] = np.tensordot(kernel, window, axes=(0, 0))
        out = np.moveaxis(blurred, 0, axis)
    return out


def blend_overlay(e: Saliency, x_raw: RGBImage) -> RGBImage:
    """Blend a blurred intensity heatmap over the raw input."""
    v = _channel_abs_sum(e)
    if v.shape != x_raw.shape[:2]:
        raise ShapeError(f"saliency {v.shape} does not match image {x_raw.shape[:2]}")
    v = gaussian_blur(v, 3.0)
    span = v.max() - v.min()
    if span <= 0:
        return RGBImage(x_raw.pixels.copy())
    v = (v - v.min()) / span
    heat = JETLIKE.apply(v)
    weight = v[:, :, None]
    return RGBImage((1.0 - weight) * x_raw.pixels + weight * heat)


def project(e: Saliency) -> RGBImage:
    """Shift each value into [0, 1] around mid-gray, channels independent."""
    arr = _image_values(e)
    peak = np.abs(arr).max()
    arr = arr / peak if peak > 0 else np.zeros_like(arr)
    out = np.clip(arr + 0.5, 0.0, 1.0)
    if out.shape[2] == 1:
        out = np.repeat(out, 3, axis=2)
    elif out.shape[2] != 3:
        raise ShapeError(f"cannot project {out.shape[2]}-channel saliency to RGB")
    return RGBImage(out)


def raw_from_input(x: Tensor, input_range: tuple[float, float]) -> RGBImage:
    """Map a model-space input tensor linearly onto a [0, 1] RGB image."""
    arr = x.data
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim == 2:
        arr = arr.reshape(1, -1, 1)
    lo, hi = input_range
    span = hi - lo if hi > lo else 1.0
    arr = np.clip((arr.astype(np.float64) - lo) / span, 0.0, 1.0)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    elif arr.shape[2] != 3:
        raise ConfigError(f"cannot render {arr.shape[2]}-channel input as RGB")
    return RGBImage(arr)


def write_png(img: RGBImage, path) -> None:
    """8-bit RGB PNG; value v encodes as round(v*255)."""
    data = np.round(img.pixels * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """PNG as (H, W, C) floats in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0
