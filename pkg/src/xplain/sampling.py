"""Prediction- and gradient-based attribution methods.

Every method here treats the model as a black box (function or gradient
evaluations only) and freezes the explained neuron on the unmodified
input before perturbing anything.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NeuronSelector, gradient
from .errors import ConfigError, RegressionError, ShapeError
from .model import Model, forward
from .rng import XorShift64Star
from .saliency import Saliency
from .segmentation import Segmentation
from .tensor import Tensor


@dataclass
class IGConfig:
    steps: int = 32
    reference: Tensor | None = None  # defaults to a constant at input_range lo


@dataclass
class SmoothGradConfig:
    n: int = 32
    noise_scale: float | None = None  # defaults to 10% of the input range
    postprocess: str = "none"  # none | abs | square
    seed: int = 0


@dataclass
class OcclusionConfig:
    psize: int = 8
    replace_value: float = 0.0


@dataclass
class LimeConfig:
    nr_samples: int = 1000
    kernel_width: float = 0.25
    ridge_alpha: float = 1.0
    replace_value: float = 0.0
    seed: int = 0


def _frozen(model: Model, x: Tensor, sel: NeuronSelector) -> NeuronSelector:
    return sel.frozen(forward(model, x)[model.output])


def _out_value(model: Model, x: Tensor, index: int) -> float:
    return float(forward(model, x)[model.output].data[0, index])


def input_t_gradient(model: Model, x: Tensor, sel: NeuronSelector = NeuronSelector()) -> Saliency:
    """Input times gradient of the selected neuron."""
    sel = _frozen(model, x, sel)
    g = gradient(model, x, sel)
    return Saliency(Tensor(x.data * g.data), "input_t_gradient", {}, sel.index)


def integrated_gradients(
    model: Model, x: Tensor, cfg: IGConfig = IGConfig(), sel: NeuronSelector = NeuronSelector()
) -> Saliency:
    """Left-Riemann path integral of the gradient from a reference to x."""
    if cfg.steps < 1:
        raise ConfigError("steps must be >= 1")
    ref = cfg.reference
    if ref is None:
        ref = Tensor(np.full(x.shape, model.input_range[0], dtype=x.data.dtype))
    if ref.shape != x.shape:
        raise ShapeError(f"reference shape {ref.shape} != input shape {x.shape}")
    sel = _frozen(model, x, sel)
    diff = x.data - ref.data
    acc = np.zeros(x.shape, dtype=np.float64)
    for step in range(cfg.steps):
        point = Tensor((ref.data + diff * (step / cfg.steps)).astype(x.data.dtype))
        acc += gradient(model, point, sel).data
    e = diff * (acc / cfg.steps).astype(x.data.dtype)
    return Saliency(Tensor(e), "integrated_gradients", {"steps": cfg.steps}, sel.index)


def smoothgrad(
    model: Model, x: Tensor, cfg: SmoothGradConfig = SmoothGradConfig(),
    sel: NeuronSelector = NeuronSelector(),
) -> Saliency:
    """Average gradient under seeded Gaussian input noise."""
    if cfg.n < 1:
        raise ConfigError("n must be >= 1")
    if cfg.postprocess not in ("none", "abs", "square"):
        raise ConfigError(f"unknown postprocess {cfg.postprocess!r}")
    scale = cfg.noise_scale
    if scale is None:
        lo, hi = model.input_range
        scale = 0.1 * (hi - lo)
    if scale < 0:
        raise ConfigError("noise_scale must be >= 0")
    sel = _frozen(model, x, sel)
    rng = XorShift64Star(cfg.seed)
    acc = np.zeros(x.shape, dtype=np.float64)
    for _ in range(cfg.n):
        # the full noise tensor is drawn (row-major) before evaluation
        noise = rng.fill_gauss(x.size, scale).reshape(x.shape).astype(x.data.dtype)
        acc += gradient(model, Tensor(x.data + noise), sel).data
    mean = (acc / cfg.n).astype(x.data.dtype)
    if cfg.postprocess == "abs":
        mean = np.abs(mean)
    elif cfg.postprocess == "square":
        mean = mean * mean
    params = {"n": cfg.n, "noise_scale": scale, "postprocess": cfg.postprocess, "seed": cfg.seed}
    return Saliency(Tensor(mean), "smoothgrad", params, sel.index)


def occlusion(
    model: Model, x: Tensor, cfg: OcclusionConfig = OcclusionConfig(),
    sel: NeuronSelector = NeuronSelector(),
) -> Saliency:
    """Prediction drop per occluded grid patch, painted over the patch."""
    if x.data.ndim != 4:
        raise ShapeError(f"occlusion expects an NHWC input, got shape {x.shape}")
    _, h, w, _ = x.shape
    psize = int(cfg.psize)
    if psize < 1:
        raise ConfigError("psize must be >= 1")
    if psize > h and psize > w:
        raise ConfigError(f"psize {psize} larger than both image dims ({h}, {w})")
    sel = _frozen(model, x, sel)
    base = _out_value(model, x, sel.index)
    e = np.zeros(x.shape, dtype=x.data.dtype)
    for i in range(0, h, psize):
        for j in range(0, w, psize):
            occluded = x.data.copy()
            occluded[:, i : i + psize, j : j + psize, :] = cfg.replace_value
            value = _out_value(model, Tensor(occluded), sel.index)
            e[:, i : i + psize, j : j + psize, :] = base - value
    params = {"psize": psize, "replace_value": cfg.replace_value}
    return Saliency(Tensor(e), "occlusion", params, sel.index)


def ridge_fit(
    features: np.ndarray, labels: np.ndarray, sample_weights: np.ndarray, alpha: float
) -> tuple[np.ndarray, float]:
    """Weighted ridge regression with an unpenalized intercept.

    Minimizes sum_i s_i (y_i - w.f_i - b)^2 + alpha*||w||^2, solved by
    normal equations on weight-centered data in double precision.
    """
    f = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    s = np.asarray(sample_weights, dtype=np.float64)
    if f.ndim != 2 or len(y) != f.shape[0] or len(s) != f.shape[0]:
        raise ShapeError("features, labels and sample_weights disagree in length")
    if alpha < 0:
        raise ConfigError("alpha must be >= 0")
    total = s.sum()
    if total <= 0:
        raise RegressionError("sample weights sum to zero")
    fbar = (s[:, None] * f).sum(axis=0) / total
    ybar = float((s * y).sum() / total)
    fc = f - fbar
    yc = y - ybar
    gram = fc.T @ (s[:, None] * fc) + alpha * np.eye(f.shape[1])
    rhs = fc.T @ (s * yc)
    try:
        w = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError as exc:
        raise RegressionError(f"singular regression system: {exc}") from exc
    if not np.isfinite(w).all():
        raise RegressionError("regression produced non-finite coefficients")
    b = ybar - float(fbar @ w)
    return w, b


def _cosine_distance_to_ones(features: np.ndarray) -> np.ndarray:
    ones = np.ones(features.shape[1], dtype=np.float64)
    norms = np.sqrt((features.astype(np.float64) ** 2).sum(axis=1))
    dots = features.astype(np.float64) @ ones
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = dots / (norms * np.sqrt(features.shape[1]))
    sim = np.where(norms > 0, sim, 0.0)  # all-off rows count as maximally distant
    return 1.0 - sim


def lime(
    model: Model,
    x: Tensor,
    seg: Segmentation,
    cfg: LimeConfig = LimeConfig(),
    sel: NeuronSelector = NeuronSelector(),
    rng: XorShift64Star | None = None,
) -> Saliency:
    """Local surrogate: weighted ridge over on/off superpixel indicators."""
    if x.data.ndim != 4:
        raise ShapeError(f"lime expects an NHWC input, got shape {x.shape}")
    _, h, w, _ = x.shape
    if seg.ids.shape != (h, w):
        raise ShapeError(f"segmentation shape {seg.ids.shape} does not match image ({h}, {w})")
    m = seg.nr_segments
    if cfg.nr_samples < m:
        warnings.warn(f"nr_samples={cfg.nr_samples} < nr_segments={m}; surrogate may be underdetermined")
    if rng is None:
        rng = XorShift64Star(cfg.seed)
    sel = _frozen(model, x, sel)

    features = np.empty((cfg.nr_samples, m), dtype=np.float64)
    for i in range(cfg.nr_samples):
        features[i] = rng.fill_bits(m)
    features[0, :] = 1.0

    labels = np.empty(cfg.nr_samples, dtype=np.float64)
    for i in range(cfg.nr_samples):
        sample = x.data.copy()
        for sid in range(m):
            if features[i, sid] == 0:
                sample[0][seg.ids == sid] = cfg.replace_value
        labels[i] = _out_value(model, Tensor(sample), sel.index)

    distances = _cosine_distance_to_ones(features)
    weights = np.sqrt(np.exp(-(distances**2) / cfg.kernel_width**2))
    coef, intercept = ridge_fit(features, labels, weights, cfg.ridge_alpha)

    e = np.zeros(x.shape, dtype=x.data.dtype)
    for sid in range(m):
        e[0][seg.ids == sid] = coef[sid]
    params = {
        "nr_samples": cfg.nr_samples,
        "kernel_width": cfg.kernel_width,
        "ridge_alpha": cfg.ridge_alpha,
        "intercept": intercept,
        "seed": cfg.seed,
    }
    return Saliency(Tensor(e), "lime", params, sel.index)
