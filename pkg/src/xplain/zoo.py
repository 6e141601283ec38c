"""Seeded reference models for tests, demos and benchmarks.

Weights are drawn uniformly from [-0.5, 0.5] out of the xorshift64*
stream seeded as given, node by node in declaration order, kernel first
(row-major) then bias. Identical (kind, seed) pairs therefore serialize
to bit-identical weight containers.
"""

from __future__ import annotations

import numpy as np

from .model import LayerNode, Model, validate_model
from .rng import XorShift64Star
from .tensor import Tensor

_RANGE = (-1.0, 1.0)


def _draw(rng: XorShift64Star, shape: tuple[int, ...]) -> Tensor:
    n = int(np.prod(shape))
    vals = rng.fill_uniform(n, -0.5, 0.5).astype(np.float32)
    return Tensor(vals.reshape(shape))


def make_reference_model(kind: str, seed: int) -> Model:
    rng = XorShift64Star(seed)
    if kind == "linear":
        nodes = [
            LayerNode("input", "input"),
            LayerNode("out", "dense", ["input"], weights=_draw(rng, (8, 3)), bias=_draw(rng, (3,))),
        ]
        model = Model(nodes, (1, 8), _RANGE, "out")
    elif kind == "mlp":
        nodes = [
            LayerNode("input", "input"),
            LayerNode(
                "hidden", "dense", ["input"], activation="relu",
                weights=_draw(rng, (16, 12)), bias=_draw(rng, (12,)),
            ),
            LayerNode("out", "dense", ["hidden"], weights=_draw(rng, (12, 4)), bias=_draw(rng, (4,))),
        ]
        model = Model(nodes, (1, 16), _RANGE, "out")
    elif kind == "cnn":
        nodes = [
            LayerNode("input", "input"),
            LayerNode(
                "conv", "conv2d", ["input"], activation="relu",
                weights=_draw(rng, (3, 3, 1, 4)), bias=_draw(rng, (4,)),
                strides=(1, 1), padding="same",
            ),
            LayerNode("pool", "maxpool2d", ["conv"], pool=(2, 2), strides=(2, 2), padding="valid"),
            LayerNode("flat", "flatten", ["pool"]),
            LayerNode(
                "hidden", "dense", ["flat"], activation="relu",
                weights=_draw(rng, (256, 16)), bias=_draw(rng, (16,)),
            ),
            LayerNode("logits", "dense", ["hidden"], weights=_draw(rng, (16, 10)), bias=_draw(rng, (10,))),
            LayerNode("probs", "softmax", ["logits"]),
        ]
        model = Model(nodes, (1, 16, 16, 1), _RANGE, "probs")
    else:
        raise ValueError(f"unknown reference kind {kind!r}")
    validate_model(model)
    return model


def seeded_input(model: Model, seed: int) -> Tensor:
    """Deterministic input drawn uniformly from the model's input range."""
    rng = XorShift64Star(seed)
    lo, hi = model.input_range
    n = int(np.prod(model.input_shape))
    vals = rng.fill_uniform(n, lo, hi).astype(np.float32)
    return Tensor(vals.reshape(model.input_shape))
