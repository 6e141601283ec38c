import numpy as np
import pytest

from xplain.model import LayerNode, Model, validate_model
from xplain.tensor import Tensor


def dense_node(name, inputs, w, b=None, activation="none"):
    return LayerNode(
        name,
        "dense",
        list(inputs),
        activation=activation,
        weights=Tensor(np.asarray(w, dtype=np.float32)),
        bias=None if b is None else Tensor(np.asarray(b, dtype=np.float32)),
    )


def build_model(nodes, input_shape, output, input_range=(-1.0, 1.0)):
    m = Model([LayerNode("input", "input")] + nodes, tuple(input_shape), input_range, output)
    validate_model(m)
    return m


def single_dense_model(w, b=None, activation="none", input_range=(-1.0, 1.0)):
    """Model computing dense(x) on a (1, d) input."""
    w = np.asarray(w, dtype=np.float32)
    return build_model(
        [dense_node("out", ["input"], w, b, activation)],
        (1, w.shape[0]),
        "out",
        input_range,
    )


def image_linear_model(w_hw, input_range=(-1.0, 1.0)):
    """flatten -> dense(1) model over a (1, H, W, 1) image with pixel weights w_hw."""
    w = np.asarray(w_hw, dtype=np.float32)
    h, wd = w.shape
    nodes = [
        LayerNode("flat", "flatten", ["input"]),
        dense_node("out", ["flat"], w.reshape(-1, 1)),
    ]
    return build_model(nodes, (1, h, wd, 1), "out", input_range)


def row_tensor(values):
    return Tensor(np.asarray([values], dtype=np.float32))


@pytest.fixture
def rng_np():
    return np.random.default_rng(12345)
