"""Per-layer vector-Jacobian products and whole-model input gradients.

Kink conventions: the relu derivative at exactly 0 is 0, and maxpool ties
break to the first maximal element in row-major window order. The neuron
index is resolved once from the unmodified forward pass and stays frozen
for every perturbed evaluation built on top of it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnops
from .errors import ShapeError
from .model import ActivationTrace, LayerNode, Model, forward, topological_order
from .tensor import Tensor


@dataclass(frozen=True)
class NeuronSelector:
    """Selects the output neuron to explain: the argmax or a fixed index."""

    mode: str = "max"  # "max" or "index"
    index: int | None = None

    def resolve(self, output: Tensor) -> int:
        if output.data.ndim != 2 or output.shape[0] != 1:
            raise ShapeError(f"neuron selection expects a (1, classes) output, got {output.shape}")
        classes = output.shape[1]
        if self.mode == "index":
            if not (0 <= int(self.index) < classes):
                raise IndexError(f"neuron index {self.index} out of range for {classes} classes")
            return int(self.index)
        return int(np.argmax(output.data[0]))  # argmax takes the lowest index on ties

    def frozen(self, output: Tensor) -> "NeuronSelector":
        return NeuronSelector("index", self.resolve(output))


def neuron_select(output: Tensor, mode) -> NeuronSelector:
    """Resolve a selector against a concrete (1, classes) output tensor."""
    sel = NeuronSelector("max") if mode == "max" else NeuronSelector("index", int(mode))
    return sel.frozen(output)


def one_hot_like(output: Tensor, index: int, value: float = 1.0) -> Tensor:
    seed = np.zeros_like(output.data)
    seed[0, index] = value
    return Tensor(seed)


def activation_backward(activation: str, y: np.ndarray, bp: np.ndarray) -> np.ndarray:
    if activation == "none":
        return bp
    if activation == "relu":
        return np.where(y > 0, bp, 0.0).astype(bp.dtype)
    if activation == "softmax":
        inner = (bp * y).sum(axis=-1, keepdims=True)
        return (y * (bp - inner)).astype(bp.dtype)
    raise ShapeError(f"unknown activation {activation!r}")


def vjp(node: LayerNode, Xs: list[Tensor], Ys: list[Tensor], bpYs: list[Tensor]) -> list[Tensor]:
    """Exact vector-Jacobian product of one node, given its trace tensors."""
    if len(Ys) != len(bpYs):
        raise ShapeError(f"{node.name}: got {len(bpYs)} back-propagated tensors for {len(Ys)} outputs")
    for y, bp in zip(Ys, bpYs):
        if y.shape != bp.shape:
            raise ShapeError(f"{node.name}: bp shape {bp.shape} != output shape {y.shape}")
    y = Ys[0].data
    bp = bpYs[0].data

    if node.kind == "dense":
        tmp = activation_backward(node.activation, y, bp)
        return [Tensor(tmp @ node.weights.data.astype(tmp.dtype).T)]
    if node.kind == "conv2d":
        tmp = activation_backward(node.activation, y, bp)
        dx = nnops.conv2d_input_grad(tmp, node.weights.data, Xs[0].shape, node.strides, node.padding)
        return [Tensor(dx)]
    if node.kind == "maxpool2d":
        dx = nnops.maxpool_input_grad(bp, Xs[0].data, node.pool, node.strides, node.padding)
        return [Tensor(dx)]
    if node.kind == "flatten":
        return [Tensor(np.ascontiguousarray(bp.reshape(Xs[0].shape)))]
    if node.kind == "add_merge":
        return [Tensor(bp.copy()) for _ in Xs]
    if node.kind == "batchnorm":
        scale = node.bn_gamma.data.astype(bp.dtype) / np.sqrt(
            node.bn_variance.data.astype(bp.dtype) + node.bn_eps
        )
        return [Tensor(bp * scale)]
    if node.kind == "softmax":
        return [Tensor(activation_backward("softmax", y, bp))]
    raise ShapeError(f"no vjp for node kind {node.kind!r}")


def gradient(model: Model, x: Tensor, sel: NeuronSelector = NeuronSelector()) -> Tensor:
    """Gradient of the selected output neuron with respect to the input."""
    trace = forward(model, x)
    index = sel.resolve(trace[model.output])
    pending: dict[str, list[np.ndarray]] = {
        model.output: [one_hot_like(trace[model.output], index).data]
    }
    for node in reversed(topological_order(model)):
        if node.kind == "input":
            continue
        bp = Tensor(_accumulate(pending.pop(node.name)))
        xs = [trace[i] for i in node.inputs]
        outs = vjp(node, xs, [trace[node.name]], [bp])
        for src, t in zip(node.inputs, outs):
            pending.setdefault(src, []).append(t.data)
    return Tensor(_accumulate(pending[model.input_name]))


def _accumulate(parts: list[np.ndarray]) -> np.ndarray:
    out = parts[0].copy()
    for p in parts[1:]:
        out += p
    return out


def finite_diff(model: Model, x: Tensor, sel: NeuronSelector, h: float = 1e-4) -> Tensor:
    """Central-difference gradient oracle, computed in double precision.

    The neuron index is frozen from the unperturbed f32 forward pass so it
    cannot jump between classes across the stencil evaluations.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    index = sel.resolve(forward(model, x)[model.output])
    x64 = x.data.astype(np.float64)
    flat = x64.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        for sgn in (1.0, -1.0):
            probe = flat.copy()
            probe[i] += sgn * h
            out = forward(model, Tensor(probe.reshape(x64.shape)))[model.output]
            grad[i] += sgn * out.data[0, index]
        grad[i] /= 2.0 * h
    return Tensor(grad.reshape(x64.shape))


def _trace_kink_signature(model: Model, trace: ActivationTrace) -> list[np.ndarray]:
    """Per-node discrete state: relu on/off masks and pool winner indices."""
    sig = []
    for node in topological_order(model):
        if node.kind in ("dense", "conv2d") and node.activation == "relu":
            sig.append(trace[node.name].data > 0)
        elif node.kind == "maxpool2d":
            _, idx = nnops.maxpool_argmax(
                trace[node.inputs[0]].data, node.pool, node.strides, node.padding
            )
            sig.append(idx)
    return sig


def kink_free_mask(model: Model, x: Tensor, h: float = 1e-4) -> np.ndarray:
    """Boolean mask of input coordinates whose +/-h stencil stays inside one
    linear region (no relu mask flip, no maxpool winner change)."""
    x64 = x.data.astype(np.float64)
    base = _trace_kink_signature(model, _forward64(model, x64))
    flat = x64.reshape(-1)
    mask = np.ones(flat.size, dtype=bool)
    for i in range(flat.size):
        for sgn in (1.0, -1.0):
            probe = flat.copy()
            probe[i] += sgn * h
            sig = _trace_kink_signature(model, _forward64(model, probe.reshape(x64.shape)))
            if any(not np.array_equal(a, b) for a, b in zip(base, sig)):
                mask[i] = False
                break
    return mask.reshape(x.shape)


def _forward64(model: Model, arr: np.ndarray) -> ActivationTrace:
    return forward(model, Tensor(arr.astype(np.float64)))
