"""Layer-node DAG models: evaluation, ordering, serialization.

A model is a directed acyclic graph of named layer nodes. Each node
produces exactly one tensor, named after the node; edges are name
references in ``node.inputs``. Forward execution retains every
intermediate tensor (the activation trace) because backward mappings
consume them.

Serialized form is a JSON manifest plus an "XWTS" weight container;
see ``save_model`` / ``load_model``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import nnops
from .errors import (
    CycleError,
    GraphError,
    LoadError,
    MissingWeightError,
    ShapeError,
    WeightShapeError,
)
from .tensor import Tensor, tensor_bytes, tensor_from_bytes

KINDS = ("input", "dense", "conv2d", "maxpool2d", "flatten", "add_merge", "batchnorm", "softmax")
ACTIVATIONS = ("none", "relu", "softmax")


@dataclass
class LayerNode:
    name: str
    kind: str
    inputs: list[str] = field(default_factory=list)
    activation: str = "none"
    weights: Tensor | None = None
    bias: Tensor | None = None
    strides: tuple[int, int] = (1, 1)
    padding: str = "valid"
    pool: tuple[int, int] = (2, 2)
    bn_mean: Tensor | None = None
    bn_variance: Tensor | None = None
    bn_gamma: Tensor | None = None
    bn_beta: Tensor | None = None
    bn_eps: float = 1e-5

    def has_kernel(self) -> bool:
        return self.kind in ("dense", "conv2d")


@dataclass
class Model:
    nodes: list[LayerNode]
    input_shape: tuple[int, ...]
    input_range: tuple[float, float]
    output: str

    def node(self, name: str) -> LayerNode:
        for n in self.nodes:
            if n.name == name:
                return n
        raise GraphError(f"no node named {name!r}")

    @property
    def input_name(self) -> str:
        for n in self.nodes:
            if n.kind == "input":
                return n.name
        raise GraphError("model has no input node")


ActivationTrace = dict[str, Tensor]


def _apply_activation(activation: str, pre: np.ndarray) -> np.ndarray:
    if activation == "none":
        return pre
    if activation == "relu":
        return np.maximum(pre, 0)
    if activation == "softmax":
        return _softmax(pre)
    raise ShapeError(f"unknown activation {activation!r}")


def _softmax(pre: np.ndarray) -> np.ndarray:
    shifted = pre - pre.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def layer_eval(node: LayerNode, inputs: list[Tensor]) -> Tensor:
    """Evaluate one node on its input tensors.

    Math runs in the dtype of the inputs; f32 parameters are cast up when
    the inputs are f64 (oracle runs).
    """
    if node.kind == "input":
        raise ShapeError("input nodes are not evaluated")
    xs = [t.data for t in inputs]
    dt = xs[0].dtype

    if node.kind == "dense":
        x = xs[0]
        w = node.weights.data.astype(dt)
        if x.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(f"dense {node.name}: input {x.shape} vs kernel {w.shape}")
        y = x @ w
        if node.bias is not None:
            y = y + node.bias.data.astype(dt)
        return Tensor(_apply_activation(node.activation, y))

    if node.kind == "conv2d":
        x = xs[0]
        w = node.weights.data
        if x.ndim != 4 or x.shape[3] != w.shape[2]:
            raise ShapeError(f"conv2d {node.name}: input {x.shape} vs kernel {w.shape}")
        y = nnops.conv2d(x, w, node.strides, node.padding)
        if node.bias is not None:
            y = y + node.bias.data.astype(dt)
        return Tensor(_apply_activation(node.activation, y))

    if node.kind == "maxpool2d":
        if xs[0].ndim != 4:
            raise ShapeError(f"maxpool2d {node.name}: expected NHWC input")
        return Tensor(nnops.maxpool(xs[0], node.pool, node.strides, node.padding))

    if node.kind == "flatten":
        return Tensor(np.ascontiguousarray(xs[0].reshape(xs[0].shape[0], -1)))

    if node.kind == "add_merge":
        shape = xs[0].shape
        for x in xs[1:]:
            if x.shape != shape:
                raise ShapeError(f"add_merge {node.name}: mismatched input shapes")
        out = xs[0].copy()
        for x in xs[1:]:
            out += x
        return Tensor(out)

    if node.kind == "batchnorm":
        x = xs[0]
        scale = node.bn_gamma.data.astype(dt) / np.sqrt(
            node.bn_variance.data.astype(dt) + node.bn_eps
        )
        return Tensor((x - node.bn_mean.data.astype(dt)) * scale + node.bn_beta.data.astype(dt))

    if node.kind == "softmax":
        return Tensor(_softmax(xs[0]))

    raise ShapeError(f"unknown node kind {node.kind!r}")


def topological_order(model: Model) -> list[LayerNode]:
    """Producers before consumers; ties broken by declaration order."""
    by_name = {}
    for n in model.nodes:
        if n.name in by_name:
            raise GraphError(f"duplicate node name {n.name!r}")
        by_name[n.name] = n
    indegree = {n.name: 0 for n in model.nodes}
    consumers: dict[str, list[str]] = {n.name: [] for n in model.nodes}
    for n in model.nodes:
        for src in n.inputs:
            if src not in by_name:
                raise GraphError(f"node {n.name!r} references unknown input {src!r}")
            indegree[n.name] += 1
            consumers[src].append(n.name)
    position = {n.name: i for i, n in enumerate(model.nodes)}
    ready = sorted((name for name, d in indegree.items() if d == 0), key=position.get)
    order: list[LayerNode] = []
    while ready:
        name = ready.pop(0)
        order.append(by_name[name])
        changed = False
        for c in consumers[name]:
            indegree[c] -= 1
            if indegree[c] == 0:
                ready.append(c)
                changed = True
        if changed:
            ready.sort(key=position.get)
    if len(order) != len(model.nodes):
        raise CycleError("layer graph contains a cycle")
    return order


def forward(model: Model, x: Tensor) -> ActivationTrace:
    """Run the model, retaining every intermediate tensor by name."""
    if x.shape != model.input_shape:
        raise ShapeError(f"input shape {x.shape} != model input {model.input_shape}")
    return _forward_any(model, x)


def _forward_any(model: Model, x: Tensor) -> ActivationTrace:
    """Forward pass that only checks trailing (non-batch) extents."""
    if x.shape[1:] != model.input_shape[1:]:
        raise ShapeError(f"input trailing shape {x.shape[1:]} != {model.input_shape[1:]}")
    trace: ActivationTrace = {}
    for node in topological_order(model):
        if node.kind == "input":
            trace[node.name] = x
        else:
            trace[node.name] = layer_eval(node, [trace[i] for i in node.inputs])
    return trace


def strip_softmax(model: Model) -> Model:
    """Redirect the output past a trailing softmax layer or activation."""
    out = model.node(model.output)
    if out.kind == "softmax":
        kept = [n for n in model.nodes if n.name != out.name]
        return replace(model, nodes=kept, output=out.inputs[0])
    if out.activation == "softmax":
        nodes = [replace(n, activation="none") if n.name == out.name else n for n in model.nodes]
        return replace(model, nodes=nodes)
    return model


def fold_batchnorm(model: Model) -> Model:
    """Fuse each batchnorm into its producing dense/conv node when safe.

    Safe means: the producer has no activation and the batchnorm is its
    only consumer. Other batchnorm nodes are left in place.
    """
    consumers: dict[str, list[str]] = {n.name: [] for n in model.nodes}
    for n in model.nodes:
        for src in n.inputs:
            consumers[src].append(n.name)
    by_name = {n.name: n for n in model.nodes}
    folded: dict[str, str] = {}  # bn name -> producer name
    nodes: list[LayerNode] = []
    for n in model.nodes:
        if n.kind == "batchnorm":
            prod = by_name[n.inputs[0]]
            if prod.has_kernel() and prod.activation == "none" and consumers[prod.name] == [n.name]:
                folded[n.name] = prod.name
                continue
        nodes.append(n)
    if not folded:
        return model
    out_nodes = []
    for n in nodes:
        if n.has_kernel() and any(p == n.name for p in folded.values()):
            bn = next(by_name[b] for b, p in folded.items() if p == n.name)
            scale = bn.bn_gamma.data / np.sqrt(bn.bn_variance.data + bn.bn_eps)
            w = n.weights.data * scale  # scale applies along the output channel
            b = (n.bias.data if n.bias is not None else 0.0) - bn.bn_mean.data
            b = b * scale + bn.bn_beta.data
            n = replace(n, weights=Tensor(w.astype(np.float32)), bias=Tensor(b.astype(np.float32)))
        n = replace(n, inputs=[folded.get(i, i) for i in n.inputs])
        out_nodes.append(n)
    output = folded.get(model.output, model.output)
    return replace(model, nodes=out_nodes, output=output)


def _infer_shapes(model: Model) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for node in topological_order(model):
        if node.kind == "input":
            shapes[node.name] = tuple(model.input_shape)
            continue
        ins = [shapes[i] for i in node.inputs]
        if node.kind == "dense":
            w = node.weights
            if w is None:
                raise WeightShapeError(f"dense {node.name} has no kernel")
            if len(ins[0]) != 2 or ins[0][1] != w.shape[0]:
                raise WeightShapeError(
                    f"dense {node.name}: input {ins[0]} inconsistent with kernel {w.shape}"
                )
            if node.bias is not None and node.bias.shape != (w.shape[1],):
                raise WeightShapeError(f"dense {node.name}: bias shape {node.bias.shape}")
            shapes[node.name] = (ins[0][0], w.shape[1])
        elif node.kind == "conv2d":
            w = node.weights
            if w is None:
                raise WeightShapeError(f"conv2d {node.name} has no kernel")
            n_, h, wd, c = ins[0]
            if len(w.shape) != 4 or w.shape[2] != c:
                raise WeightShapeError(
                    f"conv2d {node.name}: input {ins[0]} inconsistent with kernel {w.shape}"
                )
            if node.bias is not None and node.bias.shape != (w.shape[3],):
                raise WeightShapeError(f"conv2d {node.name}: bias shape {node.bias.shape}")
            oh = nnops.out_size(h, w.shape[0], node.strides[0], node.padding)
            ow = nnops.out_size(wd, w.shape[1], node.strides[1], node.padding)
            shapes[node.name] = (n_, oh, ow, w.shape[3])
        elif node.kind == "maxpool2d":
            n_, h, wd, c = ins[0]
            oh = nnops.out_size(h, node.pool[0], node.strides[0], node.padding)
            ow = nnops.out_size(wd, node.pool[1], node.strides[1], node.padding)
            shapes[node.name] = (n_, oh, ow, c)
        elif node.kind == "flatten":
            shapes[node.name] = (ins[0][0], int(np.prod(ins[0][1:])))
        elif node.kind == "add_merge":
            if any(s != ins[0] for s in ins):
                raise WeightShapeError(f"add_merge {node.name}: mismatched inputs {ins}")
            shapes[node.name] = ins[0]
        elif node.kind == "batchnorm":
            c = ins[0][-1]
            for nm, t in (
                ("mean", node.bn_mean),
                ("variance", node.bn_variance),
                ("gamma", node.bn_gamma),
                ("beta", node.bn_beta),
            ):
                if t is None or t.shape != (c,):
                    raise WeightShapeError(f"batchnorm {node.name}: bad {nm} shape")
            shapes[node.name] = ins[0]
        elif node.kind == "softmax":
            shapes[node.name] = ins[0]
        else:
            raise GraphError(f"unknown node kind {node.kind!r}")
    return shapes


def validate_model(model: Model) -> None:
    """Check the structural invariants; raises a LoadError subclass."""
    input_nodes = [n for n in model.nodes if n.kind == "input"]
    if len(input_nodes) != 1:
        raise GraphError(f"expected exactly one input node, found {len(input_nodes)}")
    if input_nodes[0].inputs:
        raise GraphError("input node must not consume tensors")
    names = {n.name for n in model.nodes}
    if model.output not in names:
        raise GraphError(f"output {model.output!r} is not a node")
    order = topological_order(model)  # raises on cycles / bad references
    consumed = {src for n in model.nodes for src in n.inputs}
    for n in order:
        if n.name != model.output and n.name not in consumed:
            raise GraphError(f"node {n.name!r} is not connected to the output")
    _infer_shapes(model)


# --- serialization ---------------------------------------------------------

def _node_manifest(node: LayerNode) -> dict:
    entry: dict = {"name": node.name, "kind": node.kind, "inputs": list(node.inputs)}
    if node.activation != "none":
        entry["activation"] = node.activation
    if node.kind in ("conv2d", "maxpool2d"):
        entry["strides"] = list(node.strides)
        entry["padding"] = node.padding
    if node.kind == "maxpool2d":
        entry["pool"] = list(node.pool)
    if node.weights is not None:
        entry["weights"] = f"{node.name}.w"
    if node.bias is not None:
        entry["bias"] = f"{node.name}.b"
    if node.kind == "batchnorm":
        for part in ("mean", "variance", "gamma", "beta"):
            entry[f"bn_{part}"] = f"{node.name}.{part}"
        entry["bn_eps"] = node.bn_eps
    return entry


def manifest_dict(model: Model) -> dict:
    return {
        "input_shape": list(model.input_shape),
        "input_range": list(model.input_range),
        "output": model.output,
        "layers": [_node_manifest(n) for n in model.nodes],
    }


def weight_records(model: Model) -> list[tuple[str, Tensor]]:
    records = []
    for n in model.nodes:
        if n.weights is not None:
            records.append((f"{n.name}.w", n.weights))
        if n.bias is not None:
            records.append((f"{n.name}.b", n.bias))
        if n.kind == "batchnorm":
            records.append((f"{n.name}.mean", n.bn_mean))
            records.append((f"{n.name}.variance", n.bn_variance))
            records.append((f"{n.name}.gamma", n.bn_gamma))
            records.append((f"{n.name}.beta", n.bn_beta))
    return records


def container_bytes(records: list[tuple[str, Tensor]]) -> bytes:
    out = [b"XWTS"]
    for name, t in records:
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)) + nb + tensor_bytes(t))
    return b"".join(out)


def read_container(buf: bytes) -> dict[str, Tensor]:
    if buf[:4] != b"XWTS":
        raise LoadError("bad weight container magic")
    offset = 4
    records: dict[str, Tensor] = {}
    while offset < len(buf):
        (nlen,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        name = buf[offset : offset + nlen].decode("utf-8")
        offset += nlen
        t, offset = tensor_from_bytes(buf, offset)
        records[name] = t
    return records


def save_model(model: Model, manifest_path, weights_path) -> None:
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest_dict(model), fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(weights_path, "wb") as fh:
        fh.write(container_bytes(weight_records(model)))


def _build_node(entry: dict, weights: dict[str, Tensor]) -> LayerNode:
    def fetch(key: str) -> Tensor | None:
        name = entry.get(key)
        if name is None:
            return None
        if name not in weights:
            raise MissingWeightError(f"weight {name!r} not in container")
        return weights[name]

    kind = entry["kind"]
    if kind not in KINDS:
        raise GraphError(f"unknown layer kind {kind!r}")
    activation = entry.get("activation", "none")
    if activation not in ACTIVATIONS:
        raise GraphError(f"unknown activation {activation!r}")
    return LayerNode(
        name=entry["name"],
        kind=kind,
        inputs=list(entry.get("inputs", [])),
        activation=activation,
        weights=fetch("weights"),
        bias=fetch("bias"),
        strides=tuple(entry.get("strides", [1, 1])),
        padding=entry.get("padding", "valid"),
        pool=tuple(entry.get("pool", [2, 2])),
        bn_mean=fetch("bn_mean"),
        bn_variance=fetch("bn_variance"),
        bn_gamma=fetch("bn_gamma"),
        bn_beta=fetch("bn_beta"),
        bn_eps=float(entry.get("bn_eps", 1e-5)),
    )


def load_model(manifest_path, weights_path, fold_bn: bool = False) -> Model:
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"cannot read manifest: {exc}") from exc
    try:
        with open(weights_path, "rb") as fh:
            weights = read_container(fh.read())
    except OSError as exc:
        raise LoadError(f"cannot read weights: {exc}") from exc
    try:
        nodes = [_build_node(entry, weights) for entry in manifest["layers"]]
        model = Model(
            nodes=nodes,
            input_shape=tuple(manifest["input_shape"]),
            input_range=tuple(manifest["input_range"]),
            output=manifest["output"],
        )
    except KeyError as exc:
        raise LoadError(f"manifest missing field {exc}") from exc
    validate_model(model)
    if fold_bn:
        model = fold_batchnorm(model)
        validate_model(model)
    return model


def model_hash(model: Model) -> str:
    """Hash of the canonical serialized form (manifest + weights)."""
    manifest = json.dumps(manifest_dict(model), sort_keys=True, separators=(",", ":"))
    h = hashlib.sha256()
    h.update(manifest.encode("utf-8"))
    h.update(container_bytes(weight_records(model)))
    return h.hexdigest()


def files_hash(manifest_path, weights_path) -> str:
    h = hashlib.sha256()
    for path in (manifest_path, weights_path):
        with open(path, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()
