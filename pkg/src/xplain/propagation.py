"""Propagation-based attribution methods built on the backend engine.

Rule conventions fixed here:

* relevance-style rules (Z+, alpha-beta, bounded-input) exclude the bias
  from the normalizer; the epsilon rule includes it;
* denominators are stabilized with ``safe_divide`` (sign(0) = +1); the
  Z+/alpha-beta/bounded rules use a fixed 1e-9 stabilizer, the epsilon
  rule uses its configured epsilon;
* relevance passes through relu activations untouched in all relevance
  rules; pooling, flatten and merge nodes fall back to the gradient VJP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnops
from .autodiff import NeuronSelector, activation_backward, gradient, vjp
from .backend import (
    AnalysisPlan,
    BpState,
    MappingRegistry,
    compile_plan,
    execute,
    requires_kernel,
)
from .errors import ConfigError, DomainError, ShapeError
from .model import LayerNode, Model, forward, topological_order
from .saliency import Saliency
from .model import container_bytes, read_container
from .tensor import Tensor, safe_divide

STABILIZER = 1e-9


@dataclass
class LrpConfig:
    epsilon: float = 1e-7
    alpha: float = 1.0
    beta: float = 0.0

    def validate(self) -> "LrpConfig":
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if abs(self.alpha - self.beta - 1.0) > 1e-12:
            raise ConfigError(f"alpha - beta must equal 1, got {self.alpha} - {self.beta}")
        return self


# --- linear-part helpers (the "autodiff trick" route) ----------------------

def _linear_forward(node: LayerNode, x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None):
    """Forward through a copy of the node's linear part with a substituted kernel."""
    if node.kind == "dense":
        y = x @ kernel.astype(x.dtype)
    elif node.kind == "conv2d":
        y = nnops.conv2d(x, kernel, node.strides, node.padding)
    else:
        raise ShapeError(f"node {node.name!r} has no linear part")
    if bias is not None:
        y = y + bias.astype(x.dtype)
    return y


def _linear_backward(node: LayerNode, dy: np.ndarray, x_shape, kernel: np.ndarray):
    if node.kind == "dense":
        return dy @ kernel.astype(dy.dtype).T
    if node.kind == "conv2d":
        return nnops.conv2d_input_grad(dy, kernel, x_shape, node.strides, node.padding)
    raise ShapeError(f"node {node.name!r} has no linear part")


def _redistribute(node, x, relevance, kernel, bias=None, offset=None, eps=STABILIZER):
    """Core relevance step: normalize by the substituted linear response,
    map back through it, and weight by the input."""
    z = _linear_forward(node, x, kernel, bias)
    if offset is not None:
        z = z + offset
    ratio = safe_divide(Tensor(relevance), Tensor(z), eps).data
    return x * _linear_backward(node, ratio, x.shape, kernel)


# --- relu-targeted mappings -------------------------------------------------

def guided_backprop_mapping(Xs, Ys, bpYs, state: BpState):
    """Clip the incoming stream at zero, then take the node's exact VJP."""
    clipped = Tensor(np.maximum(bpYs[0].data, 0))
    return vjp(state.node, Xs, Ys, [clipped])


def deconvnet_mapping(Xs, Ys, bpYs, state: BpState):
    """Clip the incoming stream at zero and skip the forward relu mask."""
    node = state.node
    clipped = np.maximum(bpYs[0].data, 0)
    return [Tensor(_linear_backward(node, clipped, Xs[0].shape, node.weights.data))]


def _has_relu(node: LayerNode, model: Model) -> bool:
    return node.activation == "relu"


# --- relevance mappings -----------------------------------------------------

def zplus_mapping(Xs, Ys, bpYs, state: BpState):
    """Positive-weight relevance redistribution (autodiff-trick form)."""
    node = state.node
    x = Xs[0].data
    w_pos = np.maximum(node.weights.data, 0)
    return [Tensor(_redistribute(node, x, bpYs[0].data, w_pos))]


def zplus_mapping_explicit(Xs, Ys, bpYs, state: BpState):
    """Positive-weight redistribution written out layer-by-layer.

    Dense uses the matrix form directly; conv goes through an im2col /
    col2im transposed correlation. Kept as an independent cross-check of
    ``zplus_mapping``.
    """
    node = state.node
    x = Xs[0].data
    r = bpYs[0].data
    w_pos = np.maximum(node.weights.data, 0).astype(x.dtype)
    if node.kind == "dense":
        z = x @ w_pos
        ratio = safe_divide(Tensor(r), Tensor(z), STABILIZER).data
        return [Tensor(x * (ratio @ w_pos.T))]
    if node.kind == "conv2d":
        kh, kw, cin, cout = w_pos.shape
        cols = nnops.im2col(x, (kh, kw), node.strides, node.padding)
        wmat = w_pos.reshape(kh * kw * cin, cout)
        z = cols @ wmat
        ratio = safe_divide(Tensor(r), Tensor(z), STABILIZER).data
        back = nnops.col2im(ratio @ wmat.T, x.shape, (kh, kw), node.strides, node.padding)
        return [Tensor(x * back)]
    raise ShapeError(f"zplus needs a kernel node, got {node.kind!r}")


def lrp_epsilon_mapping(Xs, Ys, bpYs, state: BpState, epsilon: float = 1e-7):
    """Signed-weight redistribution normalized by the full pre-activation."""
    node = state.node
    x = Xs[0].data
    w = node.weights.data
    bias = node.bias.data if node.bias is not None else None
    return [Tensor(_redistribute(node, x, bpYs[0].data, w, bias=bias, eps=epsilon))]


def lrp_alphabeta_mapping(Xs, Ys, bpYs, state: BpState, alpha: float = 1.0, beta: float = 0.0):
    """Separate redistribution through positive and negative weight parts."""
    if abs(alpha - beta - 1.0) > 1e-12:
        raise ConfigError(f"alpha - beta must equal 1, got {alpha} - {beta}")
    node = state.node
    x = Xs[0].data
    r = bpYs[0].data
    w_pos = np.maximum(node.weights.data, 0)
    out = alpha * _redistribute(node, x, r, w_pos)
    if beta != 0.0:
        w_neg = np.minimum(node.weights.data, 0)
        out = out - beta * _redistribute(node, x, r, w_neg)
    return [Tensor(out.astype(x.dtype))]


def zbox_mapping(Xs, Ys, bpYs, state: BpState):
    """Bounded-input redistribution for the layer touching the model input.

    Uses z = x*w - lo*max(w,0) - hi*min(w,0) with (lo, hi) the model's
    input range, so relevance stays defined for box-constrained inputs.
    """
    node = state.node
    x = Xs[0].data
    r = bpYs[0].data
    lo, hi = state.model.input_range
    w = node.weights.data
    w_pos = np.maximum(w, 0)
    w_neg = np.minimum(w, 0)
    low = np.full_like(x, lo)
    high = np.full_like(x, hi)
    z = (
        _linear_forward(node, x, w, None)
        - _linear_forward(node, low, w_pos, None)
        - _linear_forward(node, high, w_neg, None)
    )
    ratio = safe_divide(Tensor(r), Tensor(z), STABILIZER).data
    out = (
        x * _linear_backward(node, ratio, x.shape, w)
        - low * _linear_backward(node, ratio, x.shape, w_pos)
        - high * _linear_backward(node, ratio, x.shape, w_neg)
    )
    return [Tensor(out)]


def _pattern_mapping(Xs, Ys, bpYs, state: BpState):
    """Backward through a copy of the layer whose kernel is the pattern."""
    node = state.node
    bp = bpYs[0].data
    if node.activation == "relu":
        bp = activation_backward("relu", Ys[0].data, bp)
    kernel = state.scratch["pattern"].data
    return [Tensor(_linear_backward(node, bp, Xs[0].shape, kernel))]


# --- patterns ----------------------------------------------------------------

@dataclass
class Patterns:
    """One signal-direction tensor per kernel node, shaped like its kernel."""

    entries: list[tuple[str, Tensor]]  # (layer name, pattern), forward order

    def lookup(self) -> dict[str, Tensor]:
        return dict(self.entries)

    def validate_for(self, model: Model) -> "Patterns":
        kernel_nodes = [n for n in topological_order(model) if n.has_kernel()]
        table = self.lookup()
        if len(self.entries) != len(kernel_nodes):
            raise ConfigError(
                f"{len(self.entries)} patterns for {len(kernel_nodes)} kernel nodes"
            )
        for node in kernel_nodes:
            if node.name not in table:
                raise ConfigError(f"no pattern for layer {node.name!r}")
            if table[node.name].shape != node.weights.shape:
                raise ConfigError(
                    f"pattern for {node.name!r} has shape {table[node.name].shape}, "
                    f"kernel is {node.weights.shape}"
                )
        return self


def save_patterns(patterns: Patterns, path) -> None:
    records = [(f"{name}.pattern", t) for name, t in patterns.entries]
    with open(path, "wb") as fh:
        fh.write(container_bytes(records))


def load_patterns(path) -> Patterns:
    with open(path, "rb") as fh:
        records = read_container(fh.read())
    entries = []
    for name, t in records.items():
        if not name.endswith(".pattern"):
            raise ConfigError(f"unexpected record {name!r} in pattern file")
        entries.append((name[: -len(".pattern")], t))
    return Patterns(entries)


def estimate_patterns_linear(model: Model, dataset: Tensor) -> Patterns:
    """Linear pattern estimator: a_j = cov(x, y_j) / (w_j . cov(x, y_j)).

    Statistics are taken over the dataset's per-layer inputs x and
    pre-activation outputs y; a vanishing normalizer yields a zero
    pattern for that output neuron. Conv layers are treated as dense
    over their im2col patches, so patterns keep the kernel's shape.
    """
    if dataset.size == 0 or dataset.shape[0] == 0:
        raise ConfigError("pattern estimation needs a nonempty dataset")
    from .model import _forward_any

    trace = _forward_any(model, dataset)
    entries: list[tuple[str, Tensor]] = []
    for node in topological_order(model):
        if not node.has_kernel():
            continue
        x = trace[node.inputs[0]].data.astype(np.float64)
        w = node.weights.data.astype(np.float64)
        if node.kind == "dense":
            xm = x
            wmat = w
        else:
            kh, kw, cin, cout = w.shape
            cols = nnops.im2col(x, (kh, kw), node.strides, node.padding)
            xm = cols.reshape(-1, kh * kw * cin)
            wmat = w.reshape(kh * kw * cin, cout)
        y = xm @ wmat  # bias shifts means only; covariance is unaffected
        n = xm.shape[0]
        x_mean = xm.mean(axis=0)
        y_mean = y.mean(axis=0)
        cov = (xm - x_mean).T @ (y - y_mean) / max(n - 1, 1)  # (d, cout)
        denom = (wmat * cov).sum(axis=0)  # w_j . cov(x, y_j)
        pattern = np.zeros_like(wmat)
        keep = np.abs(denom) > 1e-12
        pattern[:, keep] = cov[:, keep] / denom[keep]
        entries.append((node.name, Tensor(pattern.reshape(w.shape).astype(np.float32))))
    return Patterns(entries)


# --- analyzer plan builders ---------------------------------------------------

def _is_dense(node, model):
    return node.kind == "dense"


def _is_conv(node, model):
    return node.kind == "conv2d"


def _has_kernel(node, model):
    return node.has_kernel()


def plan_guided_backprop(model: Model, sel: NeuronSelector = NeuronSelector()) -> AnalysisPlan:
    reg = MappingRegistry()
    reg.register(_has_relu, guided_backprop_mapping, "guided_relu")
    return compile_plan(model, reg, sel, init="one_hot", method="guided_backprop")


def plan_deconvnet(model: Model, sel: NeuronSelector = NeuronSelector()) -> AnalysisPlan:
    reg = MappingRegistry()
    reg.register(_has_relu, deconvnet_mapping, "deconvnet_relu", requires=requires_kernel)
    return compile_plan(model, reg, sel, init="one_hot", method="deconvnet")


def plan_deep_taylor(model: Model, sel: NeuronSelector = NeuronSelector()) -> AnalysisPlan:
    input_name = model.input_name

    def touches_input(node, m):
        return node.has_kernel() and input_name in node.inputs

    reg = MappingRegistry()
    reg.register(touches_input, zbox_mapping, "bounded_input", requires=requires_kernel)
    reg.register(_has_kernel, zplus_mapping, "zplus", requires=requires_kernel)
    return compile_plan(model, reg, sel, init="output_value", method="deep_taylor")


def plan_lrp_epsilon(model, sel=NeuronSelector(), cfg: LrpConfig = LrpConfig()) -> AnalysisPlan:
    cfg.validate()

    def mapping(Xs, Ys, bpYs, state):
        return lrp_epsilon_mapping(Xs, Ys, bpYs, state, epsilon=cfg.epsilon)

    reg = MappingRegistry()
    reg.register(_has_kernel, mapping, "lrp_epsilon", requires=requires_kernel)
    return compile_plan(
        model, reg, sel, init="output_value", method="lrp_epsilon",
        params={"epsilon": cfg.epsilon},
    )


def plan_lrp_alphabeta(model, sel=NeuronSelector(), cfg: LrpConfig = LrpConfig()) -> AnalysisPlan:
    cfg.validate()

    def mapping(Xs, Ys, bpYs, state):
        return lrp_alphabeta_mapping(Xs, Ys, bpYs, state, alpha=cfg.alpha, beta=cfg.beta)

    reg = MappingRegistry()
    reg.register(_has_kernel, mapping, "lrp_alphabeta", requires=requires_kernel)
    return compile_plan(
        model, reg, sel, init="output_value", method="lrp_alphabeta",
        params={"alpha": cfg.alpha, "beta": cfg.beta},
    )


def plan_lrp_composite(model, sel=NeuronSelector(), cfg: LrpConfig = LrpConfig()) -> AnalysisPlan:
    """Epsilon rule on dense layers, alpha-beta on convolutions."""
    cfg.validate()

    def eps_mapping(Xs, Ys, bpYs, state):
        return lrp_epsilon_mapping(Xs, Ys, bpYs, state, epsilon=cfg.epsilon)

    def ab_mapping(Xs, Ys, bpYs, state):
        return lrp_alphabeta_mapping(Xs, Ys, bpYs, state, alpha=cfg.alpha, beta=cfg.beta)

    reg = MappingRegistry()
    reg.register(_is_dense, eps_mapping, "dense_epsilon", requires=requires_kernel)
    reg.register(_is_conv, ab_mapping, "conv_alphabeta", requires=requires_kernel)
    return compile_plan(
        model, reg, sel, init="output_value", method="lrp_composite",
        params={"epsilon": cfg.epsilon, "alpha": cfg.alpha, "beta": cfg.beta},
    )


def _plan_pattern(model, patterns: Patterns, sel, method: str, fuse_with_kernel: bool) -> AnalysisPlan:
    patterns.validate_for(model)
    table = patterns.lookup()

    def scratch(node, m):
        p = table[node.name].data
        if fuse_with_kernel:
            p = node.weights.data * p
        return {"pattern": Tensor(p)}

    reg = MappingRegistry()
    reg.register(_has_kernel, _pattern_mapping, "pattern", requires=requires_kernel, scratch=scratch)
    return compile_plan(model, reg, sel, init="one_hot", method=method)


def plan_patternnet(model, patterns: Patterns, sel=NeuronSelector()) -> AnalysisPlan:
    return _plan_pattern(model, patterns, sel, "patternnet", fuse_with_kernel=False)


def plan_pattern_attribution(model, patterns: Patterns, sel=NeuronSelector()) -> AnalysisPlan:
    return _plan_pattern(model, patterns, sel, "pattern_attribution", fuse_with_kernel=True)


# --- one-shot method functions -------------------------------------------------

def guided_backprop(model, x, sel=NeuronSelector()) -> Saliency:
    return execute(plan_guided_backprop(model, sel), model, x)


def deconvnet(model, x, sel=NeuronSelector()) -> Saliency:
    return execute(plan_deconvnet(model, sel), model, x)


def check_deep_taylor_domain(model: Model, x: Tensor, sel: NeuronSelector) -> None:
    out = forward(model, x)[model.output]
    index = sel.resolve(out)
    value = float(out.data[0, index])
    if value < 0:
        raise DomainError(
            f"deep taylor is undefined for a negative selected activation ({value:.6g})"
        )


def deep_taylor(model, x, sel=NeuronSelector()) -> Saliency:
    check_deep_taylor_domain(model, x, sel)
    return execute(plan_deep_taylor(model, sel), model, x)


def lrp_epsilon(model, x, sel=NeuronSelector(), cfg: LrpConfig = LrpConfig()) -> Saliency:
    return execute(plan_lrp_epsilon(model, sel, cfg), model, x)


def lrp_alphabeta(model, x, sel=NeuronSelector(), cfg: LrpConfig = LrpConfig()) -> Saliency:
    return execute(plan_lrp_alphabeta(model, sel, cfg), model, x)


def lrp_composite(model, x, sel=NeuronSelector(), cfg: LrpConfig = LrpConfig()) -> Saliency:
    return execute(plan_lrp_composite(model, sel, cfg), model, x)


def patternnet(model, patterns: Patterns, x, sel=NeuronSelector()) -> Saliency:
    return execute(plan_patternnet(model, patterns, sel), model, x)


def pattern_attribution(model, patterns: Patterns, x, sel=NeuronSelector()) -> Saliency:
    return execute(plan_pattern_attribution(model, patterns, sel), model, x)


def gradient_saliency(model, x, sel=NeuronSelector()) -> Saliency:
    """Plain gradient wrapped as a saliency value."""
    trace_out = forward(model, x)[model.output]
    frozen = sel.frozen(trace_out)
    g = gradient(model, x, frozen)
    return Saliency(g, "gradient", {}, frozen.index)
