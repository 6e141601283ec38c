import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import build_model, dense_node, row_tensor, single_dense_model
from xplain.autodiff import NeuronSelector, gradient
from xplain.backend import BpState, compile_plan, execute, MappingRegistry
from xplain.errors import ConfigError, DomainError
from xplain.model import LayerNode, Model, forward, layer_eval, strip_softmax, topological_order, validate_model
from xplain.propagation import (
    LrpConfig,
    Patterns,
    deconvnet,
    deep_taylor,
    estimate_patterns_linear,
    guided_backprop,
    load_patterns,
    lrp_alphabeta,
    lrp_alphabeta_mapping,
    lrp_composite,
    lrp_epsilon,
    lrp_epsilon_mapping,
    pattern_attribution,
    patternnet,
    plan_lrp_alphabeta,
    plan_lrp_epsilon,
    save_patterns,
    zplus_mapping,
    zplus_mapping_explicit,
)
from xplain.tensor import Tensor
from xplain.zoo import make_reference_model, seeded_input


def _mapping_state(node, model=None):
    return BpState(node, model, NeuronSelector())


def _dense_state(w, x_vals, activation="none", b=None):
    node = dense_node("d", ["input"], w, b, activation)
    x = row_tensor(x_vals)
    y = layer_eval(node, [x])
    return node, [x], [y]


# --- guided backprop ---------------------------------------------------------

def test_guided_equals_gradient_on_nonnegative_stream():
    # positive weights, positive inputs, big positive biases: trace and
    # back-stream stay elementwise nonnegative
    w1 = np.full((2, 2), 0.5, dtype=np.float32)
    w2 = np.array([[1.0], [2.0]], dtype=np.float32)
    model = build_model(
        [dense_node("h", ["input"], w1, [1.0, 1.0], activation="relu"),
         dense_node("out", ["h"], w2)],
        (1, 2), "out",
    )
    x = row_tensor([0.3, 0.4])
    assert np.array_equal(guided_backprop(model, x).tensor.data, gradient(model, x).data)


def test_guided_kills_negative_stream():
    # relu(x) then multiply by -1: gradient -1, guided 0
    model = build_model(
        [dense_node("h", ["input"], [[1.0]], activation="relu"),
         dense_node("out", ["h"], [[-1.0]])],
        (1, 1), "out",
    )
    x = row_tensor([1.0])
    assert gradient(model, x).data[0, 0] == -1.0
    assert guided_backprop(model, x).tensor.data[0, 0] == 0.0


def test_guided_inactive_forward_is_zero_for_both():
    # relu(-x) at x=1: forward mask kills both methods
    model = build_model(
        [dense_node("h", ["input"], [[-1.0]], activation="relu"),
         dense_node("out", ["h"], [[1.0]])],
        (1, 1), "out",
    )
    x = row_tensor([1.0])
    assert gradient(model, x).data[0, 0] == 0.0
    assert guided_backprop(model, x).tensor.data[0, 0] == 0.0


# --- deconvnet ----------------------------------------------------------------

def test_deconvnet_passes_inactive_relu():
    # pre-activation negative (forward inactive) but incoming bp positive:
    # hand trace: deconvnet relu(1)=1 -> through w=1 -> 1; gradient masks to 0
    model = build_model(
        [dense_node("h", ["input"], [[1.0]], [-2.0], activation="relu"),
         dense_node("out", ["h"], [[1.0]])],
        (1, 1), "out",
    )
    x = row_tensor([1.0])
    assert gradient(model, x).data[0, 0] == 0.0
    assert deconvnet(model, x).tensor.data[0, 0] == 1.0


def test_deconvnet_equals_gradient_in_positive_regime():
    w1 = np.full((2, 2), 0.5, dtype=np.float32)
    w2 = np.array([[1.0], [2.0]], dtype=np.float32)
    model = build_model(
        [dense_node("h", ["input"], w1, [1.0, 1.0], activation="relu"),
         dense_node("out", ["h"], w2)],
        (1, 2), "out",
    )
    x = row_tensor([0.3, 0.4])
    g = gradient(model, x).data
    assert np.array_equal(deconvnet(model, x).tensor.data, g)
    assert np.array_equal(guided_backprop(model, x).tensor.data, g)


def test_deconvnet_zero_on_nonpositive_stream():
    model = build_model(
        [dense_node("h", ["input"], [[1.0]], activation="relu"),
         dense_node("out", ["h"], [[-3.0]])],
        (1, 1), "out",
    )
    sal = deconvnet(model, row_tensor([2.0]))
    assert sal.tensor.data[0, 0] == 0.0


# --- Z+ rule ----------------------------------------------------------------------

def test_zplus_hand_eval_conserving():
    node, xs, ys = _dense_state([[1.0], [1.0]], [1.0, 2.0])
    out = zplus_mapping(xs, ys, [row_tensor([3.0])], _mapping_state(node))
    assert np.allclose(out[0].data, [[1.0, 2.0]], atol=1e-6)
    assert out[0].data.sum() == pytest.approx(3.0, rel=1e-6)


def test_zplus_hand_eval_negative_weight_dropped():
    node, xs, ys = _dense_state([[2.0], [-1.0]], [1.0, 2.0])
    out = zplus_mapping(xs, ys, [row_tensor([1.0])], _mapping_state(node))
    assert np.allclose(out[0].data, [[1.0, 0.0]], atol=1e-6)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_zplus_explicit_vs_autodiff_trick_on_conv(seed):
    rng = np.random.default_rng(seed)
    node = LayerNode(
        "c", "conv2d", ["input"],
        weights=Tensor(rng.normal(size=(3, 3, 2, 4)).astype(np.float32)),
        strides=(1, 1), padding="same",
    )
    x = Tensor(rng.uniform(0.1, 1.0, size=(1, 6, 6, 2)).astype(np.float32))
    y = layer_eval(node, [x])
    r = Tensor(rng.normal(size=y.shape).astype(np.float32))
    a = zplus_mapping([x], [y], [r], _mapping_state(node))[0].data
    b = zplus_mapping_explicit([x], [y], [r], _mapping_state(node))[0].data
    assert np.abs(a - b).max() < 1e-5


def test_zplus_explicit_vs_autodiff_trick_on_dense(rng_np):
    node = dense_node("d", ["input"], rng_np.normal(size=(6, 3)).astype(np.float32))
    x = Tensor(rng_np.uniform(0.1, 1.0, size=(1, 6)).astype(np.float32))
    y = layer_eval(node, [x])
    r = Tensor(rng_np.normal(size=(1, 3)).astype(np.float32))
    a = zplus_mapping([x], [y], [r], _mapping_state(node))[0].data
    b = zplus_mapping_explicit([x], [y], [r], _mapping_state(node))[0].data
    assert np.abs(a - b).max() < 1e-6


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1))
def test_zplus_conservation_random_positive_inputs(seed):
    rng = np.random.default_rng(seed)
    node = dense_node("d", ["input"], rng.normal(size=(5, 3)).astype(np.float32))
    x = Tensor(rng.uniform(0.1, 1.0, size=(1, 5)).astype(np.float32))
    y = layer_eval(node, [x])
    r = Tensor(rng.uniform(0.1, 1.0, size=(1, 3)).astype(np.float32))
    z = x.data @ np.maximum(node.weights.data, 0)
    out = zplus_mapping([x], [y], [r], _mapping_state(node))[0].data
    # relevance whose column response is exactly zero is dropped by the rule
    retained = r.data[0][np.abs(z[0]) > 1e-9].sum()
    assert out.sum() == pytest.approx(retained, rel=1e-4, abs=1e-6)


# --- deep taylor ----------------------------------------------------------------------

def test_deep_taylor_single_positive_dense_sums_to_output():
    model = single_dense_model([[0.5], [1.5]], input_range=(0.0, 1.0))
    x = row_tensor([0.4, 0.6])
    out_value = forward(model, x)[model.output].data[0, 0]
    sal = deep_taylor(model, x)
    assert sal.tensor.data.sum() == pytest.approx(out_value, rel=1e-4)


def test_deep_taylor_negative_output_domain_error():
    model = single_dense_model([[-1.0]])
    with pytest.raises(DomainError):
        deep_taylor(model, row_tensor([2.0]))


def _bias_free_mlp(seed):
    model = make_reference_model("mlp", seed)
    nodes = []
    for n in model.nodes:
        if n.kind == "dense":
            from dataclasses import replace

            n = replace(n, bias=None)
        nodes.append(n)
    m = Model(nodes, model.input_shape, model.input_range, model.output)
    validate_model(m)
    return m


def test_deep_taylor_layerwise_conservation_on_bias_free_mlp():
    model = _bias_free_mlp(3)
    recorded = {}

    def recording(mapping, name):
        def wrapped(Xs, Ys, bpYs, state):
            out = mapping(Xs, Ys, bpYs, state)
            recorded[state.node.name] = (
                float(bpYs[0].data.sum()),
                float(sum(o.data.sum() for o in out)),
            )
            return out

        return wrapped

    from xplain.propagation import zbox_mapping

    input_name = model.input_name
    reg = MappingRegistry()
    reg.register(
        lambda n, m: n.has_kernel() and input_name in n.inputs,
        recording(zbox_mapping, "zbox"), "bounded_input",
    )
    reg.register(lambda n, m: n.has_kernel(), recording(zplus_mapping, "zplus"), "zplus")
    plan = compile_plan(model, reg, init="output_value", method="deep_taylor")
    hits = 0
    for seed in range(1, 30):
        x = seeded_input(model, seed)
        out = forward(model, x)[model.output]
        idx = NeuronSelector().resolve(out)
        activation = float(out.data[0, idx])
        if activation <= 0.05:
            continue
        hits += 1
        recorded.clear()
        sal = execute(plan, model, x)
        for name, (incoming, outgoing) in recorded.items():
            assert outgoing == pytest.approx(incoming, rel=1e-4), name
        assert sal.tensor.data.sum() == pytest.approx(activation, rel=1e-4)
        if hits >= 5:
            break
    assert hits >= 5


# --- LRP epsilon ------------------------------------------------------------------------

def test_epsilon_equals_zplus_for_positive_weights_no_bias(rng_np):
    node = dense_node("d", ["input"], rng_np.uniform(0.1, 1.0, size=(4, 2)).astype(np.float32))
    x = Tensor(rng_np.uniform(0.1, 1.0, size=(1, 4)).astype(np.float32))
    y = layer_eval(node, [x])
    r = Tensor(rng_np.normal(size=(1, 2)).astype(np.float32))
    eps = lrp_epsilon_mapping([x], [y], [r], _mapping_state(node), epsilon=1e-9)[0].data
    zp = zplus_mapping([x], [y], [r], _mapping_state(node))[0].data
    assert np.abs(eps - zp).max() < 1e-5


def test_epsilon_zero_relevance():
    node, xs, ys = _dense_state([[1.0], [2.0]], [1.0, 2.0])
    out = lrp_epsilon_mapping(xs, ys, [row_tensor([0.0])], _mapping_state(node))
    assert not out[0].data.any()


def test_epsilon_conservation_no_bias(rng_np):
    node = dense_node("d", ["input"], rng_np.normal(size=(5, 3)).astype(np.float32))
    x = Tensor(rng_np.uniform(0.5, 1.0, size=(1, 5)).astype(np.float32))
    y = layer_eval(node, [x])
    r = Tensor(rng_np.uniform(0.1, 1.0, size=(1, 3)).astype(np.float32))
    out = lrp_epsilon_mapping([x], [y], [r], _mapping_state(node), epsilon=1e-7)[0].data
    assert out.sum() == pytest.approx(r.data.sum(), rel=1e-4)


# --- LRP alpha-beta ------------------------------------------------------------------------

def test_alphabeta_10_equals_zplus_on_positive_inputs(rng_np):
    node = dense_node("d", ["input"], rng_np.normal(size=(5, 3)).astype(np.float32))
    x = Tensor(rng_np.uniform(0.1, 1.0, size=(1, 5)).astype(np.float32))
    y = layer_eval(node, [x])
    r = Tensor(rng_np.normal(size=(1, 3)).astype(np.float32))
    ab = lrp_alphabeta_mapping([x], [y], [r], _mapping_state(node), alpha=1.0, beta=0.0)[0].data
    zp = zplus_mapping([x], [y], [r], _mapping_state(node))[0].data
    assert np.abs(ab - zp).max() < 1e-6


def test_alphabeta_all_negative_kernel_zero():
    node, xs, ys = _dense_state([[-1.0], [-2.0]], [1.0, 2.0])
    out = lrp_alphabeta_mapping(xs, ys, [row_tensor([1.0])], _mapping_state(node), 1.0, 0.0)
    assert not out[0].data.any()


def test_alphabeta_21_conservation_no_bias(rng_np):
    node = dense_node("d", ["input"], rng_np.normal(size=(6, 2)).astype(np.float32))
    x = Tensor(rng_np.uniform(0.2, 1.0, size=(1, 6)).astype(np.float32))
    y = layer_eval(node, [x])
    r = Tensor(rng_np.uniform(0.1, 1.0, size=(1, 2)).astype(np.float32))
    out = lrp_alphabeta_mapping([x], [y], [r], _mapping_state(node), alpha=2.0, beta=1.0)[0].data
    assert out.sum() == pytest.approx(r.data.sum(), rel=1e-4)


def test_alphabeta_invalid_combination():
    with pytest.raises(ConfigError):
        LrpConfig(alpha=2.0, beta=0.5).validate()
    node, xs, ys = _dense_state([[1.0]], [1.0])
    with pytest.raises(ConfigError):
        lrp_alphabeta_mapping(xs, ys, [row_tensor([1.0])], _mapping_state(node), 2.0, 0.5)


# --- LRP composite ------------------------------------------------------------------------

def test_composite_on_pure_dense_equals_epsilon():
    model = strip_softmax(make_reference_model("mlp", 1))
    x = seeded_input(model, 3)
    a = lrp_composite(model, x).tensor.data
    b = lrp_epsilon(model, x).tensor.data
    assert np.array_equal(a, b)


def test_composite_on_conv_path_matches_alphabeta_rule():
    # single conv straight to output: only the alpha-beta condition fires
    rng = np.random.default_rng(0)
    w = rng.normal(size=(2, 2, 1, 3)).astype(np.float32)
    nodes = [
        LayerNode("input", "input"),
        LayerNode("conv", "conv2d", ["input"], weights=Tensor(w), strides=(2, 2), padding="valid"),
        LayerNode("flat", "flatten", ["conv"]),
    ]
    model = Model(nodes, (1, 2, 2, 1), (-1, 1), "flat")
    validate_model(model)
    x = Tensor(rng.uniform(0.1, 1.0, size=(1, 2, 2, 1)).astype(np.float32))
    a = lrp_composite(model, x).tensor.data
    b = lrp_alphabeta(model, x).tensor.data
    assert np.array_equal(a, b)


def test_composite_cnn_conservation_with_bias_tolerance():
    model = strip_softmax(make_reference_model("cnn", 0))
    # zero every bias so the epsilon rule's bias share cannot leak
    from dataclasses import replace

    nodes = [replace(n, bias=None) if n.has_kernel() else n for n in model.nodes]
    model = Model(nodes, model.input_shape, model.input_range, model.output)
    validate_model(model)
    x = seeded_input(model, 2)
    out = forward(model, x)[model.output]
    idx = NeuronSelector().resolve(out)
    sal = lrp_composite(model, x)
    assert sal.tensor.data.sum() == pytest.approx(float(out.data[0, idx]), rel=5e-3)


# --- patterns -------------------------------------------------------------------------------

def _kernel_patterns(model):
    return Patterns([(n.name, n.weights) for n in topological_order(model) if n.has_kernel()])


def test_patternnet_kernels_equals_gradient():
    model = strip_softmax(make_reference_model("cnn", 0))
    x = seeded_input(model, 1)
    sal = patternnet(model, _kernel_patterns(model), x)
    assert np.array_equal(sal.tensor.data, gradient(model, x).data)


def test_patternnet_zero_patterns():
    model = strip_softmax(make_reference_model("mlp", 0))
    zeros = Patterns([
        (n.name, Tensor(np.zeros_like(n.weights.data)))
        for n in topological_order(model) if n.has_kernel()
    ])
    sal = patternnet(model, zeros, seeded_input(model, 1))
    assert not sal.tensor.data.any()


def _naive_pattern_backward_mlp(model, patterns, x):
    """Scalar-loop backward oracle for the dense-relu-dense stack."""
    trace = forward(model, x)
    idx = int(np.argmax(trace[model.output].data[0]))
    table = dict(patterns.entries)
    out_node = model.node("out")
    hidden_node = model.node("hidden")
    p2 = table["out"].data.astype(np.float64)
    p1 = table["hidden"].data.astype(np.float64)
    bp_hidden = np.zeros(p2.shape[0])
    for j in range(p2.shape[0]):
        bp_hidden[j] = p2[j, idx]
    y_hidden = trace["hidden"].data[0]
    bp_hidden = np.where(y_hidden > 0, bp_hidden, 0.0)
    bp_in = np.zeros(p1.shape[0])
    for i in range(p1.shape[0]):
        for j in range(p1.shape[1]):
            bp_in[i] += p1[i, j] * bp_hidden[j]
    return bp_in


def test_patternnet_matches_naive_backward_oracle():
    model = strip_softmax(make_reference_model("mlp", 4))
    rng = np.random.default_rng(8)
    pats = Patterns([
        (n.name, Tensor(rng.normal(size=n.weights.shape).astype(np.float32)))
        for n in topological_order(model) if n.has_kernel()
    ])
    x = seeded_input(model, 5)
    sal = patternnet(model, pats, x)
    want = _naive_pattern_backward_mlp(model, pats, x)
    assert np.abs(sal.tensor.data[0] - want).max() < 1e-5


PATTERNNET_PINNED = {(0, 0): 0.0, (0, 8): 0.0}


def test_patternnet_pinned_fixture():
    model = strip_softmax(make_reference_model("mlp", 4))
    rng = np.random.default_rng(8)
    pats = Patterns([
        (n.name, Tensor(rng.normal(size=n.weights.shape).astype(np.float32)))
        for n in topological_order(model) if n.has_kernel()
    ])
    sal = patternnet(model, pats, seeded_input(model, 5))
    for idx, want in PATTERNNET_PINNED.items():
        assert sal.tensor.data[idx] == pytest.approx(want, rel=1e-5, abs=1e-7)


def test_pattern_attribution_ones_equals_gradient():
    model = strip_softmax(make_reference_model("cnn", 0))
    ones = Patterns([
        (n.name, Tensor(np.ones_like(n.weights.data)))
        for n in topological_order(model) if n.has_kernel()
    ])
    x = seeded_input(model, 1)
    sal = pattern_attribution(model, ones, x)
    assert np.array_equal(sal.tensor.data, gradient(model, x).data)


def test_pattern_attribution_kernels_equals_squared_weight_model():
    model = strip_softmax(make_reference_model("mlp", 2))
    x = seeded_input(model, 3)
    sal = pattern_attribution(model, _kernel_patterns(model), x)
    # direct construction: same model with every kernel squared, gradient
    # backward masked by the original model's relu trace
    from dataclasses import replace

    sq_nodes = []
    for n in model.nodes:
        if n.has_kernel():
            n = replace(n, weights=Tensor(n.weights.data**2))
        sq_nodes.append(n)
    squared = Model(sq_nodes, model.input_shape, model.input_range, model.output)
    validate_model(squared)
    trace = forward(model, x)
    idx = int(np.argmax(trace[model.output].data[0]))
    w2 = squared.node("out").weights.data
    w1 = squared.node("hidden").weights.data
    bp = w2[:, idx]
    bp = np.where(trace["hidden"].data[0] > 0, bp, 0.0)
    want = (w1 @ bp)[None, :]
    assert np.abs(sal.tensor.data - want).max() < 1e-5


def test_pattern_attribution_zero_patterns():
    model = strip_softmax(make_reference_model("mlp", 0))
    zeros = Patterns([
        (n.name, Tensor(np.zeros_like(n.weights.data)))
        for n in topological_order(model) if n.has_kernel()
    ])
    sal = pattern_attribution(model, zeros, seeded_input(model, 1))
    assert not sal.tensor.data.any()


def test_pattern_count_mismatch():
    model = strip_softmax(make_reference_model("mlp", 0))
    with pytest.raises(ConfigError):
        patternnet(model, Patterns([]), seeded_input(model, 0))


def test_pattern_shape_mismatch():
    model = strip_softmax(make_reference_model("mlp", 0))
    bad = Patterns([
        (n.name, Tensor(np.zeros((2, 2), dtype=np.float32)))
        for n in topological_order(model) if n.has_kernel()
    ])
    with pytest.raises(ConfigError):
        patternnet(model, bad, seeded_input(model, 0))


def test_patterns_file_round_trip(tmp_path):
    model = strip_softmax(make_reference_model("mlp", 6))
    pats = _kernel_patterns(model)
    save_patterns(pats, tmp_path / "p.xwts")
    back = load_patterns(tmp_path / "p.xwts")
    assert dict((k, v.tolist()) for k, v in back.entries) == dict(
        (k, v.tolist()) for k, v in pats.entries
    )


# --- pattern estimation -------------------------------------------------------------------

def test_estimate_patterns_recovers_generative_direction():
    # data x = a*s + eps with eps covariance orthogonal to w:
    # the estimator must recover a, normalized so w.a = 1
    rng = np.random.default_rng(0)
    d = 8
    w = rng.normal(size=(d, 1)).astype(np.float32)
    a = rng.normal(size=d)
    model = single_dense_model(w)
    n = 10_000
    s = rng.normal(size=(n, 1))
    eta = rng.normal(size=(n, d))
    proj = np.eye(d) - np.outer(w[:, 0], w[:, 0]) / (w[:, 0] @ w[:, 0])
    eps = eta @ proj.T
    data = (s * a[None, :] + eps).astype(np.float32)
    pats = estimate_patterns_linear(model, Tensor(data))
    got = pats.entries[0][1].data[:, 0].astype(np.float64)
    want = a / (w[:, 0].astype(np.float64) @ a)
    assert np.abs(got - want).max() < 1e-2
    assert w[:, 0].astype(np.float64) @ got == pytest.approx(1.0, abs=1e-2)


def test_estimate_patterns_single_sample_zero():
    model = single_dense_model(np.eye(3))
    pats = estimate_patterns_linear(model, Tensor(np.ones((1, 3), dtype=np.float32)))
    assert not pats.entries[0][1].data.any()


def test_estimate_patterns_identical_samples_zero():
    model = single_dense_model(np.eye(3))
    data = np.tile(np.array([[1.0, 2.0, 3.0]], dtype=np.float32), (50, 1))
    pats = estimate_patterns_linear(model, Tensor(data))
    assert not pats.entries[0][1].data.any()


def test_estimate_patterns_empty_dataset():
    model = single_dense_model(np.eye(3))
    with pytest.raises(ConfigError):
        estimate_patterns_linear(model, Tensor(np.zeros((0, 3), dtype=np.float32)))


def test_estimate_patterns_conv_shapes():
    model = strip_softmax(make_reference_model("cnn", 0))
    data = np.concatenate([seeded_input(model, i).data for i in range(12)], axis=0)
    pats = estimate_patterns_linear(model, Tensor(data))
    table = pats.lookup()
    for node in topological_order(model):
        if node.has_kernel():
            assert table[node.name].shape == node.weights.shape
