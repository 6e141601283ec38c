import numpy as np
import pytest

from conftest import build_model, dense_node, row_tensor, single_dense_model
from xplain.autodiff import NeuronSelector, gradient
from xplain.backend import (
    MappingRegistry,
    compile_plan,
    execute,
    gradient_mapping,
    neuron_select,
    requires_kernel,
)
from xplain.errors import IncompatibilityError, RegistrationError, ShapeError
from xplain.model import LayerNode, Model, strip_softmax, validate_model
from xplain.tensor import Tensor
from xplain.zoo import make_reference_model, seeded_input


def _double_mapping(Xs, Ys, bpYs, state):
    return [Tensor(2.0 * bpYs[0].data @ state.node.weights.data.T)]


def _is_relu(node, model):
    return node.activation == "relu"


def _is_dense(node, model):
    return node.kind == "dense"


# --- registration -------------------------------------------------------------

def test_register_appends():
    reg = MappingRegistry()
    reg.register(_is_relu, gradient_mapping, "relu_rule")
    assert len(reg) == 1


def test_register_duplicate_name():
    reg = MappingRegistry()
    reg.register(_is_relu, gradient_mapping, "rule")
    with pytest.raises(RegistrationError):
        reg.register(_is_dense, gradient_mapping, "rule")


def test_first_registration_wins():
    model = single_dense_model(np.eye(2))
    reg = MappingRegistry()
    reg.register(_is_dense, _double_mapping, "first")
    reg.register(_is_dense, gradient_mapping, "second")
    plan = compile_plan(model, reg)
    assert plan.assignment()["out"] == "first"


# --- compile ---------------------------------------------------------------------

def test_compile_empty_registry_all_gradient():
    model = strip_softmax(make_reference_model("cnn", 0))
    plan = compile_plan(model, MappingRegistry())
    assert set(plan.assignment().values()) == {"gradient"}


def test_compile_incompatibility_names_node_and_requirement():
    model = strip_softmax(make_reference_model("cnn", 0))
    reg = MappingRegistry()
    reg.register(
        lambda n, m: n.kind == "maxpool2d", _double_mapping, "needs_kernel",
        requires=requires_kernel,
    )
    with pytest.raises(IncompatibilityError) as err:
        compile_plan(model, reg)
    assert "pool" in str(err.value) and "kernel" in str(err.value)


def test_compile_is_pure():
    model = strip_softmax(make_reference_model("mlp", 1))
    reg = MappingRegistry()
    reg.register(_is_relu, gradient_mapping, "relu_rule")
    a = compile_plan(model, reg)
    b = compile_plan(model, reg)
    assert a.assignment() == b.assignment()
    assert [s.node_name for s in a.steps] == [s.node_name for s in b.steps]


# --- execute ----------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["linear", "mlp", "cnn"])
def test_empty_registry_equals_gradient(kind):
    model = strip_softmax(make_reference_model(kind, 0))
    x = seeded_input(model, 1)
    plan = compile_plan(model, MappingRegistry())
    got = execute(plan, model, x).tensor.data
    want = gradient(model, x).data
    denom = max(np.abs(want).max(), 1e-12)
    assert np.abs(got - want).max() / denom < 1e-6


def test_fanout_same_tensor_twice():
    # y = x + x: one forward tensor consumed twice by the same merge node
    nodes = [
        LayerNode("input", "input"),
        dense_node("a", ["input"], np.eye(2)),
        LayerNode("twice", "add_merge", ["a", "a"]),
        dense_node("out", ["twice"], [[1.0], [1.0]]),
    ]
    model = Model(nodes, (1, 2), (-1, 1), "out")
    validate_model(model)
    plan = compile_plan(model, MappingRegistry())
    sal = execute(plan, model, row_tensor([1, 2]))
    assert sal.tensor.tolist() == [[2.0, 2.0]]


def test_fanout_diamond_doubles_single_branch():
    eye = np.eye(2)
    shared = [
        LayerNode("input", "input"),
        dense_node("a", ["input"], eye),
        dense_node("b", ["a"], eye),
        dense_node("c", ["a"], eye),
        LayerNode("m", "add_merge", ["b", "c"]),
        dense_node("out", ["m"], [[1.0], [2.0]]),
    ]
    diamond = Model(shared, (1, 2), (-1, 1), "out")
    validate_model(diamond)
    single = build_model(
        [dense_node("a", ["input"], eye), dense_node("b", ["a"], eye),
         dense_node("out", ["b"], [[1.0], [2.0]])],
        (1, 2), "out",
    )
    x = row_tensor([3, 4])
    plan_d = compile_plan(diamond, MappingRegistry())
    plan_s = compile_plan(single, MappingRegistry())
    got = execute(plan_d, diamond, x).tensor.data
    want = 2.0 * execute(plan_s, single, x).tensor.data
    assert np.array_equal(got, want)


def test_plan_reuse_matches_fresh_compiles():
    model = strip_softmax(make_reference_model("mlp", 2))
    reg = MappingRegistry()
    reg.register(_is_relu, gradient_mapping, "relu_rule")
    plan = compile_plan(model, reg)
    for seed in range(100):
        x = seeded_input(model, seed)
        reused = execute(plan, model, x).tensor.data
        fresh = execute(compile_plan(model, reg), model, x).tensor.data
        assert np.array_equal(reused, fresh)


def test_execute_one_hot_vs_output_value_init():
    model = single_dense_model([[2.0], [1.0]])
    x = row_tensor([3.0, 4.0])  # output = 10
    one_hot = execute(compile_plan(model, MappingRegistry(), init="one_hot"), model, x)
    seeded = execute(compile_plan(model, MappingRegistry(), init="output_value"), model, x)
    assert np.allclose(seeded.tensor.data, 10.0 * one_hot.tensor.data)


def test_execute_runtime_shape_assertion_names_mapping():
    def bad_mapping(Xs, Ys, bpYs, state):
        return [Tensor(np.zeros((1, 1), dtype=np.float32))]

    model = single_dense_model(np.eye(2))
    reg = MappingRegistry()
    reg.register(_is_dense, bad_mapping, "broken")
    plan = compile_plan(model, reg)
    with pytest.raises(ShapeError) as err:
        execute(plan, model, row_tensor([1, 2]))
    assert "broken" in str(err.value)


def test_saliency_metadata():
    model = single_dense_model([[3], [-1]])
    plan = compile_plan(model, MappingRegistry(), method="gradient", params={"k": 1})
    sal = execute(plan, model, row_tensor([1, 2]))
    assert sal.method == "gradient"
    assert sal.params == {"k": 1}
    assert sal.neuron_index == 0


# --- neuron_select -------------------------------------------------------------------

def test_neuron_select_examples():
    assert neuron_select(row_tensor([0.1, 0.9, 0.3]), "max").index == 1
    assert neuron_select(row_tensor([0.5, 0.5]), "max").index == 0
    with pytest.raises(IndexError):
        neuron_select(row_tensor([1, 2, 3]), 7)
