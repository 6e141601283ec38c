"""Reverse-propagation engine with programmable per-node backward mappings.

The engine separates three concerns:

* a ``MappingRegistry`` holds ordered (condition, mapping) entries; the
  first entry whose condition accepts a node wins, and nodes nothing
  matches fall back to the exact gradient VJP;
* ``compile_plan`` matches the registry against a built model once,
  producing an immutable ``AnalysisPlan`` (reverse execution order, one
  mapping per node, relevance seeding mode). Incompatibilities between a
  mapping's requirements and a matched node surface here, not mid-run;
* ``execute`` runs a forward pass, seeds the output, walks the reverse
  order summing contributions wherever a forward tensor fans out, and
  returns the tensor arriving at the input, wrapped with metadata.

Plans are reusable: executing one plan over many inputs is identical to
recompiling per input, minus the matching cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import NeuronSelector, neuron_select, one_hot_like, vjp
from .errors import IncompatibilityError, RegistrationError, ShapeError
from .model import LayerNode, Model, forward, topological_order, validate_model
from .saliency import Saliency
from .tensor import Tensor

__all__ = [
    "AnalysisPlan",
    "BackwardMapping",
    "BpState",
    "MappingRegistry",
    "compile_plan",
    "execute",
    "gradient_mapping",
    "neuron_select",
]


@dataclass
class BpState:
    """Read-only context handed to a mapping during execution."""

    node: LayerNode
    model: Model
    selector: NeuronSelector
    scratch: dict = field(default_factory=dict)


# (Xs, Ys, bpYs, state) -> bpXs, one tensor per X, shape-matched.
BackwardMapping = Callable[[list[Tensor], list[Tensor], list[Tensor], BpState], list[Tensor]]

Condition = Callable[[LayerNode, Model], bool]
Requirement = Callable[[LayerNode, Model], str | None]


def gradient_mapping(Xs, Ys, bpYs, state: BpState) -> list[Tensor]:
    """Default mapping: the exact partial-derivative VJP."""
    return vjp(state.node, Xs, Ys, bpYs)


def requires_kernel(node: LayerNode, model: Model) -> str | None:
    if not node.has_kernel():
        return "node must have a kernel"
    return None


@dataclass
class _Entry:
    name: str
    condition: Condition
    mapping: BackwardMapping
    requires: Requirement | None = None
    scratch: Callable[[LayerNode, Model], dict] | None = None


class MappingRegistry:
    """Ordered (condition, mapping) entries; earlier registrations win."""

    def __init__(self):
        self._entries: list[_Entry] = []

    def register(
        self,
        condition: Condition,
        mapping: BackwardMapping,
        name: str,
        requires: Requirement | None = None,
        scratch: Callable[[LayerNode, Model], dict] | None = None,
    ) -> "MappingRegistry":
        if any(e.name == name for e in self._entries):
            raise RegistrationError(f"mapping {name!r} already registered")
        self._entries.append(_Entry(name, condition, mapping, requires, scratch))
        return self

    def __len__(self) -> int:
        return len(self._entries)

    def resolve(self, node: LayerNode, model: Model) -> _Entry:
        for entry in self._entries:
            if entry.condition(node, model):
                if entry.requires is not None:
                    problem = entry.requires(node, model)
                    if problem is not None:
                        raise IncompatibilityError(
                            f"mapping {entry.name!r} cannot apply to node {node.name!r}: {problem}"
                        )
                return entry
        return _Entry("gradient", lambda n, m: True, gradient_mapping)


@dataclass(frozen=True)
class _PlanStep:
    node_name: str
    mapping_name: str
    mapping: BackwardMapping
    scratch: dict


@dataclass(frozen=True)
class AnalysisPlan:
    """Compiled node-to-mapping assignment, reusable across inputs."""

    method: str
    params: dict
    init: str  # "one_hot" or "output_value"
    selector: NeuronSelector
    steps: tuple[_PlanStep, ...]  # reverse execution order, input node excluded

    def assignment(self) -> dict[str, str]:
        return {s.node_name: s.mapping_name for s in self.steps}


def compile_plan(
    model: Model,
    registry: MappingRegistry,
    sel: NeuronSelector = NeuronSelector(),
    init: str = "one_hot",
    method: str = "custom",
    params: dict | None = None,
) -> AnalysisPlan:
    """Assign one mapping per node and fix the reverse execution order."""
    if init not in ("one_hot", "output_value"):
        raise ShapeError(f"unknown relevance init {init!r}")
    validate_model(model)
    steps = []
    for node in reversed(topological_order(model)):
        if node.kind == "input":
            continue
        entry = registry.resolve(node, model)
        scratch = entry.scratch(node, model) if entry.scratch is not None else {}
        steps.append(_PlanStep(node.name, entry.name, entry.mapping, scratch))
    return AnalysisPlan(method, dict(params or {}), init, sel, tuple(steps))


def execute(plan: AnalysisPlan, model: Model, x: Tensor) -> Saliency:
    """Forward, seed, walk the reverse order with fan-out summation."""
    trace = forward(model, x)
    nodes = {n.name: n for n in model.nodes}
    out = trace[model.output]
    index = plan.selector.resolve(out)
    seed_value = 1.0 if plan.init == "one_hot" else float(out.data[0, index])
    pending: dict[str, list[np.ndarray]] = {
        model.output: [one_hot_like(out, index, seed_value).data]
    }
    for step in plan.steps:
        node = nodes[step.node_name]
        arrived = pending.pop(node.name, None)
        if arrived is None:
            raise ShapeError(f"no back-propagated tensor reached node {node.name!r}")
        bp = arrived[0].copy()
        for extra in arrived[1:]:
            bp += extra
        xs = [trace[i] for i in node.inputs]
        ys = [trace[node.name]]
        state = BpState(node, model, plan.selector, step.scratch)
        bpxs = step.mapping(xs, ys, [Tensor(bp)], state)
        if len(bpxs) != len(xs):
            raise ShapeError(
                f"mapping {step.mapping_name!r} returned {len(bpxs)} tensors "
                f"for {len(xs)} inputs at node {node.name!r}"
            )
        for src, t in zip(node.inputs, bpxs):
            if t.shape != trace[src].shape:
                raise ShapeError(
                    f"mapping {step.mapping_name!r} produced shape {t.shape} "
                    f"for input {src!r} of shape {trace[src].shape} at node {node.name!r}"
                )
            pending.setdefault(src, []).append(t.data)
    parts = pending[model.input_name]
    total = parts[0].copy()
    for p in parts[1:]:
        total += p
    return Saliency(
        tensor=Tensor(total),
        method=plan.method,
        params=dict(plan.params),
        neuron_index=index,
    )
