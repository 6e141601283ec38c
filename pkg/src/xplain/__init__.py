"""Saliency and attribution maps for small feed-forward networks.

Sampling-based methods (input*gradient, integrated gradients, smoothgrad,
occlusion, LIME) and propagation-based methods (guided backprop, deconvnet,
deep taylor, LRP variants, patternnet / pattern attribution) on top of a
reverse-propagation backend with programmable per-node backward mappings.
"""

from .analyzers import Analyzer, MethodSpec, build_analyzer
from .autodiff import NeuronSelector, finite_diff, gradient, neuron_select
from .backend import AnalysisPlan, BpState, MappingRegistry, compile_plan, execute
from .model import Model, forward, load_model, save_model, strip_softmax, topological_order
from .saliency import Saliency, load_saliency, save_saliency
from .tensor import Tensor, create, ewise, read_tensor, reduce, safe_divide, write_tensor
from .zoo import make_reference_model, seeded_input

__all__ = [
    "AnalysisPlan",
    "Analyzer",
    "BpState",
    "MappingRegistry",
    "MethodSpec",
    "Model",
    "NeuronSelector",
    "Saliency",
    "Tensor",
    "build_analyzer",
    "compile_plan",
    "create",
    "ewise",
    "execute",
    "finite_diff",
    "forward",
    "gradient",
    "load_model",
    "load_saliency",
    "make_reference_model",
    "neuron_select",
    "read_tensor",
    "reduce",
    "safe_divide",
    "save_model",
    "save_saliency",
    "seeded_input",
    "strip_softmax",
    "topological_order",
    "write_tensor",
]
