"""One factory for all attribution methods.

Wraps every method behind a uniform build step plus an ``analyze(x)``
call, so command-line tools and benchmarks can treat methods
interchangeably. For propagation methods the build step compiles the
analysis plan once; analyzing many inputs reuses it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import propagation, sampling
from .autodiff import NeuronSelector
from .backend import execute
from .errors import ConfigError
from .model import Model
from .saliency import Saliency
from .segmentation import SegmentationConfig, segment
from .tensor import Tensor

METHOD_PARAMS: dict[str, dict[str, type]] = {
    "gradient": {},
    "input_t_gradient": {},
    "integrated_gradients": {"steps": int, "reference": float},
    "smoothgrad": {"n": int, "noise_scale": float, "postprocess": str, "seed": int},
    "occlusion": {"psize": int, "replace_value": float},
    "lime": {
        "nr_samples": int,
        "kernel_width": float,
        "ridge_alpha": float,
        "replace_value": float,
        "seg_mode": str,
        "grid_size": int,
        "slic_k": int,
        "seed": int,
    },
    "guided_backprop": {},
    "deconvnet": {},
    "deep_taylor": {},
    "lrp_epsilon": {"epsilon": float},
    "lrp_alphabeta": {"alpha": float, "beta": float},
    "lrp_composite": {"epsilon": float, "alpha": float, "beta": float},
    "patternnet": {},
    "pattern_attribution": {},
}

PROPAGATION_METHODS = (
    "guided_backprop",
    "deconvnet",
    "deep_taylor",
    "lrp_epsilon",
    "lrp_alphabeta",
    "lrp_composite",
    "patternnet",
    "pattern_attribution",
)

PATTERN_METHODS = ("patternnet", "pattern_attribution")


@dataclass
class MethodSpec:
    """A method id plus its typed parameters; unknown keys are rejected."""

    method: str
    params: dict = field(default_factory=dict)

    @classmethod
    def parse(cls, method: str, raw: dict[str, str] | None = None) -> "MethodSpec":
        if method not in METHOD_PARAMS:
            raise ConfigError(f"unknown method {method!r}")
        schema = METHOD_PARAMS[method]
        params: dict = {}
        for key, value in (raw or {}).items():
            if key not in schema:
                raise ConfigError(f"method {method!r} does not accept parameter {key!r}")
            caster = schema[key]
            try:
                params[key] = caster(value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
        return cls(method, params)


@dataclass
class Analyzer:
    method: str
    model: Model
    params: dict
    _run: Callable[[Tensor], Saliency]

    def analyze(self, x: Tensor) -> Saliency:
        return self._run(x)


def build_analyzer(
    spec: MethodSpec,
    model: Model,
    sel: NeuronSelector = NeuronSelector(),
    patterns: propagation.Patterns | None = None,
    seed: int = 0,
) -> Analyzer:
    """Build (and for propagation methods, compile) one analyzer."""
    method = spec.method
    p = dict(spec.params)
    p.setdefault("seed", seed)

    if method == "gradient":
        run = lambda x: propagation.gradient_saliency(model, x, sel)
    elif method == "input_t_gradient":
        run = lambda x: sampling.input_t_gradient(model, x, sel)
    elif method == "integrated_gradients":
        ref = None
        if "reference" in p:
            ref_value = float(p["reference"])
            ref = Tensor(np.full(model.input_shape, ref_value, dtype=np.float32))
        cfg = sampling.IGConfig(steps=p.get("steps", 32), reference=ref)
        run = lambda x: sampling.integrated_gradients(model, x, cfg, sel)
    elif method == "smoothgrad":
        cfg = sampling.SmoothGradConfig(
            n=p.get("n", 32),
            noise_scale=p.get("noise_scale"),
            postprocess=p.get("postprocess", "none"),
            seed=p["seed"],
        )
        run = lambda x: sampling.smoothgrad(model, x, cfg, sel)
    elif method == "occlusion":
        cfg = sampling.OcclusionConfig(
            psize=p.get("psize", 8), replace_value=p.get("replace_value", 0.0)
        )
        run = lambda x: sampling.occlusion(model, x, cfg, sel)
    elif method == "lime":
        seg_cfg = SegmentationConfig(
            mode=p.get("seg_mode", "grid"),
            grid_size=p.get("grid_size", 4),
            slic_k=p.get("slic_k", 16),
            seed=p["seed"],
        )
        cfg = sampling.LimeConfig(
            nr_samples=p.get("nr_samples", 1000),
            kernel_width=p.get("kernel_width", 0.25),
            ridge_alpha=p.get("ridge_alpha", 1.0),
            replace_value=p.get("replace_value", 0.0),
            seed=p["seed"],
        )

        def run(x: Tensor) -> Saliency:
            seg = segment(x.data[0], seg_cfg)
            return sampling.lime(model, x, seg, cfg, sel)

    elif method == "guided_backprop":
        plan = propagation.plan_guided_backprop(model, sel)
        run = lambda x: execute(plan, model, x)
    elif method == "deconvnet":
        plan = propagation.plan_deconvnet(model, sel)
        run = lambda x: execute(plan, model, x)
    elif method == "deep_taylor":
        plan = propagation.plan_deep_taylor(model, sel)

        def run(x: Tensor) -> Saliency:
            propagation.check_deep_taylor_domain(model, x, sel)
            return execute(plan, model, x)

    elif method == "lrp_epsilon":
        cfg = propagation.LrpConfig(epsilon=p.get("epsilon", 1e-7))
        plan = propagation.plan_lrp_epsilon(model, sel, cfg)
        run = lambda x: execute(plan, model, x)
    elif method == "lrp_alphabeta":
        cfg = propagation.LrpConfig(alpha=p.get("alpha", 1.0), beta=p.get("beta", 0.0))
        plan = propagation.plan_lrp_alphabeta(model, sel, cfg)
        run = lambda x: execute(plan, model, x)
    elif method == "lrp_composite":
        cfg = propagation.LrpConfig(
            epsilon=p.get("epsilon", 1e-7), alpha=p.get("alpha", 1.0), beta=p.get("beta", 0.0)
        )
        plan = propagation.plan_lrp_composite(model, sel, cfg)
        run = lambda x: execute(plan, model, x)
    elif method in PATTERN_METHODS:
        if patterns is None:
            raise ConfigError(f"method {method!r} needs patterns (fit a dataset or load a file)")
        if method == "patternnet":
            plan = propagation.plan_patternnet(model, patterns, sel)
        else:
            plan = propagation.plan_pattern_attribution(model, patterns, sel)
        run = lambda x: execute(plan, model, x)
    else:  # unreachable once parse() validated the id
        raise ConfigError(f"unknown method {method!r}")

    return Analyzer(method, model, p, run)
