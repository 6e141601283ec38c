"""Saliency values: an input-shaped tensor plus method metadata."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .tensor import Tensor, read_tensor, write_tensor


@dataclass
class Saliency:
    tensor: Tensor
    method: str
    params: dict = field(default_factory=dict)
    neuron_index: int = 0
    model_hash: str | None = None


def save_saliency(s: Saliency, tensor_path, sidecar_path) -> None:
    """Write the tensor file plus its JSON sidecar."""
    write_tensor(s.tensor, tensor_path)
    meta = {
        "method": s.method,
        "params": s.params,
        "neuron_index": s.neuron_index,
        "model_hash": s.model_hash,
    }
    with open(sidecar_path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_saliency(tensor_path, sidecar_path) -> Saliency:
    with open(sidecar_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    return Saliency(
        tensor=read_tensor(tensor_path),
        method=meta["method"],
        params=meta.get("params", {}),
        neuron_index=int(meta.get("neuron_index", 0)),
        model_hash=meta.get("model_hash"),
    )
