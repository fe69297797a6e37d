"""Model specs as JSON plus one array file per parameter tensor."""

from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path

from ..errors import IoFailure, SchemaMismatch
from ..tensor_io import read_array_file, write_array_file
from .layers import LAYER_TYPES, ModelParams, ModelSpec, check_params, param_shapes

SPEC_FILE = "model.json"


def spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "input_shape": list(spec.input_shape),
        "num_classes": spec.num_classes,
        "layers": [{"type": type(layer).__name__, **dataclasses.asdict(layer)} for layer in spec.layers],
    }


def spec_from_dict(doc: dict) -> ModelSpec:
    try:
        layers = []
        for entry in doc["layers"]:
            entry = dict(entry)
            layers.append(LAYER_TYPES[entry.pop("type")](**entry))
        return ModelSpec(tuple(doc["input_shape"]), tuple(layers), int(doc["num_classes"]))
    except (KeyError, TypeError) as exc:
        raise SchemaMismatch(f"bad model description: {exc}") from None


def save_model(spec: ModelSpec, params: ModelParams, directory: str | os.PathLike) -> None:
    check_params(spec, params)
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        (d / SPEC_FILE).write_text(json.dumps(spec_to_dict(spec), indent=2) + "\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if w is not None:
            write_array_file(w, d / f"{i}.w.npy")
            write_array_file(b, d / f"{i}.b.npy")


def load_model(directory: str | os.PathLike) -> tuple[ModelSpec, ModelParams]:
    d = Path(directory)
    try:
        spec = spec_from_dict(json.loads((d / SPEC_FILE).read_text()))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    weights, biases = [], []
    for i, layer in enumerate(spec.layers):
        if param_shapes(layer) is None:
            weights.append(None)
            biases.append(None)
        else:
            weights.append(read_array_file(d / f"{i}.w.npy").astype("float64"))
            biases.append(read_array_file(d / f"{i}.b.npy").astype("float64"))
    params = ModelParams(weights, biases)
    check_params(spec, params)
    return spec, params
