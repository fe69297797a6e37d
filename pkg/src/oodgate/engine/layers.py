"""Layer descriptions, network specs and parameter containers.

Images are stored channel-last, ``(H, W, C)`` per sample, and every
computation runs on a leading batch axis. Dense weights are ``(out, in)``;
convolution weights are ``(out_ch, kh, kw, in_ch)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from ..errors import InvariantViolation, ShapeMismatch


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv2d:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    kernel: int
    stride: int | None = None

    @property
    def step(self) -> int:
        return self.stride or self.kernel


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class Dropout:
    p: float


@dataclass(frozen=True)
class Flatten:
    pass


LayerSpec = Union[Dense, Conv2d, ReLU, MaxPool, GlobalAvgPool, Dropout, Flatten]
PARAM_LAYERS = (Dense, Conv2d)
LAYER_TYPES = {cls.__name__: cls for cls in (Dense, Conv2d, ReLU, MaxPool, GlobalAvgPool, Dropout, Flatten)}


def output_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    """Per-sample output shape of ``layer`` for a per-sample input ``shape``."""
    if isinstance(layer, Dense):
        if shape != (layer.in_features,):
            raise ShapeMismatch(f"{layer} expects ({layer.in_features},), got {shape}")
        return (layer.out_features,)
    if isinstance(layer, Conv2d):
        if len(shape) != 3 or shape[2] != layer.in_ch:
            raise ShapeMismatch(f"{layer} expects (H, W, {layer.in_ch}), got {shape}")
        h, w, _ = shape
        ho = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
        wo = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeMismatch(f"{layer} produces an empty map from {shape}")
        return (ho, wo, layer.out_ch)
    if isinstance(layer, MaxPool):
        if len(shape) != 3:
            raise ShapeMismatch(f"{layer} expects a (H, W, C) map, got {shape}")
        h, w, c = shape
        ho = (h - layer.kernel) // layer.step + 1
        wo = (w - layer.kernel) // layer.step + 1
        if ho < 1 or wo < 1:
            raise ShapeMismatch(f"{layer} produces an empty map from {shape}")
        return (ho, wo, c)
    if isinstance(layer, GlobalAvgPool):
        if len(shape) != 3:
            raise ShapeMismatch(f"GlobalAvgPool expects a (H, W, C) map, got {shape}")
        return (shape[2],)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, (ReLU, Dropout)):
        return shape
    raise TypeError(f"unknown layer {layer!r}")


@dataclass(frozen=True)
class ModelSpec:
    """An ordered stack of layers mapping ``input_shape`` to ``num_classes`` logits."""

    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        for layer in self.layers:
            if isinstance(layer, Dropout) and not 0.0 <= layer.p < 1.0:
                raise InvariantViolation(f"dropout rate {layer.p} outside [0, 1)")
        if self.shapes()[-1] != (self.num_classes,):
            raise ShapeMismatch(f"network output {self.shapes()[-1]} != ({self.num_classes},)")

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample shapes: entry 0 is the input, entry i+1 the output of layer i."""
        out = [self.input_shape]
        for layer in self.layers:
            out.append(output_shape(layer, out[-1]))
        return out

    @property
    def last_dense_index(self) -> int:
        for i in range(len(self.layers) - 1, -1, -1):
            if isinstance(self.layers[i], Dense):
                return i
        raise ShapeMismatch("network has no dense output layer")


@dataclass
class ModelParams:
    """Weight and bias per layer; ``None`` for parameter-free layers."""

    weights: list[np.ndarray | None]
    biases: list[np.ndarray | None]

    def __post_init__(self):
        for arr in self.weights + self.biases:
            if arr is not None and not np.all(np.isfinite(arr)):
                raise InvariantViolation("model parameters must be finite")

    def copy(self) -> "ModelParams":
        return ModelParams(
            [None if w is None else w.copy() for w in self.weights],
            [None if b is None else b.copy() for b in self.biases],
        )

    def arrays(self):
        for w, b in zip(self.weights, self.biases):
            if w is not None:
                yield w
                yield b

    def __eq__(self, other):
        if not isinstance(other, ModelParams) or len(self.weights) != len(other.weights):
            return NotImplemented
        pairs = list(zip(self.weights + self.biases, other.weights + other.biases))
        return all((a is None and b is None) or (a is not None and b is not None and np.array_equal(a, b)) for a, b in pairs)


def param_shapes(layer: LayerSpec) -> tuple[tuple[int, ...], tuple[int, ...]] | None:
    if isinstance(layer, Dense):
        return (layer.out_features, layer.in_features), (layer.out_features,)
    if isinstance(layer, Conv2d):
        return (layer.out_ch, layer.kernel, layer.kernel, layer.in_ch), (layer.out_ch,)
    return None


def check_params(spec: ModelSpec, params: ModelParams) -> None:
    if len(params.weights) != len(spec.layers) or len(params.biases) != len(spec.layers):
        raise ShapeMismatch("parameter list length does not match the layer list")
    for i, layer in enumerate(spec.layers):
        shapes = param_shapes(layer)
        w, b = params.weights[i], params.biases[i]
        if shapes is None:
            if w is not None or b is not None:
                raise ShapeMismatch(f"layer {i} ({type(layer).__name__}) takes no parameters")
        elif w is None or b is None or w.shape != shapes[0] or b.shape != shapes[1]:
            raise ShapeMismatch(f"layer {i}: expected parameter shapes {shapes}")


def init_params(spec: ModelSpec, seed: int, scheme: str = "glorot_uniform") -> ModelParams:
    """Uniform(-a, a) weights with a = sqrt(6 / (fan_in + fan_out)); zero biases."""
    if scheme != "glorot_uniform":
        raise ValueError(f"unknown weight init {scheme!r}")
    rng = np.random.default_rng(seed)
    weights: list[np.ndarray | None] = []
    biases: list[np.ndarray | None] = []
    for layer in spec.layers:
        shapes = param_shapes(layer)
        if shapes is None:
            weights.append(None)
            biases.append(None)
            continue
        wshape, bshape = shapes
        receptive = int(np.prod(wshape[1:-1])) if len(wshape) > 2 else 1
        fan_in = wshape[-1] * receptive
        fan_out = wshape[0] * receptive
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=wshape))
        biases.append(np.zeros(bshape))
    return ModelParams(weights, biases)
