"""Layer-wise relevance propagation with the epsilon rule."""

from __future__ import annotations

import numpy as np

from ..errors import UnsupportedLayerForLRP
from .layers import Conv2d, Dense, Dropout, Flatten, GlobalAvgPool, MaxPool, ModelParams, ModelSpec, ReLU, check_params
from .model import _as_batch, _conv_backward, _pool_backward, run_layers

DEFAULT_EPSILON = 1e-6


def _stabilise(z: np.ndarray, eps: float) -> np.ndarray:
    return z + eps * np.where(z >= 0, 1.0, -1.0)


def lrp_relevance(spec: ModelSpec, params: ModelParams, x, target_class: int, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Input relevance map for ``target_class``, same shape as ``x``.

    Relevance starts as the target logit and is pushed back with
    ``R_in = a * W^T (R_out / (z + eps * sign(z)))`` through dense, conv and
    average-pool layers; max-pooling routes relevance to the winning unit.
    Bias shares are absorbed, so relevance is conserved only for bias-free
    linear pieces. Dropout counts as the identity (eval mode).
    """
    check_params(spec, params)
    for layer in spec.layers:
        if not isinstance(layer, (Dense, Conv2d, ReLU, MaxPool, GlobalAvgPool, Flatten, Dropout)):
            raise UnsupportedLayerForLRP(f"no LRP rule for {type(layer).__name__}")
    if not 0 <= target_class < spec.num_classes:
        raise ValueError(f"target_class must lie in [0, {spec.num_classes})")
    xb, single = _as_batch(spec, x)
    acts, caches = run_layers(spec, params, xb, keep_cache=True)
    inputs = [xb] + acts[:-1]

    rel = np.zeros_like(acts[-1])
    rel[:, target_class] = acts[-1][:, target_class]
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, a, z = spec.layers[i], inputs[i], acts[i]
        if isinstance(layer, Dense):
            s = rel / _stabilise(z, epsilon)
            rel = a * (s @ params.weights[i])
        elif isinstance(layer, Conv2d):
            s = rel / _stabilise(z, epsilon)
            c, _, _ = _conv_backward(layer, params.weights[i], caches[i], s, False)
            rel = a * c
        elif isinstance(layer, GlobalAvgPool):
            n, h, w, ch = a.shape
            s = rel / _stabilise(z, epsilon)
            rel = a * (s[:, None, None, :] / (h * w))
        elif isinstance(layer, MaxPool):
            rel = _pool_backward(layer, caches[i], rel)
        elif isinstance(layer, Flatten):
            rel = rel.reshape(a.shape)
        # ReLU and Dropout pass relevance through unchanged
    return rel[0] if single else rel
