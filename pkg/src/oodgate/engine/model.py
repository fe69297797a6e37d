"""Forward and reverse passes, Monte-Carlo dropout, ensembles and feature pooling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import NonFiniteActivation, NotAFeatureLayer, ShapeMismatch
from . import rng
from .layers import (
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    GlobalAvgPool,
    MaxPool,
    ModelParams,
    ModelSpec,
    ReLU,
    check_params,
)


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# per-layer kernels (batched, channel-last)
# ---------------------------------------------------------------------------


def _windows(x: np.ndarray, k: int, s: int, ho: int, wo: int):
    for i in range(k):
        for j in range(k):
            yield i, j, x[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :]


def _conv_forward(layer: Conv2d, w, b, x):
    n, h, wd, c = x.shape
    p, k, s = layer.pad, layer.kernel, layer.stride
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
    ho = (h + 2 * p - k) // s + 1
    wo = (wd + 2 * p - k) // s + 1
    cols = np.concatenate([patch for _, _, patch in _windows(xp, k, s, ho, wo)], axis=-1)
    out = cols @ w.reshape(layer.out_ch, -1).T + b
    return out, (cols, x.shape)


def _conv_backward(layer: Conv2d, w, cache, dout, want_params):
    cols, xshape = cache
    n, h, wd, c = xshape
    p, k, s = layer.pad, layer.kernel, layer.stride
    ho, wo = dout.shape[1:3]
    w2 = w.reshape(layer.out_ch, -1)
    dcols = (dout @ w2).reshape(n, ho, wo, k, k, c)
    dxp = np.zeros((n, h + 2 * p, wd + 2 * p, c))
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, p : p + h, p : p + wd, :] if p else dxp
    if not want_params:
        return dx, None, None
    dw = (dout.reshape(-1, layer.out_ch).T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape)
    db = dout.sum(axis=(0, 1, 2))
    return dx, dw, db


def _pool_forward(layer: MaxPool, x):
    k, s = layer.kernel, layer.step
    ho = (x.shape[1] - k) // s + 1
    wo = (x.shape[2] - k) // s + 1
    stack = np.stack([patch for _, _, patch in _windows(x, k, s, ho, wo)])
    arg = stack.argmax(axis=0)
    return np.take_along_axis(stack, arg[None], axis=0)[0], (arg, x.shape)


def _pool_backward(layer: MaxPool, cache, dout):
    arg, xshape = cache
    k, s = layer.kernel, layer.step
    ho, wo = dout.shape[1:3]
    dx = np.zeros(xshape)
    for q, (i, j, _) in enumerate(_windows(dx, k, s, ho, wo)):
        dx[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += np.where(arg == q, dout, 0.0)
    return dx


# ---------------------------------------------------------------------------
# whole-network passes
# ---------------------------------------------------------------------------


def _as_batch(spec: ModelSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == spec.input_shape:
        return x[None], True
    if x.shape[1:] == spec.input_shape:
        return x, False
    raise ShapeMismatch(f"input shape {x.shape} does not match {spec.input_shape} (optionally batched)")


def run_layers(spec, params, x, start=0, stop=None, masks=None, keep_cache=False):
    """Apply layers ``start:stop`` to a batch.

    ``masks`` maps a dropout layer index to a keep-mask (broadcast against the
    batch); dropout layers without a mask act as the identity.
    Returns the list of post-layer activations and, optionally, backward caches.
    """
    stop = len(spec.layers) if stop is None else stop
    acts, caches = [], []
    h = x
    for i in range(start, stop):
        layer = spec.layers[i]
        cache = None
        if isinstance(layer, Dense):
            cache = h
            # overflow surfaces as NonFiniteActivation below
            with np.errstate(over="ignore", invalid="ignore"):
                h = h @ params.weights[i].T + params.biases[i]
        elif isinstance(layer, Conv2d):
            with np.errstate(over="ignore", invalid="ignore"):
                h, cache = _conv_forward(layer, params.weights[i], params.biases[i], h)
        elif isinstance(layer, ReLU):
            cache = h > 0
            h = np.where(cache, h, 0.0)
        elif isinstance(layer, MaxPool):
            h, cache = _pool_forward(layer, h)
        elif isinstance(layer, GlobalAvgPool):
            cache = h.shape
            h = h.mean(axis=(1, 2))
        elif isinstance(layer, Flatten):
            cache = h.shape
            h = h.reshape(h.shape[0], -1)
        elif isinstance(layer, Dropout):
            mask = None if masks is None else masks.get(i)
            if mask is not None:
                cache = mask / (1.0 - layer.p)
                h = h * cache
        if not np.all(np.isfinite(h)):
            raise NonFiniteActivation(f"non-finite activation after layer {i} ({type(layer).__name__})")
        acts.append(h)
        caches.append(cache)
    return (acts, caches) if keep_cache else acts


def backprop(spec, params, caches, dout, start=0, want_params=False):
    """Reverse pass from the output of the last layer down to the input of layer ``start``."""
    grads_w: list = [None] * len(spec.layers)
    grads_b: list = [None] * len(spec.layers)
    g = dout
    for i in range(len(spec.layers) - 1, start - 1, -1):
        layer, cache = spec.layers[i], caches[i - start]
        if isinstance(layer, Dense):
            if want_params:
                grads_w[i] = g.T @ cache
                grads_b[i] = g.sum(axis=0)
            g = g @ params.weights[i]
        elif isinstance(layer, Conv2d):
            g, grads_w[i], grads_b[i] = _conv_backward(layer, params.weights[i], cache, g, want_params)
        elif isinstance(layer, ReLU):
            g = np.where(cache, g, 0.0)
        elif isinstance(layer, MaxPool):
            g = _pool_backward(layer, cache, g)
        elif isinstance(layer, GlobalAvgPool):
            n, h, w, c = cache
            g = np.broadcast_to(g[:, None, None, :] / (h * w), cache).copy()
        elif isinstance(layer, Flatten):
            g = g.reshape(cache)
        elif isinstance(layer, Dropout):
            if cache is not None:
                g = g * cache
    return g, grads_w, grads_b


def dropout_masks(spec: ModelSpec, seed: int, draw: int) -> dict[int, np.ndarray]:
    """Keep-masks for every dropout layer of one Monte-Carlo draw, shared across the batch."""
    shapes = spec.shapes()
    return {
        i: rng.keep_mask(seed, draw, i, shapes[i], layer.p)
        for i, layer in enumerate(spec.layers)
        if isinstance(layer, Dropout)
    }


@dataclass
class ForwardTrace:
    """Input and per-layer outputs of one forward pass.

    Arrays carry a leading batch axis; the accessors drop it again when the
    pass was run on a single unbatched sample.
    """

    input: np.ndarray
    activations: list[np.ndarray]
    single: bool = False

    def _strip(self, a):
        return a[0] if self.single else a

    @property
    def logits(self) -> np.ndarray:
        return self._strip(self.activations[-1])

    @property
    def softmax(self) -> np.ndarray:
        return self._strip(softmax(self.activations[-1]))

    def layer_output(self, index: int) -> np.ndarray:
        return self._strip(self.activations[index])


def forward(spec: ModelSpec, params: ModelParams, x, mode: str = "eval", seed: int | None = None, draw: int = 0) -> ForwardTrace:
    """Run the network on one sample ``(*input_shape)`` or a batch ``(N, *input_shape)``.

    ``mode="mc_dropout"`` samples the dropout masks of draw ``draw`` from
    ``seed``; ``mode="eval"`` treats dropout as the identity.
    """
    check_params(spec, params)
    xb, single = _as_batch(spec, x)
    if mode == "eval":
        masks = None
    elif mode == "mc_dropout":
        if seed is None:
            raise ValueError("mc_dropout mode requires a seed")
        masks = dropout_masks(spec, seed, draw)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return ForwardTrace(xb.copy(), run_layers(spec, params, xb, masks=masks), single)


def _objective_grad(logits: np.ndarray, objective: str, k, target, temperature: float) -> np.ndarray:
    """d(objective)/d(logits) for each row of a batch."""
    n, num_classes = logits.shape
    if objective == "log_max_softmax":
        top = logits.argmax(axis=1)
        g = -softmax(logits, temperature)
        g[np.arange(n), top] += 1.0
        return g / temperature
    if objective == "logit":
        if k is None or not 0 <= k < num_classes:
            raise ValueError(f"logit objective needs k in [0, {num_classes})")
        g = np.zeros_like(logits)
        g[:, k] = 1.0
        return g
    if objective == "loss":
        tgt = np.broadcast_to(np.asarray(target, dtype=np.int64), (n,))
        if target is None or np.any((tgt < 0) | (tgt >= num_classes)):
            raise ValueError(f"loss objective needs targets in [0, {num_classes})")
        g = softmax(logits)
        g[np.arange(n), tgt] -= 1.0
        return g
    raise ValueError(f"unknown objective {objective!r}")


def input_gradient(spec, params, x, objective="log_max_softmax", *, k=None, target=None, temperature=1.0):
    """Exact gradient of a scalar objective with respect to the input, dropout off.

    Objectives: ``"log_max_softmax"`` (log of the top softmax probability at
    ``temperature``), ``"logit"`` (logit ``k``) and ``"loss"`` (cross-entropy
    against ``target``). Batched inputs get per-sample gradients.
    """
    check_params(spec, params)
    xb, single = _as_batch(spec, x)
    acts, caches = run_layers(spec, params, xb, keep_cache=True)
    dlogits = _objective_grad(acts[-1], objective, k, target, temperature)
    g, _, _ = backprop(spec, params, caches, dlogits)
    return g[0] if single else g


def _override_dropout(spec: ModelSpec, params: ModelParams, p: float) -> tuple[ModelSpec, ModelParams]:
    """Set every dropout rate to ``p``, inserting one before the output layer if there is none."""
    if any(isinstance(layer, Dropout) for layer in spec.layers):
        layers = tuple(Dropout(p) if isinstance(layer, Dropout) else layer for layer in spec.layers)
        return ModelSpec(spec.input_shape, layers, spec.num_classes), params
    at = spec.last_dense_index
    layers = list(spec.layers)
    layers.insert(at, Dropout(p))
    new = ModelSpec(spec.input_shape, tuple(layers), spec.num_classes)
    return new, ModelParams(params.weights[:at] + [None] + params.weights[at:], params.biases[:at] + [None] + params.biases[at:])


def mc_dropout_sample(spec, params, x, T: int, seed: int, p_override: float | None = None) -> np.ndarray:
    """Softmax outputs of ``T`` dropout draws, shape ``(T, K)`` or ``(N, T, K)`` for a batch.

    Draw ``t`` uses the masks of ``forward(..., mode="mc_dropout", seed=seed, draw=t)``.
    ``p_override`` replaces every dropout rate; a network without dropout then
    gets one in front of its output layer.
    """
    if T < 1:
        raise ValueError("need at least one Monte-Carlo draw")
    check_params(spec, params)
    if p_override is not None:
        spec, params = _override_dropout(spec, params, p_override)
    elif not any(isinstance(layer, Dropout) for layer in spec.layers):
        raise ValueError("network has no dropout layer and no p_override was given")
    xb, single = _as_batch(spec, x)
    first = next(i for i, layer in enumerate(spec.layers) if isinstance(layer, Dropout))
    # everything before the first dropout layer is deterministic
    prefix = run_layers(spec, params, xb, stop=first)
    h0 = prefix[-1] if prefix else xb
    out = np.empty((xb.shape[0], T, spec.num_classes))
    for t in range(T):
        masks = dropout_masks(spec, seed, t)
        logits = run_layers(spec, params, h0, start=first, masks=masks)[-1]
        out[:, t] = softmax(logits)
    return out[0] if single else out


def ensemble_softmax(spec, members: Sequence[ModelParams], x) -> np.ndarray:
    """Member softmaxes stacked on axis -2: ``(E, K)`` or ``(N, E, K)``."""
    outs = [forward(spec, p, x).softmax for p in members]
    return np.stack(outs, axis=-2)


def extract_feature_vector(trace: ForwardTrace, layer_index: int) -> np.ndarray:
    """Spatial mean of each channel of a layer's ``(J, J, M)`` output; vectors pass through."""
    try:
        act = trace.activations[layer_index]
    except IndexError:
        raise NotAFeatureLayer(f"no layer {layer_index}") from None
    if act.ndim == 4:
        z = act.mean(axis=(1, 2))
    elif act.ndim == 2:
        z = act
    else:
        raise NotAFeatureLayer(f"layer {layer_index} output of rank {act.ndim - 1} is not a feature map")
    return z[0] if trace.single else z
