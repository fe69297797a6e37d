"""Mini-batch SGD with momentum on softmax cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import DivergedLoss, ShapeMismatch
from .layers import Dropout, ModelParams, ModelSpec, init_params
from .model import backprop, log_softmax, run_layers, softmax


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    momentum: float = 0.9
    weight_init: str = "glorot_uniform"


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(-log_softmax(logits)[np.arange(len(labels)), labels].mean())


def train(
    spec: ModelSpec,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    init: ModelParams | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> ModelParams:
    """Fit ``spec`` to ``(images, labels)`` and return the final-epoch parameters.

    The shuffle order, the initial weights and the training-time dropout masks
    all derive from ``cfg.seed``. ``on_epoch(epoch, loss)`` receives the mean
    mini-batch loss of each epoch, measured before that batch's update.
    """
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("empty training set")
    if x.shape[1:] != spec.input_shape or len(y) != len(x):
        raise ShapeMismatch(f"training data {x.shape} / labels {y.shape} do not fit {spec.input_shape}")
    if np.any((y < 0) | (y >= spec.num_classes)):
        raise ValueError(f"labels must lie in [0, {spec.num_classes})")

    params = init.copy() if init is not None else init_params(spec, cfg.seed, cfg.weight_init)
    velocity = [(np.zeros_like(w), np.zeros_like(b)) if w is not None else None for w, b in zip(params.weights, params.biases)]
    rng = np.random.default_rng([cfg.seed, 1])
    shapes = spec.shapes()
    dropouts = [(i, layer.p) for i, layer in enumerate(spec.layers) if isinstance(layer, Dropout)]
    n = len(x)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            masks = {i: rng.random((len(idx),) + shapes[i]) >= p for i, p in dropouts}
            acts, caches = run_layers(spec, params, xb, masks=masks, keep_cache=True)
            logits = acts[-1]
            loss = cross_entropy(logits, yb)
            if not np.isfinite(loss):
                raise DivergedLoss(f"non-finite loss at epoch {epoch}")
            total += loss * len(idx)
            dlogits = softmax(logits)
            dlogits[np.arange(len(idx)), yb] -= 1.0
            dlogits /= len(idx)
            _, gw, gb = backprop(spec, params, caches, dlogits, want_params=True)
            for i, v in enumerate(velocity):
                if v is None:
                    continue
                vw, vb = v
                vw *= cfg.momentum
                vw -= cfg.lr * gw[i]
                vb *= cfg.momentum
                vb -= cfg.lr * gb[i]
                params.weights[i] += vw
                params.biases[i] += vb
        if on_epoch is not None:
            on_epoch(epoch, total / n)
    for arr in params.arrays():
        if not np.all(np.isfinite(arr)):
            raise DivergedLoss("parameters became non-finite")
    return params


def accuracy(spec: ModelSpec, params: ModelParams, images, labels) -> float:
    logits = run_layers(spec, params, np.asarray(images, dtype=np.float64))[-1]
    return float((logits.argmax(axis=1) == np.asarray(labels)).mean())
