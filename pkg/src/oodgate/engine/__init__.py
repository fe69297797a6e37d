"""Deterministic feed-forward network engine."""

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
    init_params,
)
from .lrp import lrp_relevance
from .model import (
    ForwardTrace,
    ensemble_softmax,
    extract_feature_vector,
    forward,
    input_gradient,
    mc_dropout_sample,
    softmax,
)
from .serialize import load_model, save_model
from .train import TrainConfig, accuracy, train
from .zoo import TINYCONV_EARLY_LAYER, mlp, tiny_conv

__all__ = [
    "Conv2d",
    "Dense",
    "Dropout",
    "Flatten",
    "ForwardTrace",
    "GlobalAvgPool",
    "MaxPool",
    "ModelParams",
    "ModelSpec",
    "ReLU",
    "TINYCONV_EARLY_LAYER",
    "TrainConfig",
    "accuracy",
    "ensemble_softmax",
    "extract_feature_vector",
    "forward",
    "init_params",
    "input_gradient",
    "load_model",
    "lrp_relevance",
    "mc_dropout_sample",
    "mlp",
    "save_model",
    "softmax",
    "tiny_conv",
    "train",
]
