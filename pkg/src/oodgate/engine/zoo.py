"""Reference architectures."""

from .layers import Conv2d, Dense, Dropout, GlobalAvgPool, MaxPool, ModelSpec, ReLU

# index of the first ReLU output in tiny_conv(), used as the "early layer"
TINYCONV_EARLY_LAYER = 1


def tiny_conv(num_classes: int = 2, image_size: int = 28, channels: int = 1, dropout: float = 0.3) -> ModelSpec:
    """Conv(8)-ReLU-MaxPool2-Conv(16)-ReLU-GAP-Dropout-Dense.

    Layer indices: 0 conv1, 1 relu1, 2 pool, 3 conv2, 4 relu2, 5 gap, 6 dropout, 7 dense.
    """
    layers = (
        Conv2d(channels, 8, 3, 1, 1),
        ReLU(),
        MaxPool(2),
        Conv2d(8, 16, 3, 1, 1),
        ReLU(),
        GlobalAvgPool(),
        Dropout(dropout),
        Dense(16, num_classes),
    )
    return ModelSpec((image_size, image_size, channels), layers, num_classes)


def mlp(in_features: int, hidden: tuple[int, ...], num_classes: int, dropout: float | None = None) -> ModelSpec:
    layers = []
    width = in_features
    for h in hidden:
        layers += [Dense(width, h), ReLU()]
        width = h
    if dropout is not None:
        layers.append(Dropout(dropout))
    layers.append(Dense(width, num_classes))
    return ModelSpec((in_features,), tuple(layers), num_classes)
