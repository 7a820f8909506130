"""Seeded model generators: fixed presets plus randomized structures.

Everything is deterministic in the seed so generated models can serve as
fixtures. Weights use fan-in scaled uniform draws, which keeps activations
in a sane range through deep stacks of clamped relus.
"""

from __future__ import annotations

import numpy as np

from .model import (
    BatchNormSpec,
    ConvLayerSpec,
    GlobalAvgPoolSpec,
    LinearLayerSpec,
    Model,
    ResidualAddSpec,
    TensorShape,
)

# (expansion, out_channels, repeats, first_stride) per stage
_INVERTED_RESIDUAL_STAGES = (
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)


def _conv(
    rng: np.random.Generator,
    in_shape: TensorShape,
    out_c: int,
    k: int = 3,
    stride: int = 1,
    padding: int = 1,
    depthwise: bool = False,
    activation: str = "relu6",
) -> ConvLayerSpec:
    in_cpk = 1 if depthwise else in_shape.channels
    fan_in = in_cpk * k * k
    oh = (in_shape.height + 2 * padding - k) // stride + 1
    ow = (in_shape.width + 2 * padding - k) // stride + 1
    return ConvLayerSpec(
        in_shape=in_shape,
        out_shape=TensorShape(out_c, oh, ow),
        kernel_size=(k, k),
        stride=stride,
        padding=padding,
        depthwise=depthwise,
        weights=rng.uniform(-1.0, 1.0, (out_c, in_cpk, k, k)) * np.sqrt(2.0 / fan_in),
        bias=rng.uniform(-0.1, 0.1, out_c),
        activation=activation,
    )


def _linear(rng: np.random.Generator, in_features: int, out_features: int) -> LinearLayerSpec:
    return LinearLayerSpec(
        in_features=in_features,
        out_features=out_features,
        weights=rng.uniform(-1.0, 1.0, (in_features, out_features)) * np.sqrt(1.0 / in_features),
        bias=rng.uniform(-0.1, 0.1, out_features),
    )


def tiny_cnn(seed: int = 7) -> Model:
    """Small mixed-operator model: strided, depthwise and pointwise convs,
    one residual connection, pooling and a classifier."""
    rng = np.random.default_rng(seed)
    shape = TensorShape(3, 16, 16)
    layers = []
    layers.append(_conv(rng, shape, 8, k=3, stride=1, padding=1))
    layers.append(_conv(rng, layers[-1].out_shape, 16, k=3, stride=2, padding=1))
    layers.append(_conv(rng, layers[-1].out_shape, 16, k=3, stride=1, padding=1, depthwise=True))
    layers.append(_conv(rng, layers[-1].out_shape, 16, k=1, stride=1, padding=0, activation="none"))
    layers.append(ResidualAddSpec(shape=layers[-1].out_shape, source=1))
    layers.append(GlobalAvgPoolSpec(in_shape=layers[-1].out_shape))
    layers.append(_linear(rng, 16, 10))
    return Model(input_shape=shape, layers=layers)


def tiny_cnn_bn(seed: int = 7) -> Model:
    """tiny_cnn's shape with explicit batchnorm after each hidden conv,
    for exercising fusion."""
    rng = np.random.default_rng(seed)
    shape = TensorShape(3, 16, 16)
    layers = []

    def bn(c: int, activation: str) -> BatchNormSpec:
        return BatchNormSpec(
            shape=layers[-1].out_shape,
            gamma=rng.uniform(0.5, 1.5, c),
            beta=rng.uniform(-0.5, 0.5, c),
            mean=rng.uniform(-0.5, 0.5, c),
            var=rng.uniform(0.5, 2.0, c),
            activation=activation,
        )

    layers.append(_conv(rng, shape, 8, k=3, stride=1, padding=1, activation="none"))
    layers.append(bn(8, "relu6"))
    layers.append(_conv(rng, layers[-1].out_shape, 16, k=3, stride=2, padding=1, activation="none"))
    layers.append(bn(16, "relu6"))
    layers.append(_conv(rng, layers[-1].out_shape, 16, k=3, stride=1, padding=1, depthwise=True, activation="none"))
    layers.append(bn(16, "relu"))
    layers.append(_conv(rng, layers[-1].out_shape, 16, k=1, stride=1, padding=0, activation="none"))
    layers.append(ResidualAddSpec(shape=layers[-1].out_shape, source=3))
    layers.append(GlobalAvgPoolSpec(in_shape=layers[-1].out_shape))
    layers.append(_linear(rng, 16, 10))
    return Model(input_shape=shape, layers=layers)


def mobilenet_v2_like(seed: int = 3) -> Model:
    """MobileNetV2-shaped network at 112x112 input: a strided stem, 17
    inverted-residual blocks (expand, depthwise, project), a 1280-channel
    head, pooling and a 1000-way classifier. Every block keeps its expansion
    conv, so there are 53 convolutions plus the classifier."""
    rng = np.random.default_rng(seed)
    shape = TensorShape(3, 112, 112)
    layers: list = []

    def add(layer):
        layers.append(layer)
        return layer.out_shape

    cur = add(_conv(rng, shape, 32, k=3, stride=2, padding=1))
    for t, c, n, s in _INVERTED_RESIDUAL_STAGES:
        for j in range(n):
            stride = s if j == 0 else 1
            in_c = cur.channels
            block_input = len(layers) - 1
            cur = add(_conv(rng, cur, in_c * t, k=1, stride=1, padding=0))
            cur = add(_conv(rng, cur, cur.channels, k=3, stride=stride, padding=1, depthwise=True))
            cur = add(_conv(rng, cur, c, k=1, stride=1, padding=0, activation="none"))
            if stride == 1 and in_c == c:
                layers.append(ResidualAddSpec(shape=cur, source=block_input))
    cur = add(_conv(rng, cur, 1280, k=1, stride=1, padding=0))
    layers.append(GlobalAvgPoolSpec(in_shape=cur))
    layers.append(_linear(rng, 1280, 1000))
    return Model(input_shape=shape, layers=layers)


def random_cnn(
    seed: int,
    max_convs: int = 6,
    max_channels: int = 16,
    max_spatial: int = 16,
    allow_depthwise: bool = True,
    allow_residual: bool = True,
    allow_gap: bool = True,
    allow_linear: bool = True,
    allow_batchnorm: bool = False,
) -> Model:
    """Random small CNN with valid shapes by construction."""
    rng = np.random.default_rng(seed)
    shape = TensorShape(
        int(rng.integers(1, 5)),
        int(rng.integers(4, max_spatial + 1)),
        int(rng.integers(4, max_spatial + 1)),
    )
    layers: list = []
    produced: list[tuple[int, TensorShape]] = []
    cur = shape
    for _ in range(int(rng.integers(1, max_convs + 1))):
        k = int(rng.choice([1, 3]))
        padding = int(rng.integers(0, 2)) if k == 3 else 0
        if cur.height + 2 * padding < k or cur.width + 2 * padding < k:
            k, padding = 1, 0
        stride = int(rng.choice([1, 2])) if min(cur.height, cur.width) >= 2 else 1
        depthwise = allow_depthwise and rng.random() < 0.25
        out_c = cur.channels if depthwise else int(rng.integers(1, max_channels + 1))
        act = str(rng.choice(["relu6", "relu", "none"]))
        conv = _conv(rng, cur, out_c, k, stride, padding, depthwise, act)
        layers.append(conv)
        cur = conv.out_shape
        if allow_batchnorm and rng.random() < 0.3:
            layers.append(
                BatchNormSpec(
                    shape=cur,
                    gamma=rng.uniform(0.5, 1.5, cur.channels),
                    beta=rng.uniform(-0.5, 0.5, cur.channels),
                    mean=rng.uniform(-0.5, 0.5, cur.channels),
                    var=rng.uniform(0.5, 2.0, cur.channels),
                    activation=str(rng.choice(["relu6", "none"])),
                )
            )
        produced.append((len(layers) - 1, cur))
        if allow_residual and rng.random() < 0.3:
            cands = [i for i, sh in produced[:-1] if sh == cur]
            if cands:
                layers.append(ResidualAddSpec(shape=cur, source=cands[-1]))
                produced.append((len(layers) - 1, cur))
    if allow_gap and rng.random() < 0.4:
        layers.append(GlobalAvgPoolSpec(in_shape=cur))
        cur = layers[-1].out_shape
    if allow_linear and rng.random() < 0.6:
        layers.append(_linear(rng, cur.neuron_count, int(rng.integers(2, 33))))
    return Model(input_shape=shape, layers=layers)


PRESETS = {
    "tiny_cnn": tiny_cnn,
    "tiny_cnn_bn": tiny_cnn_bn,
    "mobilenet_v2_like": mobilenet_v2_like,
}
