"""CNN model reinterpretation: structural metadata, neuron-level dependencies,
BatchNorm folding and int8 quantization.

A model description is a self-contained JSON document (see ``load_model``);
reinterpretation turns it into an immutable :class:`Model` whose layers expose
exact receptive fields per output neuron, which is what the splitting and
routing stages operate on.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence, Union

import numpy as np

from .errors import (
    BoundsError,
    FusionError,
    StructuralError,
    UnsupportedOperatorError,
)

ACTIVATIONS = ("none", "relu", "relu6")

DEFAULT_BN_EPS = 1e-5

# Bias values are carried at 32-bit width in both precisions (int8 deployments
# keep int32 biases), so fragment accounting charges 4 bytes per bias entry.
BIAS_BYTES = 4


def apply_activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "none":
        return x
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "relu6":
        return np.clip(x, 0.0, 6.0)
    raise UnsupportedOperatorError(f"unknown activation {kind!r}")


@dataclass(frozen=True)
class TensorShape:
    channels: int
    height: int
    width: int

    def __post_init__(self):
        if min(self.channels, self.height, self.width) < 1:
            raise StructuralError(f"non-positive tensor shape {self}")

    @property
    def neuron_count(self) -> int:
        return self.channels * self.height * self.width

    def flat(self, c: int, h: int, w: int) -> int:
        """Channel-major flat index: i -> channel i // (H*W)."""
        return (c * self.height + h) * self.width + w

    def unflat(self, i: int) -> tuple[int, int, int]:
        hw = self.height * self.width
        return i // hw, (i % hw) // self.width, i % self.width

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)


@dataclass(frozen=True)
class ReceptiveField:
    """Input-neuron set for one output neuron, as clipped half-open ranges."""

    channels: tuple[int, int]
    rows: tuple[int, int]
    cols: tuple[int, int]

    @property
    def size(self) -> int:
        return (
            (self.channels[1] - self.channels[0])
            * (self.rows[1] - self.rows[0])
            * (self.cols[1] - self.cols[0])
        )

    def contains(self, c: int, h: int, w: int) -> bool:
        return (
            self.channels[0] <= c < self.channels[1]
            and self.rows[0] <= h < self.rows[1]
            and self.cols[0] <= w < self.cols[1]
        )

    def flat_indices(self, in_shape: TensorShape) -> np.ndarray:
        """All member indices in channel-major order over ``in_shape``."""
        cs = np.arange(self.channels[0], self.channels[1])
        rs = np.arange(self.rows[0], self.rows[1])
        ws = np.arange(self.cols[0], self.cols[1])
        grid = (
            cs[:, None, None] * (in_shape.height * in_shape.width)
            + rs[None, :, None] * in_shape.width
            + ws[None, None, :]
        )
        return grid.ravel()

    def index_set(self, in_shape: TensorShape) -> set[int]:
        return set(int(i) for i in self.flat_indices(in_shape))


@dataclass
class ConvLayerSpec:
    in_shape: TensorShape
    out_shape: TensorShape
    kernel_size: tuple[int, int]
    stride: int
    padding: int
    depthwise: bool
    weights: np.ndarray  # (out_c, in_c_per_kernel, kh, kw)
    bias: np.ndarray  # (out_c,)
    activation: str = "none"
    weight_scale: float | None = None  # set when quantized

    kind = "conv"

    @property
    def in_channels_per_kernel(self) -> int:
        return 1 if self.depthwise else self.in_shape.channels

    @property
    def kernel_elems(self) -> int:
        kh, kw = self.kernel_size
        return self.in_channels_per_kernel * kh * kw

    @property
    def macs_per_neuron(self) -> int:
        # Padded positions are charged the full window, like a real kernel
        # that multiplies by stored zeros.
        return self.kernel_elems

    def validate(self, index: int) -> None:
        kh, kw = self.kernel_size
        eh = (self.in_shape.height + 2 * self.padding - kh) // self.stride + 1
        ew = (self.in_shape.width + 2 * self.padding - kw) // self.stride + 1
        if eh < 1 or ew < 1:
            raise StructuralError(f"layer {index}: kernel {kh}x{kw} does not fit input {self.in_shape}")
        if (self.out_shape.height, self.out_shape.width) != (eh, ew):
            raise StructuralError(
                f"layer {index}: declared output {self.out_shape.height}x{self.out_shape.width}"
                f" but stride/padding formula yields {eh}x{ew}"
            )
        if self.depthwise and self.out_shape.channels != self.in_shape.channels:
            raise StructuralError(f"layer {index}: depthwise conv must preserve channel count")
        expect = (self.out_shape.channels, self.in_channels_per_kernel, kh, kw)
        if self.weights.shape != expect:
            raise StructuralError(f"layer {index}: weight shape {self.weights.shape} != {expect}")
        if self.bias.shape != (self.out_shape.channels,):
            raise StructuralError(f"layer {index}: bias shape {self.bias.shape}")
        if self.activation not in ACTIVATIONS:
            raise UnsupportedOperatorError(f"layer {index}: activation {self.activation!r}")


@dataclass
class LinearLayerSpec:
    in_features: int
    out_features: int
    weights: np.ndarray  # (in_features, out_features); column j owns output j
    bias: np.ndarray  # (out_features,)
    weight_scale: float | None = None

    kind = "linear"

    @property
    def in_shape(self) -> TensorShape:
        return TensorShape(self.in_features, 1, 1)

    @property
    def out_shape(self) -> TensorShape:
        return TensorShape(self.out_features, 1, 1)

    @property
    def macs_per_neuron(self) -> int:
        return self.in_features

    def validate(self, index: int) -> None:
        if self.weights.shape != (self.in_features, self.out_features):
            raise StructuralError(
                f"layer {index}: weight matrix {self.weights.shape} != "
                f"({self.in_features}, {self.out_features})"
            )
        if self.bias.shape != (self.out_features,):
            raise StructuralError(f"layer {index}: bias shape {self.bias.shape}")


@dataclass
class BatchNormSpec:
    """Per-channel affine normalization; only legal immediately after a conv."""

    shape: TensorShape
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = DEFAULT_BN_EPS
    activation: str = "none"  # absorbed into the conv at fusion time

    kind = "batchnorm"

    @property
    def in_shape(self) -> TensorShape:
        return self.shape

    @property
    def out_shape(self) -> TensorShape:
        return self.shape


@dataclass
class ResidualAddSpec:
    """Element-wise add of an earlier layer's output; runs at the coordinator."""

    shape: TensorShape
    source: int  # index of the earlier layer whose output is added

    kind = "residual_add"

    @property
    def in_shape(self) -> TensorShape:
        return self.shape

    @property
    def out_shape(self) -> TensorShape:
        return self.shape


@dataclass
class GlobalAvgPoolSpec:
    in_shape: TensorShape

    kind = "gap"

    @property
    def out_shape(self) -> TensorShape:
        return TensorShape(self.in_shape.channels, 1, 1)


LayerSpec = Union[ConvLayerSpec, LinearLayerSpec, BatchNormSpec, ResidualAddSpec, GlobalAvgPoolSpec]

#: Layer kinds executed by workers; everything else runs at the coordinator.
WORKER_KINDS = ("conv", "linear")


@dataclass
class Model:
    """Reinterpreted model: shape-checked layer chain plus quantization state.

    Immutable by convention after construction; fusion and quantization return
    new instances.
    """

    input_shape: TensorShape
    layers: list[LayerSpec]
    quantization: str = "float32"  # "float32" | "int8"
    activation_scales: list[float] | None = None  # [input, out_0, out_1, ...]

    def __post_init__(self):
        self._check_chain()

    def _check_chain(self) -> None:
        prev = self.input_shape
        for i, layer in enumerate(self.layers):
            if layer.kind == "linear":
                if prev.neuron_count != layer.in_features:
                    raise StructuralError(
                        f"layer {i}: linear expects {layer.in_features} inputs, "
                        f"previous output has {prev.neuron_count}"
                    )
            elif layer.kind == "residual_add":
                if not (0 <= layer.source < i):
                    raise StructuralError(f"layer {i}: residual source {layer.source} out of range")
                src_shape = self.layers[layer.source].out_shape
                if src_shape != prev or layer.shape != prev:
                    raise StructuralError(
                        f"layer {i}: residual shapes differ ({src_shape} vs {prev})"
                    )
            else:
                if layer.in_shape != prev:
                    raise StructuralError(
                        f"layer {i}: input shape {layer.in_shape} != previous output {prev}"
                    )
            if isinstance(layer, ConvLayerSpec):
                layer.validate(i)
            elif isinstance(layer, LinearLayerSpec):
                layer.validate(i)
            prev = layer.out_shape

    # -- chain helpers -----------------------------------------------------

    def tensor_shapes(self) -> list[TensorShape]:
        """Shapes of tensor t_-1 (model input) through t_{L-1}."""
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.out_shape)
        return shapes

    def in_shape_of(self, index: int) -> TensorShape:
        return self.tensor_shapes()[index]

    @property
    def output_shape(self) -> TensorShape:
        return self.tensor_shapes()[-1]

    def worker_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind in WORKER_KINDS]

    @property
    def weight_bytes_each(self) -> int:
        return 1 if self.quantization == "int8" else 4

    @property
    def activation_bytes_each(self) -> int:
        return 1 if self.quantization == "int8" else 4

    def layer_weight_bytes(self, index: int) -> int:
        layer = self.layers[index]
        if isinstance(layer, ConvLayerSpec):
            n_weights = layer.out_shape.channels * layer.kernel_elems
            return n_weights * self.weight_bytes_each + layer.out_shape.channels * BIAS_BYTES
        if isinstance(layer, LinearLayerSpec):
            return (
                layer.in_features * layer.out_features * self.weight_bytes_each
                + layer.out_features * BIAS_BYTES
            )
        return 0

    @property
    def total_weight_bytes(self) -> int:
        return sum(self.layer_weight_bytes(i) for i in range(len(self.layers)))

    @property
    def total_macs(self) -> int:
        return sum(
            l.out_shape.neuron_count * l.macs_per_neuron
            for l in self.layers
            if l.kind in WORKER_KINDS
        )

    @property
    def total_output_bytes(self) -> int:
        """Bytes of output data produced by worker-executed layers."""
        return sum(
            l.out_shape.neuron_count * self.activation_bytes_each
            for l in self.layers
            if l.kind in WORKER_KINDS
        )

    def scale_for_tensor(self, tensor_index: int) -> float:
        """Activation scale of tensor t_{tensor_index} (-1 = model input)."""
        if self.activation_scales is None:
            raise ValueError("model has no calibrated activation scales")
        return self.activation_scales[tensor_index + 1]


# ---------------------------------------------------------------------------
# Receptive fields


def get_input(layer: ConvLayerSpec | LinearLayerSpec, c: int, h: int, w: int) -> ReceptiveField:
    """Exact input-neuron set needed to compute output neuron (c, h, w).

    Convolution windows are clipped against the input bounds (padding
    contributes nothing); depthwise convs read a single channel; linear
    layers read everything.
    """
    if isinstance(layer, LinearLayerSpec):
        if not (0 <= c < layer.out_features and h == 0 and w == 0):
            raise BoundsError(f"output ({c},{h},{w}) outside linear layer of width {layer.out_features}")
        return ReceptiveField((0, layer.in_features), (0, 1), (0, 1))

    out = layer.out_shape
    if not (0 <= c < out.channels and 0 <= h < out.height and 0 <= w < out.width):
        raise BoundsError(f"output ({c},{h},{w}) outside {out}")
    kh, kw = layer.kernel_size
    r0 = h * layer.stride - layer.padding
    c0 = w * layer.stride - layer.padding
    rows = (max(r0, 0), min(r0 + kh, layer.in_shape.height))
    cols = (max(c0, 0), min(c0 + kw, layer.in_shape.width))
    if layer.depthwise:
        channels = (c, c + 1)
    else:
        channels = (0, layer.in_shape.channels)
    return ReceptiveField(channels, rows, cols)


# ---------------------------------------------------------------------------
# JSON loading / saving

_B64_THRESHOLD = 64  # arrays larger than this serialize as binary blocks


def _decode_array(obj, dtype) -> np.ndarray:
    if isinstance(obj, dict):
        raw = base64.b64decode(obj["data_b64"])
        arr = np.frombuffer(raw, dtype=np.dtype(obj.get("dtype", dtype)).newbyteorder("<"))
        return arr.reshape(obj["shape"]).astype(dtype)
    return np.asarray(obj, dtype=dtype)


def _encode_array(arr: np.ndarray, store_dtype: str):
    if arr.size > _B64_THRESHOLD:
        packed = np.ascontiguousarray(arr.astype(np.dtype(store_dtype).newbyteorder("<")))
        return {
            "dtype": store_dtype,
            "shape": list(arr.shape),
            "data_b64": base64.b64encode(packed.tobytes()).decode("ascii"),
        }
    return arr.astype(np.dtype(store_dtype)).tolist()


def reinterpret(source: Union[str, Path, dict]) -> Model:
    """Build a :class:`Model` from a model description (path or parsed dict).

    Weights are taken as-is; only structural metadata is derived. Raises
    :class:`StructuralError` naming the offending layer when the shape chain
    is inconsistent and :class:`UnsupportedOperatorError` for unknown kinds.
    """
    if isinstance(source, (str, Path)):
        with open(source) as fh:
            doc = json.load(fh)
    else:
        doc = source

    quant = doc.get("quantization", "float32")
    if quant not in ("float32", "int8"):
        raise UnsupportedOperatorError(f"unknown quantization {quant!r}")
    wdtype = np.int8 if quant == "int8" else np.float64

    shape = TensorShape(*doc["input_shape"])
    prev = shape
    layers: list[LayerSpec] = []
    for i, ld in enumerate(doc.get("layers", [])):
        kind = ld.get("kind")
        if kind == "conv":
            kh, kw = ld["kernel"]
            stride = int(ld.get("stride", 1))
            padding = int(ld.get("padding", 0))
            depthwise = bool(ld.get("depthwise", False))
            out_c = int(ld["out_channels"])
            if stride < 1 or padding < 0 or kh < 1 or kw < 1:
                raise StructuralError(f"layer {i}: bad kernel geometry")
            oh = (prev.height + 2 * padding - kh) // stride + 1
            ow = (prev.width + 2 * padding - kw) // stride + 1
            if oh < 1 or ow < 1:
                raise StructuralError(f"layer {i}: kernel {kh}x{kw} does not fit input {prev}")
            declared = ld.get("out_shape")
            if declared is not None and tuple(declared) != (out_c, oh, ow):
                raise StructuralError(
                    f"layer {i}: declared out_shape {declared} but formula yields ({out_c},{oh},{ow})"
                )
            layer = ConvLayerSpec(
                in_shape=prev,
                out_shape=TensorShape(out_c, oh, ow),
                kernel_size=(kh, kw),
                stride=stride,
                padding=padding,
                depthwise=depthwise,
                weights=_decode_array(ld["weights"], wdtype),
                bias=_decode_array(ld["bias"], np.float64),
                activation=ld.get("activation", "none"),
                weight_scale=ld.get("weight_scale"),
            )
        elif kind == "linear":
            out_f = int(ld["out_features"])
            layer = LinearLayerSpec(
                in_features=prev.neuron_count,
                out_features=out_f,
                weights=_decode_array(ld["weights"], wdtype),
                bias=_decode_array(ld["bias"], np.float64),
                weight_scale=ld.get("weight_scale"),
            )
        elif kind == "batchnorm":
            layer = BatchNormSpec(
                shape=prev,
                gamma=_decode_array(ld["gamma"], np.float64),
                beta=_decode_array(ld["beta"], np.float64),
                mean=_decode_array(ld["mean"], np.float64),
                var=_decode_array(ld["var"], np.float64),
                eps=float(ld.get("eps", DEFAULT_BN_EPS)),
                activation=ld.get("activation", "none"),
            )
        elif kind == "residual_add":
            layer = ResidualAddSpec(shape=prev, source=int(ld["from"]))
        elif kind == "gap":
            layer = GlobalAvgPoolSpec(in_shape=prev)
        else:
            raise UnsupportedOperatorError(f"layer {i}: unsupported kind {kind!r}")
        layers.append(layer)
        prev = layer.out_shape

    return Model(
        input_shape=shape,
        layers=layers,
        quantization=quant,
        activation_scales=doc.get("activation_scales"),
    )


def model_to_json(model: Model) -> dict:
    """Inverse of :func:`reinterpret`; round-trips byte-identically."""
    wdtype = "int8" if model.quantization == "int8" else "float32"
    layers = []
    for layer in model.layers:
        if isinstance(layer, ConvLayerSpec):
            ld = {
                "kind": "conv",
                "kernel": list(layer.kernel_size),
                "stride": layer.stride,
                "padding": layer.padding,
                "depthwise": layer.depthwise,
                "out_channels": layer.out_shape.channels,
                "activation": layer.activation,
                "weights": _encode_array(layer.weights, wdtype),
                "bias": _encode_array(layer.bias, "float32"),
            }
            if layer.weight_scale is not None:
                ld["weight_scale"] = layer.weight_scale
        elif isinstance(layer, LinearLayerSpec):
            ld = {
                "kind": "linear",
                "out_features": layer.out_features,
                "weights": _encode_array(layer.weights, wdtype),
                "bias": _encode_array(layer.bias, "float32"),
            }
            if layer.weight_scale is not None:
                ld["weight_scale"] = layer.weight_scale
        elif isinstance(layer, BatchNormSpec):
            ld = {
                "kind": "batchnorm",
                "gamma": _encode_array(layer.gamma, "float32"),
                "beta": _encode_array(layer.beta, "float32"),
                "mean": _encode_array(layer.mean, "float32"),
                "var": _encode_array(layer.var, "float32"),
                "eps": layer.eps,
                "activation": layer.activation,
            }
        elif isinstance(layer, ResidualAddSpec):
            ld = {"kind": "residual_add", "from": layer.source}
        else:
            ld = {"kind": "gap"}
        layers.append(ld)
    doc = {
        "input_shape": list(model.input_shape.as_tuple()),
        "quantization": model.quantization,
        "layers": layers,
    }
    if model.activation_scales is not None:
        doc["activation_scales"] = model.activation_scales
    return doc


def save_model(model: Model, path: Union[str, Path]) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_json(model), fh, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Fusion


def fuse_conv_bn_relu(model: Model) -> Model:
    """Fold every BatchNorm into its preceding conv and absorb activations.

    w' = w * g / sqrt(var + eps), b' = (b - mean) * g / sqrt(var + eps) + beta.
    Residual source indices are remapped onto the shrunk layer list.
    """
    if model.quantization != "float32":
        raise FusionError("fuse before quantizing")
    new_layers: list[LayerSpec] = []
    index_map: dict[int, int] = {}
    for i, layer in enumerate(model.layers):
        if isinstance(layer, BatchNormSpec):
            if i == 0 or not isinstance(model.layers[i - 1], ConvLayerSpec):
                raise FusionError(f"layer {i}: batchnorm not immediately preceded by conv")
            conv = new_layers[-1]
            factor = layer.gamma / np.sqrt(layer.var + layer.eps)
            fused = replace(
                conv,
                weights=conv.weights * factor[:, None, None, None],
                bias=(conv.bias - layer.mean) * factor + layer.beta,
                activation=layer.activation if layer.activation != "none" else conv.activation,
            )
            new_layers[-1] = fused
            # The BN output tensor is now the fused conv's output.
            index_map[i] = len(new_layers) - 1
        else:
            if isinstance(layer, ResidualAddSpec):
                layer = ResidualAddSpec(shape=layer.shape, source=index_map[layer.source])
            index_map[i] = len(new_layers)
            new_layers.append(layer)
    return Model(input_shape=model.input_shape, layers=new_layers, quantization="float32")


# ---------------------------------------------------------------------------
# Quantization


def tensor_scale(arr: np.ndarray) -> float:
    """Symmetric per-tensor scale: max|x| / 127, or 1.0 for all-zero tensors."""
    m = float(np.max(np.abs(arr))) if arr.size else 0.0
    return m / 127.0 if m > 0.0 else 1.0


def quantize_tensor(arr: np.ndarray, scale: float) -> np.ndarray:
    return np.clip(np.rint(arr / scale), -127, 127).astype(np.int8)


def dequantize_tensor(q: np.ndarray, scale: float) -> np.ndarray:
    return q.astype(np.float64) * scale


def integer_bias(bias: np.ndarray, weight_scale: float, in_scale: float) -> np.ndarray:
    """Bias folded into the int accumulator domain (scale = w_scale * in_scale)."""
    return np.rint(bias / (weight_scale * in_scale)).astype(np.int64)


def quantize(model: Model, calibration_input: np.ndarray | None = None, seed: int = 0) -> Model:
    """Convert a float32 model to symmetric per-tensor int8.

    Weight scales come from each tensor's max magnitude; activation scales are
    calibrated from one dense forward pass over ``calibration_input`` (a
    seeded uniform input by default), then fixed for all subsequent runs.
    """
    if model.quantization != "float32":
        raise ValueError("model already quantized")
    if any(l.kind == "batchnorm" for l in model.layers):
        raise FusionError("fuse batchnorm layers before quantizing")

    from . import oracle  # local import: oracle depends on this module

    if calibration_input is None:
        rng = np.random.default_rng(seed)
        calibration_input = rng.uniform(-1.0, 1.0, model.input_shape.as_tuple())
    _, acts = oracle.reference_forward(model, calibration_input)
    scales = [tensor_scale(calibration_input)] + [tensor_scale(a) for a in acts]

    new_layers: list[LayerSpec] = []
    for layer in model.layers:
        if isinstance(layer, (ConvLayerSpec, LinearLayerSpec)):
            s = tensor_scale(layer.weights)
            layer = replace(layer, weights=quantize_tensor(layer.weights, s), weight_scale=s)
        new_layers.append(layer)
    return Model(
        input_shape=model.input_shape,
        layers=new_layers,
        quantization="int8",
        activation_scales=scales,
    )
