"""Dense single-node reference executor and equivalence checking.

The oracle runs the whole model on one node with no splitting, using an
im2col gather plus matmul formulation that shares no convolution code with
the distributed runtime. Split executions are judged against its output.
It also provides brute-force dependency probing: perturb one input neuron at
a time and record which outputs move, independent of any range arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .model import (
    ConvLayerSpec,
    LinearLayerSpec,
    Model,
    TensorShape,
    apply_activation,
    integer_bias,
    quantize_tensor,
)


def _gather_patches(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Zero-pad then gather conv windows: (..., c, h, w) -> (..., c, oh, ow, kh, kw)."""
    h, w = x.shape[-2:]
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    pad = [(0, 0)] * (x.ndim - 2) + [(padding, padding), (padding, padding)]
    xp = np.pad(x, pad)
    rows = (np.arange(oh) * stride)[:, None, None, None] + np.arange(kh)[None, None, :, None]
    cols = (np.arange(ow) * stride)[None, :, None, None] + np.arange(kw)[None, None, None, :]
    return xp[..., rows, cols]


def conv_raw(layer: ConvLayerSpec, x: np.ndarray, dtype=np.float64) -> np.ndarray:
    """Pre-activation, pre-bias conv output: (..., out_c, oh, ow)."""
    kh, kw = layer.kernel_size
    patches = _gather_patches(x.astype(dtype), kh, kw, layer.stride, layer.padding)
    lead = patches.shape[: -5]
    c = layer.in_shape.channels
    oc, oh, ow = layer.out_shape.as_tuple()
    w = layer.weights.astype(dtype)
    if layer.depthwise:
        # batched matmul over channels: (c, oh*ow, kh*kw) @ (c, kh*kw, 1)
        mat = patches.reshape(lead + (c, oh * ow, kh * kw))
        out = mat @ w.reshape(c, kh * kw, 1)
        return out.reshape(lead + (oc, oh, ow))
    mat = np.moveaxis(patches, -5, -3).reshape(lead + (oh * ow, c * kh * kw))
    out = mat @ w.reshape(oc, c * kh * kw).T
    return np.moveaxis(out.reshape(lead + (oh, ow, oc)), -1, -3)


def linear_raw(layer: LinearLayerSpec, x: np.ndarray, dtype=np.float64) -> np.ndarray:
    lead = x.shape[: x.ndim - 3]
    flat = x.astype(dtype).reshape(lead + (layer.in_features,))
    out = flat @ layer.weights.astype(dtype)
    return out.reshape(lead + (layer.out_features, 1, 1))


def reference_forward(model: Model, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Run the full model densely; returns (final output, per-layer outputs).

    Float models compute in float64. Int8 models compute exact integer
    accumulations with the calibrated scales; a float input is quantized with
    the model's input scale first, an int8 input is taken as-is. Per-layer
    outputs are in the model's storage domain (float64 or int8).
    """
    x = np.asarray(x)
    if tuple(x.shape) != model.input_shape.as_tuple():
        raise ValueError(f"input shape {x.shape} != {model.input_shape.as_tuple()}")
    if model.quantization == "int8":
        return _forward_i8(model, x)
    return _forward_f32(model, x)


def _forward_f32(model: Model, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    cur = x.astype(np.float64)
    acts: list[np.ndarray] = []
    for layer in model.layers:
        if isinstance(layer, ConvLayerSpec):
            cur = conv_raw(layer, cur) + layer.bias[:, None, None]
            cur = apply_activation(cur, layer.activation)
        elif isinstance(layer, LinearLayerSpec):
            cur = linear_raw(layer, cur) + layer.bias[:, None, None]
        elif layer.kind == "batchnorm":
            factor = (layer.gamma / np.sqrt(layer.var + layer.eps))[:, None, None]
            cur = (cur - layer.mean[:, None, None]) * factor + layer.beta[:, None, None]
            cur = apply_activation(cur, layer.activation)
        elif layer.kind == "residual_add":
            cur = cur + acts[layer.source]
        elif layer.kind == "gap":
            cur = cur.mean(axis=(1, 2), keepdims=True)
        else:
            raise ValueError(f"cannot execute layer kind {layer.kind!r}")
        acts.append(cur)
    return cur, acts


def residual_add_i8(
    a: np.ndarray, a_scale: float, b: np.ndarray, b_scale: float, out_scale: float
) -> np.ndarray:
    """Coordinator-side residual add in the quantized graph."""
    real = a.astype(np.float64) * a_scale + b.astype(np.float64) * b_scale
    return quantize_tensor(real, out_scale)


def gap_i8(x: np.ndarray, in_scale: float, out_scale: float) -> np.ndarray:
    """Coordinator-side global average pool in the quantized graph."""
    sums = x.astype(np.int64).sum(axis=(1, 2), keepdims=True)
    real = sums.astype(np.float64) * in_scale / (x.shape[1] * x.shape[2])
    return quantize_tensor(real, out_scale)


def _forward_i8(model: Model, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    if x.dtype == np.int8:
        cur = x
    else:
        cur = quantize_tensor(x.astype(np.float64), model.scale_for_tensor(-1))
    acts: list[np.ndarray] = []
    in_scale = model.scale_for_tensor(-1)
    for i, layer in enumerate(model.layers):
        out_scale = model.scale_for_tensor(i)
        if isinstance(layer, (ConvLayerSpec, LinearLayerSpec)):
            if isinstance(layer, ConvLayerSpec):
                acc = conv_raw(layer, cur, dtype=np.int64)
                act = layer.activation
            else:
                acc = linear_raw(layer, cur, dtype=np.int64)
                act = "none"
            acc = acc + integer_bias(layer.bias, layer.weight_scale, in_scale)[:, None, None]
            real = acc.astype(np.float64) * (layer.weight_scale * in_scale)
            cur = quantize_tensor(apply_activation(real, act), out_scale)
        elif layer.kind == "residual_add":
            cur = residual_add_i8(
                cur, in_scale, acts[layer.source], model.scale_for_tensor(layer.source), out_scale
            )
        elif layer.kind == "gap":
            cur = gap_i8(cur, in_scale, out_scale)
        else:
            raise ValueError(f"cannot execute layer kind {layer.kind!r}; fuse first")
        acts.append(cur)
        in_scale = out_scale
    return cur, acts


# ---------------------------------------------------------------------------
# Brute-force dependency probing


def brute_force_dependencies(
    layer: ConvLayerSpec | LinearLayerSpec, seeds: tuple[int, ...] = (0, 1), delta: float = 0.5
) -> list[set[int]]:
    """Observed input set per output neuron, found by perturbation alone.

    The layer geometry is kept but weights are redrawn strictly positive and
    the activation dropped, so every structural connection shows up as a
    strict output change. One batched forward evaluates all single-input
    perturbations; results are unioned over weight seeds. Output index o
    depends on input index i iff perturbing i moved output o.
    """
    in_shape = layer.in_shape
    n_in = in_shape.neuron_count
    n_out = layer.out_shape.neuron_count
    deps: list[set[int]] = [set() for _ in range(n_out)]
    for seed in seeds:
        rng = np.random.default_rng(seed)
        probe = replace(layer, weights=rng.uniform(0.1, 1.0, layer.weights.shape))
        x = rng.uniform(0.5, 1.5, n_in)
        batch = np.broadcast_to(x, (n_in, n_in)).copy()
        batch[np.arange(n_in), np.arange(n_in)] += delta
        stacked = np.concatenate([x[None, :], batch]).reshape((n_in + 1,) + in_shape.as_tuple())
        if isinstance(probe, ConvLayerSpec):
            out = conv_raw(probe, stacked)
        else:
            out = linear_raw(probe, stacked)
        out = out.reshape(n_in + 1, n_out)
        changed = out[1:] != out[0]
        for i, o in zip(*np.nonzero(changed)):
            deps[int(o)].add(int(i))
    return deps


# ---------------------------------------------------------------------------
# Equivalence


@dataclass(frozen=True)
class EquivalenceVerdict:
    passed: bool
    reason: str
    max_abs_err: float = 0.0
    max_rel_err: float = 0.0
    worst_index: tuple[int, ...] | None = None

    def summary(self) -> str:
        if self.passed:
            return f"equivalent ({self.reason}, max abs err {self.max_abs_err:.3g})"
        return (
            f"NOT equivalent: {self.reason}"
            + (f" at {self.worst_index}, abs {self.max_abs_err:.3g}, rel {self.max_rel_err:.3g}"
               if self.worst_index is not None else "")
        )


def check_equivalence(
    split_output: np.ndarray,
    oracle_output: np.ndarray,
    precision: str = "float32",
    rtol: float = 1e-5,
    atol: float = 1e-8,
) -> EquivalenceVerdict:
    """Compare a split execution's output against the dense oracle's.

    Float comparisons use per-element |a-b| <= atol + rtol*|b|; int8
    comparisons demand exact equality. A shape mismatch is reported as a
    failed verdict rather than raised, so harnesses can log it.
    """
    a = np.asarray(split_output)
    b = np.asarray(oracle_output)
    if a.shape != b.shape:
        return EquivalenceVerdict(False, f"shape mismatch {a.shape} vs {b.shape}")
    if precision == "int8":
        same = a.astype(np.int64) == b.astype(np.int64)
        if same.all():
            return EquivalenceVerdict(True, "exact int8 match")
        diff = np.abs(a.astype(np.int64) - b.astype(np.int64))
        worst = np.unravel_index(int(np.argmax(diff)), diff.shape)
        return EquivalenceVerdict(
            False, "int8 values differ", float(diff.max()), float(diff.max()), worst
        )
    if np.isnan(a).any():
        worst = np.unravel_index(int(np.argmax(np.isnan(a))), a.shape)
        return EquivalenceVerdict(False, "NaN in split output", float("nan"), float("nan"), worst)
    abs_err = np.abs(a.astype(np.float64) - b.astype(np.float64))
    tol = atol + rtol * np.abs(b.astype(np.float64))
    max_abs = float(abs_err.max()) if abs_err.size else 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(np.abs(b) > 0, abs_err / np.abs(b), 0.0)
    max_rel = float(rel.max()) if rel.size else 0.0
    if (abs_err <= tol).all():
        return EquivalenceVerdict(True, f"float within rtol={rtol:g}", max_abs, max_rel)
    worst = np.unravel_index(int(np.argmax(abs_err - tol)), a.shape)
    return EquivalenceVerdict(False, "float tolerance exceeded", max_abs, max_rel, worst)
