"""Shared test helpers.

``naive_*`` are deliberately independent re-implementations of the math
(explicit Python loops over the operator definitions) used to cross-check the
package's vectorized code paths. They share no convolution or indexing logic
with the package and are kept slow and obvious on purpose.

The acceptance tests record one line per criterion through
``record_criterion``; a terminal-summary hook prints the collected lines at
the end of the run.
"""

from __future__ import annotations

import numpy as np
from hypothesis import HealthCheck, settings

from mcusplit.model import ConvLayerSpec, LinearLayerSpec, Model, TensorShape

settings.register_profile(
    "deterministic",
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("deterministic")


# ---------------------------------------------------------------------------
# Independent naive math


def naive_activation(x: float, kind: str) -> float:
    if kind == "relu":
        return x if x > 0.0 else 0.0
    if kind == "relu6":
        return min(max(x, 0.0), 6.0)
    return x


def naive_conv(layer: ConvLayerSpec, x: np.ndarray) -> np.ndarray:
    """Per-neuron loop straight from the convolution definition."""
    oc, oh, ow = layer.out_shape.as_tuple()
    ic, ih, iw = layer.in_shape.as_tuple()
    kh, kw = layer.kernel_size
    out = np.zeros((oc, oh, ow))
    for c in range(oc):
        for r in range(oh):
            for q in range(ow):
                acc = float(layer.bias[c])
                for dr in range(kh):
                    for dq in range(kw):
                        rr = r * layer.stride - layer.padding + dr
                        qq = q * layer.stride - layer.padding + dq
                        if not (0 <= rr < ih and 0 <= qq < iw):
                            continue  # padded position contributes zero
                        if layer.depthwise:
                            acc += float(layer.weights[c, 0, dr, dq]) * float(x[c, rr, qq])
                        else:
                            for ci in range(ic):
                                acc += float(layer.weights[c, ci, dr, dq]) * float(x[ci, rr, qq])
                out[c, r, q] = naive_activation(acc, layer.activation)
    return out


def naive_linear(layer: LinearLayerSpec, x: np.ndarray) -> np.ndarray:
    flat = [float(v) for v in np.asarray(x).ravel()]
    out = np.zeros((layer.out_features, 1, 1))
    for j in range(layer.out_features):
        acc = float(layer.bias[j])
        for i in range(layer.in_features):
            acc += flat[i] * float(layer.weights[i, j])
        out[j, 0, 0] = acc
    return out


def naive_forward(model: Model, x: np.ndarray) -> np.ndarray:
    """Dense float forward using only the naive per-neuron kernels."""
    cur = np.asarray(x, dtype=np.float64)
    acts = []
    for layer in model.layers:
        if isinstance(layer, ConvLayerSpec):
            cur = naive_conv(layer, cur)
        elif isinstance(layer, LinearLayerSpec):
            cur = naive_linear(layer, cur)
        elif layer.kind == "batchnorm":
            nxt = np.zeros_like(cur)
            for c in range(cur.shape[0]):
                f = float(layer.gamma[c]) / float(np.sqrt(layer.var[c] + layer.eps))
                for r in range(cur.shape[1]):
                    for q in range(cur.shape[2]):
                        v = (float(cur[c, r, q]) - float(layer.mean[c])) * f + float(layer.beta[c])
                        nxt[c, r, q] = naive_activation(v, layer.activation)
            cur = nxt
        elif layer.kind == "residual_add":
            cur = cur + acts[layer.source]
        elif layer.kind == "gap":
            pooled = np.zeros((cur.shape[0], 1, 1))
            for c in range(cur.shape[0]):
                pooled[c, 0, 0] = float(cur[c].sum()) / (cur.shape[1] * cur.shape[2])
            cur = pooled
        else:
            raise AssertionError(f"naive_forward cannot run {layer.kind}")
        acts.append(cur)
    return cur


# ---------------------------------------------------------------------------
# Layer fixture builders


def make_conv(
    in_shape: tuple[int, int, int],
    out_c: int,
    k: int = 3,
    stride: int = 1,
    padding: int = 1,
    depthwise: bool = False,
    activation: str = "none",
    seed: int = 0,
) -> ConvLayerSpec:
    rng = np.random.default_rng(seed)
    shape = TensorShape(*in_shape)
    in_cpk = 1 if depthwise else shape.channels
    oh = (shape.height + 2 * padding - k) // stride + 1
    ow = (shape.width + 2 * padding - k) // stride + 1
    return ConvLayerSpec(
        in_shape=shape,
        out_shape=TensorShape(out_c, oh, ow),
        kernel_size=(k, k),
        stride=stride,
        padding=padding,
        depthwise=depthwise,
        weights=rng.uniform(-1.0, 1.0, (out_c, in_cpk, k, k)),
        bias=rng.uniform(-0.1, 0.1, out_c),
        activation=activation,
    )


def make_linear(in_features: int, out_features: int, seed: int = 0) -> LinearLayerSpec:
    rng = np.random.default_rng(seed)
    return LinearLayerSpec(
        in_features=in_features,
        out_features=out_features,
        weights=rng.uniform(-1.0, 1.0, (in_features, out_features)),
        bias=rng.uniform(-0.1, 0.1, out_features),
    )


def single_layer_model(layer) -> Model:
    return Model(input_shape=layer.in_shape, layers=[layer])


# ---------------------------------------------------------------------------
# Acceptance reporting

N_CRITERIA = 8
_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    _ACCEPTANCE[number] = (passed, detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} — {detail}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in _ACCEPTANCE:
            passed, detail = _ACCEPTANCE[n]
            terminalreporter.write_line(
                f"criterion {n}: {'PASS' if passed else 'FAIL'} — {detail}"
            )
        else:
            terminalreporter.write_line(f"criterion {n}: NO RESULT (test errored or not run)")
