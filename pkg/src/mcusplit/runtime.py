"""Layer-by-layer split execution over a star topology, in virtual time.

The coordinator holds every full tensor. For each split layer it sends each
worker exactly the input neurons routing assigned to it, the worker computes
its output range against its resident weight fragment, and the partial
outputs return to the coordinator, which reassembles the tensor before the
next layer starts. Residual adds and pooling run on the coordinator at zero
simulated cost. Timing, traffic and per-worker RAM are accounted per layer;
the numeric path is real, so the reassembled output can be judged against
the dense oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .allocator import Plan, WorkerSpec
from .errors import DeploymentFault, OutOfMemoryFault, ProtocolError
from .model import (
    ConvLayerSpec,
    LinearLayerSpec,
    Model,
    apply_activation,
    integer_bias,
    quantize_tensor,
)
from .oracle import gap_i8, residual_add_i8
from .routing import channel_segments

PACKET_BYTES = 1400

# Measured traffic for the reference deployment, used only as a diagnostic
# yardstick by traffic_report.
REFERENCE_TOTAL_BYTES = int(4.21 * 1024 * 1024)
REFERENCE_MAX_LAYER_WORKER_BYTES = 480 * 1024


@dataclass(frozen=True)
class TraceEvent:
    t: float
    kind: str  # send_start | recv_done | compute_done | return_done | layer_done
    layer: int
    worker: int  # -1 for coordinator
    nbytes: int = 0


@dataclass
class LayerWorkerStats:
    layer_index: int
    worker: int
    recv_bytes: int
    send_bytes: int
    recv_s: float
    compute_s: float
    send_s: float
    t_start: float
    t_done: float
    ram_peak_bytes: int

    @property
    def packets(self) -> int:
        return -(-self.recv_bytes // PACKET_BYTES) + -(-self.send_bytes // PACKET_BYTES)


@dataclass
class TimingSummary:
    end_to_end_s: float
    compute_s: float
    comm_s: float
    per_layer: list[tuple[int, float, float, float]]  # (layer, start, done, compute)


@dataclass
class MemorySummary:
    peak_bytes: list[int]  # per worker
    peak_layer: list[int]  # layer index of each worker's peak, -1 if idle
    worst_bytes: int
    worst_worker: int


@dataclass
class TrafficReport:
    total_bytes: int
    max_layer_worker_bytes: int
    activation_bytes: int
    bytes_by_precision: dict[str, tuple[int, int]]  # precision -> (total, max per layer-worker)
    matched_precision: str | None
    shape_mismatch: bool

    def lines(self) -> list[str]:
        out = [
            f"traffic: {self.total_bytes} B total, "
            f"{self.max_layer_worker_bytes} B max per layer-worker",
        ]
        for prec, (tot, mx) in self.bytes_by_precision.items():
            out.append(
                f"  if {prec}: total {tot / REFERENCE_TOTAL_BYTES:.2f}x reference, "
                f"max {mx / REFERENCE_MAX_LAYER_WORKER_BYTES:.2f}x reference"
            )
        if self.matched_precision:
            out.append(f"  consistent with reference traffic at {self.matched_precision}")
        elif self.shape_mismatch:
            out.append("  traffic differs from reference by >2x; model shape likely differs")
        else:
            out.append("  traffic near reference but outside the 25% match window")
        return out


@dataclass
class RunResult:
    output: np.ndarray
    stats: list[LayerWorkerStats]
    trace: list[TraceEvent]
    timing: TimingSummary
    memory: MemorySummary
    flash_bytes: list[int]
    total_bytes: int
    total_packets: int
    total_messages: int


# ---------------------------------------------------------------------------
# Deployment


def deploy_check(plan: Plan, fleet: Sequence[WorkerSpec]) -> list[int]:
    """Flash footprint per worker; fails if any fragment set cannot fit."""
    flash = [plan.flash_bytes(w) for w in range(len(fleet))]
    for w, spec in enumerate(fleet):
        if flash[w] > spec.flash_limit_kb * 1024:
            raise DeploymentFault(
                f"worker {spec.id} needs {flash[w]} B of flash, limit is "
                f"{spec.flash_limit_kb:g} KB",
                worker=spec.id,
            )
    return flash


# ---------------------------------------------------------------------------
# Worker-side numeric kernels


def _conv_fragment(
    layer: ConvLayerSpec,
    buf: np.ndarray,
    start: int,
    end: int,
    quant: tuple[float, float, float] | None,
) -> np.ndarray:
    """Compute flat output neurons [start, end) from a holey input buffer.

    ``buf`` is float64 with NaN at positions the worker never received;
    touching one is a routing fault and raises. Works block-wise over the
    row spans of the owned range, one windowed tensordot per span.
    """
    p = layer.padding
    padded = np.pad(buf, ((0, 0), (p, p), (p, p)))
    kh, kw = layer.kernel_size
    win = sliding_window_view(padded, (kh, kw), axis=(1, 2))[:, :: layer.stride, :: layer.stride]
    hw = layer.out_shape.height * layer.out_shape.width
    ow = layer.out_shape.width
    out = np.empty(end - start, dtype=np.int8 if quant else np.float64)
    if quant:
        w_scale, in_scale, out_scale = quant
        bias_q = integer_bias(layer.bias, w_scale, in_scale)
    for k, h0, h1, w0, w1 in channel_segments(layer, start, end):
        blk = win[k, h0:h1, w0:w1] if layer.depthwise else win[:, h0:h1, w0:w1]
        if np.isnan(blk).any():
            raise ProtocolError(f"input neurons missing for output channel {k}")
        kernel = layer.weights[k, 0] if layer.depthwise else layer.weights[k]
        axes = ([2, 3], [0, 1]) if layer.depthwise else ([0, 3, 4], [0, 1, 2])
        if quant:
            acc = np.tensordot(blk.astype(np.int64), kernel.astype(np.int64), axes=axes)
            real = (acc + bias_q[k]).astype(np.float64) * (w_scale * in_scale)
            vals = quantize_tensor(apply_activation(real, layer.activation), out_scale)
        else:
            real = np.tensordot(blk, kernel, axes=axes) + layer.bias[k]
            vals = apply_activation(real, layer.activation)
        off = k * hw + h0 * ow + w0
        out[off - start : off - start + vals.size] = vals.ravel()
    return out


def _linear_fragment(
    layer: LinearLayerSpec,
    buf: np.ndarray,
    start: int,
    end: int,
    quant: tuple[float, float, float] | None,
) -> np.ndarray:
    flat = buf.ravel()
    if np.isnan(flat).any():
        raise ProtocolError("input neurons missing for linear fragment")
    if quant:
        w_scale, in_scale, out_scale = quant
        acc = flat.astype(np.int64) @ layer.weights[:, start:end].astype(np.int64)
        acc = acc + integer_bias(layer.bias[start:end], w_scale, in_scale)
        real = acc.astype(np.float64) * (w_scale * in_scale)
        return quantize_tensor(real, out_scale)
    return flat @ layer.weights[:, start:end] + layer.bias[start:end]


# ---------------------------------------------------------------------------
# Execution


def execute(
    model: Model,
    plan: Plan,
    fleet: Sequence[WorkerSpec],
    x: np.ndarray | None = None,
    seed: int = 0,
    check_ram: bool = True,
    check_flash: bool = True,
    serialize_sends: bool = False,
    skip_compute: bool = False,
) -> RunResult:
    """Run one inference under the plan, in simulated time.

    ``serialize_sends`` makes the coordinator's downstream sends within a
    layer queue one after another (upstream returns always overlap). With
    ``check_ram``/``check_flash`` off the respective limits are gauged but
    not enforced, which is what memory sweeps want; ``skip_compute``
    additionally zero-fills tensors instead of computing them, since timing,
    traffic and memory accounting do not depend on the values.
    """
    if x is None:
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1.0, 1.0, model.input_shape.as_tuple())
    x = np.asarray(x)
    if tuple(x.shape) != model.input_shape.as_tuple():
        raise ProtocolError(f"input shape {x.shape} != {model.input_shape.as_tuple()}")

    flash = deploy_check(plan, fleet) if check_flash else [plan.flash_bytes(w) for w in range(len(fleet))]
    i8 = model.quantization == "int8"
    abytes = model.activation_bytes_each
    if i8:
        cur = x if x.dtype == np.int8 else quantize_tensor(x.astype(np.float64), model.scale_for_tensor(-1))
    else:
        cur = x.astype(np.float64)

    route_of = {r.layer_index: r for r in plan.routes}
    assign_of = {a.layer_index: a for a in plan.assignments}
    total_macs = sum(sum(a.macs) for a in plan.assignments)

    stats: list[LayerWorkerStats] = []
    trace: list[TraceEvent] = []
    acts: list[np.ndarray] = []
    now = 0.0
    in_scale = model.scale_for_tensor(-1) if i8 else 0.0

    for li, layer in enumerate(model.layers):
        out_scale = model.scale_for_tensor(li) if i8 else 0.0
        if layer.kind in ("conv", "linear"):
            route = route_of[li]
            assign = assign_of[li]
            n_out = layer.out_shape.neuron_count
            out_flat = np.empty(n_out, dtype=np.int8 if i8 else np.float64)
            cur_flat = cur.ravel().astype(np.float64)
            coord_free = now
            layer_done = now
            for w, spec in enumerate(fleet):
                s, e = assign.ranges[w]
                if e <= s:
                    continue
                recv_bytes = route.recv_count(w) * abytes
                send_bytes = (e - s) * abytes
                recv_s = spec.transfer_s_per_kb * (recv_bytes / 1024.0) + spec.per_message_delay_s
                send_s = spec.transfer_s_per_kb * (send_bytes / 1024.0) + spec.per_message_delay_s
                workload_kb = plan.model_kb * assign.macs[w] / total_macs if total_macs else 0.0
                compute_s = workload_kb / (spec.frequency_mhz * plan.k1[w])

                start_t = max(now, coord_free) if serialize_sends else now
                if serialize_sends:
                    coord_free = start_t + recv_s
                recv_done = start_t + recv_s
                compute_done = recv_done + compute_s
                return_done = compute_done + send_s
                layer_done = max(layer_done, return_done)

                if skip_compute:
                    out_flat[s:e] = 0
                else:
                    mask = route.recv_mask(w)
                    buf = np.full(cur_flat.shape, np.nan)
                    buf[mask] = cur_flat[mask]
                    quant = (layer.weight_scale, in_scale, out_scale) if i8 else None
                    if isinstance(layer, ConvLayerSpec):
                        vals = _conv_fragment(layer, buf.reshape(cur.shape), s, e, quant)
                    else:
                        vals = _linear_fragment(layer, buf, s, e, quant)
                    out_flat[s:e] = vals

                ram = recv_bytes + assign.fragment_bytes[w] + send_bytes
                if check_ram and ram > spec.ram_limit_kb * 1024:
                    raise OutOfMemoryFault(
                        f"worker {spec.id} needs {ram} B of RAM at layer {li}, "
                        f"limit is {spec.ram_limit_kb:g} KB",
                        worker=spec.id,
                        layer=li,
                    )
                stats.append(
                    LayerWorkerStats(
                        li, w, recv_bytes, send_bytes, recv_s, compute_s, send_s,
                        start_t, return_done, ram,
                    )
                )
                trace.append(TraceEvent(start_t, "send_start", li, w, recv_bytes))
                trace.append(TraceEvent(recv_done, "recv_done", li, w, recv_bytes))
                trace.append(TraceEvent(compute_done, "compute_done", li, w))
                trace.append(TraceEvent(return_done, "return_done", li, w, send_bytes))
            now = layer_done
            trace.append(TraceEvent(now, "layer_done", li, -1))
            cur = out_flat.reshape(layer.out_shape.as_tuple())
        elif layer.kind == "residual_add":
            if i8:
                cur = residual_add_i8(
                    cur, in_scale, acts[layer.source], model.scale_for_tensor(layer.source), out_scale
                )
            else:
                cur = cur + acts[layer.source]
            trace.append(TraceEvent(now, "layer_done", li, -1))
        elif layer.kind == "gap":
            cur = gap_i8(cur, in_scale, out_scale) if i8 else cur.mean(axis=(1, 2), keepdims=True)
            trace.append(TraceEvent(now, "layer_done", li, -1))
        else:
            raise ProtocolError(f"cannot execute layer kind {layer.kind!r}; fuse first", layer=li)
        acts.append(cur)
        in_scale = out_scale

    trace.sort(key=lambda ev: (ev.t, ev.layer, ev.worker))
    timing = simulate_timing(stats, end_to_end_s=now)
    memory = track_peak_memory(stats, len(fleet))
    total_bytes = sum(st.recv_bytes + st.send_bytes for st in stats)
    return RunResult(
        output=cur,
        stats=stats,
        trace=trace,
        timing=timing,
        memory=memory,
        flash_bytes=flash,
        total_bytes=total_bytes,
        total_packets=sum(st.packets for st in stats),
        total_messages=2 * len(stats),
    )


# ---------------------------------------------------------------------------
# Aggregations


def simulate_timing(stats: Sequence[LayerWorkerStats], end_to_end_s: float | None = None) -> TimingSummary:
    """Fold per-worker records into the paper-style compute/comm split.

    A layer's compute contribution is its slowest worker's compute time (the
    barrier waits for it); everything else in the critical path is charged
    to communication.
    """
    per_layer = []
    compute_total = 0.0
    done = 0.0
    for li in sorted({st.layer_index for st in stats}):
        rows = [st for st in stats if st.layer_index == li]
        start = min(st.t_start for st in rows)
        fin = max(st.t_done for st in rows)
        comp = max(st.compute_s for st in rows)
        per_layer.append((li, start, fin, comp))
        compute_total += comp
        done = max(done, fin)
    if end_to_end_s is None:
        end_to_end_s = done
    return TimingSummary(
        end_to_end_s=end_to_end_s,
        compute_s=compute_total,
        comm_s=end_to_end_s - compute_total,
        per_layer=per_layer,
    )


def track_peak_memory(stats: Sequence[LayerWorkerStats], n_workers: int) -> MemorySummary:
    peaks = [0] * n_workers
    peak_layer = [-1] * n_workers
    for st in stats:
        if st.ram_peak_bytes > peaks[st.worker]:
            peaks[st.worker] = st.ram_peak_bytes
            peak_layer[st.worker] = st.layer_index
    worst = max(range(n_workers), key=lambda w: peaks[w]) if n_workers else 0
    return MemorySummary(
        peak_bytes=peaks,
        peak_layer=peak_layer,
        worst_bytes=peaks[worst] if n_workers else 0,
        worst_worker=worst,
    )


def traffic_report(stats: Sequence[LayerWorkerStats], activation_bytes: int) -> TrafficReport:
    """Compare measured traffic against the reference deployment's volume.

    Element counts are precision-independent, so the same run is projected
    to both storage widths; a precision whose totals and per-layer-per-worker
    maxima both land within 25% of the reference is recorded as the likely
    match. If no precision gets within 2x on both, the model shape itself
    probably differs from the reference and the report says so; this is a
    diagnostic, never an error.
    """
    total = sum(st.recv_bytes + st.send_bytes for st in stats)
    max_lw = max((st.recv_bytes + st.send_bytes for st in stats), default=0)
    total_elems = total // activation_bytes
    max_elems = max_lw // activation_bytes
    by_precision = {
        "int8": (total_elems, max_elems),
        "float32": (total_elems * 4, max_elems * 4),
    }
    matched = None
    any_close = False
    for prec, (tot, mx) in by_precision.items():
        r_tot = tot / REFERENCE_TOTAL_BYTES
        r_max = mx / REFERENCE_MAX_LAYER_WORKER_BYTES
        if 0.75 <= r_tot <= 1.25 and 0.75 <= r_max <= 1.25 and matched is None:
            matched = prec
        if 0.5 <= r_tot <= 2.0 and 0.5 <= r_max <= 2.0:
            any_close = True
    return TrafficReport(
        total_bytes=total,
        max_layer_worker_bytes=max_lw,
        activation_bytes=activation_bytes,
        bytes_by_precision=by_precision,
        matched_precision=matched,
        shape_mismatch=not any_close,
    )
