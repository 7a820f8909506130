"""Capability ratings and workload allocation across a worker fleet.

A worker's rating combines its clock, its measured cycles-per-byte behavior
(the K1 calibration table) and the communication overhead it pays per unit of
work. Ratings turn into contiguous output-neuron ranges per layer: convs are
split kernel-wise over flattened output positions, linear layers column-wise.
Flash-capacity overflow is redistributed to workers with headroom before any
neuron is assigned.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

from .errors import AllocationError, InfeasibleCapacityError
from .model import BIAS_BYTES, ConvLayerSpec, LinearLayerSpec, Model

STRATEGIES = ("evenly", "frequency", "optimized")

_EPS_KB = 1e-9


# ---------------------------------------------------------------------------
# Calibration


@dataclass(frozen=True)
class CalibrationRecord:
    """One measured run: a workload of known size at a known clock."""

    frequency_mhz: float
    workload_kb: float
    time_s: float

    def __post_init__(self):
        if min(self.frequency_mhz, self.workload_kb, self.time_s) <= 0:
            raise AllocationError(f"calibration record fields must be positive: {self}")

    @property
    def k1(self) -> float:
        """Workload KB processed per MHz-second."""
        return self.workload_kb / (self.frequency_mhz * self.time_s)


# Reference measurements on Cortex-M class boards at three clock settings.
DEFAULT_CALIBRATION = (
    CalibrationRecord(600.0, 510.29, 6.41),
    CalibrationRecord(450.0, 510.29, 7.52),
    CalibrationRecord(150.0, 510.29, 16.11),
    CalibrationRecord(600.0, 421.50, 5.51),
    CalibrationRecord(450.0, 421.50, 6.21),
    CalibrationRecord(150.0, 421.50, 13.80),
    CalibrationRecord(600.0, 730.39, 7.40),
    CalibrationRecord(450.0, 730.39, 9.06),
    CalibrationRecord(150.0, 730.39, 21.34),
)


class K1Table:
    """K1 lookup fitted from calibration records.

    Records sharing a frequency are averaged; queries resolve to the nearest
    calibrated frequency (ties go to the higher one, which is the safer
    over-estimate of speed to split against).
    """

    def __init__(self, records: Sequence[CalibrationRecord] = DEFAULT_CALIBRATION):
        if not records:
            raise AllocationError("no calibration records")
        by_freq: dict[float, list[float]] = {}
        for rec in records:
            by_freq.setdefault(rec.frequency_mhz, []).append(rec.k1)
        self._points = sorted(
            (f, sum(ks) / len(ks)) for f, ks in by_freq.items()
        )

    @property
    def frequencies(self) -> list[float]:
        return [f for f, _ in self._points]

    def for_frequency(self, frequency_mhz: float) -> float:
        best = min(self._points, key=lambda p: (abs(p[0] - frequency_mhz), -p[0]))
        if best[0] != frequency_mhz:
            warnings.warn(
                f"no calibration at {frequency_mhz:g} MHz; "
                f"falling back to nearest calibrated frequency {best[0]:g} MHz"
            )
        return best[1]

    @classmethod
    def from_json(cls, source: Union[str, Path, list]) -> "K1Table":
        if isinstance(source, (str, Path)):
            with open(source) as fh:
                source = json.load(fh)
        records = [
            CalibrationRecord(d["frequency_mhz"], d["workload_kb"], d["time_s"])
            for d in source
        ]
        return cls(records)


# ---------------------------------------------------------------------------
# Fleet


@dataclass
class WorkerSpec:
    id: int
    frequency_mhz: float
    delay_s_per_kb: float = 0.0
    bandwidth_kb_s: float = math.inf
    flash_limit_kb: float = math.inf
    ram_limit_kb: float = math.inf
    k_c: float | None = None  # data-per-workload ratio; measured when None
    per_message_delay_s: float = 0.0

    @property
    def transfer_s_per_kb(self) -> float:
        inv_b = 0.0 if math.isinf(self.bandwidth_kb_s) else 1.0 / self.bandwidth_kb_s
        return self.delay_s_per_kb + inv_b


def load_fleet(source: Union[str, Path, list]) -> list[WorkerSpec]:
    """Fleet description: a JSON list of worker records.

    Recognized fields per worker: ``frequency_mhz`` (required), ``id``,
    ``delay_ms_per_kb``, ``per_message_delay_ms``, ``bandwidth_kb_s``,
    ``flash_limit_kb``, ``ram_limit_kb``, ``k_c``. Omitted or null limits
    mean unlimited.
    """
    if isinstance(source, (str, Path)):
        with open(source) as fh:
            source = json.load(fh)
    fleet = []
    for i, d in enumerate(source):
        if "frequency_mhz" not in d:
            raise AllocationError(f"worker {i}: missing frequency_mhz")

        def _lim(key):
            v = d.get(key)
            return math.inf if v is None else float(v)

        fleet.append(
            WorkerSpec(
                id=int(d.get("id", i)),
                frequency_mhz=float(d["frequency_mhz"]),
                delay_s_per_kb=float(d.get("delay_ms_per_kb", 0.0)) / 1000.0,
                bandwidth_kb_s=_lim("bandwidth_kb_s"),
                flash_limit_kb=_lim("flash_limit_kb"),
                ram_limit_kb=_lim("ram_limit_kb"),
                k_c=d.get("k_c"),
                per_message_delay_s=float(d.get("per_message_delay_ms", 0.0)) / 1000.0,
            )
        )
    ids = [w.id for w in fleet]
    if len(set(ids)) != len(ids):
        raise AllocationError("duplicate worker ids")
    return fleet


def uniform_fleet(n: int, frequency_mhz: float = 600.0, **kwargs) -> list[WorkerSpec]:
    return [WorkerSpec(id=i, frequency_mhz=frequency_mhz, **kwargs) for i in range(n)]


# ---------------------------------------------------------------------------
# Ratings


def rating_evenly(worker: WorkerSpec) -> float:
    return 1.0


def rating_frequency(worker: WorkerSpec) -> float:
    return worker.frequency_mhz


def rating_optimized(
    frequency_mhz: float, k1: float, k_c: float, delay_s_per_kb: float, bandwidth_kb_s: float
) -> float:
    """Effective throughput in workload-KB per second.

    Processing a workload of size S takes S / (f*K1) seconds of compute plus
    (d + 1/B) * K_c * S seconds moving its inputs and outputs, so the rating
    is f*K1 / ((d + 1/B) * f * K1 * K_c + 1).
    """
    inv_b = 0.0 if math.isinf(bandwidth_kb_s) else 1.0 / bandwidth_kb_s
    fk1 = frequency_mhz * k1
    return fk1 / ((delay_s_per_kb + inv_b) * fk1 * k_c + 1.0)


def proportional_sizes(ratings: Sequence[float], total_kb: float) -> list[float]:
    """Continuous workload shares: S_i = R_i * S_m / sum(R).

    The shares sum to exactly ``total_kb``: each is snapped to the total's
    float grain q = ulp(total_kb), making every share an integer multiple of
    q, so the running sum never rounds and the absorbing last share closes
    the total bit-exactly. A snap moves a share by at most q/2, one part in
    2**53 of the total.
    """
    rsum = sum(ratings)
    if rsum <= 0:
        raise AllocationError("all ratings are zero")
    if len(ratings) == 1:
        return [float(total_kb)]
    q = math.ulp(total_kb)
    sizes = [round(r * total_kb / rsum / q) * q for r in ratings]
    head = 0.0
    for s in sizes[:-1]:
        head += s
    sizes[-1] = total_kb - head
    return sizes


def redistribute_ratings(
    ratings: Sequence[float], flash_limits_kb: Sequence[float], model_kb: float
) -> list[float]:
    """Lower overflowing workers' ratings until every share fits its flash.

    An overflowing worker sheds exactly the rating equivalent of its excess,
    R_o = (S_i - S_limit) * sum(R) / S_m, split evenly across workers that
    still have headroom. The rating total is preserved, each pass pins at
    least one worker at its limit, so at most n passes are needed.
    """
    r = [float(x) for x in ratings]
    if any(x < 0 or not math.isfinite(x) for x in r):
        raise AllocationError(f"invalid ratings {r}")
    if model_kb <= 0:
        return r
    rsum = sum(r)
    if rsum <= 0:
        raise AllocationError("all ratings are zero")
    if sum(flash_limits_kb) < model_kb * (1 - 1e-12):
        raise InfeasibleCapacityError(
            f"fleet flash {sum(flash_limits_kb):.1f} KB cannot hold {model_kb:.1f} KB of weights"
        )
    for _ in range(len(r) + 1):
        sizes = [ri * model_kb / rsum for ri in r]
        over = [i for i, s in enumerate(sizes) if s > flash_limits_kb[i] + _EPS_KB]
        if not over:
            return r
        receivers = [i for i, s in enumerate(sizes) if s < flash_limits_kb[i] - _EPS_KB]
        if not receivers:
            raise InfeasibleCapacityError("no worker has flash headroom left")
        for i in over:
            shed = (sizes[i] - flash_limits_kb[i]) * rsum / model_kb
            r[i] -= shed
            for j in receivers:
                r[j] += shed / len(receivers)
    raise InfeasibleCapacityError("capacity redistribution did not converge")


# ---------------------------------------------------------------------------
# Neuron partitioning


def partition_ranges(ratings: Sequence[float], total: int) -> list[tuple[int, int]]:
    """Contiguous half-open index ranges proportional to ratings.

    Worker r takes ceil(share) indices (clamped to what is left); the last
    worker with a positive rating absorbs the remainder so the ranges always
    partition [0, total) exactly. Zero-rated workers get empty ranges.
    """
    r = [float(x) for x in ratings]
    if any(x < 0 or not math.isfinite(x) for x in r):
        raise AllocationError(f"invalid ratings {r}")
    rsum = sum(r)
    if total > 0 and rsum <= 0:
        raise AllocationError("all ratings are zero")
    positive = [i for i, x in enumerate(r) if x > 0]
    last_pos = positive[-1] if positive else -1
    ranges = []
    start = 0
    for i, x in enumerate(r):
        if x <= 0 or total == 0:
            take = 0
        elif i == last_pos:
            take = total - start
        else:
            share = total * x / rsum
            take = min(math.ceil(share - 1e-9), total - start)
        ranges.append((start, start + take))
        start += take
    return ranges


@dataclass
class LayerAssignment:
    """One layer's split: output-neuron ranges plus derived sizing."""

    layer_index: int
    kind: str
    ranges: list[tuple[int, int]]
    kernel_usage: list[dict[int, int]] | None  # conv: kernel -> positions computed
    fragment_bytes: list[int]
    macs: list[int]

    def neurons(self, worker: int) -> int:
        s, e = self.ranges[worker]
        return e - s


def split_conv(layer: ConvLayerSpec, ranges: Sequence[tuple[int, int]]) -> list[dict[int, int]]:
    """Kernel usage per worker for a kernel-wise conv split.

    Output neurons are flattened channel-major, so a contiguous range spans
    whole kernels plus at most two partial ones; the usage count is how many
    of a kernel's h*w output positions the worker computes.
    """
    hw = layer.out_shape.height * layer.out_shape.width
    usage: list[dict[int, int]] = []
    for s, e in ranges:
        per_kernel: dict[int, int] = {}
        if e > s:
            for k in range(s // hw, (e + hw - 1) // hw):
                lo = max(s, k * hw)
                hi = min(e, (k + 1) * hw)
                if hi > lo:
                    per_kernel[k] = hi - lo
        usage.append(per_kernel)
    return usage


def build_assignments(model: Model, ratings: Sequence[float]) -> list[LayerAssignment]:
    """Split every worker-executed layer with one shared partition rule."""
    wb = model.weight_bytes_each
    assignments = []
    for idx in model.worker_layers():
        layer = model.layers[idx]
        n_out = layer.out_shape.neuron_count
        ranges = partition_ranges(ratings, n_out)
        if isinstance(layer, ConvLayerSpec):
            usage = split_conv(layer, ranges)
            frag = [
                len(u) * (layer.kernel_elems * wb + BIAS_BYTES) for u in usage
            ]
        else:
            usage = None
            frag = [
                (e - s) * (layer.in_features * wb + BIAS_BYTES) for s, e in ranges
            ]
        macs = [(e - s) * layer.macs_per_neuron for s, e in ranges]
        assignments.append(
            LayerAssignment(
                layer_index=idx,
                kind=layer.kind,
                ranges=list(ranges),
                kernel_usage=usage,
                fragment_bytes=frag,
                macs=macs,
            )
        )
    return assignments


# ---------------------------------------------------------------------------
# Plans


@dataclass
class Plan:
    strategy: str
    ratings: list[float]  # after capacity redistribution
    base_ratings: list[float]  # straight from the strategy
    k1: list[float]
    k_c: list[float]
    assignments: list[LayerAssignment]
    model_kb: float
    routes: list = field(default_factory=list, repr=False)  # BoundaryRouting per assignment

    @property
    def n_workers(self) -> int:
        return len(self.ratings)

    def flash_bytes(self, worker: int) -> int:
        return sum(a.fragment_bytes[worker] for a in self.assignments)

    def total_macs(self, worker: int) -> int:
        return sum(a.macs[worker] for a in self.assignments)

    def workload_kb(self, worker: int) -> float:
        """Worker share of the model, prorated by compute."""
        total = sum(sum(a.macs) for a in self.assignments)
        if total == 0:
            return 0.0
        return self.model_kb * self.total_macs(worker) / total

    def to_json(self) -> dict:
        return {
            "strategy": self.strategy,
            "ratings": self.ratings,
            "base_ratings": self.base_ratings,
            "k1": self.k1,
            "k_c": self.k_c,
            "model_kb": self.model_kb,
            "assignments": [
                {
                    "layer": a.layer_index,
                    "kind": a.kind,
                    "ranges": [list(r) for r in a.ranges],
                    "fragment_bytes": a.fragment_bytes,
                }
                for a in self.assignments
            ],
        }


def _measured_kc_and_delay(
    model: Model, fleet: Sequence[WorkerSpec], ratings: Sequence[float]
) -> tuple[list[float], list[float], list]:
    """Dry-run a candidate split and measure each worker's traffic ratio.

    Returns (k_c, effective delay s/KB, routes). K_c is the KB moved in and
    out of a worker per KB of workload; fixed per-message delays are folded
    into an effective per-KB delay at the measured message sizes.
    """
    from . import routing

    n = len(fleet)
    if n == 1:
        # A lone worker is rated as if colocated with the coordinator:
        # splitting induces no inter-device traffic.
        return [0.0], [fleet[0].delay_s_per_kb], []
    assignments = build_assignments(model, ratings)
    routes = routing.plan_all_boundaries(model, assignments)
    data_kb = [0.0] * n
    messages = [0] * n
    for route in routes:
        for w in range(n):
            b_in = route.recv_count(w) * model.activation_bytes_each
            b_out = route.send_count(w) * model.activation_bytes_each
            if b_in or b_out:
                data_kb[w] += (b_in + b_out) / 1024.0
                messages[w] += 2
    model_kb = model.total_weight_bytes / 1024.0
    total_macs = sum(sum(a.macs) for a in assignments)
    k_c = []
    d_eff = []
    for w, spec in enumerate(fleet):
        macs_w = sum(a.macs[w] for a in assignments)
        workload = model_kb * macs_w / total_macs if total_macs else 0.0
        k_c.append(data_kb[w] / workload if workload > 0 else 0.0)
        if data_kb[w] > 0:
            d_eff.append(spec.delay_s_per_kb + spec.per_message_delay_s * messages[w] / data_kb[w])
        else:
            d_eff.append(spec.delay_s_per_kb)
    return k_c, d_eff, routes


def plan_from_ratings(model: Model, ratings: Sequence[float], k1: Sequence[float] | None = None) -> Plan:
    """Plan with explicit ratings: no strategy, no capacity fitting."""
    from . import routing

    assignments = build_assignments(model, ratings)
    routes = routing.plan_all_boundaries(model, assignments)
    n = len(ratings)
    k1 = list(k1) if k1 is not None else [K1Table().for_frequency(600.0)] * n
    return Plan(
        strategy="manual",
        ratings=[float(r) for r in ratings],
        base_ratings=[float(r) for r in ratings],
        k1=k1,
        k_c=[0.0] * n,
        assignments=assignments,
        model_kb=model.total_weight_bytes / 1024.0,
        routes=routes,
    )


def worker_fragments(model: Model, plan: Plan, worker: int) -> dict:
    """Deployable weight fragments for one worker, JSON-ready.

    Conv fragments carry each kernel the worker uses exactly once, with the
    usage count of output positions; kernels at range boundaries appear in
    both neighbors' fragments. ``unique_bytes`` attributes each kernel to its
    first owner so fleet-wide unique totals sum to the model's weight bytes.
    """
    from .model import _encode_array

    wdtype = "int8" if model.quantization == "int8" else "float32"
    wb = model.weight_bytes_each
    layers = []
    resident = 0
    unique = 0
    for a in plan.assignments:
        layer = model.layers[a.layer_index]
        s, e = a.ranges[worker]
        if e <= s:
            continue
        if isinstance(layer, ConvLayerSpec):
            usage = a.kernel_usage[worker]
            kernels = sorted(usage)
            first_owned = [
                k for k in kernels
                if worker == min(w for w in range(plan.n_workers) if k in a.kernel_usage[w])
            ]
            frag = {
                "layer": a.layer_index,
                "kind": "conv",
                "range": [s, e],
                "kernels": kernels,
                "usage": {str(k): usage[k] for k in kernels},
                "weights": _encode_array(layer.weights[kernels], wdtype),
                "bias": [float(layer.bias[k]) for k in kernels],
            }
            resident += len(kernels) * (layer.kernel_elems * wb + BIAS_BYTES)
            unique += len(first_owned) * (layer.kernel_elems * wb + BIAS_BYTES)
        else:
            frag = {
                "layer": a.layer_index,
                "kind": "linear",
                "range": [s, e],
                "weights": _encode_array(layer.weights[:, s:e], wdtype),
                "bias": [float(b) for b in layer.bias[s:e]],
            }
            resident += (e - s) * (layer.in_features * wb + BIAS_BYTES)
            unique += (e - s) * (layer.in_features * wb + BIAS_BYTES)
        layers.append(frag)
    return {
        "worker": worker,
        "resident_bytes": resident,
        "unique_bytes": unique,
        "layers": layers,
    }


def build_plan(
    model: Model,
    fleet: Sequence[WorkerSpec],
    strategy: str = "optimized",
    k1_table: K1Table | None = None,
    kc_rounds: int = 2,
) -> Plan:
    """Rate the fleet, fit ratings to flash limits, split and route the model.

    The optimized strategy bootstraps with K_c = 0 (pure compute throughput),
    then alternates measuring traffic on the candidate split and re-rating,
    which settles in a round or two because the split granularity is coarse.
    """
    if strategy not in STRATEGIES:
        raise AllocationError(f"unknown strategy {strategy!r}")
    if not fleet:
        raise AllocationError("empty fleet")
    table = k1_table or K1Table()
    k1 = [table.for_frequency(w.frequency_mhz) for w in fleet]
    model_kb = model.total_weight_bytes / 1024.0
    limits = [w.flash_limit_kb for w in fleet]

    # Baselines ignore communication entirely: K_c is forced to 0.
    if strategy == "evenly":
        base = [rating_evenly(w) for w in fleet]
        k_c = [0.0] * len(fleet)
    elif strategy == "frequency":
        base = [rating_frequency(w) for w in fleet]
        k_c = [0.0] * len(fleet)
    else:
        base = [w.frequency_mhz * k1[i] for i, w in enumerate(fleet)]
        k_c = [w.k_c if w.k_c is not None else 0.0 for w in fleet]
        for _ in range(kc_rounds):
            fitted = redistribute_ratings(base, limits, model_kb)
            measured_kc, d_eff, _ = _measured_kc_and_delay(model, fleet, fitted)
            k_c = [
                w.k_c if w.k_c is not None else measured_kc[i]
                for i, w in enumerate(fleet)
            ]
            base = [
                rating_optimized(w.frequency_mhz, k1[i], k_c[i], d_eff[i], w.bandwidth_kb_s)
                for i, w in enumerate(fleet)
            ]

    final = redistribute_ratings(base, limits, model_kb)
    assignments = build_assignments(model, final)

    from . import routing

    routes = routing.plan_all_boundaries(model, assignments)
    return Plan(
        strategy=strategy,
        ratings=final,
        base_ratings=list(base),
        k1=k1,
        k_c=list(k_c),
        assignments=assignments,
        model_kb=model_kb,
        routes=routes,
    )
