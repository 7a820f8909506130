"""Cross-layer activation routing for split execution.

For every split layer this module answers, per input neuron of that layer:
who produced it and which workers (plus the coordinator) need a copy. A
contiguous range of flattened output neurons decomposes into at most three
rectangles per output channel (partial first row, block of full rows,
partial last row), and each rectangle maps through stride and padding to a
few input boxes (one, unless the stride outruns the kernel and the windows
leave gaps), so assignment sets are stored as short box lists instead of
per-neuron tables. Bit-level views are derived on demand for diagnostics and
for the brute-force cross-checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import BoundsError, StructuralError
from .model import ConvLayerSpec, LinearLayerSpec, Model, TensorShape
from .allocator import LayerAssignment

COORDINATOR = -1

#: (c_lo, c_hi, r_lo, r_hi, w_lo, w_hi) half-open input box
Box = tuple[int, int, int, int, int, int]


def grid_segments(lo: int, hi: int, width: int) -> list[tuple[int, int, int, int]]:
    """Decompose flat positions [lo, hi) of a row-major grid into row spans.

    Returns (row_lo, row_hi, col_lo, col_hi) pieces: at most a partial first
    row, a block of full rows and a partial last row.
    """
    if hi <= lo:
        return []
    h_lo, off_lo = divmod(lo, width)
    h_hi, off_hi = divmod(hi - 1, width)
    off_hi += 1
    if h_lo == h_hi:
        return [(h_lo, h_lo + 1, off_lo, off_hi)]
    segs = []
    full_lo = h_lo if off_lo == 0 else h_lo + 1
    full_hi = h_hi + 1 if off_hi == width else h_hi
    if off_lo > 0:
        segs.append((h_lo, h_lo + 1, off_lo, width))
    if full_hi > full_lo:
        segs.append((full_lo, full_hi, 0, width))
    if off_hi < width:
        segs.append((h_hi, h_hi + 1, 0, off_hi))
    return segs


def channel_segments(
    layer: ConvLayerSpec, start: int, end: int
) -> Iterator[tuple[int, int, int, int, int]]:
    """Per-output-channel row spans (channel, row_lo, row_hi, col_lo, col_hi)
    covered by the flat output range [start, end)."""
    if end <= start:
        return
    hw = layer.out_shape.height * layer.out_shape.width
    for k in range(start // hw, (end + hw - 1) // hw):
        lo = max(start, k * hw) - k * hw
        hi = min(end, (k + 1) * hw) - k * hw
        for seg in grid_segments(lo, hi, layer.out_shape.width):
            yield (k,) + seg


def _window_intervals(
    lo_out: int, hi_out: int, stride: int, ksize: int, pad: int, limit: int
) -> list[tuple[int, int]]:
    """Union of the 1-D windows [o*stride - pad, o*stride - pad + ksize) over
    outputs o in [lo_out, hi_out), clipped to [0, limit).

    Overlapping or abutting windows (stride <= ksize) merge into one
    interval; a stride larger than the kernel leaves gaps, one interval per
    output position.
    """
    if stride <= ksize:
        a = max(lo_out * stride - pad, 0)
        b = min((hi_out - 1) * stride - pad + ksize, limit)
        return [(a, b)] if b > a else []
    spans = []
    for o in range(lo_out, hi_out):
        a = max(o * stride - pad, 0)
        b = min(o * stride - pad + ksize, limit)
        if b > a:
            spans.append((a, b))
    return spans


def conv_input_boxes(layer: ConvLayerSpec, start: int, end: int) -> list[Box]:
    """Input boxes needed to compute flat output neurons [start, end).

    Each output segment is a full rectangle of (row, col) positions, so its
    need is exactly the product of the row-window union and the col-window
    union.
    """
    in_shape = layer.in_shape
    kh, kw = layer.kernel_size
    st, p = layer.stride, layer.padding
    boxes: set[Box] = set()
    for k, h_lo, h_hi, w_lo, w_hi in channel_segments(layer, start, end):
        rows = _window_intervals(h_lo, h_hi, st, kh, p, in_shape.height)
        cols = _window_intervals(w_lo, w_hi, st, kw, p, in_shape.width)
        ch = (k, k + 1) if layer.depthwise else (0, in_shape.channels)
        for r0, r1 in rows:
            for c0, c1 in cols:
                boxes.add(ch + (r0, r1, c0, c1))
    return sorted(boxes)


def boxes_to_mask(in_shape: TensorShape, boxes: Sequence[Box]) -> np.ndarray:
    mask = np.zeros(in_shape.as_tuple(), dtype=bool)
    for c0, c1, r0, r1, w0, w1 in boxes:
        mask[c0:c1, r0:r1, w0:w1] = True
    return mask.ravel()


@dataclass
class BoundaryRouting:
    """Routing table for the tensor feeding one split layer.

    ``boxes[w]`` describes worker w's input need; the coordinator appears as
    one extra party that retains the whole tensor when a residual connection
    reads it later. ``producer_ranges`` lists who holds each neuron before
    this layer runs (COORDINATOR for the model input and for tensors produced
    by coordinator-side operators).
    """

    layer_index: int
    tensor_index: int
    in_shape: TensorShape
    out_ranges: list[tuple[int, int]]
    boxes: list[list[Box]]
    coordinator_keeps_all: bool
    producer_ranges: list[tuple[int, int, int]]
    recv_counts: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.recv_counts:
            self.recv_counts = [
                int(boxes_to_mask(self.in_shape, b).sum()) for b in self.boxes
            ]

    @property
    def n_workers(self) -> int:
        return len(self.out_ranges)

    def recv_count(self, worker: int) -> int:
        return self.recv_counts[worker]

    def send_count(self, worker: int) -> int:
        s, e = self.out_ranges[worker]
        return e - s

    def recv_mask(self, worker: int) -> np.ndarray:
        return boxes_to_mask(self.in_shape, self.boxes[worker])

    def recv_indices(self, worker: int) -> np.ndarray:
        return np.nonzero(self.recv_mask(worker))[0]

    def assign_matrix(self) -> np.ndarray:
        """Packed bit matrix, one row per worker plus a coordinator row;
        bit p of row r means party r needs input neuron p."""
        n_in = self.in_shape.neuron_count
        rows = np.zeros((self.n_workers + 1, n_in), dtype=bool)
        for w in range(self.n_workers):
            rows[w] = self.recv_mask(w)
        if self.coordinator_keeps_all:
            rows[self.n_workers] = True
        return np.packbits(rows, axis=1)

    def consumers_of(self, neuron: int) -> int:
        """Bitmask of parties needing this input neuron; bit n_workers is
        the coordinator."""
        if not (0 <= neuron < self.in_shape.neuron_count):
            raise BoundsError(f"neuron {neuron} outside {self.in_shape}")
        packed = self.assign_matrix()
        byte, bit = divmod(neuron, 8)
        col = (packed[:, byte] >> (7 - bit)) & 1
        return int(sum(1 << r for r, v in enumerate(col) if v))

    def producer_of(self, neuron: int) -> int:
        if not (0 <= neuron < self.in_shape.neuron_count):
            raise BoundsError(f"neuron {neuron} outside {self.in_shape}")
        for owner, s, e in self.producer_ranges:
            if s <= neuron < e:
                return owner
        raise BoundsError(f"neuron {neuron} has no producer")


def build_boundary(
    model: Model,
    layer_index: int,
    assignment: LayerAssignment,
    producer_ranges: list[tuple[int, int, int]],
    coordinator_keeps_all: bool,
) -> BoundaryRouting:
    layer = model.layers[layer_index]
    in_shape = model.in_shape_of(layer_index)
    boxes: list[list[Box]] = []
    for s, e in assignment.ranges:
        if e <= s:
            boxes.append([])
        elif isinstance(layer, ConvLayerSpec):
            boxes.append(conv_input_boxes(layer, s, e))
        else:
            boxes.append([(0, in_shape.channels, 0, in_shape.height, 0, in_shape.width)])
    return BoundaryRouting(
        layer_index=layer_index,
        tensor_index=layer_index - 1,
        in_shape=in_shape,
        out_ranges=list(assignment.ranges),
        boxes=boxes,
        coordinator_keeps_all=coordinator_keeps_all,
        producer_ranges=producer_ranges,
    )


def plan_all_boundaries(
    model: Model, assignments: Sequence[LayerAssignment]
) -> list[BoundaryRouting]:
    """One routing table per split layer, in layer order.

    Neurons of a tensor produced by a split layer are owned by the worker
    whose output range covers them; the model input and outputs of
    coordinator-side operators (residual adds, pooling) are owned by the
    coordinator. Tensors read again later by a residual add are flagged for
    coordinator retention.
    """
    if any(l.kind == "batchnorm" for l in model.layers):
        raise StructuralError("model has unfused batchnorm layers; fuse before planning")
    by_layer = {a.layer_index: a for a in assignments}
    residual_sources = {
        l.source for l in model.layers if l.kind == "residual_add"
    }
    routes = []
    for a in sorted(assignments, key=lambda a: a.layer_index):
        t = a.layer_index - 1
        if t >= 0 and t in by_layer:
            producer_ranges = [
                (w, s, e) for w, (s, e) in enumerate(by_layer[t].ranges) if e > s
            ]
        else:
            n_in = model.in_shape_of(a.layer_index).neuron_count
            producer_ranges = [(COORDINATOR, 0, n_in)]
        routes.append(
            build_boundary(
                model,
                a.layer_index,
                a,
                producer_ranges,
                coordinator_keeps_all=t in residual_sources,
            )
        )
    return routes
