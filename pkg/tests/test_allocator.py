"""Calibration, capability ratings, weight sizing, redistribution and
neuron partitioning."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mcusplit import modelgen
from mcusplit.allocator import (
    DEFAULT_CALIBRATION,
    CalibrationRecord,
    K1Table,
    WorkerSpec,
    build_assignments,
    build_plan,
    load_fleet,
    partition_ranges,
    plan_from_ratings,
    proportional_sizes,
    rating_optimized,
    redistribute_ratings,
    split_conv,
    uniform_fleet,
    worker_fragments,
)
from mcusplit.errors import AllocationError, InfeasibleCapacityError
from mcusplit.model import Model, TensorShape, _decode_array

from conftest import make_conv, make_linear, single_layer_model

# Published K1 column of the calibration table, same row order as
# DEFAULT_CALIBRATION (grouped by workload, descending frequency).
PUBLISHED_K1 = [0.133, 0.150, 0.211, 0.127, 0.151, 0.204, 0.165, 0.179, 0.228]


# ---------------------------------------------------------------------------
# Calibration


def test_k1_unit_case():
    assert CalibrationRecord(1.0, 1.0, 1.0).k1 == 1.0


def test_k1_reproduces_published_values():
    for rec, want in zip(DEFAULT_CALIBRATION, PUBLISHED_K1):
        assert rec.k1 == pytest.approx(want, abs=0.004)
    ks = [rec.k1 for rec in DEFAULT_CALIBRATION]
    assert 0.127 - 0.004 <= min(ks) and max(ks) <= 0.228 + 0.004


def test_calibration_record_rejects_nonpositive():
    with pytest.raises(AllocationError):
        CalibrationRecord(0.0, 1.0, 1.0)
    with pytest.raises(AllocationError):
        CalibrationRecord(600.0, -1.0, 1.0)


def test_k1_table_averages_per_frequency():
    table = K1Table()
    for f in (600.0, 450.0, 150.0):
        want = np.mean([r.k1 for r in DEFAULT_CALIBRATION if r.frequency_mhz == f])
        assert table.for_frequency(f) == pytest.approx(want, rel=1e-12)


def test_k1_table_nearest_frequency_and_tie():
    table = K1Table()
    with pytest.warns(UserWarning, match="nearest"):
        assert table.for_frequency(500.0) == table.for_frequency(450.0)
    with pytest.warns(UserWarning):
        # 525 is equidistant from 450 and 600; ties go to the higher clock
        assert table.for_frequency(525.0) == table.for_frequency(600.0)


def test_k1_table_single_point_and_from_json(tmp_path):
    table = K1Table([CalibrationRecord(600.0, 510.29, 6.41)])
    assert table.frequencies == [600.0]
    with pytest.warns(UserWarning):
        assert table.for_frequency(150.0) == pytest.approx(0.1327, abs=1e-4)
    path = tmp_path / "cal.json"
    path.write_text(json.dumps(
        [{"frequency_mhz": 600.0, "workload_kb": 510.29, "time_s": 6.41}]
    ))
    assert K1Table.from_json(path).for_frequency(600.0) == table.for_frequency(600.0)


def test_k1_table_requires_records():
    with pytest.raises(AllocationError):
        K1Table([])


# ---------------------------------------------------------------------------
# Ratings


def test_rating_single_device_no_communication():
    assert rating_optimized(600.0, 0.133, 0.0, 0.0, math.inf) == pytest.approx(79.8)


def test_rating_hand_value_with_communication():
    r = rating_optimized(600.0, 0.133, 1.0, 0.0, 12500.0)
    assert r == pytest.approx(79.8 / 1.006384, rel=1e-9)


def test_rating_infinite_bandwidth_ignores_kc():
    for kc in (0.0, 1.0, 57.0):
        assert rating_optimized(600.0, 0.2, kc, 0.0, math.inf) == pytest.approx(120.0)


@given(
    f=st.floats(50, 1000),
    k1=st.floats(0.05, 0.5),
    kc=st.floats(0.0, 10.0),
    d=st.floats(0.0, 0.01),
    b=st.floats(100.0, 1e6),
)
def test_rating_defining_property(f, k1, kc, d, b):
    # Plugging the rated workload back into the time model must give 1 s:
    # R/(f*K1) compute seconds + (d + 1/B)*Kc*R transfer seconds = 1.
    r = rating_optimized(f, k1, kc, d, b)
    t = r / (f * k1) + (d + 1.0 / b) * kc * r
    assert t == pytest.approx(1.0, abs=1e-9)


def test_rating_monotonicity():
    base = dict(k1=0.15, k_c=0.5, delay_s_per_kb=0.001, bandwidth_kb_s=1000.0)
    r = lambda f, kc, d, b: rating_optimized(f, base["k1"], kc, d, b)
    assert r(700, 0.5, 0.001, 1000) > r(600, 0.5, 0.001, 1000)  # faster clock
    assert r(600, 0.5, 0.001, 2000) > r(600, 0.5, 0.001, 1000)  # more bandwidth
    assert r(600, 0.5, 0.0005, 1000) > r(600, 0.5, 0.001, 1000)  # less delay
    assert r(600, 0.4, 0.001, 1000) > r(600, 0.5, 0.001, 1000)  # less traffic


# ---------------------------------------------------------------------------
# Weight sizing (Eq. 6) and redistribution (Eq. 7)


def test_proportional_sizes_examples():
    assert proportional_sizes([1, 1, 1, 1], 100.0) == [25.0, 25.0, 25.0, 25.0]
    assert proportional_sizes([2, 1, 1], 100.0) == [50.0, 25.0, 25.0]
    assert proportional_sizes([3.7], 42.0) == [42.0]
    with pytest.raises(AllocationError):
        proportional_sizes([0.0, 0.0], 10.0)


@given(
    ratings=st.lists(st.floats(0.0, 100.0), min_size=1, max_size=12).filter(
        lambda r: sum(r) > 1e-6
    ),
    total=st.floats(0.5, 1e5),
)
def test_proportional_sizes_sum_exactly(ratings, total):
    sizes = proportional_sizes(ratings, total)
    assert sum(sizes) == total
    for r, s in zip(ratings, sizes):
        assert s == pytest.approx(r * total / sum(ratings), rel=1e-9, abs=1e-9)


def test_proportional_sizes_exact_despite_rounding_ties():
    # draws where a naive remainder absorber leaves the plain sum one float
    # off total (round-to-even skips the target from both sides)
    cases = [
        ([2.6887148338046987, 3.6903952332763703], 1917.3585258527562),
        ([0.7380714208152013, 4.046143125303309, 0.3428046033679099,
          8.227370405926962], 229496.26673071992),
        ([1.2741173501881584, 0.7357216970157873, 0.7033555030668237,
          8.688556058043758], 496571.6943022813),
    ]
    for ratings, total in cases:
        assert sum(proportional_sizes(ratings, total)) == total


def test_redistribute_worked_example():
    # One overflowing worker sheds (50-40)*4/100 = 0.4 rating, split evenly
    # between the two workers with headroom.
    out = redistribute_ratings([2.0, 1.0, 1.0], [40.0, math.inf, math.inf], 100.0)
    assert out == pytest.approx([1.6, 1.2, 1.2], rel=1e-12)
    assert proportional_sizes(out, 100.0) == pytest.approx([40.0, 30.0, 30.0])


def test_redistribute_no_overflow_is_identity():
    r = [2.0, 1.0, 1.0]
    assert redistribute_ratings(r, [60.0, 30.0, 30.0], 100.0) == r


def test_redistribute_infeasible_raises():
    with pytest.raises(InfeasibleCapacityError):
        redistribute_ratings([1.0, 1.0], [50.0, 49.0], 100.0)


def test_redistribute_cascades_when_receiver_overflows():
    # First pass pushes worker 1 over its own limit; a second pass fixes it.
    out = redistribute_ratings([10.0, 1.0, 1.0], [30.0, 34.0, math.inf], 100.0)
    assert sum(out) == pytest.approx(12.0, abs=1e-9)
    sizes = proportional_sizes(out, 100.0)
    assert sizes[0] <= 30.0 + 1e-6 and sizes[1] <= 34.0 + 1e-6
    assert sizes == pytest.approx([30.0, 34.0, 36.0], rel=1e-9)


@given(
    data=st.data(),
    n=st.integers(1, 8),
    model_kb=st.floats(1.0, 5000.0),
)
def test_redistribute_properties(data, n, model_kb):
    ratings = data.draw(
        st.lists(st.floats(0.01, 50.0), min_size=n, max_size=n)
    )
    # limits drawn to always sum above the model size (feasible instances)
    limits = data.draw(
        st.lists(st.floats(0.1, 2.0), min_size=n, max_size=n)
    )
    scale = model_kb * 1.2 / sum(limits)
    limits = [l * scale for l in limits]
    out = redistribute_ratings(ratings, limits, model_kb)
    assert sum(out) == pytest.approx(sum(ratings), abs=1e-9)
    sizes = proportional_sizes(out, model_kb)
    for s, lim in zip(sizes, limits):
        assert s <= lim + 1e-6
    assert all(r >= -1e-9 for r in out)


def test_redistribute_invalid_inputs():
    with pytest.raises(AllocationError):
        redistribute_ratings([-1.0, 2.0], [10.0, 10.0], 5.0)
    with pytest.raises(AllocationError):
        redistribute_ratings([0.0, 0.0], [10.0, 10.0], 5.0)


# ---------------------------------------------------------------------------
# Neuron partitioning


def test_partition_ranges_rounding_examples():
    # 5 outputs over equal ratings: first worker takes the ceiling share
    assert partition_ranges([1.0, 1.0], 5) == [(0, 3), (3, 5)]
    assert partition_ranges([3.0, 1.0], 4) == [(0, 3), (3, 4)]
    assert partition_ranges([1.0], 8) == [(0, 8)]
    assert partition_ranges([2.0, 1.0, 1.0], 10) == [(0, 5), (5, 8), (8, 10)]


def test_partition_ranges_zero_rated_workers_get_nothing():
    ranges = partition_ranges([1.0, 0.0, 1.0], 4)
    assert ranges == [(0, 2), (2, 2), (2, 4)]


def test_partition_ranges_degenerate_cases():
    assert partition_ranges([0.0, 2.0], 0) == [(0, 0), (0, 0)]
    with pytest.raises(AllocationError):
        partition_ranges([0.0, 0.0], 5)
    with pytest.raises(AllocationError):
        partition_ranges([1.0, -2.0], 5)
    with pytest.raises(AllocationError):
        partition_ranges([math.nan], 5)


@given(
    ratings=st.lists(st.floats(0.0, 100.0), min_size=1, max_size=10).filter(
        lambda r: sum(r) > 0
    ),
    total=st.integers(0, 2000),
)
def test_partition_ranges_partition_exactly(ratings, total):
    ranges = partition_ranges(ratings, total)
    assert len(ranges) == len(ratings)
    cursor = 0
    for (s, e), r in zip(ranges, ratings):
        assert s == cursor and e >= s
        if r == 0.0:
            assert e == s
        cursor = e
    assert cursor == total


def test_split_conv_whole_kernel_examples():
    layer = make_conv((1, 2, 2), 2, k=1, padding=0)  # out 2x2x2, hw=4
    usage = split_conv(layer, [(0, 4), (4, 8)])
    assert usage == [{0: 4}, {1: 4}]
    usage = split_conv(layer, [(0, 8)])
    assert usage == [{0: 4, 1: 4}]


def test_split_conv_kernel_shared_at_boundary():
    layer = make_conv((1, 2, 2), 1, k=1, padding=0)  # out 1x2x2, hw=4
    usage = split_conv(layer, partition_ranges([3.0, 1.0], 4))
    assert usage == [{0: 3}, {0: 1}]  # both own kernel 0


@given(
    seed=st.integers(0, 200),
    n=st.integers(1, 8),
)
def test_split_conv_usage_counts_sum_to_hw(seed, n):
    rng = np.random.default_rng(seed)
    layer = make_conv(
        (int(rng.integers(1, 5)), int(rng.integers(3, 9)), int(rng.integers(3, 9))),
        int(rng.integers(1, 9)),
        k=int(rng.choice([1, 3])),
        padding=int(rng.integers(0, 2)),
        seed=seed,
    )
    ratings = rng.uniform(0.1, 10.0, n)
    ranges = partition_ranges(ratings, layer.out_shape.neuron_count)
    usage = split_conv(layer, ranges)
    hw = layer.out_shape.height * layer.out_shape.width
    totals = {}
    for (s, e), per_kernel in zip(ranges, usage):
        assert sum(per_kernel.values()) == e - s
        for k, cnt in per_kernel.items():
            assert 0 < cnt <= hw
            # ownership iff the range overlaps the kernel's output block
            assert s < (k + 1) * hw and e > k * hw
            totals[k] = totals.get(k, 0) + cnt
    for k in range(layer.out_shape.channels):
        assert totals.get(k, 0) == hw


def test_build_assignments_fragment_bytes_by_hand():
    m = modelgen.tiny_cnn()
    a = build_assignments(m, [1.0, 1.0])
    conv1 = m.layers[1]  # 16 kernels of 8*3*3=72 weights
    hw = conv1.out_shape.height * conv1.out_shape.width
    frag = a[1]
    for w in range(2):
        kernels = len(frag.kernel_usage[w])
        assert frag.fragment_bytes[w] == kernels * (72 * 4 + 4)
    lin = a[-1]
    for w, (s, e) in enumerate(lin.ranges):
        assert lin.fragment_bytes[w] == (e - s) * (16 * 4 + 4)
        assert lin.kernel_usage is None
    # a worker's macs are proportional to its neurons
    assert frag.macs[0] == frag.neurons(0) * conv1.macs_per_neuron


# ---------------------------------------------------------------------------
# K_c estimation


def test_single_worker_kc_is_zero():
    m = modelgen.tiny_cnn()
    plan = build_plan(m, uniform_fleet(1), strategy="optimized")
    assert plan.k_c == [0.0]
    assert plan.assignments[0].ranges == [(0, m.layers[0].out_shape.neuron_count)]


def test_two_equal_workers_symmetric_kc():
    layer = make_conv((2, 6, 6), 4, k=3, padding=1)
    m = single_layer_model(layer)
    plan = build_plan(m, uniform_fleet(2), strategy="optimized")
    assert plan.k_c[0] == plan.k_c[1] > 0.0
    assert plan.ratings[0] == pytest.approx(plan.ratings[1])


def test_kc_estimation_deterministic_on_mobilenet():
    m = modelgen.mobilenet_v2_like()
    fleet = uniform_fleet(3, bandwidth_kb_s=12500.0)
    p1 = build_plan(m, fleet, strategy="optimized")
    p2 = build_plan(m, fleet, strategy="optimized")
    assert p1.k_c == p2.k_c  # bit-identical across runs
    assert p1.ratings == p2.ratings
    assert [a.ranges for a in p1.assignments] == [a.ranges for a in p2.assignments]
    assert all(kc > 0 for kc in p1.k_c)


def test_explicit_worker_kc_overrides_measurement():
    layer = make_conv((2, 6, 6), 4, k=3, padding=1)
    m = single_layer_model(layer)
    fleet = uniform_fleet(2)
    for w in fleet:
        w.k_c = 0.25
    plan = build_plan(m, fleet, strategy="optimized")
    assert plan.k_c == [0.25, 0.25]


# ---------------------------------------------------------------------------
# Plan strategies


def test_evenly_strategy_equal_ranges():
    m = modelgen.tiny_cnn()
    plan = build_plan(m, uniform_fleet(4), strategy="evenly")
    assert plan.base_ratings == [1.0] * 4
    assert plan.k_c == [0.0] * 4
    for a in plan.assignments:
        n = m.layers[a.layer_index].out_shape.neuron_count
        assert a.ranges == partition_ranges([1.0] * 4, n)


def test_frequency_strategy_proportional_to_clock():
    m = modelgen.tiny_cnn()
    fleet = [
        WorkerSpec(id=0, frequency_mhz=600.0),
        WorkerSpec(id=1, frequency_mhz=150.0),
        WorkerSpec(id=2, frequency_mhz=450.0),
    ]
    plan = build_plan(m, fleet, strategy="frequency")
    assert plan.base_ratings == [600.0, 150.0, 450.0]
    assert plan.k_c == [0.0, 0.0, 0.0]
    for a in plan.assignments:
        n = m.layers[a.layer_index].out_shape.neuron_count
        assert a.ranges == partition_ranges([600.0, 150.0, 450.0], n)


def test_unknown_strategy_and_empty_fleet():
    m = modelgen.tiny_cnn()
    with pytest.raises(AllocationError):
        build_plan(m, uniform_fleet(2), strategy="fastest")
    with pytest.raises(AllocationError):
        build_plan(m, [], strategy="evenly")


def test_build_plan_honors_flash_limits():
    m = modelgen.tiny_cnn()  # 7.79 KB of weights
    with pytest.raises(InfeasibleCapacityError):
        build_plan(m, uniform_fleet(3, flash_limit_kb=1.0), strategy="evenly")
    plan = build_plan(m, uniform_fleet(3, flash_limit_kb=4.0), strategy="evenly")
    sizes = proportional_sizes(plan.ratings, plan.model_kb)
    assert all(s <= 4.0 + 1e-6 for s in sizes)


def test_plan_json_shape():
    m = modelgen.tiny_cnn()
    plan = build_plan(m, uniform_fleet(2), strategy="evenly")
    doc = plan.to_json()
    assert doc["strategy"] == "evenly"
    assert len(doc["assignments"]) == len(m.worker_layers())
    for a in doc["assignments"]:
        assert {"layer", "kind", "ranges", "fragment_bytes"} <= set(a)
    assert json.loads(json.dumps(doc)) == doc  # serializable


def test_workload_kb_prorated_by_macs():
    m = modelgen.tiny_cnn()
    plan = plan_from_ratings(m, [3.0, 1.0])
    total = plan.workload_kb(0) + plan.workload_kb(1)
    assert total == pytest.approx(plan.model_kb, rel=1e-12)
    assert plan.workload_kb(0) > plan.workload_kb(1)


# ---------------------------------------------------------------------------
# Fleet loading


def test_load_fleet_spec_schema(tmp_path):
    doc = [
        {"id": 0, "frequency_mhz": 600, "delay_ms_per_kb": 0.0,
         "bandwidth_kb_s": 12500, "flash_limit_kb": 8192,
         "ram_limit_kb": 512, "k_c": None},
        {"id": 1, "frequency_mhz": 450, "per_message_delay_ms": 10.0},
    ]
    path = tmp_path / "fleet.json"
    path.write_text(json.dumps(doc))
    fleet = load_fleet(path)
    assert fleet[0].bandwidth_kb_s == 12500.0
    assert fleet[0].flash_limit_kb == 8192.0
    assert fleet[0].k_c is None
    assert fleet[1].per_message_delay_s == pytest.approx(0.010)
    assert math.isinf(fleet[1].flash_limit_kb)
    assert fleet[1].transfer_s_per_kb == 0.0  # infinite bandwidth, no delay


def test_load_fleet_errors():
    with pytest.raises(AllocationError, match="worker 1"):
        load_fleet([{"frequency_mhz": 600}, {"id": 1}])
    with pytest.raises(AllocationError, match="duplicate"):
        load_fleet([{"id": 3, "frequency_mhz": 600}, {"id": 3, "frequency_mhz": 450}])


# ---------------------------------------------------------------------------
# Fragment manifests


def test_worker_fragments_unique_bytes_sum_to_model():
    m = modelgen.tiny_cnn()
    plan = build_plan(m, uniform_fleet(3), strategy="evenly")
    frags = [worker_fragments(m, plan, w) for w in range(3)]
    assert sum(f["unique_bytes"] for f in frags) == m.total_weight_bytes == 7976
    for f in frags:
        assert f["resident_bytes"] >= f["unique_bytes"]


def test_worker_fragments_replicate_boundary_kernels():
    m = modelgen.tiny_cnn()
    plan = build_plan(m, uniform_fleet(3), strategy="evenly")
    # conv0 output is 8x16x16 = 2048 neurons; 3-way split cuts kernels 2 and 5
    a0 = plan.assignments[0]
    shared = [
        k for k in range(8)
        if sum(1 for w in range(3) if k in a0.kernel_usage[w]) > 1
    ]
    assert shared  # replication does happen
    frags = [worker_fragments(m, plan, w) for w in range(3)]
    resident = sum(f["resident_bytes"] for f in frags)
    assert resident > m.total_weight_bytes


def test_worker_fragments_weights_decode_to_layer_slices():
    m = modelgen.tiny_cnn()
    plan = build_plan(m, uniform_fleet(2), strategy="evenly")
    frag = worker_fragments(m, plan, 1)
    for entry in frag["layers"]:
        layer = m.layers[entry["layer"]]
        got = _decode_array(entry["weights"], np.float64)
        if entry["kind"] == "conv":
            want = layer.weights[entry["kernels"]]
            assert sum(entry["usage"].values()) == entry["range"][1] - entry["range"][0]
        else:
            s, e = entry["range"]
            want = layer.weights[:, s:e]
        assert got.shape == want.shape
        assert np.allclose(got, want, atol=1e-6)  # float32 storage rounding
