"""Command line front end: plan splits, run simulated inferences, sweep
memory against worker counts, fit calibration data and generate models.

Exit codes: 0 success, 2 usage error, 3 infeasible capacity, 4 out-of-memory
fault, 5 split output disagreed with the oracle.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import allocator, modelgen, oracle, runtime
from .allocator import K1Table, WorkerSpec, build_plan, load_fleet
from .errors import (
    AllocationError,
    DeploymentFault,
    InfeasibleCapacityError,
    ModelError,
    OutOfMemoryFault,
    SimulationFault,
)
from .model import Model, fuse_conv_bn_relu, quantize, reinterpret, save_model

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3
EXIT_OOM = 4
EXIT_MISMATCH = 5

# Heterogeneity cases: (frequencies MHz, per-message delays ms) for 3 workers.
TABLE2_CASES = {
    1: ((600, 600, 600), (0, 0, 0)),
    2: ((600, 150, 450), (0, 0, 0)),
    3: ((150, 396, 528), (0, 0, 0)),
    4: ((450, 396, 528), (0, 0, 0)),
    5: ((600, 150, 450), (10, 0, 5)),
    6: ((450, 396, 528), (20, 7, 13)),
    7: ((600, 396, 150), (20, 5, 10)),
    8: ((600, 600, 600), (10, 20, 5)),
}
DEFAULT_BANDWIDTH_KB_S = 12500.0


def table2_fleet(case: int) -> list[WorkerSpec]:
    freqs, delays = TABLE2_CASES[case]
    return [
        WorkerSpec(
            id=i,
            frequency_mhz=f,
            bandwidth_kb_s=DEFAULT_BANDWIDTH_KB_S,
            per_message_delay_s=d / 1000.0,
        )
        for i, (f, d) in enumerate(zip(freqs, delays))
    ]


def _load_model(args) -> Model:
    """Load --model (path or preset name), fuse, and match --precision."""
    name = args.model
    if name in modelgen.PRESETS:
        m = modelgen.PRESETS[name](seed=args.seed)
    else:
        m = reinterpret(name)
    if any(l.kind == "batchnorm" for l in m.layers):
        m = fuse_conv_bn_relu(m)
    want_i8 = getattr(args, "precision", "f32") == "i8"
    if want_i8 and m.quantization == "float32":
        m = quantize(m, seed=args.seed)
    if not want_i8 and m.quantization == "int8":
        raise ModelError("model file is int8 but --precision f32 was requested")
    return m


def _make_fleet(args) -> list[WorkerSpec]:
    if getattr(args, "emulate_table2", None):
        return table2_fleet(args.emulate_table2)
    if args.fleet:
        return load_fleet(args.fleet)
    if args.workers:
        return allocator.uniform_fleet(
            args.workers,
            frequency_mhz=args.frequency_mhz,
            bandwidth_kb_s=args.bandwidth_kb_s,
            ram_limit_kb=args.ram_limit_kb if args.ram_limit_kb else float("inf"),
            flash_limit_kb=args.flash_limit_kb if args.flash_limit_kb else float("inf"),
        )
    raise AllocationError("provide --fleet or --workers")


def _load_input(args, model: Model) -> np.ndarray | None:
    path = getattr(args, "input", None)
    if not path:
        return None
    p = Path(path)
    if p.suffix == ".json":
        with open(p) as fh:
            return np.asarray(json.load(fh), dtype=np.float64).reshape(model.input_shape.as_tuple())
    return np.fromfile(p, dtype=np.float32).astype(np.float64).reshape(model.input_shape.as_tuple())


def _k1_table(args) -> K1Table:
    if getattr(args, "calibration", None):
        return K1Table.from_json(args.calibration)
    return K1Table()


def _plan_summary_lines(plan, fleet) -> list[str]:
    lines = [
        f"strategy {plan.strategy}, {plan.n_workers} workers, model {plan.model_kb:.1f} KB",
        "worker  rating  share_kb  flash_kb  k_c",
    ]
    sizes = allocator.proportional_sizes(plan.ratings, plan.model_kb)
    for w, spec in enumerate(fleet):
        lines.append(
            f"{spec.id:>6}  {plan.ratings[w]:>6.2f}  {sizes[w]:>8.1f}  "
            f"{plan.flash_bytes(w) / 1024.0:>8.1f}  {plan.k_c[w]:.3f}"
        )
    return lines


def _write_trace_csv(path: Path, result: runtime.RunResult) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(
            ["layer", "worker", "recv_bytes", "send_bytes", "recv_s",
             "compute_s", "send_s", "t_start", "t_done", "ram_peak_bytes"]
        )
        for st in result.stats:
            wr.writerow(
                [st.layer_index, st.worker, st.recv_bytes, st.send_bytes,
                 f"{st.recv_s:.9f}", f"{st.compute_s:.9f}", f"{st.send_s:.9f}",
                 f"{st.t_start:.9f}", f"{st.t_done:.9f}", st.ram_peak_bytes]
            )


def _run_summary(plan, result: runtime.RunResult, verdict, traffic) -> dict:
    doc = {
        "strategy": plan.strategy,
        "n_workers": plan.n_workers,
        "ratings": plan.ratings,
        "end_to_end_s": result.timing.end_to_end_s,
        "compute_s": result.timing.compute_s,
        "comm_s": result.timing.comm_s,
        "total_bytes": result.total_bytes,
        "total_packets": result.total_packets,
        "total_messages": result.total_messages,
        "flash_bytes": result.flash_bytes,
        "ram_peak_bytes": result.memory.peak_bytes,
    }
    if verdict is not None:
        doc["equivalence"] = {
            "passed": verdict.passed,
            "reason": verdict.reason,
            "max_abs_err": verdict.max_abs_err,
        }
    if traffic is not None:
        doc["traffic"] = {
            "total_bytes": traffic.total_bytes,
            "max_layer_worker_bytes": traffic.max_layer_worker_bytes,
            "matched_precision": traffic.matched_precision,
            "shape_mismatch": traffic.shape_mismatch,
        }
    return doc


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_model(args) -> int:
    if args.preset == "random":
        m = modelgen.random_cnn(args.seed)
    else:
        m = modelgen.PRESETS[args.preset](seed=args.seed)
    if args.quantize:
        if any(l.kind == "batchnorm" for l in m.layers):
            m = fuse_conv_bn_relu(m)
        m = quantize(m, seed=args.seed)
    save_model(m, args.out)
    print(f"wrote {args.out}: {len(m.layers)} layers, {m.total_weight_bytes / 1024:.1f} KB "
          f"of weights, {m.quantization}")
    return EXIT_OK


def cmd_plan(args) -> int:
    model = _load_model(args)
    fleet = _make_fleet(args)
    plan = build_plan(model, fleet, strategy=args.strategy, k1_table=_k1_table(args))
    for line in _plan_summary_lines(plan, fleet):
        print(line)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "plan.json", "w") as fh:
            json.dump(plan.to_json(), fh, indent=1)
        for w, spec in enumerate(fleet):
            frag = allocator.worker_fragments(model, plan, w)
            with open(out / f"fragments_{spec.id}.json", "w") as fh:
                json.dump(frag, fh, indent=1)
            print(f"fragments_{spec.id}.json: {frag['resident_bytes']} B resident, "
                  f"{frag['unique_bytes']} B unique")
        print(f"wrote {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    model = _load_model(args)
    fleet = _make_fleet(args)
    table = _k1_table(args)
    x = _load_input(args, model)
    out_dir = Path(args.out) if args.out else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    strategies = list(allocator.STRATEGIES) if args.emulate_table2 else [args.strategy]
    worst = EXIT_OK
    rows = {}
    for strategy in strategies:
        plan = build_plan(model, fleet, strategy=strategy, k1_table=table)
        try:
            result = runtime.execute(
                model, plan, fleet, x=x, seed=args.seed,
                serialize_sends=args.serialize_coordinator_sends,
            )
        except OutOfMemoryFault as exc:
            print(f"[{strategy}] out of memory: {exc}", file=sys.stderr)
            if out_dir:
                fault = {"fault": {"kind": "out_of_memory", "worker": exc.worker,
                                   "layer": exc.layer, "message": str(exc)}}
                with open(out_dir / f"summary_{strategy}.json", "w") as fh:
                    json.dump(fault, fh, indent=1)
            return EXIT_OOM
        verdict = None
        if not args.skip_verify:
            ref, _ = oracle.reference_forward(model, result_input(x, model, args.seed))
            verdict = oracle.check_equivalence(
                result.output, ref,
                precision="int8" if model.quantization == "int8" else "float32",
            )
        traffic = runtime.traffic_report(result.stats, model.activation_bytes_each)
        rows[strategy] = (plan, result, verdict, traffic)
        print(f"[{strategy}] end-to-end {result.timing.end_to_end_s:.2f} s "
              f"(compute {result.timing.compute_s:.2f}, comm {result.timing.comm_s:.2f}), "
              f"{result.total_bytes} B in {result.total_packets} packets")
        if verdict is not None:
            print(f"[{strategy}] oracle check: {verdict.summary()}")
            if not verdict.passed:
                worst = max(worst, EXIT_MISMATCH)
        if out_dir:
            _write_trace_csv(out_dir / f"trace_{strategy}.csv", result)
            with open(out_dir / f"summary_{strategy}.json", "w") as fh:
                json.dump(_run_summary(plan, result, verdict, traffic), fh, indent=1)
    if args.emulate_table2:
        times = {s: rows[s][1].timing.end_to_end_s for s in strategies}
        print("case {}: evenly {:.2f} s, frequency {:.2f} s, optimized {:.2f} s".format(
            args.emulate_table2, times["evenly"], times["frequency"], times["optimized"]))
    else:
        for line in rows[args.strategy][3].lines():
            print(line)
    if out_dir:
        print(f"wrote {out_dir}")
    return worst


def result_input(x: np.ndarray | None, model: Model, seed: int) -> np.ndarray:
    """The exact input execute() used (regenerates the seeded default)."""
    if x is not None:
        return x
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0, 1.0, model.input_shape.as_tuple())


def cmd_sweep_memory(args) -> int:
    model = _load_model(args)
    budget_bytes = args.ram_limit_kb * 1024
    rows = []
    for n in args.workers_list:
        fleet = allocator.uniform_fleet(n, frequency_mhz=args.frequency_mhz,
                                        bandwidth_kb_s=args.bandwidth_kb_s)
        plan = build_plan(model, fleet, strategy=args.strategy, k1_table=_k1_table(args))
        result = runtime.execute(model, plan, fleet, seed=args.seed,
                                 check_ram=False, check_flash=False, skip_compute=True)
        peak = result.memory.worst_bytes
        rows.append((n, peak, peak <= budget_bytes))
        print(f"workers {n:>3}: peak {peak / 1024.0:8.1f} KB per worker "
              f"{'within' if peak <= budget_bytes else 'EXCEEDS'} {args.ram_limit_kb:.0f} KB")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["workers", "peak_ram_bytes", "within_budget"])
            for n, peak, ok in rows:
                wr.writerow([n, peak, int(ok)])
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    with open(args.measurements) as fh:
        raw = json.load(fh)
    records = []
    for i, d in enumerate(raw):
        try:
            records.append(
                allocator.CalibrationRecord(d["frequency_mhz"], d["workload_kb"], d["time_s"])
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"measurement record {i}: missing or bad field {exc}") from exc
    for rec in records:
        print(f"{rec.frequency_mhz:.0f} MHz x {rec.workload_kb:.2f} KB in "
              f"{rec.time_s:.2f} s -> K1 = {rec.k1:.4f}")
    table = K1Table(records)
    points = [{"frequency_mhz": f, "k1": table.for_frequency(f)} for f in table.frequencies]
    for p in points:
        print(f"fitted {p['frequency_mhz']:.0f} MHz: K1 = {p['k1']:.4f}")
    if args.out:
        doc = {
            "records": [
                {"frequency_mhz": r.frequency_mhz, "workload_kb": r.workload_kb,
                 "time_s": r.time_s, "k1": r.k1}
                for r in records
            ],
            "fitted": points,
        }
        with open(args.out, "w") as fh:
            json.dump(doc, fh, indent=1)
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    model = _load_model(args)
    x = _load_input(args, model)
    if x is None:
        x = result_input(None, model, args.seed)
    out, _ = oracle.reference_forward(model, x)
    flat = np.asarray(out).ravel()
    print(f"output shape {tuple(np.asarray(out).shape)}, "
          f"first values {np.array2string(flat[:8], precision=5)}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(np.asarray(out, dtype=np.float64).tolist(), fh)
        print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument wiring


def _add_model_arg(p):
    p.add_argument("--model", required=True,
                   help="model JSON path or preset name "
                        f"({', '.join(modelgen.PRESETS)})")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--calibration", help="calibration measurements JSON for K1")


def _add_fleet_args(p):
    p.add_argument("--fleet", help="fleet JSON path")
    p.add_argument("--workers", type=int, help="uniform fleet of N workers instead of --fleet")
    p.add_argument("--frequency-mhz", type=float, default=600.0)
    p.add_argument("--bandwidth-kb-s", type=float, default=DEFAULT_BANDWIDTH_KB_S)
    p.add_argument("--ram-limit-kb", type=float, default=0.0,
                   help="RAM limit for uniform fleets (0 = unlimited)")
    p.add_argument("--flash-limit-kb", type=float, default=0.0,
                   help="flash limit for uniform fleets (0 = unlimited)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="mcusplit",
        description=__doc__,
        epilog="Any subcommand accepts --config FILE, a JSON object whose keys "
               "mirror the long flags; explicit flags override it.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-model", help="write a generated model description")
    p.add_argument("--preset", choices=sorted(modelgen.PRESETS) + ["random"], required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quantize", action="store_true", help="emit the int8 form")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_model)

    p = sub.add_parser("plan", help="rate the fleet and print the split")
    _add_model_arg(p)
    _add_fleet_args(p)
    p.add_argument("--strategy", choices=allocator.STRATEGIES, default="optimized")
    p.add_argument("--precision", choices=["f32", "i8"], default="f32")
    p.add_argument("--out", help="write the plan as JSON")
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("run", help="simulate one split inference")
    _add_model_arg(p)
    _add_fleet_args(p)
    p.add_argument("--strategy", choices=allocator.STRATEGIES, default="optimized")
    p.add_argument("--precision", choices=["f32", "i8"], default="f32")
    p.add_argument("--input", help="input tensor (.json nested list or .bin float32)")
    p.add_argument("--out", help="directory for trace.csv and summary.json")
    p.add_argument("--serialize-coordinator-sends", action="store_true")
    p.add_argument("--emulate-table2", type=int, choices=sorted(TABLE2_CASES),
                   help="use a 3-worker heterogeneity case and run all strategies")
    p.add_argument("--skip-verify", action="store_true",
                   help="skip the dense-oracle equivalence check")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("sweep-memory", help="peak worker RAM across fleet sizes")
    _add_model_arg(p)
    p.add_argument("--workers", dest="workers_list", required=True,
                   type=lambda s: [int(v) for v in s.split(",")],
                   help="comma-separated worker counts, e.g. 1,2,4,8")
    p.add_argument("--strategy", choices=allocator.STRATEGIES, default="evenly")
    p.add_argument("--precision", choices=["f32", "i8"], default="i8")
    p.add_argument("--frequency-mhz", type=float, default=600.0)
    p.add_argument("--bandwidth-kb-s", type=float, default=DEFAULT_BANDWIDTH_KB_S)
    p.add_argument("--ram-limit-kb", type=float, default=512.0)
    p.add_argument("--out", help="write results as CSV")
    p.set_defaults(fn=cmd_sweep_memory)

    p = sub.add_parser("calibrate", help="fit K1 from measurement records")
    p.add_argument("--measurements", required=True,
                   help="JSON list of {frequency_mhz, workload_kb, time_s}")
    p.add_argument("--out", help="write fitted points as JSON")
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("oracle", help="run the dense single-node reference")
    _add_model_arg(p)
    p.add_argument("--precision", choices=["f32", "i8"], default="f32")
    p.add_argument("--input", help="input tensor (.json nested list or .bin float32)")
    p.add_argument("--out", help="write the output tensor as JSON")
    p.set_defaults(fn=cmd_oracle)

    return ap


def _apply_config(argv: list[str]) -> list[str]:
    """Expand --config FILE into flags; explicit flags still win."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    try:
        path = argv[i + 1]
    except IndexError:
        raise ValueError("--config needs a file argument")
    with open(path) as fh:
        cfg = json.load(fh)
    expanded = []
    for key, val in cfg.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(val, bool):
            if val:
                expanded.append(flag)
        elif isinstance(val, list):
            expanded.extend([flag, ",".join(str(v) for v in val)])
        else:
            expanded.extend([flag, str(val)])
    # keep the subcommand first, then config-derived flags, then explicit ones
    rest = argv[:i] + argv[i + 2 :]
    return rest[:1] + expanded + rest[1:]


def main(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    try:
        argv = _apply_config(list(argv))
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (InfeasibleCapacityError, DeploymentFault) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except OutOfMemoryFault as exc:
        print(f"out of memory: {exc}", file=sys.stderr)
        return EXIT_OOM
    except (ModelError, AllocationError, SimulationFault, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
