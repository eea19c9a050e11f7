"""``gemmsim run|sweep|compare|cost``.

Exit codes: 0 success, 1 usage, 2 validation, 3 functional mismatch
(backends or designs disagreeing on output bytes).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from .config import AccelConfig, load_config
from .cost import CostModelParams, cost_summary
from .fixtures import FIXTURES
from .model import load_input, load_model, random_input, run_inference

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_MISMATCH = 0, 1, 2, 3
BUILTIN_PREFIX = "builtin:"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class Mismatch(Exception):
    pass


# -- helpers -------------------------------------------------------------------

def _load_model(args):
    if args.model.startswith(BUILTIN_PREFIX):
        name = args.model[len(BUILTIN_PREFIX):]
        if name not in FIXTURES:
            raise ValueError(f"unknown builtin model {name!r}; choose from {sorted(FIXTURES)}")
        return FIXTURES[name]()
    weights = args.weights or str(Path(args.model).with_suffix(".bin"))
    return load_model(args.model, weights)


def _input(args, model):
    if args.input:
        return load_input(model, args.input)
    return random_input(model, args.seed)


def _config(path, backend=None) -> AccelConfig:
    config = load_config(path) if path else AccelConfig()
    if backend in ("vm", "sa"):
        config = config.replace(kind=backend)
    return config


def _emit(text: str, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _csv(rows: list) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _report(model, x, backend, config) -> dict:
    _, rep = run_inference(model, x, backend, config)
    d = rep.to_dict()
    d["model"] = model.name
    d["config"] = config.to_dict() if backend != "cpu" else None
    return d


# -- commands ------------------------------------------------------------------

def cmd_run(args) -> int:
    model = _load_model(args)
    x = _input(args, model)
    report = _report(model, x, args.backend, _config(args.config, args.backend))
    if args.format == "csv":
        rows = [dict(l) for l in report["layers"]]
        rows.append({"name": "total", "kind": "", "category": "",
                     "cycles": report["overall_cycles"], "accel_cycles": report["accel_cycles"],
                     "cpu_cycles": report["overall_cycles"] - report["accel_cycles"]})
        _emit(_csv(rows), args.out)
    else:
        _emit(_json(report), args.out)
    return EXIT_OK


def sweep_rows(model, x, sizes, base: AccelConfig) -> list:
    """One row per square SA size; raises Mismatch if output digests differ."""
    rows = []
    for size in sizes:
        config = base.replace(kind="sa", **{"sa.rows": size, "sa.cols": size})
        _, rep = run_inference(model, x, "sa", config)
        ctr = rep.counters
        array_cycles = ctr.component_cycles.get("sa.array", 0)
        macs = ctr.mac_ops_issued
        rows.append({
            "size": f"{size}x{size}",
            "overall_cycles": rep.overall_cycles,
            "conv_cycles": rep.conv_cycles,
            "accel_cycles": rep.accel_cycles,
            "array_busy_cycles": array_cycles,
            "mac_ops": macs,
            "mac_throughput": round(macs / array_cycles, 6) if array_cycles else 0.0,
            "mac_utilization": round(macs / (size * size * array_cycles), 6) if array_cycles else 0.0,
            "stall_cycles": sum(ctr.stall_cycles.values()),
            "output_digest": rep.output_digest,
        })
    if len({r["output_digest"] for r in rows}) > 1:
        raise Mismatch("output digests differ across array sizes")
    return rows


def cmd_sweep(args) -> int:
    if args.backend != "sa":
        raise ValueError("sweep varies the systolic array size; use --backend sa")
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError as e:
        raise ValueError(f"--sizes must be a comma-separated list of integers: {args.sizes!r}") from e
    if not sizes or any(s < 1 for s in sizes):
        raise ValueError(f"invalid array sizes {args.sizes!r}")
    model = _load_model(args)
    rows = sweep_rows(model, _input(args, model), sizes, _config(args.config, "sa"))
    _emit(_json(rows) if args.format == "json" else _csv(rows), args.out)
    return EXIT_OK


def _numeric_deltas(a: dict, b: dict) -> dict:
    out = {}
    for k in sorted(set(a) | set(b)):
        va, vb = a.get(k, 0), b.get(k, 0)
        if isinstance(va, dict) or isinstance(vb, dict):
            sub = _numeric_deltas(va or {}, vb or {})
            if sub:
                out[k] = sub
        elif isinstance(va, (int, float)) and not isinstance(va, bool):
            out[k] = vb - va
    return out


def compare_reports(ra: dict, rb: dict) -> dict:
    ca, cb = ra["counters"], rb["counters"]
    ratios = {}
    for key in ("dma_bytes_out", "global_weight_buffer_reads", "mac_ops_issued"):
        ratios[f"{key}_b_over_a"] = cb[key] / ca[key] if ca[key] else None
    return {
        "digest_equal": ra["output_digest"] == rb["output_digest"],
        "cycle_deltas": {k: rb[k] - ra[k] for k in
                         ("overall_cycles", "conv_cycles", "non_conv_cycles", "accel_cycles")},
        "counter_deltas": _numeric_deltas(ca, cb),
        "ratios": ratios,
        "a": ra,
        "b": rb,
    }


def cmd_compare(args) -> int:
    model = _load_model(args)
    x = _input(args, model)
    ca, cb = _config(args.config_a, args.backend), _config(args.config_b, args.backend)
    ra = _report(model, x, ca.kind if args.backend is None else args.backend, ca)
    rb = _report(model, x, cb.kind if args.backend is None else args.backend, cb)
    diff = compare_reports(ra, rb)
    _emit(_json(diff), args.out)
    if not diff["digest_equal"]:
        print("error: designs disagree on output bytes "
              f"({ra['output_digest'][:12]} vs {rb['output_digest'][:12]})", file=sys.stderr)
        return EXIT_MISMATCH
    return EXIT_OK


def cmd_cost(args) -> int:
    params = CostModelParams(args.num_sim, args.num_synth, args.compile_time,
                             args.sim_inference_time, args.synth_time, args.hw_inference_time)
    summary = cost_summary(params)
    if args.format == "csv":
        row = {k: summary[k] for k in ("et_secda", "et_synth_only", "et_fullsim_only")}
        row.update(summary["ratios"])
        _emit(_csv([row]), args.out)
    else:
        _emit(_json(summary), args.out)
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gemmsim", description="Simulate int8 GEMM accelerators end to end.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def model_args(sp):
        sp.add_argument("--model", required=True,
                        help=f"model JSON, or {BUILTIN_PREFIX}<name> for a bundled fixture")
        sp.add_argument("--weights", help="weights file (default: model path with .bin)")
        src = sp.add_mutually_exclusive_group()
        src.add_argument("--input", help="raw uint8 NHWC input file")
        src.add_argument("--seed", type=int, default=0, help="seed for a random input")
        sp.add_argument("--out", help="write the report here instead of stdout")

    r = sub.add_parser("run", help="run one inference and write its report")
    model_args(r)
    r.add_argument("--backend", choices=("cpu", "vm", "sa"), default="cpu")
    r.add_argument("--config", help="accelerator config JSON")
    r.add_argument("--format", choices=("json", "csv"), default="json")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="compare systolic array sizes on one model")
    model_args(s)
    s.add_argument("--backend", default="sa")
    s.add_argument("--sizes", default="4,8,16")
    s.add_argument("--config", help="base accelerator config JSON")
    s.add_argument("--format", choices=("json", "csv"), default="csv")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("compare", help="run two configs and diff their reports")
    model_args(c)
    c.add_argument("--config-a", required=True)
    c.add_argument("--config-b", required=True)
    c.add_argument("--backend", choices=("vm", "sa"),
                   help="force both configs onto this design (default: each config's kind)")
    c.add_argument("--format", choices=("json",), default="json")
    c.set_defaults(func=cmd_compare)

    k = sub.add_parser("cost", help="development-time estimates for three design loops")
    for flag in ("num-sim", "num-synth"):
        k.add_argument(f"--{flag}", type=float, required=True)
    for flag in ("compile-time", "sim-inference-time", "synth-time", "hw-inference-time"):
        k.add_argument(f"--{flag}", type=float, default=0.0, help="seconds")
    k.add_argument("--out")
    k.add_argument("--format", choices=("json", "csv"), default="json")
    k.set_defaults(func=cmd_cost)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Mismatch as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except (ValueError, RuntimeError, OSError) as e:
        # every library error derives from ValueError or RuntimeError
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
