"""Command line entry point.

    moonshot run [scenario.json] [--protocol ...] [--seeds 1..100] [--check]
    moonshot check trace.jsonl ...
    moonshot report results.csv ...
    moonshot cluster --protocol pipelined --n 4 --duration 30 [--kill 3]

Exit status: 0 on success, 1 when a checker fails, 2 on invalid input.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import jsonschema

from . import __version__
from .analysis import (CSV_COLUMNS, METRICS, TRANSPORT_CHECKS, check_all, csv_row, summarize,
                       write_csv)
from .core import ConfigError
from .simnet import BEHAVIOURS, PRE_GST_POLICIES, PROTOCOLS, SCHEDULES, SimConfig, simulate
from .trace import Trace

log = logging.getLogger("moonshot")

CSV_VERSION = "1"

_num = {"type": "number"}
_int = {"type": "integer"}
SCENARIO_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "protocol": {"enum": sorted(PROTOCOLS)},
        "n": {**_int, "minimum": 1},
        "f": {**_int, "minimum": 0},
        "f_actual": {**_int, "minimum": 0},
        "delay": {"oneOf": [
            {"type": "string"},
            {"type": "object", "required": ["kind"], "properties": {"kind": {"type": "string"}}},
        ]},
        "delta": {**_num, "exclusiveMinimum": 0},
        "gst": {**_num, "minimum": 0},
        "duration": {**_num, "exclusiveMinimum": 0},
        "seed": _int,
        "seeds": {"oneOf": [{"type": "string"}, {"type": "array", "items": _int, "minItems": 1}]},
        "schedule": {"oneOf": [{"enum": list(SCHEDULES)},
                               {"type": "array", "items": {**_int, "minimum": 0}, "minItems": 1}]},
        "byzantine": {"oneOf": [{"enum": list(BEHAVIOURS) + ["mixed"]},
                                {"type": "object",
                                 "additionalProperties": {"enum": list(BEHAVIOURS)}}]},
        "byz_ids": {"type": "array", "items": _int},
        "payload_size": {**_int, "minimum": 0},
        "compact_tc": {"type": "boolean"},
        "pre_gst": {"enum": list(PRE_GST_POLICIES)},
        "inject_fault": {"type": ["string", "null"]},
        "out_dir": {"type": "string"},
        "traces": {"type": "boolean"},
        "check": {"type": "boolean"},
    },
}

SIM_FIELDS = ("protocol", "n", "f", "f_actual", "delay", "delta", "gst", "duration", "schedule",
              "byzantine", "byz_ids", "payload_size", "compact_tc", "pre_gst", "inject_fault")


class UsageError(Exception):
    pass


def parse_seeds(text: str) -> list[int]:
    """``7``, ``1..100`` (inclusive) or ``1,5,9``."""
    text = str(text).strip()
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            lo_i, hi_i = int(lo), int(hi)
            if hi_i < lo_i:
                raise UsageError(f"empty seed range {text!r}")
            return list(range(lo_i, hi_i + 1))
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad seed list {text!r}") from None


def load_scenario(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read scenario {path}: {e}") from None
    try:
        jsonschema.validate(data, SCENARIO_SCHEMA)
    except jsonschema.ValidationError as e:
        raise UsageError(f"scenario {path}: {e.message}") from None
    return data


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="moonshot", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="simulate a scenario over one or more seeds")
    run.add_argument("scenario", nargs="?", help="JSON scenario file (flags override it)")
    run.add_argument("--protocol", choices=sorted(PROTOCOLS), help="default: pipelined")
    run.add_argument("--schedule", choices=SCHEDULES, help="default: round_robin")
    run.add_argument("--n", type=int, help="default: 4")
    run.add_argument("--f", type=int, help="default: (n-1)//3")
    run.add_argument("--f-actual", type=int, help="default: 0")
    run.add_argument("--byzantine", choices=list(BEHAVIOURS) + ["mixed"], help="default: crash")
    run.add_argument("--delta", type=float, help="default: 1")
    run.add_argument("--gst", type=float, help="default: 0")
    run.add_argument("--duration", type=float, help="default: 50")
    seeds = run.add_mutually_exclusive_group()
    seeds.add_argument("--seed", type=int, help="single seed (default 0)")
    seeds.add_argument("--seeds", help="seed list: 1..100 or 1,2,3")
    run.add_argument("--delay-model", dest="delay",
                     help="uniform:D | bounded:MIN,MAX | smalllarge:RHO,LAM (default uniform:1)")
    run.add_argument("--payload-size", type=int, help="default: 0")
    run.add_argument("--compact-tc", action="store_true", default=None)
    run.add_argument("--check", action="store_true", default=None,
                     help="run all checkers; exit 1 if any fails")
    run.add_argument("--no-traces", dest="traces", action="store_false", default=None,
                     help="do not write per-seed trace files")
    run.add_argument("--out-dir", help="default: ./out")

    chk = sub.add_parser("check", help="run the checkers over trace files")
    chk.add_argument("traces", nargs="+")
    chk.add_argument("--only", help="comma-separated checker names")
    chk.add_argument("--json", dest="json_out", help="write a JSON report here")

    rep = sub.add_parser("report", help="summarize metrics CSV files by protocol")
    rep.add_argument("csv", nargs="+")

    cl = sub.add_parser("cluster", help="run a local multi-process socket cluster")
    cl.add_argument("--protocol", choices=sorted(PROTOCOLS) + ["all"], default="pipelined")
    cl.add_argument("--n", type=int, default=4)
    cl.add_argument("--duration", type=float, default=30.0)
    cl.add_argument("--delta", type=float, default=0.25, help="wall-clock seconds")
    cl.add_argument("--kill", type=int, help="node id to kill mid-run")
    cl.add_argument("--kill-at", type=float, default=5.0)
    cl.add_argument("--out-dir", default="cluster-out")
    return ap


def _print_results(label: str, results) -> bool:
    ok = True
    for r in results:
        if not r.ok:
            ok = False
            print(f"FAIL {label} {r.name}: {r.detail} (events {r.counterexample[:10]})")
    return ok


def cmd_run(args) -> int:
    scen = load_scenario(args.scenario)
    for key in SIM_FIELDS + ("out_dir", "traces", "check"):
        val = getattr(args, key, None)
        if val is not None:
            scen[key] = val
    if args.seeds is not None:
        seeds = parse_seeds(args.seeds)
    elif args.seed is not None:
        seeds = [args.seed]
    elif "seeds" in scen:
        s = scen["seeds"]
        seeds = parse_seeds(s) if isinstance(s, str) else list(s)
    else:
        seeds = [scen.get("seed", 0)]
    if not seeds:
        raise UsageError("no seeds given")
    out = Path(scen.get("out_dir", "out"))
    out.mkdir(parents=True, exist_ok=True)
    sim_kwargs = {k: scen[k] for k in SIM_FIELDS if k in scen}
    configs = [SimConfig(seed=s, **sim_kwargs) for s in seeds]  # validate all before running
    rows, failed, reports = [], False, []
    for cfg in configs:
        trace = simulate(cfg)
        if scen.get("traces", True):
            trace.write_jsonl(out / f"trace-{cfg.protocol}-{cfg.seed}.jsonl")
        rows.append({**csv_row(trace), "version": CSV_VERSION})
        if scen.get("check"):
            results = check_all(trace)
            reports.append({"seed": cfg.seed, "results": [r.as_dict() for r in results]})
            if not _print_results(f"seed={cfg.seed}", results):
                failed = True
    write_csv(rows, out / "results.csv")
    if reports:
        (out / "checks.json").write_text(json.dumps(reports, indent=1))
    print(f"{len(rows)} run(s) -> {out / 'results.csv'}")
    return 1 if failed else 0


def cmd_check(args) -> int:
    names = args.only.split(",") if args.only else None
    failed, report = False, []
    for path in args.traces:
        try:
            trace = Trace.read_jsonl(path)
            results = check_all(trace, names)
        except (OSError, ValueError, KeyError) as e:
            raise UsageError(f"{path}: {e}") from None
        report.append({"trace": str(path), "results": [r.as_dict() for r in results]})
        for r in results:
            print(f"{r.verdict.upper():4} {r.name} {path}" + (f": {r.detail}" if r.detail else ""))
        failed |= not all(r.ok for r in results)
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(report, indent=1))
    return 1 if failed else 0


def read_metric_rows(paths: Sequence[str]) -> list[dict]:
    rows = []
    for path in paths:
        try:
            with open(path, newline="") as fh:
                reader = csv.DictReader(fh)
                if reader.fieldnames is None or list(reader.fieldnames) != list(CSV_COLUMNS):
                    raise UsageError(f"{path}: unexpected header {reader.fieldnames}")
                for k, row in enumerate(reader, start=2):
                    if None in row or any(v is None for v in row.values()):
                        raise UsageError(f"{path}:{k}: wrong number of fields")
                    for m in METRICS:
                        if row[m] != "":
                            try:
                                float(row[m])
                            except ValueError:
                                raise UsageError(f"{path}:{k}: {m} is not a number") from None
                    rows.append(row)
        except OSError as e:
            raise UsageError(f"cannot read {path}: {e}") from None
    if not rows:
        raise UsageError("no metric rows in input")
    return rows


def _fmt(x: Optional[float]) -> str:
    return "-" if x is None else f"{x:.4g}"


def cmd_report(args) -> int:
    rows = read_metric_rows(args.csv)
    summary = summarize(rows)
    counts: dict[str, int] = {}
    for r in rows:
        counts[r["protocol"]] = counts.get(r["protocol"], 0) + 1
    print(f"{'protocol':<10} {'metric':<14} {'max':>10} {'mean':>10} {'median':>10} {'min':>10}")
    for proto in sorted(summary):
        for m in METRICS:
            s = summary[proto][m]
            print(f"{proto:<10} {m:<14} {_fmt(s['max']):>10} {_fmt(s['mean']):>10} "
                  f"{_fmt(s['median']):>10} {_fmt(s['min']):>10}")
        print(f"{proto:<10} {'runs':<14} {counts[proto]:>10}")
    return 0


def cmd_cluster(args) -> int:
    from .transport import run_cluster

    protocols = sorted(PROTOCOLS) if args.protocol == "all" else [args.protocol]
    if args.n < 4 or (args.kill is not None and not 0 <= args.kill < args.n):
        raise UsageError("need n >= 4 and a valid --kill node id")
    failed = False
    for proto in protocols:
        out = Path(args.out_dir) / proto
        trace = run_cluster(args.n, proto, args.duration, out, delta=args.delta, kill=args.kill,
                            kill_at=args.kill_at)
        trace.write_jsonl(out / "trace.jsonl")
        commits = sum(1 for e in trace.events if e[0] == "commit")
        results = check_all(trace, TRANSPORT_CHECKS)
        ok = _print_results(proto, results)
        print(f"{proto}: {commits} commit events, checkers {'pass' if ok else 'FAIL'}")
        failed |= not ok
    return 1 if failed else 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    handlers = {"run": cmd_run, "check": cmd_check, "report": cmd_report, "cluster": cmd_cluster}
    try:
        return handlers[args.cmd](args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
