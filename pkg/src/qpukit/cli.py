"""Command-line entry point: ``qpukit validate|run|oracle|sweep``.

Exit codes: 0 success, 1 validation errors, 2 input/parse errors,
3 simulation limit exceeded.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .core import QpuError, Query
from .storage import ADS, PRICES
from .topology import ParseError, load_topology, validate
from .workload import (
    LimitExceeded,
    OracleError,
    WorkloadSpec,
    oracle_eval,
    param_points,
    ratio_points,
    run_experiment,
    sweep,
    sweep_csv,
)

EXIT_OK, EXIT_INVALID, EXIT_INPUT, EXIT_LIMIT = 0, 1, 2, 3

QUERY_FIELDS = {"tags", "limit", "order_by", "predicate"}


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _load_spec(path):
    try:
        return load_topology(path), None
    except ParseError as exc:
        return None, _fail(f"{path}: {exc}", EXIT_INPUT)
    except OSError as exc:
        return None, _fail(str(exc), EXIT_INPUT)


def _load_workload(args):
    try:
        workload = WorkloadSpec.load(args.workload) if args.workload else WorkloadSpec()
    except (OSError, ValueError, TypeError) as exc:
        return None, _fail(f"workload: {exc}", EXIT_INPUT)
    if args.seed is not None:
        workload = replace(workload, seed=args.seed)
    return workload, None


def cmd_validate(args) -> int:
    spec, err = _load_spec(args.topology)
    if err is not None:
        return err
    report = validate(spec)
    print(json.dumps(report.to_json(), indent=2) if args.json else report.to_text())
    return EXIT_OK if report.ok else EXIT_INVALID


def _summary(rows) -> str:
    header = ("topology", "q/s", "w/s", "p50", "p95", "lag", "stale", "xbytes", "cost", "hit")
    body = []
    for label, r in rows:
        body.append((
            label, f"{r.query_rate:g}", f"{r.update_rate:g}",
            _fmt(r.p50_ms), _fmt(r.p95_ms), _fmt(r.mean_lag_ms),
            f"{r.stale_result_fraction:.3f}", str(r.cross_site_bytes), f"{r.total_cost:g}",
            _fmt(r.cache_hit_rate),
        ))
    widths = [max(len(h), *(len(row[i]) for row in body)) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in body]
    return "\n".join(lines)


def _fmt(x) -> str:
    return "-" if x is None else f"{x:.3g}"


def cmd_run(args) -> int:
    spec, err = _load_spec(args.topology)
    if err is not None:
        return err
    report = validate(spec)
    if not report.ok:
        print(report.to_text())
        return EXIT_INVALID
    workload, err = _load_workload(args)
    if err is not None:
        return err
    try:
        result = run_experiment(spec, workload, trace=args.trace, limit_ms=args.limit_ms,
                                cold_cache=args.cold_cache)
    except LimitExceeded as exc:
        return _fail(str(exc), EXIT_LIMIT)
    except ValueError as exc:
        return _fail(str(exc), EXIT_INPUT)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(result.report.to_json())
    (out / "metrics.csv").write_text(result.report.to_csv())
    if args.trace:
        (out / "trace.txt").write_text("".join(line + "\n" for line in result.trace))
    print(_summary([(result.report.topology, result.report)]))
    return EXIT_OK


def _parse_oracle_query(doc) -> Query:
    if not isinstance(doc, dict):
        raise OracleError("query file must hold a JSON object")
    unknown = set(doc) - QUERY_FIELDS
    if unknown:
        raise OracleError(f"unknown query field(s) {sorted(unknown)}")
    order_by = doc.get("order_by", ["price", True] if "limit" in doc else None)
    q = Query("Ads", frozenset(doc.get("tags", [])), predicate=doc.get("predicate", ()),
              order_by=order_by, limit=doc.get("limit"))
    problems = q.problems()
    if problems:
        raise OracleError("; ".join(problems))
    return q


def _parse_data(text: str) -> dict:
    if not text.strip():
        return {}
    data = json.loads(text)
    if not isinstance(data, dict):
        raise ValueError("data file must hold a JSON object of tables")
    out = {}
    for name, table in (("Ads", ADS), ("Prices", PRICES)):
        rows = []
        for raw in data.get(name, []):
            raw = dict(raw)
            key = raw.pop(table.key_attribute)
            rows.append({table.key_attribute: str(key), **table.coerce(raw)})
        out[name] = rows
    unknown = set(data) - {"Ads", "Prices"}
    if unknown:
        raise ValueError(f"unknown table(s) {sorted(unknown)}")
    return out


def cmd_oracle(args) -> int:
    try:
        data = _parse_data(Path(args.data).read_text(encoding="utf-8"))
        q = _parse_oracle_query(json.loads(Path(args.query).read_text(encoding="utf-8")))
        result = oracle_eval(data, q)
    except (OSError, ValueError, KeyError, TypeError, QpuError) as exc:
        return _fail(str(exc), EXIT_INPUT)
    for key, price in result:
        print(f"{key} {price}")
    return EXIT_OK


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_sweep(args) -> int:
    specs = []
    for path in args.topology:
        spec, err = _load_spec(path)
        if err is not None:
            return err
        report = validate(spec)
        if not report.ok:
            print(f"{path}:\n{report.to_text()}")
            return EXIT_INVALID
        specs.append(spec)
    workload, err = _load_workload(args)
    if err is not None:
        return err
    try:
        if args.param:
            points = param_points(args.param, _floats(args.values))
        else:
            points = ratio_points(args.ratios.split(","), args.hold, args.base_rate)
    except ValueError as exc:
        return _fail(str(exc), EXIT_INPUT)
    try:
        rows = sweep(specs, workload, points, limit_ms=args.limit_ms, cold_cache=args.cold_cache)
    except LimitExceeded as exc:
        return _fail(str(exc), EXIT_LIMIT)
    except ValueError as exc:
        return _fail(str(exc), EXIT_INPUT)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(sweep_csv(rows))
    print(_summary([(f"{r.topology} {r.point.label}", r.report) for r in rows]))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qpukit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a topology file and print derived capabilities")
    p.add_argument("--topology", required=True)
    p.add_argument("--json", action="store_true", help="machine-readable report")
    p.set_defaults(func=cmd_validate)

    def run_flags(p):
        p.add_argument("--workload", help="workload spec JSON (defaults to the built-in spec)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default="out")
        p.add_argument("--limit-ms", type=float, default=None, help="virtual-time horizon")
        p.add_argument("--cold-cache", action="store_true", help="disable cache hits")

    p = sub.add_parser("run", help="run one experiment")
    p.add_argument("--topology", required=True)
    p.add_argument("--trace", action="store_true", help="also write the event trace")
    run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("oracle", help="brute-force answer of a query over a data file")
    p.add_argument("--data", required=True)
    p.add_argument("--query", required=True)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("sweep", help="compare topologies over a parameter grid")
    p.add_argument("--topology", action="append", required=True)
    p.add_argument("--ratios", default="100:1,10:1,1:1,1:10", help="query:write ratios")
    p.add_argument("--hold", choices=("query", "update"), default="query",
                   help="which rate stays at --base-rate")
    p.add_argument("--base-rate", type=float, default=10.0)
    p.add_argument("--param", help="sweep a workload field instead of ratios")
    p.add_argument("--values", default="", help="comma-separated values for --param")
    run_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
