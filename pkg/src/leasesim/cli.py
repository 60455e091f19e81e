"""Command-line entry point: ``leasesim {run,compare,sweep,report}``.

Exit codes: 0 clean, 1 usage / input error, 2 collision or invariant violation.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import engine, network, report

EXIT_OK, EXIT_USAGE, EXIT_UNSAFE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage, which here means "unsafe run"
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_list(text: str, kind=float) -> list:
    """``"1..20"`` (inclusive), ``"10..60:10"`` (with step) or ``"1,2,5"``."""
    text = text.strip()
    if not text:
        return []
    try:
        if ".." in text:
            lo, rest = text.split("..", 1)
            hi, _, step = rest.partition(":")
            lo, hi = kind(lo), kind(hi)
            step = kind(step) if step else kind(1)
            if step <= 0:
                raise UsageError(f"bad step in {text!r}")
            n = int(np.floor((hi - lo) / step + 1e-9)) + 1
            return [kind(lo + i * step) for i in range(max(n, 0))]
        return [kind(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"cannot parse list {text!r}") from None


def _seeds(args) -> List[int]:
    if getattr(args, "seeds", None) is not None:
        seeds = parse_list(args.seeds, int)
    elif getattr(args, "seed", None) is not None:
        seeds = [args.seed]
    else:
        seeds = [0]
    if not seeds:
        raise UsageError("empty seed list")
    return seeds


def _scenario(args):
    if not args.scenario:
        raise UsageError("--scenario is required")
    sc = engine.load_scenario(args.scenario)
    kw = {}
    if getattr(args, "algo", None):
        kw["algorithm"] = args.algo
    if getattr(args, "no_v2v", None):
        kw["no_v2v"] = tuple(x.strip() for x in args.no_v2v.split(",") if x.strip())
    return sc.with_overrides(**kw) if kw else sc


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(engine._clean(obj), indent=2, sort_keys=True) + "\n")


def cmd_run(args) -> int:
    sc = _scenario(args)
    out = Path(args.out_dir)
    unsafe = False
    for seed in _seeds(args):
        result = engine.run(sc, seed=seed, trace=bool(args.trace), debug_invariants=args.debug_invariants)
        m = result.metrics
        stem = f"{sc.name}-{sc.algorithm}-seed{seed}"
        _write_json(out / f"{stem}.metrics.json", m)
        if args.trace:
            tpath = Path(args.trace) if isinstance(args.trace, str) else out / f"{stem}.trace.jsonl"
            tpath.parent.mkdir(parents=True, exist_ok=True)
            tpath.write_text("".join(line + "\n" for line in result.trace))
        bad = m["n_collisions"] > 0 or bool(m["violations"])
        unsafe |= bad
        t = m["total_completion_time"]
        print(f"{stem}: completion={'incomplete' if t is None else f'{t:.3f}s'} "
              f"collisions={m['n_collisions']} violations={len(m['violations'])}"
              f"{' ABORTED' if m['aborted'] else ''}")
    return EXIT_UNSAFE if unsafe else EXIT_OK


def cmd_compare(args) -> int:
    sc = _scenario(args)
    seeds = _seeds(args)
    res = engine.compare_algorithms(sc, seeds, workers=args.workers)
    _write_json(Path(args.out_dir) / f"{sc.name}-compare.json", res)
    print(f"{'seed':>6}{'lease [s]':>12}{'lock [s]':>12}{'ratio':>8}")
    for r in res["rows"]:
        fmt = lambda v, spec: "-" if v is None else format(v, spec)  # noqa: E731
        print(f"{r['seed']:>6}{fmt(r['lease_time'], '.3f'):>12}{fmt(r['lock_time'], '.3f'):>12}"
              f"{fmt(r['ratio'], '.3f'):>8}")
    print(f"mean lease {res['mean_lease']}  mean lock {res['mean_lock']}  ratio {res['ratio']}")
    print(f"collisions: lease {res['lease_collisions']}  lock {res['lock_collisions']}  flagged seeds {res['flagged']}")
    return EXIT_UNSAFE if res["lease_collisions"] else EXIT_OK


def bandwidth_rows(counts, params: network.NetParams) -> List[dict]:
    return [{"n_vehicles": int(n), "aggregate_bandwidth": network.aggregate_bandwidth(int(n), params),
             "capacity": params.capacity,
             "fits": network.aggregate_bandwidth(int(n), params) <= params.capacity} for n in counts]


def _set_param(sc, name: str, value):
    group, _, field = name.partition(".")
    if not field:
        return sc.with_overrides(**{group: value})
    if group not in ("net", "scheduler"):
        raise UsageError(f"cannot sweep {name!r}")
    sub = getattr(sc, group)
    if field not in sub.__dataclass_fields__:
        raise UsageError(f"unknown parameter {name!r}")
    return sc.with_overrides(**{group: replace(sub, **{field: value})})


def cmd_sweep(args) -> int:
    values = parse_list(args.values, float)
    if not values:
        raise UsageError("empty value list")
    out = Path(args.out_dir)
    if args.param == "n_vehicles":
        params = network.NetParams(msg_size=args.msg_size, update_period=args.update_period,
                                   capacity=args.capacity, overhead=args.overhead)
        rows = bandwidth_rows([int(v) for v in values], params)
        _write_json(out / "sweep-n_vehicles.json", {"param": "n_vehicles", "rows": rows})
        print(f"{'vehicles':>9}{'aggregate [B/s]':>18}{'fits':>6}")
        for r in rows:
            print(f"{r['n_vehicles']:>9}{r['aggregate_bandwidth']:>18.0f}{'yes' if r['fits'] else 'no':>6}")
        return EXIT_OK

    base = _scenario(args)
    seeds = _seeds(args)
    rows, unsafe = [], False
    for v in values:
        sc = _set_param(base, args.param, v)
        ms = [engine.run(sc, seed=s, trace=False).metrics for s in seeds]
        times = [m["total_completion_time"] for m in ms if m["total_completion_time"] is not None]
        row = {args.param: v, "seeds": len(seeds),
               "mean_completion": float(np.mean(times)) if times else None,
               "complete": sum(m["complete"] for m in ms),
               "collisions": sum(m["n_collisions"] for m in ms),
               "max_staleness": max(m["max_staleness"] for m in ms)}
        unsafe |= row["collisions"] > 0
        rows.append(row)
        print(json.dumps(engine._clean(row), sort_keys=True))
    _write_json(out / f"sweep-{args.param}.json", {"param": args.param, "scenario": base.name, "rows": rows})
    return EXIT_UNSAFE if unsafe else EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.trace)
    if not path.is_file():
        raise FileNotFoundError(f"no trace file {str(path)!r}")
    records = engine.read_trace(path)
    stem = path.name[: -len(".trace.jsonl")] if path.name.endswith(".trace.jsonl") else path.stem
    paths = report.render_report(records, args.out_dir, stem)
    print(Path(paths["summary"]).read_text(), end="")
    for k in ("time_space", "gantt"):
        print(f"wrote {paths[k]}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="leasesim", description="Lease-based intersection coordination simulator.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, seeds: bool):
        sp.add_argument("--scenario", help="bundled name (experiment1..4) or JSON file")
        if seeds:
            sp.add_argument("--seeds", help="seed list: 1..20 or 1,2,3")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir", default="out")
        sp.add_argument("--no-v2v", help="comma-separated vehicle ids that do not communicate")

    r = sub.add_parser("run", help="simulate one scenario")
    common(r, seeds=True)
    r.add_argument("--algo", choices=engine.ALGORITHMS)
    r.add_argument("--trace", nargs="?", const=True, default=False,
                   help="write the JSONL trace (optionally to the given path)")
    r.add_argument("--debug-invariants", action="store_true", help="abort on the first invariant violation")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="lease vs lock over seeds")
    common(c, seeds=True)
    c.add_argument("--workers", type=int, default=1)
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("sweep", help="one row per grid value")
    common(s, seeds=True)
    s.add_argument("--algo", choices=engine.ALGORITHMS)
    s.add_argument("--param", default="n_vehicles",
                   help="n_vehicles (bandwidth table) or a scenario field such as scheduler.margin")
    s.add_argument("--values", default="10..60:10")
    s.add_argument("--msg-size", type=float, default=network.NetParams().msg_size)
    s.add_argument("--update-period", type=float, default=network.NetParams().update_period)
    s.add_argument("--capacity", type=float, default=network.NetParams().capacity)
    s.add_argument("--overhead", type=float, default=0.0)
    s.set_defaults(func=cmd_sweep)

    rp = sub.add_parser("report", help="plots and tables from a trace")
    rp.add_argument("--trace", required=True)
    rp.add_argument("--out-dir", default="out")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, engine.ScenarioError, FileNotFoundError, ValueError) as exc:
        print(f"leasesim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
