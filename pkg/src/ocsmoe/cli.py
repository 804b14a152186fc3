"""Command-line experiment runner.

    ocsmoe run --preset smoke
    ocsmoe run --config exp.yaml --sweep bandwidth=100,200,400,800 --out-dir out/
    ocsmoe run --preset fig24 --sweep reconfig_delay=1us,1ms,25ms,1000ms,10s
    ocsmoe cost --servers 16,32,64,128 --bandwidth 400
    ocsmoe presets
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .costmodel import ComponentPriceTable, breakdowns_csv, cost_fabric
from .experiment import RunResult, apply_override, config_hash, run_experiment
from .fabric import ClusterSpec, ConfigError, FabricError, FabricKind, cluster_from_dict, load_config_file
from .presets import PRESETS, preset
from .simcore.engine import SimulationError

log = logging.getLogger("ocsmoe")

SCHEMA_VERSION = 1
COLUMNS = ["run_id", "fabric", "bandwidth", "servers", "policy", "seed", "iteration_time_s", "a2a_fraction",
           "reconfig_charge_s", "cost_total", "perf_per_dollar"]


def parse_sweep(items: list[str]) -> list[tuple[str, list[str]]]:
    out = []
    for item in items or []:
        key, sep, values = item.partition("=")
        if not sep or not key or not values:
            raise ConfigError(f"--sweep expects key=v1,v2,... (got {item!r})")
        out.append((key.strip(), [v.strip() for v in values.split(",") if v.strip()]))
    return out


def expand(config: dict, sweeps: list[tuple[str, list[str]]]) -> list[tuple[str, dict]]:
    """Cartesian product of the sweep axes in command-line order; ids follow that order."""
    if not sweeps:
        return [("run0000", config)]
    points = []
    keys = [k for k, _ in sweeps]
    for idx, combo in enumerate(itertools.product(*(v for _, v in sweeps))):
        cfg = config
        for k, v in zip(keys, combo):
            cfg = apply_override(cfg, k, v)
        points.append((f"run{idx:04d}", cfg))
    return points


def _run_point(args: tuple[str, dict, bool]) -> tuple[str, dict, str, str]:
    run_id, cfg, events = args
    res: RunResult = run_experiment(cfg, record_events=events)
    return run_id, res.row(run_id), res.report.to_json(include_tasks=False), (
        res.report.events_jsonl() if events else "")


def _rows_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def _base_config(args) -> dict:
    if args.config:
        cfg = load_config_file(args.config)
    elif args.preset:
        cfg = preset(args.preset)
    else:
        raise ConfigError("give --config or --preset")
    if args.seed is not None:
        cfg = apply_override(cfg, "seed", args.seed)
    if args.policy:
        cfg = apply_override(cfg, "policy", args.policy)
    if args.fabric:
        cfg = apply_override(cfg, "fabric", args.fabric)
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value (got {item!r})")
        cfg = apply_override(cfg, key.strip(), value.strip())
    return cfg


def cmd_run(args) -> int:
    cfg = _base_config(args)
    preset_sweep = cfg.pop("sweep", {})
    sweeps = parse_sweep(args.sweep)
    if args.preset and not args.config and not args.sweep:
        sweeps = [(k, [str(x) for x in v]) for k, v in preset_sweep.items()]
    return execute(cfg, sweeps, args.out_dir, args.format, args.jobs, args.events)


def cmd_replay(args) -> int:
    """Re-run the experiment recorded in a manifest."""
    manifest = json.loads(Path(args.manifest).read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"manifest schema {manifest.get('schema_version')} is not {SCHEMA_VERSION}")
    sweeps = [(k, list(v)) for k, v in manifest.get("sweep", [])]
    return execute(manifest["config"], sweeps, args.out_dir, args.format, args.jobs, False)


def execute(cfg: dict, sweeps: list[tuple[str, list[str]]], out_dir: str | None, fmt: str = "csv",
            jobs: int = 1, events: bool = False) -> int:
    cfg.pop("_doc", None)
    points = expand(cfg, sweeps)
    work = [(rid, c, events) for rid, c in points]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_run_point, work))
    else:
        results = [_run_point(j) for j in work]

    rows = [r[1] for r in results]
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.csv").write_text(_rows_csv(rows))
        reports = {rid: json.loads(rep) for rid, _, rep, _ in results}
        (out / "reports.json").write_text(json.dumps(reports, indent=2, sort_keys=True) + "\n")
        costs = [cost_fabric(FabricKind.parse(str(c.get("fabric", "mixnet"))), cluster_from_dict(c["cluster"]),
                             _prices(c)) for _, c in points]
        (out / "costs.csv").write_text(breakdowns_csv(costs))
        if events:
            for rid, _, _, ev in results:
                (out / f"{rid}.events.jsonl").write_text(ev)
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "tool_version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "config": cfg,
            "config_hash": config_hash(cfg),
            "sweep": [[k, v] for k, v in sweeps],
            "runs": {rid: config_hash(c) for rid, c in points},
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    if fmt == "json":
        sys.stdout.write(json.dumps(rows, indent=2) + "\n")
    else:
        sys.stdout.write(_rows_csv(rows))
    return 0


def _prices(cfg: dict) -> ComponentPriceTable:
    return ComponentPriceTable.from_dict(cfg["prices"]) if cfg.get("prices") else ComponentPriceTable()


def cmd_cost(args) -> int:
    prices = ComponentPriceTable.load(args.prices) if args.prices else ComponentPriceTable()
    fabrics = [FabricKind.parse(f) for f in args.fabrics.split(",")]
    items = []
    for n in (int(x) for x in args.servers.split(",")):
        for bw in (float(x) for x in args.bandwidth.split(",")):
            cl = ClusterSpec(n, nic_bandwidth=bw * 1e9, region_size=min(n, args.region_size))
            items.extend(cost_fabric(f, cl, prices) for f in fabrics)
    if args.format == "json":
        sys.stdout.write(json.dumps([b.to_dict() for b in items], indent=2) + "\n")
    else:
        sys.stdout.write(breakdowns_csv(items))
    return 0


def cmd_presets(args) -> int:
    for name in sorted(PRESETS):
        doc = PRESETS[name].get("_doc", "")
        print(f"{name:8s} {doc}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ocsmoe", description="Flow-level MoE training simulator over hybrid OCS/EPS fabrics")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment or a sweep")
    r.add_argument("--config", help="YAML or JSON experiment config")
    r.add_argument("--preset", choices=sorted(PRESETS))
    r.add_argument("--sweep", action="append", metavar="KEY=V1,V2", help="sweep axis (repeatable)")
    r.add_argument("--set", action="append", metavar="KEY=V", help="single override (repeatable)")
    r.add_argument("--seed", type=int)
    r.add_argument("--policy", choices=["block", "reuse", "predict"])
    r.add_argument("--fabric", help="fattree, oversub[:ratio], rail, topoopt or mixnet")
    r.add_argument("--out-dir")
    r.add_argument("--format", choices=["csv", "json"], default="csv")
    r.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
    r.add_argument("--events", action="store_true", help="also write a JSON-lines event trace per run")
    r.set_defaults(func=cmd_run)

    m = sub.add_parser("replay", help="re-run the experiment recorded in a manifest")
    m.add_argument("manifest")
    m.add_argument("--out-dir")
    m.add_argument("--format", choices=["csv", "json"], default="csv")
    m.add_argument("--jobs", type=int, default=1)
    m.set_defaults(func=cmd_replay)

    c = sub.add_parser("cost", help="networking cost breakdowns")
    c.add_argument("--servers", default="16,32,64,128")
    c.add_argument("--bandwidth", default="100,200,400,800", help="Gb/s values")
    c.add_argument("--fabrics", default="fattree,rail,oversub:3,topoopt,mixnet")
    c.add_argument("--region-size", type=int, default=64)
    c.add_argument("--prices", help="price table file")
    c.add_argument("--format", choices=["csv", "json"], default="csv")
    c.set_defaults(func=cmd_cost)

    s = sub.add_parser("presets", help="list built-in presets")
    s.set_defaults(func=cmd_presets)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SimulationError, FabricError) as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
