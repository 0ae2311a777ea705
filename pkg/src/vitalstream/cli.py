"""Command line: ``vitalstream run|export|gen``.

Exit codes: 0 success, 2 configuration error, 1 runtime failure. Log level
comes from VITALSTREAM_LOG (error, info or debug; default error).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .harness import ConfigError, KNOWN_METRICS, export_series, generate_streams, load_scenario, run_scenario
from .signals import dump_jsonl
from .store import StoreError, recover

log = logging.getLogger("vitalstream")

LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    level = os.environ.get("VITALSTREAM_LOG", "error").lower()
    logging.basicConfig(level=LEVELS.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def cmd_run(args) -> int:
    cfg = load_scenario(args.scenario, seed=args.seed)
    out = Path(args.out or cfg.out_dir or "out")
    if args.smoke_tcp:
        from .bus import Bus
        from .tcp import BusClient, BusServer

        server = BusServer(Bus()).start()
        client = BusClient(*server.address)
        try:
            report = run_scenario(cfg, out_dir=out, bus=client)
        finally:
            client.close()
            server.stop()
    else:
        report = run_scenario(cfg, out_dir=out)
    bw = report["bandwidth"]
    print(f"report: {out / 'report.json'}")
    print(f"bandwidth ratio {bw['ratio']} (predicted {bw['predicted_ratio']})")
    for wid, c in report["workers"].items():
        print(f"{wid}: stored {c['records_stored']} primaries, results {c['results_produced']}, alerts {c['alerts']}")
    return 0


def cmd_export(args) -> int:
    if args.metric not in KNOWN_METRICS:
        raise ConfigError(f"unknown metric {args.metric!r}; choose from {', '.join(KNOWN_METRICS)}")
    if not Path(args.store).exists():
        raise ConfigError(f"no store log at {args.store}")
    with recover(args.store) as store:
        n = export_series(store, args.worker, args.metric, args.from_ms, args.to_ms, args.format, args.out)
    print(f"wrote {n} rows to {args.out}")
    return 0


def cmd_gen(args) -> int:
    cfg = load_scenario(args.scenario, seed=args.seed)
    dump = Path(args.dump)
    dump.mkdir(parents=True, exist_ok=True)
    for spec in cfg.workers:
        st = generate_streams(spec, cfg)
        dump_jsonl(st.ecg, dump / f"{spec.id}.ecg.jsonl")
        dump_jsonl(st.accel, dump / f"{spec.id}.accel.jsonl")
        truth = {"r_peak_times": st.truth.r_peak_times,
                 "segments": [{"start_ms": a, "end_ms": b, "posture": p} for a, b, p in st.truth.segments]}
        (dump / f"{spec.id}.truth.json").write_text(json.dumps(truth))
        print(f"{spec.id}: {len(st.ecg)} ECG + {len(st.accel)} accel samples")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vitalstream", description="Edge/cloud vital-data pipeline simulator")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario end to end")
    r.add_argument("--scenario", required=True)
    r.add_argument("--out")
    r.add_argument("--seed", type=int)
    r.add_argument("--smoke-tcp", action="store_true", help="route the bus over a local TCP server")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("export", help="export a stored series")
    e.add_argument("--store", required=True)
    e.add_argument("--worker", required=True)
    e.add_argument("--metric", required=True)
    e.add_argument("--from", dest="from_ms", type=int, required=True)
    e.add_argument("--to", dest="to_ms", type=int, required=True)
    e.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_export)

    g = sub.add_parser("gen", help="dump the synthetic raw streams")
    g.add_argument("--scenario", required=True)
    g.add_argument("--dump", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen)
    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (StoreError, OSError, RuntimeError, ValueError) as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
