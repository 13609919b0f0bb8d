"""Command line front end: run / sweep / speed over a YAML config."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import (
    SWEEP_AXES,
    ConfigError,
    ExperimentConfig,
    run_repeats,
    run_speed_test,
    run_sweep,
)


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_yaml(args.config)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.mode is not None:
        cfg.swap.mode = args.mode
    cfg.validate()
    return cfg


def _out_dir(args, cfg: ExperimentConfig, suffix: str) -> Path:
    if args.out:
        return Path(args.out)
    base = cfg.output or "runs"
    return Path(base) / f"{suffix}-{cfg.config_hash()}"


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tieredreplay", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", help="YAML experiment config")
    common.add_argument("--seed", type=int, default=None, help="override with a single seed")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--mode", choices=["sync", "async", "off"], default=None, help="override swap mode")

    sub.add_parser("run", parents=[common], help="run the experiment for every configured seed")

    p_sweep = sub.add_parser("sweep", parents=[common], help="re-run while varying one axis")
    p_sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p_sweep.add_argument("--values", required=True, help="comma-separated axis values")

    p_speed = sub.add_parser("speed", parents=[common], help="sync/async/off timing comparison")
    p_speed.add_argument("--batches", type=int, default=200)
    p_speed.add_argument("--items-per-batch", type=int, default=10)
    p_speed.add_argument("--compute-delay-ms", type=float, default=None,
                         help="override the config's simulated per-batch compute")
    p_speed.add_argument("--latency-ms", type=float, default=None,
                         help="override the config's storage read latency")

    args = parser.parse_args(argv)
    try:
        cfg = _load(args)
        if args.command == "run":
            out = _out_dir(args, cfg, "run")
            results = run_repeats(cfg, out_dir=out)
            summary = json.loads((out / "summary.json").read_text())
            print(f"wrote {out}")
            print(f"final accuracy  {summary['final_accuracy_mean']:.2f} ± {summary['final_accuracy_std']:.2f}")
            print(f"final forgetting {summary['final_forgetting_mean']:.2f} ± {summary['final_forgetting_std']:.2f}")
            if any(not r.audit["ok"] for r in results):
                print("WARNING: conservation audit failed", file=sys.stderr)
                return 1
        elif args.command == "sweep":
            values = [v.strip() for v in args.values.split(",") if v.strip()]
            out = _out_dir(args, cfg, f"sweep-{args.axis}")
            sweep = run_sweep(cfg, args.axis, values, out_dir=out)
            print(f"wrote {out}")
            for row in sweep["table"]:
                print(f"{args.axis}={row['value']}: acc {row['final_accuracy_mean']:.2f} ± {row['final_accuracy_std']:.2f}")
        else:
            if args.compute_delay_ms is not None:
                cfg.compute_delay_ms = args.compute_delay_ms
            if args.latency_ms is not None:
                cfg.storage.latency_ms = args.latency_ms
            out = _out_dir(args, cfg, "speed")
            rows = run_speed_test(cfg, batches=args.batches, items_per_batch=args.items_per_batch, out_dir=out)
            print(f"wrote {out}")
            for row in rows:
                overhead = row.get("overhead_pct")
                extra = f"  overhead {overhead:+.1f}%" if overhead is not None else ""
                print(f"{row['mode']:>5}: {row['per_batch_ms']:.2f} ms/batch{extra}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
