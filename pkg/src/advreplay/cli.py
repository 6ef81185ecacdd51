"""Command-line harness.

Subcommands: ``run`` (single config), ``bench`` (three-seed average),
``decompose`` (offline store compression), ``report`` (storage accounting),
``sweep`` (attack-parameter grid).  Any config key can be overridden with
``--set dotted.path=value``; the output root may also come from the
ADVREPLAY_OUT environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import calib as C
from . import config as CFG
from . import runner
from .errors import EngineError

BENCH_SEED_PAIRS = ((1993, 0), (2993, 1000), (3993, 2000))  # (class_shuffle, randomness)


def _out_dir(args, config) -> str:
    if args.out is not None:
        return args.out
    env = os.environ.get("ADVREPLAY_OUT")
    if env:
        return env
    return config["output"]["dir"]


def _load(args) -> dict:
    return CFG.load_config(args.config, args.set or ())


def cmd_run(args) -> int:
    config = _load(args)
    result = runner.run_benchmark(config, out_dir=_out_dir(args, config))
    print(f"run dir: {result.run_dir}")
    for name, row in result.summary.items():
        print(f"{name:<12} A_inc={row['A_inc']:.4f}  A_last={row['A_last']:.4f}")
    return 0


def cmd_bench(args) -> int:
    config = _load(args)
    out_root = Path(_out_dir(args, config))
    rows = {}
    for shuffle_seed, seed in BENCH_SEED_PAIRS:
        run_cfg = CFG.apply_override(config, f"seeds.class_shuffle={shuffle_seed}")
        run_cfg = CFG.apply_override(run_cfg, f"seeds.randomness={seed}")
        run_cfg = CFG.apply_override(run_cfg, f'output.tag="bench_s{seed}_c{shuffle_seed}"')
        result = runner.run_benchmark(run_cfg, out_dir=out_root)
        for name, summary in result.summary.items():
            rows.setdefault(name, []).append(summary)

    out_root.mkdir(parents=True, exist_ok=True)
    table_path = out_root / "bench_summary.csv"
    with table_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["classifier", "metric", "mean", "std"])
        for name, summaries in rows.items():
            for metric in ("A_inc", "A_last"):
                values = np.array([s[metric] for s in summaries])
                writer.writerow([name, metric, repr(float(values.mean())),
                                 repr(float(values.std()))])
                print(f"{name:<12} {metric}: {values.mean():.4f} ± {values.std():.4f}")
    print(f"bench summary: {table_path}")
    return 0


def cmd_decompose(args) -> int:
    store = C.load_store(args.store)
    before = sum(e.covariance().size for e in store.entries.values())
    store.compress_all(args.k)
    after = sum(
        e.svd[0].size + e.svd[1].size + e.svd[2].size for e in store.entries.values())
    C.save_store(store, args.output)
    print(f"compressed {len(store.entries)} classes to rank {args.k}: "
          f"{before} -> {after} scalars ({100.0 * after / before:.1f}%)")
    return 0


def cmd_report(args) -> int:
    config = _load(args)
    ds = config["dataset"]
    sizes = runner.storage_report(
        n_old_classes=args.old_classes if args.old_classes is not None else (
            ds["n_classes"] - ds["n_classes"] // config["tasks"]["count"]),
        feature_dim=args.feature_dim or config["model"]["feature_dim"],
        n_candidates_per_class=config["replay"]["k"],
        n_task_samples=args.task_samples if args.task_samples is not None else (
            ds["n_train"] * (ds["n_classes"] // config["tasks"]["count"])),
        svd_k=config["covariance"]["svd_k"],
        float_bytes=args.float_bytes,
        index_bytes=args.index_bytes,
    )
    print(runner.format_storage_table(sizes))
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(sizes), encoding="utf-8")
    return 0


def cmd_sweep(args) -> int:
    config = _load(args)
    out_root = Path(_out_dir(args, config))
    out_root.mkdir(parents=True, exist_ok=True)
    alphas = [float(v) for v in args.alpha.split(",")] if args.alpha else [
        config["attack"]["alpha"]]
    loops = [int(v) for v in args.n_attack.split(",")] if args.n_attack else [
        config["attack"]["n_attack"]]
    table_path = out_root / "sweep.csv"
    with table_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha", "n_attack", "classifier", "A_inc", "A_last"])
        for alpha in alphas:
            for n_attack in loops:
                cfg = CFG.apply_override(config, f"attack.alpha={alpha}")
                cfg = CFG.apply_override(cfg, f"attack.n_attack={n_attack}")
                cfg = CFG.apply_override(
                    cfg, f'output.tag="sweep_a{alpha:g}_n{n_attack}"')
                result = runner.run_benchmark(cfg, out_dir=out_root)
                for name, summary in result.summary.items():
                    writer.writerow([alpha, n_attack, name,
                                     repr(summary["A_inc"]), repr(summary["A_last"])])
                    print(f"alpha={alpha:<6g} n={n_attack:<3d} {name:<12} "
                          f"A_inc={summary['A_inc']:.4f} A_last={summary['A_last']:.4f}")
    print(f"sweep table: {table_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advreplay",
                                     description="incremental-learning benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--out", type=str, default=None,
                       help="output root (default: $ADVREPLAY_OUT or config output.dir)")

    p_run = sub.add_parser("run", help="execute a single seeded run")
    common(p_run)
    p_run.set_defaults(fn=cmd_run)

    p_bench = sub.add_parser("bench", help="three-seed benchmark with mean/std")
    common(p_bench)
    p_bench.set_defaults(fn=cmd_bench)

    p_dec = sub.add_parser("decompose", help="compress a stored prototype store")
    p_dec.add_argument("store", type=str, help="path to store.json")
    p_dec.add_argument("--k", type=int, required=True, help="target rank")
    p_dec.add_argument("--output", type=str, required=True, help="output store path")
    p_dec.set_defaults(fn=cmd_decompose)

    p_rep = sub.add_parser("report", help="storage accounting table")
    common(p_rep)
    p_rep.add_argument("--old-classes", type=int, default=None)
    p_rep.add_argument("--feature-dim", type=int, default=None)
    p_rep.add_argument("--task-samples", type=int, default=None)
    p_rep.add_argument("--float-bytes", type=int, default=8)
    p_rep.add_argument("--index-bytes", type=int, default=4)
    p_rep.add_argument("--json-out", type=str, default=None)
    p_rep.set_defaults(fn=cmd_report)

    p_sweep = sub.add_parser("sweep", help="attack magnitude/iteration grid")
    common(p_sweep)
    p_sweep.add_argument("--alpha", type=str, default=None, help="comma list, e.g. 8,16,32,64")
    p_sweep.add_argument("--n-attack", type=str, default=None, help="comma list, e.g. 1,2,4,6")
    p_sweep.set_defaults(fn=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except EngineError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
