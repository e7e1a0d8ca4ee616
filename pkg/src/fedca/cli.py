"""Command-line entry point: ``fedca {gen-data,run,eval,ablate}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Log verbosity comes from the ``FEDCA_LOG`` environment variable.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from .config import ConfigError, RunConfig, load_config
from .data import gen_blobs, load_csv_dataset, save_csv_dataset
from .evaluation import (ProbeConfig, cluster_stats, fine_tune_semisupervised, linear_probe,
                         pairwise_angle_stats)
from .experiment import append_metrics, run_ablation, run_experiment
from .models import CheckpointError, load_checkpoint

log = logging.getLogger("fedca")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def _positive_float(s: str) -> float:
    v = float(s)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {s}")
    return v


def _protocol(s: str) -> str:
    if s in ("linear", "angles", "clusters"):
        return s
    if s.startswith("semi@"):
        try:
            frac = float(s[5:])
        except ValueError:
            frac = -1.0
        if 0 < frac <= 1:
            return s
    raise argparse.ArgumentTypeError(f"protocol must be linear, semi@<fraction>, angles or clusters, got {s!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedca", description="Federated contrastive representation learning simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a Gaussian-blob dataset as CSV")
    g.add_argument("--classes", type=_positive_int, default=10)
    g.add_argument("--dim", type=_positive_int, default=32)
    g.add_argument("--per-class", type=_positive_int, default=200)
    g.add_argument("--spread", type=_positive_float, default=RunConfig.blob_spread)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="data.csv", help="output CSV path")

    for name, helptext in (("run", "federated training from a config file"),
                           ("ablate", "module ablation grid over both partition settings")):
        r = sub.add_parser(name, help=helptext)
        r.add_argument("--config", required=True)
        r.add_argument("--seed", type=int)
        r.add_argument("--workers", type=_positive_int)
        r.add_argument("--out", help="output directory (overrides out_dir)")
        if name == "ablate":
            r.add_argument("--seeds", type=_positive_int, default=3, help="seeds per cell")

    e = sub.add_parser("eval", help="evaluate saved checkpoints")
    e.add_argument("--checkpoint", action="append", required=True,
                   help="checkpoint JSON; pass twice for the angles protocol")
    e.add_argument("--data", required=True, help="labelled CSV dataset")
    e.add_argument("--protocol", type=_protocol, required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--epochs", type=_positive_int, default=100)
    e.add_argument("--use-projection", action="store_true", help="angles on z~ instead of h")
    e.add_argument("--out", default=".", help="directory holding metrics.csv")
    e.add_argument("--angles-json", help="also dump per-sample angles to this JSON file")
    return p


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.workers is not None:
        changes["workers"] = args.workers
    if args.out is not None:
        changes["out_dir"] = args.out
    try:
        return cfg.replace(**changes) if changes else cfg
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_gen_data(args) -> int:
    ds = gen_blobs(args.classes, args.dim, args.per_class, args.spread, args.seed)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True)
    save_csv_dataset(ds, out)
    print(f"wrote {len(ds)} rows x {ds.dim} features ({ds.class_count} classes) to {out}  digest={ds.digest[:16]}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _resolve(args)
    res = run_experiment(cfg)
    last = res.history[-1] if res.history else None
    acc = "n/a" if last is None or last.probe_acc is None else f"{last.probe_acc:.4f}"
    print(f"run {cfg.run_id()} method={cfg.method} setting={cfg.setting} rounds={len(res.history)} "
          f"probe_acc={acc} -> {cfg.out_dir}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    table = run_ablation(cfg, n_seeds=args.seeds)
    for row in table:
        print(f"{row['setting']:7s} {row['variant']:14s} {100 * row['mean_acc']:6.2f} +- {100 * row['sd_acc']:.2f}")
    print(f"ablation table -> {Path(cfg.out_dir) / 'ablation.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.protocol == "angles" and len(args.checkpoint) != 2:
        raise UsageError("the angles protocol needs exactly two --checkpoint arguments")
    if args.protocol != "angles" and len(args.checkpoint) != 1:
        raise UsageError(f"the {args.protocol} protocol takes exactly one --checkpoint")
    models = [load_checkpoint(p) for p in args.checkpoint]
    ds = load_csv_dataset(args.data)
    for params, _ in models:
        if params.spec.input_dim != ds.dim:
            raise CheckpointError(f"checkpoint expects {params.spec.input_dim} features, dataset has {ds.dim}")
    params, meta = models[0]
    pcfg = ProbeConfig(epochs=args.epochs)
    row = {"run_id": "eval", "method": args.protocol, "setting": "", "round": meta.get("round", ""),
           "seed": args.seed}
    if args.protocol == "linear":
        r = linear_probe(params, ds, pcfg, seed=args.seed)
        row["probe_acc"] = r.top1_accuracy
        summary = f"linear top1={r.top1_accuracy:.4f} train_rows={r.n_labeled}"
    elif args.protocol.startswith("semi@"):
        frac = float(args.protocol[5:])
        r = fine_tune_semisupervised(params, ds, frac, pcfg, seed=args.seed)
        row["probe_acc"] = r.top1_accuracy
        summary = f"semi@{frac:g} top1={r.top1_accuracy:.4f} labels={r.n_labeled}"
    elif args.protocol == "angles":
        stats = pairwise_angle_stats(params, models[1][0], ds.features, use_projection=args.use_projection)
        row["mean_angle_deg"] = stats.mean
        summary = (f"angles mean={stats.mean:.3f} median={stats.median:.3f} "
                   f"q1={stats.q1:.3f} q3={stats.q3:.3f} deg")
        if args.angles_json:
            Path(args.angles_json).write_text(json.dumps({**stats.summary(), "angles": stats.angles.tolist()}))
    else:
        cs = cluster_stats(params, ds, seed=args.seed)
        row["cluster_gap"] = cs.gap
        summary = f"clusters intra={cs.intra:.4f} inter={cs.inter:.4f} gap={cs.gap:.4f}"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    append_metrics(out / "metrics.csv", [row])
    print(summary)
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "run": cmd_run, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv: Optional[List[str]] = None) -> int:
    level = os.environ.get("FEDCA_LOG", "WARNING").upper()
    logging.basicConfig(level=level if isinstance(logging.getLevelName(level), int) else "WARNING",
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        parser.print_usage(sys.stderr)
        print(f"fedca: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        log.debug("failure", exc_info=True)
        print(f"fedca: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
