"""Command-line entry point wiring the toolkit together.

Subcommands: gen-data, train, eval, simulate, sweep, serve. Configuration
comes from a YAML file plus flag overrides (flags win). Exit codes: 0 on
success, 1 for usage errors, 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from .data import DatasetManifest, SyntheticSpec, generate_synthetic, load_pair
from .model import load_checkpoint
from .morph import OpeningConfig
from .pipeline import (
    ConfusionAccumulator,
    format_report_table,
    simulate_refinement,
    stage1,
    sweep_refinement,
)
from .training import config_from_dict, config_to_dict, fit

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="roadprompt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="render a synthetic road corpus")
    gen.add_argument("--out", required=True, type=Path)
    gen.add_argument("--count", type=int, default=500)
    gen.add_argument("--size", type=int, default=128)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--roads-min", type=int, default=1)
    gen.add_argument("--roads-max", type=int, default=3)
    gen.add_argument("--width-min", type=float, default=3.0)
    gen.add_argument("--width-max", type=float, default=6.0)

    train = sub.add_parser("train", help="fine-tune on an image/mask corpus")
    train.add_argument("--data", required=True, type=Path)
    train.add_argument("--out", required=True, type=Path)
    train.add_argument("--config", type=Path, help="YAML file of training-config fields")
    train.add_argument("--epochs", type=int)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--seed", type=int)
    train.add_argument("--lr-decoders", type=float)
    train.add_argument("--lr-prompted", type=float)
    train.add_argument("--target-val-iou", type=float)

    ev = sub.add_parser("eval", help="Stage-1 metrics of a checkpoint on a split")
    ev.add_argument("--checkpoint", required=True, type=Path)
    ev.add_argument("--data", required=True, type=Path)
    ev.add_argument("--split", default="test")
    ev.add_argument("--out", type=Path)
    ev.add_argument("--seed", type=int, default=0)

    sim = sub.add_parser("simulate", help="automated prompt-refinement report")
    sim.add_argument("--checkpoint", required=True, type=Path)
    sim.add_argument("--data", required=True, type=Path)
    sim.add_argument("--split", default="test")
    sim.add_argument("--config", type=Path, help="YAML with fnm_kernel/fpm_kernel/density/strategy")
    sim.add_argument("--fnm-kernel", type=int)
    sim.add_argument("--fpm-kernel", type=int)
    sim.add_argument("--density", type=int)
    sim.add_argument("--strategy", choices=("sum", "mfm"))
    sim.add_argument("--out", type=Path)
    sim.add_argument("--seed", type=int, default=0)

    sw = sub.add_parser("sweep", help="grid over opening kernels and densities")
    sw.add_argument("--checkpoint", required=True, type=Path)
    sw.add_argument("--data", required=True, type=Path)
    sw.add_argument("--split", default="test")
    sw.add_argument("--fnm-kernels", default="1,3,5,7")
    sw.add_argument("--densities", default="1,2,4")
    sw.add_argument("--fpm-kernel", type=int, default=7)
    sw.add_argument("--strategy", default="sum", choices=("sum", "mfm"))
    sw.add_argument("--out", type=Path)
    sw.add_argument("--seed", type=int, default=0)

    srv = sub.add_parser("serve", help="run the interactive refinement service")
    srv.add_argument("--checkpoint", required=True, type=Path)
    srv.add_argument("--host", default="127.0.0.1")
    srv.add_argument("--port", type=int, default=8008)
    srv.add_argument("--session-timeout", type=float, default=1800.0)
    srv.add_argument("--static-dir", type=Path, help="directory of built UI assets to serve at /")
    srv.add_argument("--seed", type=int, default=0)

    return parser


def _seed_everything(seed: int):
    np.random.seed(seed)
    torch.manual_seed(seed)


def _write_json(path: Path, payload):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n")


def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(
        count=args.count,
        size=args.size,
        seed=args.seed,
        roads_min=args.roads_min,
        roads_max=args.roads_max,
        width_min=args.width_min,
        width_max=args.width_max,
    )
    manifests = generate_synthetic(spec, args.out)
    sizes = {split: len(m) for split, m in manifests.items()}
    print(f"wrote {sum(sizes.values())} pairs to {args.out} {sizes}")
    return EXIT_OK


def cmd_train(args) -> int:
    base = {}
    if args.config:
        base = yaml.safe_load(args.config.read_text()) or {}
    cfg = config_from_dict(base)
    overrides = {
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "seed": args.seed,
        "lr_decoders": args.lr_decoders,
        "lr_prompted": args.lr_prompted,
        "target_val_iou": args.target_val_iou,
    }
    applied = {k: v for k, v in overrides.items() if v is not None}
    if applied:
        cfg = dataclasses.replace(cfg, **applied)
    _seed_everything(cfg.seed)
    train_m = DatasetManifest.scan(args.data, "train")
    val_m = DatasetManifest.scan(args.data, "val")
    best = fit(train_m, val_m, cfg, args.out)
    _write_json(args.out / "train_config.json", config_to_dict(cfg))
    print(f"best checkpoint: {best}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _seed_everything(args.seed)
    model, _, _ = load_checkpoint(args.checkpoint)
    manifest = DatasetManifest.scan(args.data, args.split)
    auto_acc, hr_acc = ConfusionAccumulator(), ConfusionAccumulator()
    for entry in manifest.entries:
        image, truth = load_pair(entry)
        auto_mask, hr_mask, _ = stage1(image, model)
        auto_acc.add(auto_mask, truth)
        hr_acc.add(hr_mask, truth)
    payload = {
        "split": args.split,
        "images": len(manifest),
        "auto": auto_acc.report().as_dict(),
        "highrecall": hr_acc.report().as_dict(),
    }
    print(json.dumps(payload, indent=2))
    if args.out:
        _write_json(args.out / "eval.json", payload)
    return EXIT_OK


def cmd_simulate(args) -> int:
    _seed_everything(args.seed)
    model, patch_size, _ = load_checkpoint(args.checkpoint)
    manifest = DatasetManifest.scan(args.data, args.split)
    base = yaml.safe_load(args.config.read_text()) or {} if args.config else {}
    opening = {
        "fnm_kernel": args.fnm_kernel if args.fnm_kernel is not None else base.get("fnm_kernel", 3),
        "fpm_kernel": args.fpm_kernel if args.fpm_kernel is not None else base.get("fpm_kernel", 7),
        "density": args.density if args.density is not None else base.get("density", 1),
    }
    strategy = args.strategy if args.strategy is not None else base.get("strategy", "sum")
    report = simulate_refinement(manifest, model, OpeningConfig(**opening), patch_size, strategy)
    print(format_report_table([report]))
    if args.out:
        _write_json(args.out / "simulate.json", report)
    return EXIT_OK


def _write_rows_csv(path: Path, rows: list[dict]):
    path.parent.mkdir(parents=True, exist_ok=True)
    flat = []
    for r in rows:
        row = {k: v for k, v in r.items() if k not in ("before", "after")}
        row.update({f"before_{k}": v for k, v in r["before"].items()})
        row.update({f"after_{k}": v for k, v in r["after"].items()})
        flat.append(row)
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(flat[0]))
        writer.writeheader()
        writer.writerows(flat)


def cmd_sweep(args) -> int:
    _seed_everything(args.seed)
    model, patch_size, _ = load_checkpoint(args.checkpoint)
    manifest = DatasetManifest.scan(args.data, args.split)
    kernels = tuple(int(k) for k in args.fnm_kernels.split(","))
    densities = tuple(int(d) for d in args.densities.split(","))
    rows = sweep_refinement(
        manifest, model, patch_size,
        fnm_kernels=kernels, densities=densities,
        fpm_kernel=args.fpm_kernel, strategy=args.strategy,
    )
    print(format_report_table(rows))
    if args.out:
        _write_json(args.out / "sweep.json", rows)
        _write_rows_csv(args.out / "sweep.csv", rows)
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    _seed_everything(args.seed)
    model, patch_size, _ = load_checkpoint(args.checkpoint)
    app = create_app(
        model,
        patch_size=patch_size,
        session_timeout=args.session_timeout,
        static_dir=args.static_dir,
    )
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "serve": cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # one-line cause, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
