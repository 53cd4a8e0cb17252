"""Command-line entry point. Every subcommand echoes a JSON summary on stdout."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import build_corpus, load_dataset, save_dataset
from .evaluation import evaluate, extract_attention
from .model import load_checkpoint
from .plots import emit_plots, save_attention_image
from .siri import RunConfig, run_mode_ablation, run_multitask_siri, run_siri


def _echo(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def cmd_generate_data(args) -> dict:
    splits = build_corpus(args.seed, args.train, args.val, args.test, args.image_size, args.relation_ratio)
    if args.fraction < 1.0 and "train" in splits:
        splits["train"] = splits["train"].fraction(args.fraction)
    out = Path(args.out)
    summary = {}
    for name, ds in splits.items():
        save_dataset(ds, out / name)
        summary[name] = {"count": len(ds), "seed_range": [min(ds.seeds), max(ds.seeds) + 1],
                         "path": str(out / name)}
    return summary


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.mode:
        cfg = replace(cfg, mode=args.mode)
    if args.periods is not None:
        cfg = replace(cfg, schedule=replace(cfg.schedule, n_periods=args.periods))
    return cfg


def cmd_run_siri(args) -> dict:
    cfg = _run_config(args)
    out = Path(args.out) / cfg.run_id
    if args.multitask or cfg.multitask:
        hist = run_multitask_siri(cfg, queries=args.queries, out_dir=out)
    else:
        hist = run_siri(cfg, out_dir=out)
    return {"run_dir": str(out), "periods": [r.period for r in hist.records], "val_prec_at_05": hist.precs,
            "final": str(out / ("export" if hist.config.multitask else f"period_{hist.records[-1].period}"))}


def cmd_run_mode_ablation(args) -> dict:
    cfg = RunConfig.load(args.config)
    rows = run_mode_ablation(cfg, out_dir=Path(args.out) / f"{cfg.run_id}_ablation")
    return {"table": [{k: v for k, v in r.items() if k != "history"} for r in rows]}


def cmd_evaluate(args) -> dict:
    model, _ = load_checkpoint(args.ckpt)
    return evaluate(model, load_dataset(args.data)).to_json()


def cmd_export_attention(args) -> dict:
    model, _ = load_checkpoint(args.ckpt)
    data = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    maps = {}
    for i in (int(s) for s in args.indices.split(",") if s):
        amap = extract_attention(model, data[i])
        save_attention_image(amap.grid, out / f"attention_{i}.png", args.scale)
        np.save(out / f"attention_{i}.npy", amap.grid)
        maps[str(i)] = {"layer": amap.layer, "aggregation": amap.aggregation, "grid": amap.grid.tolist()}
    return maps


def cmd_plot(args) -> dict:
    return {"written": [str(p) for p in emit_plots(args.runs, args.out)]}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sirilab", description="Selective-retraining grounding lab")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write train/val/test splits")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train", type=int, default=2000)
    g.add_argument("--val", type=int, default=500)
    g.add_argument("--test", type=int, default=500)
    g.add_argument("--out", required=True)
    g.add_argument("--fraction", type=float, default=1.0)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--relation-ratio", type=float, default=0.5)
    g.set_defaults(func=cmd_generate_data)

    r = sub.add_parser("run-siri", help="initial training plus selective retraining")
    r.add_argument("--config", required=True)
    r.add_argument("--mode", choices=list("abcdefgh"))
    r.add_argument("--multitask", action="store_true")
    r.add_argument("--queries", default="LC", choices=["LL", "CC", "LC", "CL"])
    r.add_argument("--periods", type=int)
    r.add_argument("--out", default="runs")
    r.set_defaults(func=cmd_run_siri)

    a = sub.add_parser("run-mode-ablation", help="one retraining period per mode from a shared start")
    a.add_argument("--config", required=True)
    a.add_argument("--out", default="runs")
    a.set_defaults(func=cmd_run_mode_ablation)

    e = sub.add_parser("evaluate", help="Prec@0.5 of a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("export-attention", help="encoder cross-modal attention maps")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--indices", default="0")
    x.add_argument("--out", required=True)
    x.add_argument("--scale", type=int, default=8)
    x.set_defaults(func=cmd_export_attention)

    pl = sub.add_parser("plot", help="period and loss curves from run directories")
    pl.add_argument("--runs", nargs="+", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(message)s")
    _echo(args.func(args))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
