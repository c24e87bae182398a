"""Command-line entry point: ``fgr <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, load_config, save_config
from .data import gen_shape_texture, load_cifar_batches, load_splits, save_splits, split_train_val
from .freqfilter import filter_image
from .imageio import read_ppm, write_ppm
from .rectify import conflict_stats
from .training import (
    ABLATION_FIELDS,
    LOG_FIELDS,
    METRIC_FIELDS,
    evaluate,
    finetune_fgr,
    model_for,
    read_csv,
    run_ablation,
    sort_metrics,
    sweep,
    train_scratch,
    train_stage1,
    write_csv,
)

log = logging.getLogger("fgr")


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    if getattr(args, "data", None):
        cfg = cfg.with_(data_dir=str(args.data))
    return cfg


def _splits(cfg: TrainConfig) -> dict:
    if not cfg.data_dir:
        raise SystemExit("no data: pass --data <dir> or set data_dir in the config (see `fgr gen-data`)")
    splits = load_splits(cfg.data_dir)
    missing = {"train", "test_id"} - set(splits)
    if missing:
        raise SystemExit(f"{cfg.data_dir}: missing split(s) {sorted(missing)}")
    if "val" not in splits:
        splits["train"], splits["val"] = split_train_val(splits["train"], seed=cfg.seed)
    return splits


def _num_classes(splits: dict) -> int:
    return max(ds.num_classes for ds in splits.values())


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_eval(out: Path, result) -> None:
    write_csv(out / "metrics.csv", sort_metrics(result.metrics), METRIC_FIELDS)
    for split, diagram in result.reliability.items():
        diagram.to_csv(out / f"reliability_{split}.csv")
    (out / "temperature.json").write_text(json.dumps({"T_star": result.temperature, "fit_on": "val"}))


# ----------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    if args.cifar:
        train, val = split_train_val(load_cifar_batches(args.cifar), seed=args.seed)
        splits = {"train": train, "val": val}
        if args.cifar_test:
            splits["test_id"] = load_cifar_batches(args.cifar_test)
        echo = {"generator": "cifar10", "batches": [str(p) for p in args.cifar],
                "test_batches": [str(p) for p in args.cifar_test or []], "seed": args.seed}
    else:
        splits = gen_shape_texture(
            args.n, args.k, args.size, args.texture_strength, args.seed, n_val=args.n_val, n_test=args.n_test,
            texture_agreement=args.texture_agreement,
        )
        echo = {"generator": "shape-texture", "seed": args.seed, "k": args.k, "n": args.n, "n_val": args.n_val,
                "n_test": args.n_test, "size": args.size, "texture_strength": args.texture_strength,
                "texture_agreement": args.texture_agreement}
    save_splits(args.out, splits, {"seed": args.seed, "config": echo})
    print(" ".join(f"{k}={len(v)}" for k, v in splits.items()))
    return 0


def cmd_filter(args) -> int:
    write_ppm(args.output, filter_image(read_ppm(args.input), args.lam))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    splits = _splits(cfg)
    out = _out(args)
    save_config(cfg, out / "config.json")
    k = _num_classes(splits)
    model = model_for(cfg, splits["train"], k)
    if cfg.mode == "scratch":
        result = train_scratch(cfg, splits["train"], k)
        write_csv(out / "training_log.csv", result.log_rows, LOG_FIELDS)
        params = result.params
    else:
        params = train_stage1(cfg, splits["train"], k)
    save_checkpoint(out / "model.ckpt", model, params, {"stage": cfg.mode if cfg.mode == "scratch" else "stage1"})
    _write_eval(out, evaluate(cfg, params, splits))
    print(f"wrote {out / 'model.ckpt'}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _config(args)
    splits = _splits(cfg)
    out = _out(args)
    save_config(cfg, out / "config.json")
    model, params, _ = load_checkpoint(args.init)
    result = finetune_fgr(cfg, params, splits["train"], num_classes=model.num_classes)
    write_csv(out / "training_log.csv", result.log_rows, LOG_FIELDS)
    save_checkpoint(out / "model.ckpt", model, result.params, {"stage": "fgr"})
    _write_eval(out, evaluate(cfg, result.params, splits))
    stats = conflict_stats([(r["conflicted"], r["cosine"]) for r in result.log_rows])
    print(f"steps={stats.steps} conflict_fraction={stats.fraction:.4f} violations={result.violations}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    _, params, _ = load_checkpoint(args.ckpt)
    out = _out(args)
    result = evaluate(cfg, params, _splits(cfg), bins=args.bins)
    _write_eval(out, result)
    for row in sort_metrics(result.metrics):
        if row["corruption"] == "none":
            print(f"{row['split']}: acc={row['accuracy']:.4f} ece={row['ece']:.4f} ece_ts={row['ece_ts']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    rows = run_ablation(cfg, _splits(cfg))
    out = _out(args)
    write_csv(out / "ablation.csv", rows, ABLATION_FIELDS)
    for r in rows:
        print(f"{r['variant']:>13}: ece_id={r['ece_id']:.4f} ece_shift={r.get('ece_shift', float('nan')):.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    cast = int if args.param == "lambda" else float
    values = [cast(v) for v in args.values.split(",") if v.strip()]
    rows = sweep(cfg, args.param, values, _splits(cfg))
    out = _out(args)
    write_csv(out / f"sweep_{args.param}.csv", rows)
    print(f"wrote {len(rows)} rows to {out / f'sweep_{args.param}.csv'}")
    return 0


def cmd_report(args) -> int:
    run = Path(args.run)
    found = False
    if (run / "metrics.csv").exists():
        found = True
        rows = read_csv(run / "metrics.csv")
        clean = [r for r in rows if r["corruption"] == "none"]
        grid = [r for r in rows if r["corruption"] != "none"]
        for r in clean:
            print(f"{r['split']}: acc={float(r['accuracy']):.4f} ece={float(r['ece']):.4f} "
                  f"cece={float(r['cece']):.4f} ece_ts={float(r['ece_ts']):.4f} T*={float(r['T_star']):.2f}")
        if grid:
            print(f"corruptions ({len(grid)} rows): acc={np.mean([float(r['accuracy']) for r in grid]):.4f} "
                  f"ece={np.mean([float(r['ece']) for r in grid]):.4f} ece_ts={np.mean([float(r['ece_ts']) for r in grid]):.4f}")
    if (run / "training_log.csv").exists():
        found = True
        rows = read_csv(run / "training_log.csv")
        if rows:
            stats = conflict_stats([(int(r["conflicted"]), float(r["cosine"])) for r in rows])
            violations = sum(int(r["violation"]) for r in rows)
            print(f"training: steps={stats.steps} conflict_fraction={stats.fraction:.4f} "
                  f"mean_cosine={stats.mean_cosine:.4f} violations={violations}")
    if (run / "ablation.csv").exists():
        found = True
        for r in read_csv(run / "ablation.csv"):
            print(f"ablation {r['variant']}: " + " ".join(f"{k}={float(r[k]):.4f}" for k in ABLATION_FIELDS[3:] if r.get(k)))
    for path in sorted(run.glob("sweep_*.csv")):
        found = True
        print(path.name)
        for r in read_csv(path):
            print("  " + " ".join(f"{k}={v}" for k, v in r.items()))
    if not found:
        print(f"{run}: nothing to report", file=sys.stderr)
        return 1
    return 0


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fgr", description="Frequency filtering + gradient rectification for calibration.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the synthetic shape/texture splits")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=6000)
    g.add_argument("--n-val", type=int, default=600)
    g.add_argument("--n-test", type=int, default=2000)
    g.add_argument("--k", type=int, default=3)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--texture-strength", type=float, default=8.0)
    g.add_argument("--texture-agreement", type=float, default=0.8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--cifar", nargs="+", metavar="BATCH", help="ingest CIFAR-10 binary batches instead")
    g.add_argument("--cifar-test", nargs="+", metavar="BATCH", help="CIFAR-10 batches for test_id")
    g.set_defaults(func=cmd_gen_data)

    f = sub.add_parser("filter", help="low-pass filter one PPM image")
    f.add_argument("--input", required=True)
    f.add_argument("--lambda", dest="lam", type=int, required=True)
    f.add_argument("--output", required=True)
    f.set_defaults(func=cmd_filter)

    for name, func, help_ in (
        ("train", cmd_train, "stage-1 CE training (or a full scratch run)"),
        ("finetune-fgr", cmd_finetune, "stage-2 head fine-tuning from a checkpoint"),
        ("ablate", cmd_ablate, "filter-only / rectify-only / both"),
    ):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config")
        s.add_argument("--data")
        s.add_argument("--out", default="runs/" + name)
        s.set_defaults(func=func)
        if name == "finetune-fgr":
            s.add_argument("--init", required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data")
    e.add_argument("--config")
    e.add_argument("--bins", type=int, default=None)
    e.add_argument("--out", default="runs/eval")
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("sweep", help="one FGR run per value of gamma, rho or lambda")
    w.add_argument("--param", required=True, choices=("gamma", "rho", "lambda"))
    w.add_argument("--values", required=True, help="comma-separated")
    w.add_argument("--config")
    w.add_argument("--data")
    w.add_argument("--out", default="runs/sweep")
    w.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="summarize the CSVs in a run directory")
    r.add_argument("--run", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
