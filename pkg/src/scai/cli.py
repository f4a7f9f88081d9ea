"""Command-line front end.

Subcommands: gen, train, eval, curves, heatmap, simulate, sweep.
Every command takes one master seed and writes byte-identical output
files on reruns. The output directory defaults to the SCAI_OUTPUT_DIR
environment variable, then to the current directory; an explicit
``--out`` always wins. Usage and input errors exit with status 2.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .dataset import (DatasetError, build_dataset, default_recipes, load_dataset,
                      save_dataset, save_recipes, split_dataset)
from .network import (ScaiConfig, build_model, forward_all_outcomes, forward_to_exit,
                      load_checkpoint, save_checkpoint, static_cost_table,
                      write_cost_table_csv)
from .policy import (accuracy_vs_budget_curve, load_thresholds, plan_budget,
                     save_thresholds, write_budget_curve_csv)
from .simulate import latency_report, load_scenario, simulate, write_sim_csv
from .training import hyper_sweep, train, write_report_csv, write_sweep_csv


class UsageError(ValueError):
    pass


def _out_dir(args) -> str:
    out = args.out or os.environ.get("SCAI_OUTPUT_DIR") or "."
    os.makedirs(out, exist_ok=True)
    return out


def _int_tuple(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",")]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _load_split(data_dir: str, split: str):
    path = os.path.join(data_dir, f"{split}.csv")
    if not os.path.exists(path):
        raise UsageError(f"missing dataset split file {path}; run 'scai gen' first")
    return load_dataset(path)


def _config_from_args(args) -> ScaiConfig:
    units = _int_tuple(args.units)
    channels = _int_tuple(args.channels)
    if len(units) != len(channels):
        raise UsageError(f"--units has {len(units)} entries but --channels has {len(channels)}")
    cfg = ScaiConfig(
        blocks=len(units),
        units_per_block=units,
        channels=channels,
        input_width=args.width,
        classes=args.classes,
        epsilon=args.epsilon,
        gamma=args.gamma,
        pa_enabled=not args.no_pa,
        distill_enabled=not args.no_distill,
        intermediate_hard_labels=args.hard_intermediates,
        seed=args.seed,
        lr=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        patience=args.patience,
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


# -- subcommands -------------------------------------------------------------


def _cmd_gen(args) -> int:
    out = _out_dir(args)
    recipes = default_recipes(width=args.width)
    curves = build_dataset(recipes, per_class=args.per_class, seed=args.seed,
                           width=args.width)
    train_c, valid_c, test_c = split_dataset(curves, seed=args.seed)
    save_dataset(curves, os.path.join(out, "dataset.csv"))
    save_dataset(train_c, os.path.join(out, "train.csv"))
    save_dataset(valid_c, os.path.join(out, "valid.csv"))
    save_dataset(test_c, os.path.join(out, "test.csv"))
    save_recipes(recipes, os.path.join(out, "recipes.json"))
    print(f"wrote {len(curves)} curves ({len(train_c)}/{len(valid_c)}/{len(test_c)} "
          f"train/valid/test) to {out}")
    return 0


def _cmd_train(args) -> int:
    out = _out_dir(args)
    cfg = _config_from_args(args)
    train_c = _load_split(args.data, "train")
    valid_c = _load_split(args.data, "valid")
    for curve in train_c[:1] + valid_c[:1]:
        if curve.values.shape[0] != cfg.input_width:
            raise UsageError(f"data width {curve.values.shape[0]} != --width {cfg.input_width}")
    model = build_model(cfg)
    log = (lambda line: print(line)) if not args.quiet else None
    report = train(model, train_c, valid_c, log=log)
    save_checkpoint(model, os.path.join(out, "model.ckpt"))
    write_report_csv(report, os.path.join(out, "report.csv"))
    write_cost_table_csv(cfg, os.path.join(out, "cost_table.csv"))
    best = report.epochs[report.best_epoch - 1]
    print(f"best epoch {report.best_epoch}: valid acc "
          + " ".join(f"{a:.4f}" for a in best.valid_acc))
    return 0


def _cmd_eval(args) -> int:
    out = _out_dir(args)
    model = load_checkpoint(args.model)
    curves = _load_split(args.data, args.split)
    exits = model.config.blocks
    hits = np.zeros(exits, dtype=np.int64)
    flops = np.zeros(exits, dtype=np.int64)
    conf = np.zeros(exits)
    for curve in curves:
        for outcome in forward_all_outcomes(model, curve.values):
            i = outcome.exit_index - 1
            hits[i] += int(np.argmax(outcome.probs)) == curve.label
            flops[i] += outcome.flops_used
            conf[i] += outcome.confidence
    n = len(curves)
    path = os.path.join(out, "eval.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["exit", "accuracy", "mean_flops_used", "mean_confidence"])
        for i in range(exits):
            writer.writerow([i + 1, repr(float(hits[i] / n)),
                             repr(float(flops[i] / n)), repr(float(conf[i] / n))])
    for i in range(exits):
        print(f"exit {i + 1}: acc {hits[i] / n:.4f} mean MACs {flops[i] / n:.0f} "
              f"mean conf {conf[i] / n:.4f}")
    print(f"wrote {path}")
    return 0


def _cmd_curves(args) -> int:
    out = _out_dir(args)
    model = load_checkpoint(args.model)
    calib = _load_split(args.data, "valid")
    evalc = _load_split(args.data, args.split)
    budgets = _float_list(args.budgets)
    points = accuracy_vs_budget_curve(model, calib, evalc, budgets, args.mode)
    path = os.path.join(out, "budget_curve.csv")
    write_budget_curve_csv(points, path)
    for p in points:
        print(f"{p.mode} budget {p.budget:.3e}: acc {p.accuracy:.4f} "
              f"mean MACs {p.realized_flops_mean:.0f}")
    print(f"wrote {path}")
    return 0


def _cmd_heatmap(args) -> int:
    out = _out_dir(args)
    model = load_checkpoint(args.model)
    if not model.config.pa_enabled:
        raise UsageError("checkpoint was trained without position-adaptive blocks; "
                         "there is no halting depth to map")
    curves = _load_split(args.data, args.split)[: args.samples]
    if not curves:
        raise UsageError("no samples available for the heatmap")
    path = os.path.join(out, "heatmap.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "label", "block", "position", "layers", "ponder"])
        for curve in curves:
            outcome = forward_to_exit(model, curve.values, model.config.blocks)
            for b, trace in enumerate(outcome.traces, start=1):
                ponder = trace.ponder.data
                for pos in range(trace.layers.shape[0]):
                    writer.writerow([curve.sample_id, curve.label, b, pos,
                                     int(trace.layers[pos]), repr(float(ponder[pos]))])
    print(f"wrote per-position depth for {len(curves)} samples to {path}")
    return 0


def _cmd_simulate(args) -> int:
    out = _out_dir(args)
    model = load_checkpoint(args.model)
    curves = _load_split(args.data, args.split)
    try:
        profile, budgets, seed = load_scenario(args.scenario)
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"bad scenario file {args.scenario}: {exc}") from None
    if args.seed is not None:
        seed = args.seed
    exits = model.config.blocks
    if args.thresholds:
        thresholds = load_thresholds(args.thresholds)
        if len(thresholds) != exits:
            raise UsageError(f"threshold file has {len(thresholds)} exits, model has {exits}")
    elif args.plan_budget is not None:
        calib = _load_split(args.data, "valid")
        plan = plan_budget(model, calib, len(curves), args.plan_budget * len(curves))
        thresholds = plan.thresholds
        save_thresholds(thresholds, os.path.join(out, "thresholds.csv"))
    else:
        thresholds = [0.0] * exits
    results = simulate(model, curves, profile, budgets, thresholds, seed=seed)
    write_sim_csv(results, os.path.join(out, "sim_results.csv"))
    report = latency_report(results, exits)
    with open(os.path.join(out, "latency_report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{report['queries']} queries: acc {report['accuracy']:.4f} "
          f"mean latency {report['mean_latency_s'] * 1e3:.2f} ms "
          f"offloaded {report['offload_fraction']:.2%}")
    return 0


def _cmd_sweep(args) -> int:
    out = _out_dir(args)
    cfg = _config_from_args(args)
    grid_text = args.grid
    if grid_text.startswith("@"):
        with open(grid_text[1:]) as fh:
            grid_text = fh.read()
    try:
        grid = json.loads(grid_text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"--grid is not valid JSON: {exc}") from None
    if not isinstance(grid, dict) or not all(isinstance(v, list) for v in grid.values()):
        raise UsageError("--grid must be a JSON object mapping field names to lists")
    train_c = _load_split(args.data, "train")
    valid_c = _load_split(args.data, "valid")
    results = hyper_sweep(cfg, grid, train_c, valid_c, epochs=args.sweep_epochs,
                          log=(lambda line: print(line)) if not args.quiet else None)
    path = os.path.join(out, "sweep.csv")
    write_sweep_csv(results, path)
    print(f"wrote {len(results)} sweep rows to {path}")
    return 0


# -- parser ------------------------------------------------------------------


def _add_model_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--units", default="4,4,4,4",
                   help="residual units per block, comma-separated")
    p.add_argument("--channels", default="16,32,64,128",
                   help="channels per block, comma-separated")
    p.add_argument("--width", type=int, default=400, help="input curve width")
    p.add_argument("--classes", type=int, default=12)
    p.add_argument("--epsilon", type=float, default=0.02,
                   help="halting mass left unclaimed before a position stops")
    p.add_argument("--gamma", type=float, default=1e-5,
                   help="weight of the average-depth penalty")
    p.add_argument("--no-pa", action="store_true",
                   help="disable position-adaptive halting")
    p.add_argument("--no-distill", action="store_true",
                   help="train intermediate exits without distillation")
    p.add_argument("--hard-intermediates", action="store_true",
                   help="with --no-distill, give intermediate exits hard labels")
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=500, help="epoch limit")
    p.add_argument("--patience", type=int, default=50,
                   help="epochs without validation improvement before stopping")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scai",
        description="Early-exit adaptive inference for 1-D spectral curves.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate the synthetic curve dataset")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--width", type=int, default=400)
    p.set_defaults(fn=_cmd_gen)

    p = sub.add_parser("train", help="train the early-exit network")
    p.add_argument("--data", required=True, help="directory with gen outputs")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quiet", action="store_true")
    _add_model_options(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="per-exit accuracy and cost of a checkpoint")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.add_argument("--out", help="output directory")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("curves", help="accuracy versus compute budget")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.add_argument("--budgets", required=True,
                   help="comma-separated per-sample budgets in multiply-accumulates")
    p.add_argument("--mode", required=True, choices=["anytime", "budgeted"])
    p.add_argument("--out", help="output directory")
    p.set_defaults(fn=_cmd_curves)

    p = sub.add_parser("heatmap", help="per-position halting depth map")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--out", help="output directory")
    p.set_defaults(fn=_cmd_heatmap)

    p = sub.add_parser("simulate", help="edge/cloud offload simulation")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.add_argument("--scenario", required=True, help="device/budget JSON file")
    p.add_argument("--thresholds", help="exit threshold CSV (from a budget plan)")
    p.add_argument("--plan-budget", type=float,
                   help="calibrate thresholds for this per-sample budget instead")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--out", help="output directory")
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("sweep", help="hyper-parameter grid sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", required=True,
                   help="JSON object of config fields to value lists, or @file")
    p.add_argument("--sweep-epochs", type=int, default=5,
                   help="epoch limit per grid point")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quiet", action="store_true")
    _add_model_options(p)
    p.set_defaults(fn=_cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
