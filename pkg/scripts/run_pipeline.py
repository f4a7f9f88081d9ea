#!/usr/bin/env python3
"""End-to-end experiment: data -> training -> evaluation -> budget curves.

Defaults reproduce the full-size setup (12 classes x 100 curves, the
four-block network). Pass --small for a quick shakedown run.
"""

import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from scai import (ScaiConfig, accuracy_vs_budget_curve, build_dataset, build_model,
                  default_recipes, evaluate_exits, save_checkpoint, save_dataset,
                  split_dataset, static_cost_table, train, write_budget_curve_csv,
                  write_cost_table_csv, write_report_csv)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="pipeline_out")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--small", action="store_true",
                    help="tiny model and dataset for a quick end-to-end check")
    ap.add_argument("--epochs", type=int, default=None, help="override the epoch limit")
    ap.add_argument("--no-distill", action="store_true")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    per_class = 20 if args.small else 100
    if args.small:
        cfg = ScaiConfig(blocks=2, units_per_block=(2, 2), channels=(8, 12),
                         seed=args.seed, batch_size=16, max_epochs=args.epochs or 10,
                         patience=10, distill_enabled=not args.no_distill,
                         intermediate_hard_labels=args.no_distill)
    else:
        cfg = ScaiConfig(seed=args.seed, max_epochs=args.epochs or 500,
                         distill_enabled=not args.no_distill,
                         intermediate_hard_labels=args.no_distill)

    print(f"generating {12 * per_class} curves (seed {args.seed})")
    curves = build_dataset(default_recipes(), per_class=per_class, seed=args.seed)
    train_c, valid_c, test_c = split_dataset(curves, seed=args.seed)
    save_dataset(curves, os.path.join(args.out, "dataset.csv"))

    model = build_model(cfg)
    print(f"training {model.parameter_count()} parameters")
    report = train(model, train_c, valid_c, log=print)
    save_checkpoint(model, os.path.join(args.out, "model.ckpt"))
    write_report_csv(report, os.path.join(args.out, "report.csv"))
    write_cost_table_csv(cfg, os.path.join(args.out, "cost_table.csv"))

    acc = evaluate_exits(model, test_c)
    print("test accuracy per exit:", " ".join(f"{a:.4f}" for a in acc))

    costs = static_cost_table(cfg)
    budgets = sorted({c * f for c in costs.tolist() for f in (0.75, 1.0, 1.5)})
    for mode in ("anytime", "budgeted"):
        points = accuracy_vs_budget_curve(model, valid_c, test_c, budgets, mode)
        write_budget_curve_csv(points, os.path.join(args.out, f"curve_{mode}.csv"))
        for p in points:
            print(f"{mode:9s} budget {p.budget:.3e} acc {p.accuracy:.4f} "
                  f"mean MACs {p.realized_flops_mean:.0f} mix {p.exit_counts}")
    print(f"outputs in {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
