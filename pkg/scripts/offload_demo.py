#!/usr/bin/env python3
"""Edge/cloud offload walkthrough on three device profiles.

Trains (or loads) a model, calibrates thresholds for a mid-range
budget, then replays the test split through a weak wearable, a phone
and an unconstrained workstation, printing one latency report each.
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from scai import (BudgetModel, DeviceProfile, ScaiConfig, build_dataset, build_model,
                  default_recipes, latency_report, load_checkpoint, plan_budget,
                  simulate, split_dataset, static_cost_table, train, write_sim_csv)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", help="existing checkpoint; omit to train a small one")
    ap.add_argument("--out", default="offload_out")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    curves = build_dataset(default_recipes(), per_class=20, seed=args.seed)
    train_c, valid_c, test_c = split_dataset(curves, seed=args.seed)

    if args.model:
        model = load_checkpoint(args.model)
    else:
        cfg = ScaiConfig(blocks=3, units_per_block=(2, 2, 2), channels=(8, 12, 16),
                         seed=args.seed, batch_size=16, max_epochs=30, patience=30)
        model = build_model(cfg)
        print("training a small model for the demo...")
        train(model, train_c, valid_c)

    costs = static_cost_table(model.config)
    plan = plan_budget(model, valid_c, len(test_c), float(costs[-2]) * len(test_c))
    print("thresholds:", [f"{t:.3f}" for t in plan.thresholds])

    budgets = BudgetModel(kind="exponential", mean=float(costs[-1]))
    profiles = {
        "wearable": DeviceProfile(device_rate=2e8, max_device_flops=float(costs[0]),
                                  uplink_bytes_per_s=2e5, rtt_s=0.08, server_rate=2e10),
        "phone": DeviceProfile(device_rate=2e9, max_device_flops=float(costs[-2]),
                               uplink_bytes_per_s=2e6, rtt_s=0.03, server_rate=2e10),
        "workstation": DeviceProfile(device_rate=2e10, max_device_flops=float(costs[-1]),
                                     uplink_bytes_per_s=1e7, rtt_s=0.01, server_rate=2e10),
    }
    for name, profile in profiles.items():
        results = simulate(model, test_c, profile, budgets, plan.thresholds,
                           seed=args.seed)
        write_sim_csv(results, os.path.join(args.out, f"sim_{name}.csv"))
        rep = latency_report(results, model.config.blocks)
        print(f"{name:12s} acc {rep['accuracy']:.3f} "
              f"mean {rep['mean_latency_s'] * 1e3:7.2f} ms "
              f"p95 {rep['p95_latency_s'] * 1e3:7.2f} ms "
              f"offload {rep['offload_fraction']:.0%} exits {rep['exit_histogram']}")
    print(f"per-query results in {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
