"""Joint training of all exits with optional self-distillation.

The deepest classifier is always trained against the true label. The
intermediate classifiers either mimic the deepest classifier's output
distribution (distillation, the default) or train against hard labels
(the ablation). A small penalty on the average per-position depth used
by the adaptive blocks keeps computation honest.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dataset import SpectralCurve
from .halting import ponder_cost_block
from .network import ScaiConfig, ScaiModel, build_model, clone_config, iter_exit_stages
from .optim import adam_step, init_adam, zero_grads
from .tensor import Tensor, cross_entropy, kl_div, no_grad


@dataclass
class EpochStats:
    epoch: int
    total_loss: float
    task_loss: float
    ponder_cost: float
    train_ce: list[float]
    valid_acc: list[float]
    improved: bool


@dataclass
class TrainReport:
    exits: int
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    best_valid_acc: float = 0.0
    stopped_early: bool = False

    @property
    def final_valid_acc(self) -> list[float]:
        return self.epochs[self.best_epoch - 1].valid_acc if self.epochs else []


def task_loss(stages, label: int, cfg: ScaiConfig) -> Tensor:
    """Classification loss over all exits for one sample.

    stages: the per-exit outputs of one forward pass, shallowest first.
    """
    loss = cross_entropy(stages[-1].probs, label)
    if len(stages) == 1:
        return loss
    if cfg.distill_enabled:
        for i in range(len(stages) - 1):
            teacher = stages[i + 1].probs if cfg.stepwise_teacher else stages[-1].probs
            loss = loss + kl_div(teacher, stages[i].probs)
    elif cfg.intermediate_hard_labels:
        for i in range(len(stages) - 1):
            loss = loss + cross_entropy(stages[i].probs, label)
    return loss


def total_loss(stages, label: int, cfg: ScaiConfig) -> tuple[Tensor, float, float]:
    """(loss tensor, task part, ponder part) — ponder part is pre-gamma."""
    loss = task_loss(stages, label, cfg)
    task_val = float(loss.data)
    ponder_val = 0.0
    if cfg.pa_enabled and cfg.gamma != 0.0:
        penalty = None
        for stage in stages:
            if stage.trace is None:
                continue
            cost = ponder_cost_block(stage.trace)
            penalty = cost if penalty is None else penalty + cost
        if penalty is not None:
            ponder_val = float(penalty.data)
            loss = loss + penalty * cfg.gamma
    elif cfg.pa_enabled:
        ponder_val = sum(float(s.trace.ponder.data.mean())
                         for s in stages if s.trace is not None)
    return loss, task_val, ponder_val


def evaluate_exits(model: ScaiModel, curves: Sequence[SpectralCurve]) -> np.ndarray:
    """Accuracy of every exit over a split, shallowest first."""
    if not curves:
        raise ValueError("cannot evaluate on an empty split")
    exits = model.config.blocks
    hits = np.zeros(exits, dtype=np.int64)
    with no_grad():
        for curve in curves:
            for i, stage in enumerate(iter_exit_stages(model, curve.values)):
                if int(np.argmax(stage.probs.data)) == curve.label:
                    hits[i] += 1
    return hits / len(curves)


def _exit_ce(stages, label: int) -> list[float]:
    """Reporting-only cross-entropy of each exit against the true label."""
    out = []
    for stage in stages:
        p = max(float(stage.probs.data[label]), 1e-12)
        out.append(-math.log(p))
    return out


def train(model: ScaiModel, train_curves: Sequence[SpectralCurve],
          valid_curves: Sequence[SpectralCurve], *,
          max_epochs: int | None = None,
          log: Callable[[str], None] | None = None) -> TrainReport:
    """Adam with gradient accumulation over mini-batches, early stopping on
    deepest-exit validation accuracy, and best-epoch weight restore."""
    cfg = model.config
    if not train_curves or not valid_curves:
        raise ValueError("training requires non-empty train and valid splits")
    limit = cfg.max_epochs if max_epochs is None else max_epochs
    params = [p for _, p in model.named_parameters()]
    state = init_adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                      eps=cfg.adam_eps)
    report = TrainReport(exits=cfg.blocks)
    best_snapshot = [np.copy(p.data) for p in params]
    best_acc = -1.0
    since_best = 0
    n = len(train_curves)

    for epoch in range(1, limit + 1):
        order = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, 1, epoch])).permutation(n)
        sum_total = sum_task = sum_ponder = 0.0
        sum_ce = np.zeros(cfg.blocks)
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            inv = 1.0 / len(batch)
            for idx in batch:
                curve = train_curves[int(idx)]
                stages = list(iter_exit_stages(model, curve.values))
                loss, task_val, ponder_val = total_loss(stages, curve.label, cfg)
                sum_total += float(loss.data)
                sum_task += task_val
                sum_ponder += ponder_val
                sum_ce += _exit_ce(stages, curve.label)
                (loss * inv).backward()
            adam_step(params, state)
            zero_grads(params)

        valid_acc = evaluate_exits(model, valid_curves)
        improved = float(valid_acc[-1]) > best_acc
        if improved:
            best_acc = float(valid_acc[-1])
            best_snapshot = [np.copy(p.data) for p in params]
            report.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
        stats = EpochStats(
            epoch=epoch,
            total_loss=sum_total / n,
            task_loss=sum_task / n,
            ponder_cost=sum_ponder / n,
            train_ce=[float(v) for v in sum_ce / n],
            valid_acc=[float(v) for v in valid_acc],
            improved=improved,
        )
        report.epochs.append(stats)
        if log is not None:
            accs = " ".join(f"{a:.3f}" for a in stats.valid_acc)
            log(f"epoch {epoch:4d} loss {stats.total_loss:.4f} valid [{accs}]"
                f"{' *' if improved else ''}")
        if since_best >= cfg.patience:
            report.stopped_early = True
            break

    for p, snap in zip(params, best_snapshot):
        p.data = snap
    report.best_valid_acc = max(best_acc, 0.0)
    return report


def write_report_csv(report: TrainReport, path: str) -> None:
    exits = report.exits
    header = (["epoch", "total_loss", "task_loss", "ponder_cost"]
              + [f"train_ce_exit{i + 1}" for i in range(exits)]
              + [f"valid_acc_exit{i + 1}" for i in range(exits)]
              + ["improved"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for s in report.epochs:
            writer.writerow([s.epoch, repr(s.total_loss), repr(s.task_loss),
                             repr(s.ponder_cost)]
                            + [repr(v) for v in s.train_ce]
                            + [repr(v) for v in s.valid_acc]
                            + ["1" if s.improved else "0"])


# -- hyper-parameter sweep ---------------------------------------------------


@dataclass
class SweepResult:
    overrides: dict
    valid_acc: list[float]
    best_epoch: int
    parameter_count: int


def hyper_sweep(base: ScaiConfig, grid: dict[str, Sequence],
                train_curves: Sequence[SpectralCurve],
                valid_curves: Sequence[SpectralCurve], *,
                epochs: int,
                log: Callable[[str], None] | None = None) -> list[SweepResult]:
    """Cartesian grid over config fields; each point is a short training run.

    An empty grid yields an empty result list.
    """
    if not grid:
        return []
    keys = sorted(grid)
    results = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        overrides = dict(zip(keys, combo))
        cfg = clone_config(base, **overrides)
        model = build_model(cfg)
        report = train(model, train_curves, valid_curves, max_epochs=epochs)
        best = report.epochs[report.best_epoch - 1]
        if log is not None:
            log(f"sweep {overrides} -> valid {best.valid_acc[-1]:.3f}")
        results.append(SweepResult(
            overrides=overrides,
            valid_acc=list(best.valid_acc),
            best_epoch=report.best_epoch,
            parameter_count=model.parameter_count(),
        ))
    return results


def write_sweep_csv(results: Sequence[SweepResult], path: str) -> None:
    keys: list[str] = sorted(results[0].overrides) if results else []
    exits = len(results[0].valid_acc) if results else 0
    header = keys + [f"valid_acc_exit{i + 1}" for i in range(exits)] + [
        "best_epoch", "parameter_count"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in results:
            writer.writerow([repr(r.overrides[k]) if isinstance(r.overrides[k], float)
                             else r.overrides[k] for k in keys]
                            + [repr(v) for v in r.valid_acc]
                            + [r.best_epoch, r.parameter_count])
