"""Inference-time exit policies: budgeted batches and anytime answers.

Budgeted batch: given a compute budget for a whole batch, choose a
geometric exit mix, solve for its rate so the expected cost fits the
budget, turn the mix into per-exit confidence thresholds on held-out
curves, and route each test curve to the shallowest exit whose
confidence clears its threshold. Anytime: a single curve is refined
exit by exit as long as the static cost of the next exit fits the
per-sample budget; if even the first exit does not fit, the first-exit
answer is returned flagged as over budget.

Confidence is the maximum softmax probability of an exit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import SpectralCurve
from .network import ExitOutcome, ScaiModel, iter_exit_stages, static_cost_table
from .tensor import no_grad

_Q_FLOOR = 0.001
_Q_TOL = 1e-6


class InfeasibleBudgetError(ValueError):
    """Even sending every sample to the first exit exceeds the budget."""


@dataclass
class BudgetPlan:
    budget: float
    exit_rate: float
    fractions: list[float]
    thresholds: list[float]


@dataclass
class Prediction:
    sample_id: str
    label_true: int
    label_pred: int
    exit_index: int
    flops: int
    confidence: float
    over_budget: bool = False

    @property
    def correct(self) -> bool:
        return self.label_pred == self.label_true


def exit_probabilities(q: float, exits: int) -> np.ndarray:
    """Normalized geometric exit mix: mass (1-q)^(l-1) * q at exit l.

    q near 0 approaches a uniform mix (maximal depth); q = 1 sends
    everything to the first exit.
    """
    if not 0 < q <= 1:
        raise ValueError(f"exit rate q must be in (0, 1], got {q}")
    if exits < 1:
        raise ValueError(f"need at least one exit, got {exits}")
    raw = np.array([(1.0 - q) ** l * q for l in range(exits)], dtype=np.float64)
    return raw / raw.sum()


def expected_batch_cost(q: float, costs: Sequence[float], batch_size: int) -> float:
    probs = exit_probabilities(q, len(costs))
    return batch_size * float(np.dot(probs, np.asarray(costs, dtype=np.float64)))


def solve_budget(costs: Sequence[float], batch_size: int, budget: float) -> float:
    """Smallest exit rate q whose expected batch cost fits the budget.

    Expected cost decreases as q grows (early exits are cheaper), so the
    smallest feasible q is the deepest feasible mix.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if list(costs) != sorted(costs):
        raise ValueError("per-exit costs must be non-decreasing with depth")
    if expected_batch_cost(1.0, costs, batch_size) > budget:
        raise InfeasibleBudgetError(
            f"budget {budget} cannot cover batch of {batch_size} even at exit 1")
    lo, hi = _Q_FLOOR, 1.0
    if expected_batch_cost(lo, costs, batch_size) <= budget:
        return lo
    while hi - lo > _Q_TOL:
        mid = 0.5 * (lo + hi)
        if expected_batch_cost(mid, costs, batch_size) <= budget:
            hi = mid
        else:
            lo = mid
    return hi


def calibrate_thresholds(confidences: np.ndarray, fractions: Sequence[float]) -> list[float]:
    """Per-exit confidence cutoffs that route roughly the given fractions.

    confidences: [exits, samples] held-out confidence of each exit.
    Exits are filled shallowest-first from the still-unrouted pool; the
    threshold is the confidence of the last sample each exit claims.
    The deepest exit answers everything left, threshold 0.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    if conf.ndim != 2:
        raise ValueError(f"confidences must be [exits, samples], got rank {conf.ndim}")
    exits, total = conf.shape
    if len(fractions) != exits:
        raise ValueError(f"{len(fractions)} fractions for {exits} exits")
    if total < exits:
        raise ValueError(f"need at least {exits} calibration samples, got {total}")
    remaining = list(range(total))
    thresholds = []
    for l in range(exits - 1):
        k = int(round(fractions[l] * total))
        if k >= len(remaining):
            thresholds.append(0.0)
            remaining = []
            continue
        if k == 0:
            thresholds.append(math.inf)
            continue
        ranked = sorted(remaining, key=lambda i: (-conf[l, i], i))
        chosen = ranked[:k]
        thresholds.append(float(conf[l, chosen[-1]]))
        kept = set(chosen)
        remaining = [i for i in remaining if i not in kept]
    thresholds.append(0.0)
    return thresholds


def collect_confidences(model: ScaiModel, curves: Sequence[SpectralCurve]) -> np.ndarray:
    """[exits, samples] max-probability of every exit on every curve."""
    exits = model.config.blocks
    out = np.zeros((exits, len(curves)), dtype=np.float64)
    with no_grad():
        for j, curve in enumerate(curves):
            for i, stage in enumerate(iter_exit_stages(model, curve.values)):
                out[i, j] = float(stage.probs.data.max())
    return out


def plan_budget(model: ScaiModel, calib_curves: Sequence[SpectralCurve],
                batch_size: int, budget: float) -> BudgetPlan:
    costs = static_cost_table(model.config)
    q = solve_budget(costs, batch_size, budget)
    fractions = exit_probabilities(q, model.config.blocks)
    confidences = collect_confidences(model, calib_curves)
    thresholds = calibrate_thresholds(confidences, fractions)
    return BudgetPlan(budget=budget, exit_rate=q,
                      fractions=[float(f) for f in fractions],
                      thresholds=thresholds)


def budgeted_batch_predict(model: ScaiModel, curves: Sequence[SpectralCurve],
                           thresholds: Sequence[float]) -> list[Prediction]:
    """Route each curve to the shallowest exit whose confidence clears its
    threshold. Blocks past the taken exit are never executed."""
    if len(thresholds) != model.config.blocks:
        raise ValueError(f"{len(thresholds)} thresholds for {model.config.blocks} exits")
    results = []
    with no_grad():
        for curve in curves:
            for i, stage in enumerate(iter_exit_stages(model, curve.values)):
                conf = float(stage.probs.data.max())
                if conf >= thresholds[i]:
                    results.append(Prediction(
                        sample_id=curve.sample_id,
                        label_true=curve.label,
                        label_pred=int(np.argmax(stage.probs.data)),
                        exit_index=i + 1,
                        flops=stage.flops,
                        confidence=conf,
                    ))
                    break
            else:  # pragma: no cover - deepest threshold is always 0
                raise AssertionError("no exit accepted the sample")
    return results


def anytime_predict(model: ScaiModel, values: np.ndarray, budget: float,
                    costs: Sequence[float] | None = None) -> ExitOutcome:
    """Deepest exit whose static cost fits the per-sample budget.

    Planning is conservative: it uses the static worst-case table, so
    the realized cost of the chosen exit never exceeds the planned one.
    A budget below the first exit's cost still yields the first-exit
    answer, flagged over_budget.
    """
    if costs is None:
        costs = static_cost_table(model.config)
    target = 0
    for i, c in enumerate(costs):
        if c <= budget:
            target = i + 1
    over = target == 0
    if over:
        target = 1
    stage = None
    traces = []
    with no_grad():
        for i, stage in enumerate(iter_exit_stages(model, values)):
            if stage.trace is not None:
                traces.append(stage.trace)
            if i + 1 == target:
                break
    probs = np.copy(stage.probs.data)
    return ExitOutcome(exit_index=target, probs=probs,
                       confidence=float(probs.max()), flops_used=stage.flops,
                       traces=traces, over_budget=over)


def truncated_predict(model: ScaiModel, curves: Sequence[SpectralCurve],
                      exit_index: int) -> list[Prediction]:
    """Baseline: every curve answers at one fixed exit."""
    if not 1 <= exit_index <= model.config.blocks:
        raise ValueError(f"exit_index must be in 1..{model.config.blocks}")
    results = []
    with no_grad():
        for curve in curves:
            for i, stage in enumerate(iter_exit_stages(model, curve.values)):
                if i + 1 == exit_index:
                    results.append(Prediction(
                        sample_id=curve.sample_id,
                        label_true=curve.label,
                        label_pred=int(np.argmax(stage.probs.data)),
                        exit_index=exit_index,
                        flops=stage.flops,
                        confidence=float(stage.probs.data.max()),
                    ))
                    break
    return results


@dataclass
class BudgetCurvePoint:
    mode: str
    budget: float
    realized_flops_mean: float
    accuracy: float
    exit_counts: list[int]


def accuracy_vs_budget_curve(model: ScaiModel, calib_curves: Sequence[SpectralCurve],
                             eval_curves: Sequence[SpectralCurve],
                             budgets: Sequence[float], mode: str) -> list[BudgetCurvePoint]:
    """Accuracy and realized cost as the per-sample budget varies.

    budgets are per-sample; budgeted mode scales by the eval batch size.
    An infeasible batch budget degrades to everything-at-exit-1 rather
    than failing, mirroring the anytime over-budget rule.
    """
    if mode not in ("anytime", "budgeted"):
        raise ValueError(f"mode must be 'anytime' or 'budgeted', got {mode!r}")
    if not eval_curves:
        raise ValueError("eval_curves must be non-empty")
    exits = model.config.blocks
    points = []
    for budget in budgets:
        counts = [0] * exits
        hits = 0
        flops_sum = 0
        if mode == "anytime":
            costs = static_cost_table(model.config)
            for curve in eval_curves:
                outcome = anytime_predict(model, curve.values, budget, costs)
                counts[outcome.exit_index - 1] += 1
                flops_sum += outcome.flops_used
                if int(np.argmax(outcome.probs)) == curve.label:
                    hits += 1
        else:
            try:
                plan = plan_budget(model, calib_curves, len(eval_curves),
                                   budget * len(eval_curves))
                thresholds = plan.thresholds
            except InfeasibleBudgetError:
                thresholds = [0.0] * exits
            for pred in budgeted_batch_predict(model, eval_curves, thresholds):
                counts[pred.exit_index - 1] += 1
                flops_sum += pred.flops
                hits += pred.correct
        points.append(BudgetCurvePoint(
            mode=mode, budget=float(budget),
            realized_flops_mean=flops_sum / len(eval_curves),
            accuracy=hits / len(eval_curves),
            exit_counts=counts,
        ))
    return points


def write_budget_curve_csv(points: Sequence[BudgetCurvePoint], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["mode", "budget", "realized_flops_mean", "accuracy",
                         "exit_histogram"])
        for p in points:
            writer.writerow([p.mode, repr(p.budget), repr(p.realized_flops_mean),
                             repr(p.accuracy), "|".join(str(c) for c in p.exit_counts)])


def save_thresholds(thresholds: Sequence[float], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["exit", "threshold"])
        for i, t in enumerate(thresholds, start=1):
            writer.writerow([i, repr(float(t))])


def load_thresholds(path: str) -> list[float]:
    thresholds = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["exit", "threshold"]:
            raise ValueError(f"{path}: unexpected header {header}")
        for row in reader:
            thresholds.append(float(row[1]))
    return thresholds
