"""Position-adaptive halting inside a residual block.

Each residual unit owns a small halting branch that scores every
position of the feature map in [0, 1]. A position stops receiving
updates once its accumulated score reaches 1 - epsilon; the final unit's
score is forced to 1 so everything halts within the block. The block
output is the per-position convex mixture of unit outputs weighted by
the halting distribution: the raw scores while the position keeps
running, and the retainer (1 minus their sum) at the unit where it
halts. The per-position ponder cost is the number of units executed
plus the retainer, and is differentiable through the retainer.

Positions that have halted are copied through unchanged, bit for bit,
so later units see a frozen value at those positions; a block-level
early break fires when no position is active.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from scai.tensor import (
    ShapeError,
    Tensor,
    conv1d,
    global_avg_pool,
    linear,
    reshape,
    scale_positions,
    sigmoid,
)


@dataclass
class HaltingParams:
    """Parameters of one unit's halting branch.

    A 3-tap single-channel convolution over the feature map, a global
    summary weight applied to the channel-pooled features, and a shared
    scalar bias. Units beyond the first S-1 have no halting branch (the
    last score is forced to 1).
    """

    conv_weight: Tensor   # [1, C, 3]
    global_weight: Tensor  # [1, C]
    bias: Tensor          # [1]


@dataclass
class HaltingTrace:
    """Record of one block's halting behaviour for one sample.

    ``scores``/``weights``/``active`` are unit-major [S, W]; ``layers``
    counts executed units per position; ``retainer`` is the leftover
    probability mass spent at the halting unit. ``ponder`` stays a live
    tensor (layers + retainer per position) so the training loss can
    differentiate through it; its values are ``ponder.data``.
    """

    scores: np.ndarray
    active: np.ndarray
    layers: np.ndarray
    retainer: np.ndarray
    weights: np.ndarray
    ponder: Tensor
    features: list[np.ndarray] | None = None

    @property
    def units(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]


def halting_score(x: Tensor, params: HaltingParams) -> Tensor:
    """Per-position halting score in (0, 1) for a [C, W] feature map."""
    local = conv1d(x, params.conv_weight, params.bias, stride=1, padding=1)
    pooled = global_avg_pool(x)
    summary = linear(pooled, params.global_weight, Tensor(np.zeros(1)))
    pre = reshape(local, (x.data.shape[1],)) + summary
    return sigmoid(pre)


def halting_schedule(scores: Sequence[float], epsilon: float) -> tuple[int, float, np.ndarray]:
    """Halting arithmetic for a single position given its unit scores.

    Returns (units executed, retainer, per-unit weights). The halting
    unit is the first whose cumulative score reaches 1 - epsilon; the
    final score must be 1 so the search cannot fall off the end.
    """
    h = np.asarray(scores, dtype=np.float64)
    if h.ndim != 1 or h.shape[0] < 1:
        raise ShapeError(f"halting_schedule: scores must be a non-empty vector, got {h.shape}")
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"halting_schedule: epsilon must lie in (0, 1), got {epsilon}")
    if h[-1] != 1.0:
        raise ValueError("halting_schedule: final score must equal 1 (forced halt)")
    target = 1.0 - epsilon
    total = 0.0
    weights = np.zeros_like(h)
    for idx in range(h.shape[0]):
        if total + h[idx] >= target:
            retainer = 1.0 - total
            weights[idx] = retainer
            return idx + 1, retainer, weights
        total += h[idx]
        weights[idx] = h[idx]
    raise AssertionError("unreachable: forced final score guarantees a halt")


def _combine_positions(mask: np.ndarray, new: Tensor, old: Tensor) -> Tensor:
    """Take ``new`` where mask is True, ``old`` elsewhere (bit-exact copy)."""
    m = mask.astype(np.float64)
    return scale_positions(new, m) + scale_positions(old, 1.0 - m)


def pa_block_forward(
    x: Tensor,
    units: Sequence[Callable[[Tensor], Tensor]],
    halts: Sequence[HaltingParams],
    epsilon: float,
    *,
    force_full: bool = False,
    record_features: bool = False,
) -> tuple[Tensor, HaltingTrace]:
    """Run one position-adaptive residual block.

    ``units`` are the residual functions F_s (the block computes
    x_s = F_s(x_{s-1}) + x_{s-1} at active positions); ``halts`` holds
    one HaltingParams per unit except the last. With ``force_full`` the
    halting branch is skipped entirely and every position runs all units
    (scores 0 except a forced 1 at the last unit), which reproduces the
    plain residual stack exactly.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"pa_block_forward: expected [C, W] input, got {x.data.shape}")
    n_units = len(units)
    if n_units < 1:
        raise ValueError("pa_block_forward: a block needs at least one unit")
    if not force_full and len(halts) != n_units - 1:
        raise ShapeError(
            f"pa_block_forward: {n_units} units need {n_units - 1} halting branches, got {len(halts)}"
        )
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"pa_block_forward: epsilon must lie in (0, 1), got {epsilon}")
    width = x.data.shape[1]

    if force_full:
        cur = x
        feats: list[np.ndarray] | None = [] if record_features else None
        for unit in units:
            cur = unit(cur) + cur
            if feats is not None:
                feats.append(cur.data.copy())
        scores = np.zeros((n_units, width))
        scores[-1] = 1.0
        weights = np.zeros((n_units, width))
        weights[-1] = 1.0
        trace = HaltingTrace(
            scores=scores,
            active=np.ones((n_units, width), dtype=bool),
            layers=np.full(width, n_units, dtype=np.int64),
            retainer=np.ones(width),
            weights=weights,
            ponder=Tensor(np.full(width, float(n_units + 1))),
            features=feats,
        )
        return cur, trace

    active = np.ones(width, dtype=bool)
    cumulative = np.zeros(width)
    retainer_t = Tensor(np.ones(width))
    ponder_t = Tensor(np.zeros(width))
    output_t: Tensor | None = None
    scores = np.zeros((n_units, width))
    weights = np.zeros((n_units, width))
    active_hist = np.zeros((n_units, width), dtype=bool)
    layers = np.zeros(width, dtype=np.int64)
    feats = [] if record_features else None
    target = 1.0 - epsilon
    cur = x

    for s in range(n_units):
        if not active.any():
            break
        active_hist[s] = active
        layers += active
        new = units[s](cur) + cur
        if not active.all():
            new = _combine_positions(active, new, cur)
        if s == n_units - 1:
            h_t = Tensor(np.ones(width))
        else:
            h_t = halting_score(new, halts[s])
        h = h_t.data
        cum_next = np.where(active, cumulative + h, cumulative)
        halt_now = active & (cum_next >= target)
        go_on = active & ~halt_now

        cont_m = go_on.astype(np.float64)
        halt_m = halt_now.astype(np.float64)
        weight_t = h_t * cont_m + retainer_t * halt_m
        contrib = scale_positions(new, weight_t)
        output_t = contrib if output_t is None else output_t + contrib
        ponder_t = ponder_t + active.astype(np.float64)
        ponder_t = ponder_t + retainer_t * halt_m
        retainer_t = retainer_t - h_t * cont_m

        scores[s][active] = h[active]
        weights[s] = weight_t.data
        cumulative = cum_next
        cur = new
        if feats is not None:
            feats.append(new.data.copy())
        active = go_on

    assert output_t is not None
    trace = HaltingTrace(
        scores=scores,
        active=active_hist,
        layers=layers,
        retainer=retainer_t.data.copy(),
        weights=weights,
        ponder=ponder_t,
        features=feats,
    )
    return output_t, trace


def ponder_cost_block(trace: HaltingTrace) -> Tensor:
    """Mean over positions of the per-position ponder cost (differentiable)."""
    return trace.ponder.mean()


def write_traces_csv(traces: Sequence[HaltingTrace], path: str) -> None:
    """Long-form CSV of halting weights and ponder cost, one block per trace.

    Columns: block (1-based), position, layer (1-based), weight, ponder.
    The ponder value repeats on each of a position's layer rows.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["block", "position", "layer", "weight", "ponder"])
        for b, trace in enumerate(traces, start=1):
            ponder = trace.ponder.data
            for pos in range(trace.width):
                for layer in range(trace.units):
                    writer.writerow([
                        b,
                        pos,
                        layer + 1,
                        repr(float(trace.weights[layer, pos])),
                        repr(float(ponder[pos])),
                    ])
