"""Acceptance suite: ten go/no-go checks on the shipped behaviour.

Each test logs one PASS/FAIL line through the ``criterion_log`` fixture
(printed in the terminal summary) and then asserts, so a red run still
reports every criterion's verdict and measured numbers.

The end-to-end checks (6, 8, 9) share one trained default model; the
distillation comparison (7) trains its own reduced-size pair per seed.
Expect roughly 45-60 minutes wall clock for the whole module on one
core, dominated by those training runs.
"""

import os
import time

import numpy as np
import pytest

from scai.dataset import build_dataset, default_recipes, peak_positions, split_dataset
from scai.gradcheck import grad_check
from scai.halting import HaltingParams, halting_schedule, pa_block_forward
from scai.network import (
    ScaiConfig,
    build_model,
    clone_config,
    iter_exit_stages,
    static_cost_table,
)
from scai.policy import (
    budgeted_batch_predict,
    exit_probabilities,
    plan_budget,
    solve_budget,
    truncated_predict,
)
from scai.simulate import BudgetModel, DeviceProfile, save_scenario
from scai.tensor import (
    Tensor,
    conv1d,
    cross_entropy,
    global_avg_pool,
    kl_div,
    linear,
    relu,
    reshape,
    scale_positions,
    sigmoid,
    softmax,
)
from scai.training import evaluate_exits, train

# ---------------------------------------------------------------------------
# criterion 1: finite-difference gradient suite


def _off_kink(rng, *shape):
    """Normal draws pushed away from relu's non-differentiable point."""
    x = rng.normal(size=shape)
    return x + np.where(x >= 0.0, 0.1, -0.1)


def _grad_suite_one_seed(seed: int) -> float:
    rng = np.random.default_rng(seed)
    t = lambda *shape: Tensor(rng.normal(size=shape), requires_grad=True)
    worst = 0.0

    def run(op, inputs):
        nonlocal worst
        worst = max(worst, grad_check(op, inputs))

    a, b = t(3, 4), t(3, 4)
    run(lambda x, y: (x + y).sum(), [a, b])
    run(lambda x, y: (x * y).mean(), [a, b])
    run(lambda x: (-x).sum(), [a])
    run(lambda x: reshape(x, (4, 3)).mean(), [a])
    run(lambda x: relu(x).sum(), [Tensor(_off_kink(rng, 3, 4), requires_grad=True)])
    run(lambda x: sigmoid(x).sum(), [t(6)])

    x = t(2, 5)
    s = Tensor(rng.uniform(0.1, 1.0, size=5), requires_grad=True)
    run(lambda z, sc: scale_positions(z, sc).sum(), [x, s])
    run(lambda z: global_avg_pool(z).sum(), [t(2, 6)])

    cx, ck, cb = t(2, 6), t(3, 2, 3), t(3)
    run(lambda *args: conv1d(*args, stride=1, padding=1).sum(), [cx, ck, cb])
    run(lambda *args: conv1d(*args, stride=2, padding=1).mean(), [cx, ck, cb])
    run(lambda *args: conv1d(*args, stride=2, padding=0).sum(), [cx, ck, cb])

    v, w, lb = t(4), t(3, 4), t(3)
    run(lambda *args: linear(*args).sum(), [v, w, lb])

    logits = t(5)
    label = int(rng.integers(0, 5))
    teacher_raw = np.exp(rng.normal(size=5))
    teacher = Tensor(teacher_raw / teacher_raw.sum())
    run(lambda z: softmax(z).sum(), [logits])
    run(lambda z: cross_entropy(softmax(z), label), [logits])
    run(lambda z: kl_div(teacher, softmax(z)), [logits])
    return worst


def test_criterion_1_gradient_suite(criterion_log):
    t0 = time.perf_counter()
    worst = max(_grad_suite_one_seed(seed) for seed in range(20))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 30.0
    criterion_log(
        "1 gradient finite-difference suite",
        ok,
        f"15 ops x 20 seeds, worst rel err {worst:.2e}, {elapsed:.1f}s",
    )
    assert worst < 1e-4
    assert elapsed < 30.0


# ---------------------------------------------------------------------------
# criterion 2: halting arithmetic against an independent brute force


def _brute_force_halt(scores, epsilon):
    """Re-derives (units, retainer, weights, ponder) step by step."""
    target = 1.0 - epsilon
    total = 0.0
    weights = [0.0] * len(scores)
    for idx, score in enumerate(scores):
        if total + score >= target:
            retainer = 1.0 - total
            weights[idx] = retainer
            return idx + 1, retainer, weights, (idx + 1) + retainer
        total += score
        weights[idx] = score
    raise AssertionError("a trailing score of 1 always halts")


def test_criterion_2_halting_oracle(criterion_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(17)
    worst_sum = 0.0
    for _ in range(10_000):
        n_scores = int(rng.integers(1, 9))
        scores = rng.uniform(0.0, 1.0, size=n_scores)
        scores[-1] = 1.0
        epsilon = float(rng.uniform(1e-4, 0.5))
        n, retainer, weights = halting_schedule(scores, epsilon)
        bn, br, bw, brho = _brute_force_halt(scores.tolist(), epsilon)
        assert n == bn
        assert retainer == br
        assert weights.tolist() == bw
        worst_sum = max(worst_sum, abs(weights.sum() - 1.0))
        assert n + retainer == brho

    # The block-level ponder accounting must agree with the same identity.
    for seed in range(5):
        brng = np.random.default_rng(seed)
        x = Tensor(brng.normal(size=(2, 6)))
        units = []
        halts = []
        for u in range(3):
            k = Tensor(brng.normal(size=(2, 2, 3)) * 0.5)
            bias = Tensor(brng.normal(size=2) * 0.1)
            units.append(lambda inp, k=k, bias=bias: conv1d(inp, k, bias, stride=1, padding=1))
            if u < 2:
                halts.append(HaltingParams(
                    conv_weight=Tensor(brng.normal(size=(1, 2, 3))),
                    global_weight=Tensor(brng.normal(size=(1, 2))),
                    bias=Tensor(brng.normal(size=1)),
                ))
        _, trace = pa_block_forward(x, units, halts, epsilon=0.02)
        assert np.array_equal(trace.ponder.data, trace.layers + trace.retainer)

    elapsed = time.perf_counter() - t0
    assert worst_sum < 1e-9
    ok = elapsed < 5.0
    criterion_log(
        "2 halting arithmetic vs brute force",
        ok,
        f"10000 score vectors exact, worst |sum(p)-1| {worst_sum:.1e}, {elapsed:.1f}s",
    )
    assert elapsed < 5.0


# ---------------------------------------------------------------------------
# criterion 3: adaptive machinery reduces to the plain stack


def test_criterion_3_adaptive_plain_equivalence(criterion_log):
    rng = np.random.default_rng(3)

    # (a) one position-adaptive block, halting suppressed, vs a hand loop
    worst_block = 0.0
    for _ in range(20):
        units = []
        halts = []
        for u in range(4):
            k = Tensor(rng.normal(size=(3, 3, 3)) * 0.4)
            b = Tensor(rng.normal(size=3) * 0.1)
            units.append(lambda inp, k=k, b=b: conv1d(inp, k, b, stride=1, padding=1))
            if u < 3:
                halts.append(HaltingParams(
                    conv_weight=Tensor(rng.normal(size=(1, 3, 3))),
                    global_weight=Tensor(rng.normal(size=(1, 3))),
                    bias=Tensor(rng.normal(size=1)),
                ))
        x = Tensor(rng.normal(size=(3, 10)))
        forced, _ = pa_block_forward(x, units, halts, epsilon=0.02, force_full=True)
        cur = x
        for unit in units:
            cur = unit(cur) + cur
        worst_block = max(worst_block, float(np.abs(forced.data - cur.data).max()))

    # (b) whole model: plain variant vs adaptive variant under forced full run
    cfg = ScaiConfig(seed=31)
    adaptive = build_model(cfg)
    plain = build_model(clone_config(cfg, pa_enabled=False))
    sample = dict(adaptive.named_parameters())["block1.unit1.conv.weight"]
    assert np.array_equal(sample.data,
                          dict(plain.named_parameters())["block1.unit1.conv.weight"].data)
    worst_model = 0.0
    in_rng = np.random.default_rng(13)
    for _ in range(20):
        values = in_rng.uniform(0.0, 1.0, size=cfg.input_width)
        forced_probs = [s.probs.data for s in iter_exit_stages(adaptive, values, mode="forced")]
        plain_probs = [s.probs.data for s in iter_exit_stages(plain, values)]
        for fp, pp in zip(forced_probs, plain_probs):
            worst_model = max(worst_model, float(np.abs(fp - pp).max()))

    worst = max(worst_block, worst_model)
    ok = worst < 1e-6
    criterion_log(
        "3 adaptive/plain equivalence",
        ok,
        f"block max diff {worst_block:.1e}, full-model max diff {worst_model:.1e}",
    )
    assert ok


# ---------------------------------------------------------------------------
# criterion 4: exit-fraction family and the budget solver


def test_criterion_4_exit_fractions_and_solver(criterion_log):
    fractions = exit_probabilities(0.5, 4)
    exact = np.array([8.0, 4.0, 2.0, 1.0]) / 15.0
    pinned_ok = np.array_equal(fractions, exact)

    rng = np.random.default_rng(44)
    grid = np.linspace(0.001, 1.0, 10_000)
    step = grid[1] - grid[0]
    worst_gap = 0.0
    for _ in range(50):
        exits = int(rng.integers(2, 7))
        costs = np.cumsum(rng.uniform(0.5, 3.0, size=exits))
        batch = int(rng.integers(16, 257))
        # expected cost is monotone decreasing in q: cheapest at q=1
        lo_cost = batch * costs[0]
        hi_cost = batch * float(exit_probabilities(grid[0], exits) @ costs)
        budget = float(rng.uniform(lo_cost * 1.0001, hi_cost))
        solved = solve_budget(costs, batch, budget)

        raw = (1.0 - grid[:, None]) ** np.arange(exits) * grid[:, None]
        mix = raw / raw.sum(axis=1, keepdims=True)
        expected = batch * (mix @ costs)
        feasible = np.nonzero(expected <= budget)[0]
        assert feasible.size, "budget was drawn feasible"
        brute = grid[feasible[0]]
        worst_gap = max(worst_gap, abs(solved - brute))

    ok = pinned_ok and worst_gap <= step + 1e-9
    criterion_log(
        "4 exit fractions and budget solver",
        ok,
        f"q=0.5 fractions exact: {pinned_ok}; solver vs 10k-grid worst gap "
        f"{worst_gap:.2e} (grid step {step:.2e}) on 50 tables",
    )
    assert pinned_ok
    assert worst_gap <= step + 1e-9


# ---------------------------------------------------------------------------
# criterion 5: offloading splits the computation without changing it


def test_criterion_5_split_equivalence(criterion_log):
    from scai.simulate import deserialize_features, serialize_features

    cfg = ScaiConfig(blocks=3, units_per_block=(2, 2, 2), channels=(4, 6, 8),
                     input_width=32, classes=5, seed=5)
    model = build_model(cfg)
    rng = np.random.default_rng(55)
    checked = 0
    for _ in range(100):
        values = rng.uniform(0.0, 1.0, size=cfg.input_width)
        stages = list(iter_exit_stages(model, values))
        whole = [s.probs.data for s in stages]
        for split in range(1, cfg.blocks):
            payload = serialize_features(stages[split - 1].features.data, split)
            got_split, feats = deserialize_features(payload)
            assert got_split == split
            resumed = [
                s.probs.data
                for s in iter_exit_stages(model, values, start_block=split, features=feats)
            ]
            assert len(resumed) == cfg.blocks - split
            for probs_a, probs_b in zip(whole[split:], resumed):
                assert np.array_equal(probs_a, probs_b)
                checked += 1
    criterion_log(
        "5 offload split equivalence",
        True,
        f"100 samples x {cfg.blocks - 1} splits bit-exact ({checked} exit comparisons)",
    )


# ---------------------------------------------------------------------------
# criteria 6, 8, 9 share one trained default model


@pytest.fixture(scope="module")
def default_run():
    recipes = default_recipes()
    curves = build_dataset(recipes, per_class=100, seed=0)
    train_curves, valid_curves, test_curves = split_dataset(curves, seed=0)
    model = build_model(ScaiConfig())
    t0 = time.perf_counter()
    report = train(model, train_curves, valid_curves)
    elapsed = time.perf_counter() - t0
    accs = evaluate_exits(model, test_curves)
    return {
        "model": model,
        "recipes": recipes,
        "valid": valid_curves,
        "test": test_curves,
        "elapsed": elapsed,
        "accs": accs,
        "report": report,
    }


def test_criterion_6_end_to_end_training(criterion_log, default_run):
    elapsed_min = default_run["elapsed"] / 60.0
    final_acc = default_run["accs"][-1]
    ok = final_acc >= 0.95 and elapsed_min < 30.0
    criterion_log(
        "6 end-to-end training",
        ok,
        f"final-exit test acc {final_acc:.4f} (exits: "
        f"{' '.join(f'{a:.3f}' for a in default_run['accs'])}) in {elapsed_min:.1f} min, "
        f"best epoch {default_run['report'].best_epoch}",
    )
    assert final_acc >= 0.95
    assert elapsed_min < 30.0


# ---------------------------------------------------------------------------
# criterion 7: self-distillation direction at the first exit


def test_criterion_7_distillation_direction(criterion_log):
    curves = build_dataset(default_recipes(), per_class=40, seed=0)
    train_curves, valid_curves, _ = split_dataset(curves, seed=0)
    eval_curves = build_dataset(default_recipes(), per_class=50, seed=777)

    gaps = []
    pairs = []
    for seed in range(5):
        exit1 = {}
        for distilled in (True, False):
            cfg = ScaiConfig(seed=seed, units_per_block=(2, 2, 2, 2),
                             channels=(16, 16, 32, 64), max_epochs=100, patience=100,
                             distill_enabled=distilled,
                             intermediate_hard_labels=not distilled)
            model = build_model(cfg)
            train(model, train_curves, valid_curves)
            exit1[distilled] = evaluate_exits(model, eval_curves)[0]
        gaps.append(exit1[True] - exit1[False])
        pairs.append(f"{exit1[True]:.3f}/{exit1[False]:.3f}")
    mean_gap = float(np.mean(gaps))
    ok = mean_gap > 0.0
    criterion_log(
        "7 distillation direction",
        ok,
        f"mean exit-1 gap {mean_gap:+.4f} over 5 seeds "
        f"(with/without: {', '.join(pairs)})",
    )
    assert mean_gap > 0.0


# ---------------------------------------------------------------------------
# criterion 8: budgeted batches respect the cap and beat equal-cost truncation


def test_criterion_8_budgeted_batch(criterion_log, default_run):
    model = default_run["model"]
    test_curves = default_run["test"]
    valid_curves = default_run["valid"]
    costs = static_cost_table(model.config)
    n = len(test_curves)
    full_cost = n * costs[-1]

    rows = []
    all_ok = True
    for frac in (0.3, 0.5, 0.8):
        budget = frac * full_cost
        plan = plan_budget(model, valid_curves, n, budget)
        preds = budgeted_batch_predict(model, test_curves, plan.thresholds)
        realized = float(sum(p.flops for p in preds))
        acc = float(np.mean([p.correct for p in preds]))

        cap_ok = realized <= 1.05 * budget

        # naive baseline: every sample truncated at the single exit whose
        # whole-batch cost matches what the adaptive policy actually spent
        matched_exit = 1
        for level in range(model.config.blocks, 0, -1):
            if n * costs[level - 1] <= realized:
                matched_exit = level
                break
        matched_acc = float(np.mean(
            [p.correct for p in truncated_predict(model, test_curves, matched_exit)]))
        beats_naive = acc >= matched_acc

        # reported for context: truncation allowed to spend the whole cap
        within_b_exit = 1
        for level in range(model.config.blocks, 0, -1):
            if n * costs[level - 1] <= budget:
                within_b_exit = level
                break
        within_b_acc = float(np.mean(
            [p.correct for p in truncated_predict(model, test_curves, within_b_exit)]))

        all_ok = all_ok and cap_ok and beats_naive
        rows.append(
            f"B={frac:.1f}: spent {realized / budget:.2f}B, acc {acc:.3f} vs "
            f"exit-{matched_exit} {matched_acc:.3f} (within-B exit-{within_b_exit} "
            f"{within_b_acc:.3f})"
        )
        assert cap_ok, f"realized {realized} exceeds 1.05 x budget {budget}"
        assert beats_naive, (
            f"budgeted acc {acc} below equal-cost truncation {matched_acc}"
        )
    criterion_log("8 budgeted batch constraint", all_ok, "; ".join(rows))


# ---------------------------------------------------------------------------
# criterion 9: adaptive depth concentrates on informative positions


def test_criterion_9_allocation_concentration(criterion_log, default_run):
    model = default_run["model"]
    cfg = model.config
    centers = peak_positions(default_run["recipes"])
    radius = 12  # calibration shift (8) plus the sharp peaks' core width

    layer_sums = []
    masks = []
    for block in range(cfg.blocks):
        scale = 2 ** block
        width = (cfg.input_width + scale - 1) // scale
        mask = np.zeros(width, dtype=bool)
        for center in centers:
            lo = max(0, (center - radius) // scale)
            hi = min(width, (center + radius) // scale + 1)
            mask[lo:hi] = True
        masks.append(mask)
        layer_sums.append(np.zeros(width))

    n = 0
    for curve in default_run["test"]:
        for stage in iter_exit_stages(model, curve.values):
            layer_sums[stage.exit_index - 1] += stage.trace.layers
        n += 1

    wins = 0
    details = []
    means_ok = True
    for block in range(cfg.blocks):
        mean_layers = layer_sums[block] / n
        peak_mean = float(mean_layers[masks[block]].mean())
        bg_mean = float(mean_layers[~masks[block]].mean())
        overall = float(mean_layers.mean())
        if peak_mean > bg_mean:
            wins += 1
        means_ok = means_ok and overall < cfg.units_per_block[block]
        details.append(f"b{block + 1} {peak_mean:.2f}/{bg_mean:.2f} (mean {overall:.2f})")

    need = cfg.blocks - 1
    ok = wins >= need and means_ok
    criterion_log(
        "9 allocation concentration",
        ok,
        f"peak/background mean layers: {', '.join(details)}; "
        f"{wins}/{cfg.blocks} blocks favour peaks (need {need})",
    )
    assert wins >= need
    assert means_ok


# ---------------------------------------------------------------------------
# criterion 10: reruns are byte-identical


def test_criterion_10_determinism(criterion_log, tmp_path):
    from scai.cli import main

    def run_all(root):
        data = root / "data"
        run = root / "run"
        data.mkdir(parents=True)
        run.mkdir(parents=True)
        tiny = ["--units", "1,1", "--channels", "2,3", "--width", "400",
                "--classes", "12", "--epochs", "2", "--patience", "2",
                "--batch-size", "8", "--quiet"]
        assert main(["gen", "--out", str(data), "--per-class", "10"]) == 0
        assert main(["train", "--data", str(data), "--out", str(run), *tiny]) == 0
        assert main(["eval", "--model", str(run / "model.ckpt"),
                     "--data", str(data), "--out", str(run)]) == 0
        scenario = root / "scenario.json"
        save_scenario(
            DeviceProfile(device_rate=1e6, max_device_flops=2e4,
                          uplink_bytes_per_s=1e5, rtt_s=0.01, server_rate=1e8),
            BudgetModel(kind="exponential", mean=2e5),
            9,
            str(scenario),
        )
        assert main(["simulate", "--model", str(run / "model.ckpt"),
                     "--data", str(data), "--scenario", str(scenario),
                     "--out", str(run)]) == 0
        return root

    first = run_all(tmp_path / "a")
    second = run_all(tmp_path / "b")

    compared = []
    for dirpath, _, filenames in os.walk(first):
        for name in sorted(filenames):
            path_a = os.path.join(dirpath, name)
            path_b = path_a.replace(str(first), str(second), 1)
            assert os.path.exists(path_b), path_b
            same = open(path_a, "rb").read() == open(path_b, "rb").read()
            compared.append((os.path.relpath(path_a, first), same))
            assert same, f"{path_a} differs between reruns"
    ok = all(same for _, same in compared)
    criterion_log(
        "10 rerun determinism",
        ok,
        f"{len(compared)} output files byte-identical across reruns",
    )
    assert ok
