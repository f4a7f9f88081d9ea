"""End-to-end command-line flows on a miniature dataset and model."""

import json

import pytest

from scai.cli import main
from scai.network import load_checkpoint
from scai.simulate import BudgetModel, DeviceProfile, save_scenario

TINY_MODEL = [
    "--units", "1,1",
    "--channels", "2,3",
    "--width", "400",
    "--classes", "12",
    "--epochs", "2",
    "--patience", "2",
    "--batch-size", "8",
]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("data")
    rc = main(["gen", "--out", str(path), "--per-class", "10"])
    assert rc == 0
    return path


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, data_dir):
    path = tmp_path_factory.mktemp("run")
    rc = main(["train", "--data", str(data_dir), "--out", str(path), "--quiet",
               *TINY_MODEL])
    assert rc == 0
    return path


def test_gen_outputs(data_dir):
    for name in ("dataset.csv", "train.csv", "valid.csv", "test.csv", "recipes.json"):
        assert (data_dir / name).is_file(), name
    header = (data_dir / "dataset.csv").read_text().splitlines()[0]
    assert header.startswith("sample_id,label,v_0,")
    assert len((data_dir / "dataset.csv").read_text().splitlines()) == 1 + 120


def test_gen_rerun_byte_identical(tmp_path, data_dir):
    again = tmp_path / "again"
    again.mkdir()
    assert main(["gen", "--out", str(again), "--per-class", "10"]) == 0
    for name in ("dataset.csv", "train.csv", "valid.csv", "test.csv", "recipes.json"):
        assert (again / name).read_bytes() == (data_dir / name).read_bytes(), name


def test_gen_rejects_width_clipping_recipes(tmp_path):
    assert main(["gen", "--out", str(tmp_path), "--width", "300"]) == 2


def test_train_outputs(run_dir):
    for name in ("model.ckpt", "report.csv", "cost_table.csv"):
        assert (run_dir / name).is_file(), name
    model = load_checkpoint(str(run_dir / "model.ckpt"))
    assert model.config.blocks == 2
    assert model.config.channels == (2, 3)
    lines = (run_dir / "report.csv").read_text().splitlines()
    assert len(lines) == 3  # header + two epochs


def test_train_missing_data_dir(tmp_path):
    rc = main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path),
               *TINY_MODEL])
    assert rc == 2


def test_train_width_mismatch(tmp_path, data_dir):
    args = ["train", "--data", str(data_dir), "--out", str(tmp_path), "--quiet",
            *TINY_MODEL]
    args[args.index("--width") + 1] = "200"
    assert main(args) == 2


def test_eval_csv(tmp_path, data_dir, run_dir):
    rc = main(["eval", "--model", str(run_dir / "model.ckpt"),
               "--data", str(data_dir), "--out", str(tmp_path)])
    assert rc == 0
    lines = (tmp_path / "eval.csv").read_text().splitlines()
    assert lines[0] == "exit,accuracy,mean_flops_used,mean_confidence"
    assert len(lines) == 3
    for line in lines[1:]:
        acc = float(line.split(",")[1])
        assert 0.0 <= acc <= 1.0


def test_curves_anytime_and_budgeted(tmp_path, data_dir, run_dir):
    for mode in ("anytime", "budgeted"):
        out = tmp_path / mode
        out.mkdir()
        rc = main(["curves", "--model", str(run_dir / "model.ckpt"),
                   "--data", str(data_dir), "--mode", mode,
                   "--budgets", "2000,400000", "--out", str(out)])
        assert rc == 0
        lines = (out / "budget_curve.csv").read_text().splitlines()
        assert lines[0] == "mode,budget,realized_flops_mean,accuracy,exit_histogram"
        assert len(lines) == 3
        assert all(line.startswith(mode) for line in lines[1:])


def test_heatmap_rows(tmp_path, data_dir, run_dir):
    rc = main(["heatmap", "--model", str(run_dir / "model.ckpt"),
               "--data", str(data_dir), "--samples", "2", "--out", str(tmp_path)])
    assert rc == 0
    lines = (tmp_path / "heatmap.csv").read_text().splitlines()
    assert lines[0] == "sample_id,label,block,position,layers,ponder"
    # Two samples x (400 + 200) positions across the two blocks.
    assert len(lines) == 1 + 2 * 600


def test_heatmap_requires_adaptive_checkpoint(tmp_path, data_dir):
    no_pa = tmp_path / "plain"
    no_pa.mkdir()
    rc = main(["train", "--data", str(data_dir), "--out", str(no_pa), "--quiet",
               "--no-pa", *TINY_MODEL])
    assert rc == 0
    rc = main(["heatmap", "--model", str(no_pa / "model.ckpt"),
               "--data", str(data_dir), "--out", str(tmp_path)])
    assert rc == 2


def test_simulate_outputs(tmp_path, data_dir, run_dir):
    scenario = tmp_path / "scenario.json"
    save_scenario(
        DeviceProfile(device_rate=1e6, max_device_flops=5e3,
                      uplink_bytes_per_s=1e5, rtt_s=0.01, server_rate=1e8),
        BudgetModel(kind="exponential", mean=2e5),
        3,
        str(scenario),
    )
    rc = main(["simulate", "--model", str(run_dir / "model.ckpt"),
               "--data", str(data_dir), "--scenario", str(scenario),
               "--out", str(tmp_path)])
    assert rc == 0
    lines = (tmp_path / "sim_results.csv").read_text().splitlines()
    assert len(lines) == 1 + 12  # test split of the 120-curve set
    report = json.loads((tmp_path / "latency_report.json").read_text())
    assert report["queries"] == 12
    assert 0.0 <= report["accuracy"] <= 1.0


def test_simulate_plan_budget_writes_thresholds(tmp_path, data_dir, run_dir):
    scenario = tmp_path / "scenario.json"
    save_scenario(
        DeviceProfile(device_rate=1e6, max_device_flops=1e12,
                      uplink_bytes_per_s=1e5, rtt_s=0.01, server_rate=1e8),
        BudgetModel(kind="fixed", value=5e5),
        0,
        str(scenario),
    )
    rc = main(["simulate", "--model", str(run_dir / "model.ckpt"),
               "--data", str(data_dir), "--scenario", str(scenario),
               "--plan-budget", "300000", "--out", str(tmp_path)])
    assert rc == 0
    lines = (tmp_path / "thresholds.csv").read_text().splitlines()
    assert lines[0] == "exit,threshold"
    assert len(lines) == 3


def test_simulate_rejects_bad_scenario(tmp_path, data_dir, run_dir):
    scenario = tmp_path / "broken.json"
    scenario.write_text("{\"device\": {}}")
    rc = main(["simulate", "--model", str(run_dir / "model.ckpt"),
               "--data", str(data_dir), "--scenario", str(scenario),
               "--out", str(tmp_path)])
    assert rc == 2


def test_sweep_inline_grid(tmp_path, data_dir):
    rc = main(["sweep", "--data", str(data_dir), "--out", str(tmp_path), "--quiet",
               "--grid", '{"gamma": [0.0, 1e-05]}', "--sweep-epochs", "1",
               *TINY_MODEL])
    assert rc == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("gamma,")
    assert len(lines) == 3


def test_sweep_grid_file(tmp_path, data_dir):
    grid = tmp_path / "grid.json"
    grid.write_text('{"lr": [0.01]}')
    rc = main(["sweep", "--data", str(data_dir), "--out", str(tmp_path), "--quiet",
               "--grid", f"@{grid}", "--sweep-epochs", "1", *TINY_MODEL])
    assert rc == 0
    assert (tmp_path / "sweep.csv").is_file()


def test_sweep_rejects_bad_grid(tmp_path, data_dir):
    rc = main(["sweep", "--data", str(data_dir), "--out", str(tmp_path),
               "--grid", "{not json", *TINY_MODEL])
    assert rc == 2
    rc = main(["sweep", "--data", str(data_dir), "--out", str(tmp_path),
               "--grid", '{"gamma": 3}', *TINY_MODEL])
    assert rc == 2


def test_output_dir_env_var(tmp_path, data_dir, run_dir, monkeypatch):
    target = tmp_path / "from-env"
    target.mkdir()
    monkeypatch.setenv("SCAI_OUTPUT_DIR", str(target))
    rc = main(["eval", "--model", str(run_dir / "model.ckpt"), "--data", str(data_dir)])
    assert rc == 0
    assert (target / "eval.csv").is_file()


def test_unknown_command_exits_via_argparse():
    with pytest.raises(SystemExit):
        main(["frobnicate"])
