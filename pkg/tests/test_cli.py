"""Command-line interface, driven in-process through ``main``."""

import csv
import hashlib
import io
import logging
from pathlib import Path

import numpy as np
import pytest

from otmil.checkpoint import load_checkpoint, save_checkpoint
from otmil.cli import main
from otmil.data_io import read_bag

SMALL_CFG = """\
n_bags = 36
min_instances = 8
max_instances = 16
dim = 6
n_folds = 3
epochs = 2
ramp_epochs = 1
latent_dim = 4
n_tokens = 3
lr = 0.003
batch_size = 12
"""

ORACLE_4X2 = np.array([  # mirror-descent oracle plan for rng(0).uniform(size=(4, 2)), rho=0.6
    [0.000354991, 0.2486032193],
    [0.1437960286, 0.106201162],
    [0.0024796029, 0.0001535718],
    [0.0947351819, 0.0036762426],
])


def run(capsys, *argv):
    code = main(list(map(str, argv)))
    out, err = capsys.readouterr()
    return code, out, err


def write_cost(path, cost):
    path.write_text("\n".join(",".join(repr(float(v)) for v in row) for row in cost) + "\n")


def parse_plan(out):
    rows = [line for line in out.splitlines() if line and not line.startswith("#")]
    table = list(csv.DictReader(io.StringIO("\n".join(rows))))
    trailer = dict(line[2:].split(",") for line in out.splitlines() if line.startswith("# "))
    return table, trailer


def digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------------------
# solve


def test_solve_single_zero_cell(tmp_path, capsys):
    (tmp_path / "c.csv").write_text("0\n")
    code, out, _ = run(capsys, "solve", tmp_path / "c.csv", "--rho", 1)
    table, trailer = parse_plan(out)
    assert code == 0
    assert len(table) == 1 and float(table[0]["mass"]) == pytest.approx(1.0, abs=1e-7)
    assert set(trailer) == {"sink_mass", "row_residual", "mass_residual", "iterations", "objective"}


def test_solve_seeded_instance_matches_library(tmp_path, capsys):
    cost = np.random.default_rng(0).uniform(size=(4, 2))
    write_cost(tmp_path / "c.csv", cost)
    code, out, _ = run(capsys, "solve", tmp_path / "c.csv", "--rho", 0.6, "--lambda", 0.1,
                       "--epsilon", 0.05)
    table, trailer = parse_plan(out)
    mass = np.zeros((4, 2))
    for r in table:
        mass[int(r["row"]), int(r["col"])] = float(r["mass"])
    assert code == 0
    assert np.max(np.abs(mass - ORACLE_4X2)) < 1e-3
    assert float(trailer["row_residual"]) <= 1e-7
    assert float(trailer["mass_residual"]) <= 1e-4


def test_solve_malformed_cell(tmp_path, capsys):
    (tmp_path / "c.csv").write_text("0.1,0.2\n0.3,abc\n")
    code, _, err = run(capsys, "solve", tmp_path / "c.csv")
    assert code == 1 and "row 2, column 2" in err and "abc" in err


def test_solve_ragged_and_negative(tmp_path, capsys):
    (tmp_path / "c.csv").write_text("0.1,0.2\n0.3\n")
    assert run(capsys, "solve", tmp_path / "c.csv")[0] == 1
    (tmp_path / "c.csv").write_text("0.1,-0.2\n")
    code, _, err = run(capsys, "solve", tmp_path / "c.csv")
    assert code == 1 and "column 2" in err


def test_solve_missing_file(tmp_path, capsys):
    code, _, err = run(capsys, "solve", tmp_path / "none.csv")
    assert code == 1 and "cannot read" in err


def test_solve_non_convergence_exit_2(tmp_path, capsys):
    cost = np.random.default_rng(10).uniform(size=(6, 3))
    write_cost(tmp_path / "c.csv", cost)
    code, out, err = run(capsys, "solve", tmp_path / "c.csv", "--rho", 0.5, "--epsilon", 0.01,
                         "--max-iter", 1)
    assert code == 2 and "no convergence" in err
    assert out.startswith("row,col,mass")


def test_solve_equality_constraint(tmp_path, capsys):
    cost = np.random.default_rng(5).uniform(size=(6, 3)) ** 3
    write_cost(tmp_path / "c.csv", cost)
    code, out, _ = run(capsys, "solve", tmp_path / "c.csv", "--global-constraint", "equality")
    table, _ = parse_plan(out)
    cols = np.zeros(3)
    for r in table:
        cols[int(r["col"])] += float(r["mass"])
    assert code == 0 and np.allclose(cols, 1 / 3, atol=1e-4)


# ---------------------------------------------------------------------------
# pipeline


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "run.cfg").write_text(SMALL_CFG)
    assert main(["synth", "--config", str(root / "run.cfg"), "--out", str(root / "data")]) == 0
    before = digest(root / "data")
    assert main(["train", "--config", str(root / "run.cfg"), "--data", str(root / "data"),
                 "--out", str(root / "run")]) == 0
    assert main(["eval", "--config", str(root / "run.cfg"), "--data", str(root / "data"),
                 "--checkpoints", str(root / "run"), "--out", str(root / "eval")]) == 0
    assert digest(root / "data") == before, "commands must not modify inputs"
    return root


def test_pipeline_outputs(workspace):
    run_dir = workspace / "run"
    assert sorted(p.name for p in run_dir.iterdir()) == [
        "fold_0.ckpt", "fold_1.ckpt", "fold_2.ckpt",
        "history_fold_0.csv", "history_fold_1.csv", "history_fold_2.csv"]
    history = (run_dir / "history_fold_0.csv").read_text().splitlines()
    assert history[0] == "epoch,train_loss,rho,val_cindex" and len(history) == 3
    metrics = list(csv.DictReader(open(workspace / "eval" / "metrics.csv")))
    assert [m["fold"] for m in metrics] == ["0", "1", "2"]
    assert all(0 <= float(m["c_index"]) <= 1 and 0 < float(m["p_value"]) <= 1 for m in metrics)
    assert (workspace / "eval" / "km_fold_1_high.csv").read_text().startswith(
        "time,survival,at_risk,events")


def test_pipeline_is_byte_identical(workspace, tmp_path):
    cfg = str(workspace / "run.cfg")
    main(["synth", "--config", cfg, "--out", str(tmp_path / "data")])
    assert digest(tmp_path / "data") == digest(workspace / "data")
    main(["train", "--config", cfg, "--data", str(tmp_path / "data"), "--out", str(tmp_path / "run")])
    assert digest(tmp_path / "run") == digest(workspace / "run")
    main(["eval", "--config", cfg, "--data", str(tmp_path / "data"),
          "--checkpoints", str(tmp_path / "run"), "--out", str(tmp_path / "eval")])
    assert digest(tmp_path / "eval") == digest(workspace / "eval")


def test_threads_do_not_change_outputs(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("OTMIL_THREADS", "3")
    main(["train", "--config", str(workspace / "run.cfg"), "--data", str(workspace / "data"),
          "--out", str(tmp_path / "run")])
    assert digest(tmp_path / "run") == digest(workspace / "run")


def test_single_fold_and_flag_override(workspace, tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--config", workspace / "run.cfg", "--data",
                       workspace / "data", "--out", tmp_path, "--fold", 1, "--ramp", "linear")
    assert code == 0 and out.startswith("fold 1:")
    _, header = load_checkpoint(tmp_path / "fold_1.ckpt")
    assert header["config"]["ramp_shape"] == "linear"
    assert not (tmp_path / "fold_0.ckpt").exists()


def test_eval_constant_risk(workspace, tmp_path, capsys, caplog):
    params, header = load_checkpoint(workspace / "run" / "fold_0.ckpt")
    params.pred_weight[:] = 0.0
    save_checkpoint(tmp_path / "fold_0.ckpt", params, header["config"], header["seed"],
                    header["epochs"], header["extra"])
    with caplog.at_level(logging.WARNING):
        code, _, _ = run(capsys, "eval", "--config", workspace / "run.cfg", "--data",
                         workspace / "data", "--checkpoints", tmp_path, "--fold", 0)
    metrics = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert code == 0 and float(metrics[0]["c_index"]) == 0.5
    assert "empty" in caplog.text


def test_attention_table(workspace, capsys):
    bag_path = sorted((workspace / "data" / "bags").iterdir())[0]
    ckpt = workspace / "run" / "fold_0.ckpt"
    code, out, _ = run(capsys, "attention", "--checkpoint", ckpt, "--bag", bag_path)
    rows = list(csv.DictReader(io.StringIO(out)))
    scores = [float(r["attention"]) for r in rows]
    params, _ = load_checkpoint(ckpt)
    assert code == 0
    assert len(rows) == read_bag(bag_path).n_instances
    assert scores == sorted(scores, reverse=True)
    assert sum(scores) <= 1.0 * np.max(np.abs(params.agg_weight)) + 1e-9


def test_missing_inputs_exit_1(workspace, tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--data", workspace / "data", "--checkpoints", tmp_path)
    assert code == 1 and "no checkpoint" in err
    code, _, err = run(capsys, "train", "--data", tmp_path)
    assert code == 1 and "manifest.tsv" in err
    code, _, err = run(capsys, "attention", "--checkpoint", tmp_path / "x.ckpt", "--bag", "y.bag")
    assert code == 1


def test_bad_config_exit_1(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("epochs = 3\nwarmup = 2\n")
    code, _, err = run(capsys, "synth", "--config", tmp_path / "bad.cfg", "--out", tmp_path)
    assert code == 1 and ":2: unknown key 'warmup'" in err


def test_verify_small(capsys):
    code, out, _ = run(capsys, "verify", "--oracle-cases", 3, "--gradient-cases", 1)
    assert code == 0 and out.count("PASS") == 2
