import csv
from pathlib import Path

import numpy as np
import pytest
import yaml

from neural_ekf.checkpoint import load_checkpoint
from neural_ekf.cli import main

TINY = [
    "--set", "data.n_trajectories=5",
    "--set", "data.duffing.steps=40",
    "--set", "model.hidden_widths=[8]",
    "--set", "training.batch_size=5",
    "--set", "evaluation.condition_steps=10",
]


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["simulate", "--out", str(root / "data"), *TINY]) == 0
    assert main(["train", "--dataset", str(root / "data"), "--out", str(root / "run"), *TINY,
                 "--set", "training.epochs=1"]) == 0
    return root


def test_simulate_writes_files_and_is_byte_identical(workspace, tmp_path, capsys):
    files = sorted(p.name for p in (workspace / "data").iterdir())
    assert files == ["config.yaml", "manifest.yaml", *[f"traj_{i:04d}.csv" for i in range(5)]]
    assert main(["simulate", "--out", str(tmp_path / "again"), *TINY]) == 0
    assert "simulated 5 trajectories: T=40, d_u=2, d_x=2" in capsys.readouterr().out
    for name in files:
        assert (workspace / "data" / name).read_bytes() == (tmp_path / "again" / name).read_bytes()
    echo = yaml.safe_load((workspace / "data" / "config.yaml").read_text())
    assert echo["data"]["n_trajectories"] == 5 and echo["command"]["verb"] == "simulate"


def test_train_outputs(workspace):
    run = workspace / "run"
    header, rows = read_csv(run / "train_log.csv")
    assert header == ["epoch", "loss", "reconstruction", "overshoot", "kl"] and len(rows) == 1
    assert (run / "checkpoint.ckpt").exists() and (run / "loss_curve.png").stat().st_size > 0
    meta = load_checkpoint(run / "checkpoint.ckpt")["meta"]
    assert meta["epoch"] == 1 and meta["model_config"]["state_dim"] == 4


def test_resume_continues_epoch_numbering(workspace, tmp_path):
    args = ["train", "--dataset", str(workspace / "data"), *TINY, "--set", "training.epochs=1"]
    assert main([*args, "--out", str(tmp_path / "r"), "--resume", str(workspace / "run" / "checkpoint.ckpt")]) == 0
    assert main([*args[:-1], "training.epochs=2", "--out", str(tmp_path / "full")]) == 0
    _, resumed = read_csv(tmp_path / "r" / "train_log.csv")
    _, full = read_csv(tmp_path / "full" / "train_log.csv")
    assert [r[0] for r in resumed] == ["1", "2"]
    assert resumed == full


def test_zero_learning_rate_keeps_initial_parameters(workspace, tmp_path):
    overrides = [*TINY[1::2], "training.epochs=1", "training.learning_rate=0.0", "training.checkpoint_every=1"]
    args = ["train", "--dataset", str(workspace / "data")]
    for o in overrides:
        args += ["--set", o]
    assert main([*args, "--out", str(tmp_path / "z")]) == 0
    from neural_ekf.cli import _model_config
    from neural_ekf.config import load_config
    from neural_ekf.data import read_dataset
    from neural_ekf.models import NeuralEKF

    cfg = load_config(None, overrides)
    fresh = NeuralEKF.build(_model_config(cfg, read_dataset(workspace / "data")), seed=0)
    tensors = load_checkpoint(tmp_path / "z" / "checkpoint.ckpt")["tensors"]
    for k, v in fresh.parameters().items():
        assert np.array_equal(tensors[f"param/{k}"], v.value)
    assert (tmp_path / "z" / "checkpoint_epoch0001.ckpt").exists()


def test_predict_modes_and_evaluate(workspace, tmp_path):
    ck, data = str(workspace / "run" / "checkpoint.ckpt"), str(workspace / "data")
    means = {}
    for mode in ("rollout", "filtered"):
        out = tmp_path / mode
        assert main(["predict", "--checkpoint", ck, "--dataset", data, "--mode", mode, "--out", str(out), *TINY]) == 0
        header, rows = read_csv(out / "traj_0000.csv")
        assert header == ["t", "x1_mean", "x2_mean", "x1_var", "x2_var"] and len(rows) == 40
        assert (out / "traj_0000.png").exists()
        assert main(["evaluate", "--predictions", str(out), "--dataset", data, "--out", str(out / "eval"), *TINY]) == 0
        _, table = read_csv(out / "eval" / "rmse.csv")
        means[mode] = np.array([[float(v) for v in r[1:]] for r in table])
        assert np.all(np.isfinite(means[mode]))
    assert np.all(means["filtered"].mean(axis=0) <= means["rollout"].mean(axis=0))
    again = tmp_path / "again"
    assert main(["predict", "--checkpoint", ck, "--dataset", data, "--mode", "rollout", "--out", str(again), *TINY]) == 0
    assert (again / "traj_0003.csv").read_bytes() == (tmp_path / "rollout" / "traj_0003.csv").read_bytes()


def test_evaluate_perfect_predictions_give_zero_rmse(workspace, tmp_path):
    from neural_ekf.data import read_dataset

    ds = read_dataset(workspace / "data")
    pred = tmp_path / "pred"
    pred.mkdir()
    for tr in ds.trajectories:
        with open(pred / tr.meta["file"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x1_mean", "x2_mean"])
            for k, row in enumerate(tr.x):
                w.writerow([k, repr(float(row[0])), repr(float(row[1]))])
    assert main(["evaluate", "--predictions", str(pred), "--dataset", str(workspace / "data"),
                 "--out", str(tmp_path / "e")]) == 0
    header, rows = read_csv(tmp_path / "e" / "rmse.csv")
    assert header == ["case", "x1", "x2"]
    assert all(float(v) == 0.0 for r in rows for v in r[1:])


def test_cluster_three_tiers(tmp_path):
    base = np.array([0.2, 0.1, 0.3])
    rng = np.random.default_rng(0)
    tables = []
    for tier, scale in (("nominal", 1), ("mild", 3), ("severe", 9)):
        d = tmp_path / tier
        d.mkdir()
        with open(d / "rmse.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case", "a", "b", "c"])
            for i in range(4):
                w.writerow([f"c{i}", *(base * scale * (1 + 0.05 * rng.normal(size=3)))])
        tables.append(str(d / "rmse.csv"))
    assert main(["cluster", "--rmse", *tables, "--k", "3", "--out", str(tmp_path / "rep")]) == 0
    _, rows = read_csv(tmp_path / "rep" / "assignments.csv")
    tier_of = {"nominal": "0", "mild": "1", "severe": "2"}
    assert all(r[1] == tier_of[r[0].split("/")[0]] for r in rows)
    assert (tmp_path / "rep" / "clusters.png").exists()


def test_error_exit_codes(tmp_path, capsys):
    assert main(["train", "--dataset", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2
    assert str(tmp_path / "missing") in capsys.readouterr().err
    assert main(["simulate", "--out", str(tmp_path / "o"), "--set", "data.duffing.dt=-1"]) == 2
    assert "data.duffing" in capsys.readouterr().err
    assert main(["simulate", "--out", str(tmp_path / "o"), "--set", "nonsense.key=1"]) == 2
    assert main(["simulate", "--out", str(tmp_path / "o"), "--config", str(tmp_path / "nope.yaml")]) == 2
    assert main(["bogus"]) == 2
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NEKFCKPT\x01")
    assert main(["predict", "--checkpoint", str(bad), "--dataset", str(tmp_path), "--out", str(tmp_path / "p")]) == 2
    assert "offset" in capsys.readouterr().err


def test_predict_dimension_mismatch(workspace, tmp_path, capsys):
    from neural_ekf.data import TimeSeriesDataset, Trajectory, write_dataset

    ds = TimeSeriesDataset([Trajectory(np.zeros((20, 1)), np.zeros((20, 1)))], 100.0, ["u1"], ["x1"])
    write_dataset(ds, tmp_path / "one")
    code = main(["predict", "--checkpoint", str(workspace / "run" / "checkpoint.ckpt"),
                 "--dataset", str(tmp_path / "one"), "--out", str(tmp_path / "p")])
    assert code == 2
    err = capsys.readouterr().err
    assert "dataset" in err and "checkpoint" in err


def test_inputs_are_not_mutated(workspace):
    before = {p.name: p.read_bytes() for p in (workspace / "data").iterdir()}
    assert main(["predict", "--checkpoint", str(workspace / "run" / "checkpoint.ckpt"),
                 "--dataset", str(workspace / "data"), "--out", str(workspace / "p2"), *TINY]) == 0
    assert before == {p.name: p.read_bytes() for p in (workspace / "data").iterdir()}


@pytest.mark.slow
def test_default_simulation_size(tmp_path, capsys):
    assert main(["simulate", "--out", str(tmp_path / "big"), "--set", "data.n_trajectories=1000"]) == 0
    assert "simulated 1000 trajectories: T=500, d_u=2, d_x=2" in capsys.readouterr().out
    assert len(list(Path(tmp_path / "big").glob("traj_*.csv"))) == 1000
