import numpy as np
import pytest
import yaml

from koopmpc.cli import main
from koopmpc.dynamics import read_dataset, write_dataset
from koopmpc.edmd import DataSet, load_model


def run(tmp_path, command, cfg=None, *extra, name=None):
    tmp_path.mkdir(parents=True, exist_ok=True)
    argv = [command, "--out", str(tmp_path)]
    if cfg is not None:
        path = tmp_path / f"{name or command}.yaml"
        path.write_text(yaml.safe_dump(cfg))
        argv += ["--config", str(path)]
    return main(argv + list(extra))


def test_datagen_sizes_and_determinism(tmp_path):
    cfg = {"system": "vdp", "n_traj": 3, "steps": 10}
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(a, "datagen", cfg, name="x") == 0
    assert run(b, "datagen", cfg, name="x") == 0
    assert (a / "dataset.csv").read_bytes() == (b / "dataset.csv").read_bytes()
    assert read_dataset(a / "dataset.csv").K == 30


def test_datagen_single_sample_binary(tmp_path):
    cfg = {"system": "motor", "n_traj": 1, "steps": 1}
    assert run(tmp_path, "datagen", cfg, "--format", "binary") == 0
    assert read_dataset(tmp_path / "dataset.bin").K == 1


def test_seed_flag_changes_data(tmp_path):
    cfg = {"system": "vdp", "n_traj": 1, "steps": 5}
    run(tmp_path / "a", "datagen", cfg, "--seed", "1", name="x")
    run(tmp_path / "b", "datagen", cfg, "--seed", "2", name="x")
    assert (tmp_path / "a" / "dataset.csv").read_bytes() != \
        (tmp_path / "b" / "dataset.csv").read_bytes()


def test_fit_identity_on_linear_data(tmp_path, capsys):
    r = np.random.default_rng(0)
    A = np.array([[0.9, 0.1], [0.0, 0.8]])
    B = np.array([[0.0], [1.0]])
    X, U = r.standard_normal((2, 50)), r.standard_normal((1, 50))
    write_dataset(DataSet(X, A @ X + B @ U, U), tmp_path / "lin.csv")
    cfg = {"dataset": str(tmp_path / "lin.csv"),
           "dictionary": {"kind": "identity"}}
    assert run(tmp_path, "fit", cfg) == 0
    out = capsys.readouterr().out
    resid = float(out.split("residual_lift=")[1].split()[0])
    assert resid <= 1e-8
    model = load_model(tmp_path / "model.txt")
    np.testing.assert_allclose(model.A, A, atol=1e-8)


def test_fit_and_predict_vdp(tmp_path):
    assert run(tmp_path, "datagen", {"system": "vdp", "n_traj": 20,
                                     "steps": 50}) == 0
    cfg = {"dataset": str(tmp_path / "dataset.csv"),
           "dictionary": {"kind": "rbf", "count": 20}}
    assert run(tmp_path, "fit", cfg) == 0
    assert load_model(tmp_path / "model.txt").N == 22
    cfg = {"model": str(tmp_path / "model.txt"), "x0": [0.2, -0.1],
           "steps": 30, "system": "vdp"}
    assert run(tmp_path, "predict", cfg) == 0
    lines = (tmp_path / "prediction.csv").read_text().splitlines()
    assert lines[0] == "step,t,pred0,pred1,true0,true1"
    assert len(lines) == 32
    assert (tmp_path / "prediction.png").stat().st_size > 0


def test_fit_io_model(tmp_path):
    run(tmp_path, "datagen", {"system": "motor", "n_traj": 10, "steps": 30})
    cfg = {"dataset": str(tmp_path / "dataset.csv"), "n_d": 1,
           "output": [1], "dictionary": {"kind": "rbf", "count": 5}}
    assert run(tmp_path, "fit", cfg) == 0
    model = load_model(tmp_path / "model.txt")
    assert model.delay == (1, 1) and model.N == 8


def test_missing_dataset_exit_code(tmp_path, capsys):
    cfg = {"dataset": str(tmp_path / "nope.csv")}
    assert run(tmp_path, "fit", cfg) == 2
    assert "error" in capsys.readouterr().err


def test_unknown_key_exit_code(tmp_path):
    assert run(tmp_path, "datagen", {"sytem": "vdp"}) == 2


def test_unknown_system_and_command(tmp_path):
    assert run(tmp_path, "datagen", {"system": "pendulum"}) == 2
    assert main(["train", "--out", str(tmp_path)]) == 2


def test_compare_table1_small(tmp_path, capsys):
    cfg = {"experiment": "table1", "n_traj": 20, "steps": 100,
           "n_trials": 3, "horizon": 50, "n_rbf": 10}
    assert run(tmp_path, "compare", cfg) == 0
    summary = (tmp_path / "rmse_summary.csv").read_text().splitlines()
    assert summary[0] == "predictor,mean_rmse_percent"
    assert len(summary) == 5
    trials = (tmp_path / "rmse_trials.csv").read_text().splitlines()
    assert len(trials) == 1 + 4 * 3
    assert (tmp_path / "rmse_summary.png").exists()
    assert (tmp_path / "trial0.png").exists()
    assert "koopman: mean RMSE" in capsys.readouterr().out


def test_compare_table2_rows(tmp_path):
    cfg = {"experiment": "table2", "n_traj": 10, "steps": 100,
           "n_trials": 2, "horizon": 30}
    assert run(tmp_path, "compare", cfg, "--no-figures") == 0
    summary = (tmp_path / "rmse_summary.csv").read_text().splitlines()
    assert len(summary) == 7
    assert not (tmp_path / "rmse_vs_size.png").exists()


def test_mpc_motor2_linearized_is_infeasible(tmp_path, capsys):
    cfg = {"scenario": "motor2", "controller": "linearized", "steps": 20}
    assert run(tmp_path, "mpc", cfg) == 4
    log = (tmp_path / "closed_loop_motor2_linearized.csv").read_text()
    assert log.splitlines()[-1].endswith("infeasible at step 0")
    assert "infeasible" in capsys.readouterr().err


def test_mpc_motor_koopman_with_model_file(tmp_path, capsys):
    run(tmp_path, "datagen", {"system": "motor", "n_traj": 20, "steps": 50})
    run(tmp_path, "fit", {"dataset": str(tmp_path / "dataset.csv"),
                          "n_d": 1, "output": [1],
                          "dictionary": {"kind": "identity"}})
    cfg = {"scenario": "motor1", "controller": "koopman", "steps": 15,
           "horizon": 10, "model": str(tmp_path / "model.txt")}
    assert run(tmp_path, "mpc", cfg) == 0
    out = capsys.readouterr().out
    assert "condensations=1" in out and "max_solve_ms" in out
    lines = (tmp_path / "closed_loop_motor1_koopman.csv").read_text(
    ).splitlines()
    assert lines[0] == "step,t,y0,u0,solve_ms,qp_iters,status"
    assert len(lines) == 16
    assert (tmp_path / "closed_loop_motor1_koopman.png").exists()


def test_mpc_rejects_state_model(tmp_path):
    run(tmp_path, "datagen", {"system": "motor", "n_traj": 5, "steps": 20})
    run(tmp_path, "fit", {"dataset": str(tmp_path / "dataset.csv"),
                          "dictionary": {"kind": "identity"}})
    cfg = {"scenario": "motor1", "controller": "koopman", "steps": 2,
           "model": str(tmp_path / "model.txt")}
    assert run(tmp_path, "mpc", cfg) == 2


def test_mpc_kdv_small(tmp_path):
    cfg = {"scenario": "kdv", "n_traj": 20, "steps_per_traj": 30,
           "steps": 10}
    assert run(tmp_path, "mpc", cfg, "--no-figures") == 0
    lines = (tmp_path / "closed_loop_kdv_koopman.csv").read_text(
    ).splitlines()
    assert len(lines) == 11
    assert lines[0].startswith("step,t,y0,y1,")
    assert lines[0].count(",u") == 3


def test_mpc_bad_weights(tmp_path):
    cfg = {"scenario": "motor1", "controller": "linearized",
           "weights": {"S": 1.0}}
    assert run(tmp_path, "mpc", cfg) == 2
