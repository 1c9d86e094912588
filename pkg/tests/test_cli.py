"""End-to-end checks of every subcommand through main()."""

import os

import numpy as np
import pytest

from flowcast.cli import main
from flowcast.dataset import load_flow_binary
from flowcast.training import load_checkpoint

TINY = ["--set", "model.head_dim=4", "--set", "model.blocks=1",
        "--set", "dyn_graph.embed_dim=4", "--set", "model.k_r=5",
        "--set", "train.batch=32", "--set", "train.timing=none"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    rc = main(["gen-data", "--nodes", "6", "--days", "2", "--seed", "3",
               "--out-dir", os.fspath(out)])
    assert rc == 0
    return {"flow": os.fspath(out / "flow.stdn"),
            "edges": os.fspath(out / "edges.csv")}


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    rc = main(["train", "--data", dataset["flow"], "--edges", dataset["edges"],
               "--out-dir", os.fspath(out), "--set", "train.max_epochs=2",
               *TINY])
    assert rc == 0
    return {"dir": out, "checkpoint": os.fspath(out / "best.stdc"),
            "history": os.fspath(out / "history.csv"), **dataset}


# -- gen-data -------------------------------------------------------------------

def test_gen_data_file_sizes_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["gen-data", "--nodes", "8", "--days", "7", "--seed", "1",
                     "--out-dir", os.fspath(out)]) == 0
    capsys.readouterr()
    flow = (a / "flow.stdn").read_bytes()
    assert len(flow) == 32 + 7 * 288 * 8 * 1 * 4
    assert flow == (b / "flow.stdn").read_bytes()
    assert (a / "edges.csv").read_bytes() == (b / "edges.csv").read_bytes()


def test_gen_data_rejects_single_node(tmp_path, capsys):
    rc = main(["gen-data", "--nodes", "1", "--out-dir", os.fspath(tmp_path)])
    assert rc == 1
    assert "--nodes" in capsys.readouterr().err


# -- convert --------------------------------------------------------------------

def test_convert_roundtrip(tmp_path, capsys):
    dump = tmp_path / "dump.txt"
    dump.write_text("1.0,2.0\n3.5,4.5\n5.0,6.0\n")
    out = os.fspath(tmp_path / "conv.stdn")
    rc = main(["convert", "--input", os.fspath(dump), "--output", out,
               "--steps-per-day", "3"])
    assert rc == 0
    series = load_flow_binary(out)
    np.testing.assert_array_equal(
        series.values[:, :, 0], [[1.0, 2.0], [3.5, 4.5], [5.0, 6.0]])
    assert series.steps_per_day == 3


def test_convert_missing_input_is_io_error(tmp_path, capsys):
    rc = main(["convert", "--input", os.fspath(tmp_path / "nope.txt"),
               "--output", os.fspath(tmp_path / "x.stdn"),
               "--steps-per-day", "4"])
    assert rc == 1
    assert "nope.txt" in capsys.readouterr().err


# -- train ----------------------------------------------------------------------

def test_train_writes_history_and_checkpoint(trained, capsys):
    lines = open(trained["history"]).read().splitlines()
    assert lines[0] == "epoch,train_loss,val_mae,val_rmse,val_mape,seconds"
    assert len(lines) == 3
    state = load_checkpoint(trained["checkpoint"])
    assert "head.w_out" in state


def test_train_zero_lr_leaves_parameters_at_init(dataset, tmp_path, capsys):
    dirs = [os.fspath(tmp_path / n) for n in ("one", "two")]
    for out, epochs in zip(dirs, ("1", "3")):
        rc = main(["train", "--data", dataset["flow"], "--edges",
                   dataset["edges"], "--out-dir", out,
                   "--set", "train.lr=0", "--set", f"train.max_epochs={epochs}",
                   "--set", "train.patience=5", *TINY])
        assert rc == 0
    first = open(os.path.join(dirs[0], "best.stdc"), "rb").read()
    second = open(os.path.join(dirs[1], "best.stdc"), "rb").read()
    assert first == second


def test_train_missing_data_file_exits_one(dataset, tmp_path, capsys):
    rc = main(["train", "--data", os.fspath(tmp_path / "absent.stdn"),
               "--edges", dataset["edges"], "--out-dir", os.fspath(tmp_path)])
    assert rc == 1
    assert "absent.stdn" in capsys.readouterr().err


def test_train_rejects_unknown_config_key(dataset, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("train.lr = 0.01\n\n# comment\nmodel.wat = 3\n")
    rc = main(["train", "--data", dataset["flow"], "--edges", dataset["edges"],
               "--config", os.fspath(cfg), "--out-dir", os.fspath(tmp_path)])
    assert rc == 1
    err = capsys.readouterr().err
    assert "line 4" in err and "model.wat" in err


def test_train_rejects_bad_override(dataset, tmp_path, capsys):
    rc = main(["train", "--data", dataset["flow"], "--edges", dataset["edges"],
               "--out-dir", os.fspath(tmp_path), "--set", "train.lr=fast"])
    assert rc == 1
    assert "train.lr" in capsys.readouterr().err


# -- eval / predict ---------------------------------------------------------------

def test_eval_prints_metrics_row(trained, capsys):
    rc = main(["eval", "--data", trained["flow"], "--edges", trained["edges"],
               "--checkpoint", trained["checkpoint"], "--split", "val", *TINY])
    assert rc == 0
    row = capsys.readouterr().out.strip().splitlines()[-1]
    mae, rmse, mape = (float(v) for v in row.split(","))
    assert rmse >= mae > 0

    history = open(trained["history"]).read().splitlines()
    best_val = min(float(line.split(",")[2]) for line in history[1:])
    assert mae == pytest.approx(best_val, abs=1e-6)


def test_eval_threads_match_sequential(trained, capsys):
    rows = []
    for threads in ("1", "3"):
        rc = main(["eval", "--data", trained["flow"], "--edges",
                   trained["edges"], "--checkpoint", trained["checkpoint"],
                   "--split", "test", "--threads", threads, *TINY])
        assert rc == 0
        rows.append(capsys.readouterr().out.strip().splitlines()[-1])
    assert rows[0] == rows[1]


def test_predict_roundtrips_through_loader(trained, tmp_path, capsys):
    out = os.fspath(tmp_path / "preds.stdn")
    rc = main(["predict", "--data", trained["flow"], "--edges",
               trained["edges"], "--checkpoint", trained["checkpoint"],
               "--split", "test", "--out", out, *TINY])
    assert rc == 0
    series = load_flow_binary(out)
    assert series.values.shape[1:] == (6, 1)
    assert series.values.shape[0] % 12 == 0
    assert np.isfinite(series.values).all()


def test_eval_checkpoint_shape_mismatch_names_parameter(trained, tmp_path, capsys):
    rc = main(["eval", "--data", trained["flow"], "--edges", trained["edges"],
               "--checkpoint", trained["checkpoint"], "--split", "val",
               "--set", "model.head_dim=8", "--set", "model.blocks=1",
               "--set", "dyn_graph.embed_dim=4", "--set", "model.k_r=5"])
    assert rc == 1
    assert "shape mismatch" in capsys.readouterr().err


# -- grad-check -------------------------------------------------------------------

def test_grad_check_exits_zero_with_report(capsys):
    rc = main(["grad-check", "--seed", "7"])
    out = capsys.readouterr().out
    assert rc == 0
    assert out.splitlines()[0] == "seed,parameter,max_rel_err"
    assert "7,head.w_out," in out
    assert out.splitlines()[-1].startswith("worst=")


def test_grad_check_impossible_tolerance_fails(capsys):
    rc = main(["grad-check", "--seed", "7", "--tol", "1e-18"])
    assert rc == 2
    assert "gradient check failed" in capsys.readouterr().err


# -- inspect commands ---------------------------------------------------------------

def test_inspect_graph_path_eigenvalues(tmp_path, capsys):
    edges = tmp_path / "p3.csv"
    edges.write_text("from,to,cost\n0,1,1.0\n1,2,1.0\n")
    rc = main(["inspect-graph", "--edges", os.fspath(edges), "--nodes", "3"])
    assert rc == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "nodes,edges,components,eig0,eig1,eig2"
    assert lines[1] == "3,2,1,0.00000000,1.00000000,2.00000000"


def test_inspect_graph_counts_components(tmp_path, capsys):
    edges = tmp_path / "split.csv"
    edges.write_text("from,to,cost\n0,1,1.0\n2,3,1.0\n")
    rc = main(["inspect-graph", "--edges", os.fspath(edges), "--nodes", "5"])
    assert rc == 0
    row = capsys.readouterr().out.splitlines()[1]
    assert row.startswith("5,2,3,")


def test_inspect_decomposition_rows(trained, capsys):
    rc = main(["inspect-decomposition", "--data", trained["flow"], "--edges",
               trained["edges"], "--checkpoint", trained["checkpoint"],
               "--sample", "4", *TINY])
    assert rc == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "node,mean_abs_trend,mean_abs_seasonal"
    assert len(lines) == 7
    for line in lines[1:]:
        node, trend, seasonal = line.split(",")
        assert float(trend) >= 0 and float(seasonal) >= 0


def test_inspect_decomposition_sample_out_of_range(trained, capsys):
    rc = main(["inspect-decomposition", "--data", trained["flow"], "--edges",
               trained["edges"], "--checkpoint", trained["checkpoint"],
               "--sample", "99999", *TINY])
    assert rc == 1
    assert "--sample" in capsys.readouterr().err


# -- parser behavior -----------------------------------------------------------------

@pytest.mark.parametrize("command", ["gen-data", "convert", "train", "eval",
                                     "predict", "grad-check", "inspect-graph",
                                     "inspect-decomposition"])
def test_every_subcommand_has_help(command, capsys):
    with pytest.raises(SystemExit) as exit_info:
        main([command, "--help"])
    assert exit_info.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_unknown_flag_exits_nonzero(capsys):
    with pytest.raises(SystemExit) as exit_info:
        main(["gen-data", "--wat", "3"])
    assert exit_info.value.code == 1
    assert "usage" in capsys.readouterr().err


def test_missing_subcommand_exits_nonzero(capsys):
    with pytest.raises(SystemExit) as exit_info:
        main([])
    assert exit_info.value.code == 1
