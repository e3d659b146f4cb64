import csv
import hashlib
import json

import numpy as np
import pytest

from daef import anomaly, model as daef_model, schemas
from daef.cli import main
from daef.data import LabeledDataset, bundled_data, write_csv


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def toy_csv(tmp_path):
    r = np.random.default_rng(0)
    x = np.hstack([r.standard_normal((4, 120)), 8 + r.standard_normal((4, 20))])
    y = np.r_[np.zeros(120, bool), np.ones(20, bool)]
    path = tmp_path / "toy.csv"
    write_csv(path, LabeledDataset(x, y))
    return path


TOY = ["--set", "architecture.layer_sizes=[4,2,3,4]", "--set", "threshold=extreme_iqr"]


def test_train_writes_model_and_summary(tmp_path, toy_csv, capsys):
    out = tmp_path / "m.json"
    assert main(["train", "--data", str(toy_csv), "--out", str(out), *TOY]) == 0
    model = daef_model.load(out)
    assert model.threshold is not None and model.scaler is not None
    summary = json.loads((tmp_path / "m.json.summary.json").read_text())
    assert summary["n_train"] == 120
    assert [l["shape"] for l in summary["layers"]] == ["4x2", "2x3", "3x4"]
    assert "decoder 2" in capsys.readouterr().out


def test_train_bundled_config(tmp_path):
    out = tmp_path / "ion.json"
    assert main(["train", "--config", "ionosphere", "--out", str(out)]) == 0
    assert daef_model.load(out).arch.layer_sizes == (33, 8, 14, 33)


def test_train_workers_same_file(tmp_path, toy_csv):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    main(["train", "--data", str(toy_csv), "--out", str(a), "--workers", "1", *TOY])
    main(["train", "--data", str(toy_csv), "--out", str(b), "--workers", "4", *TOY])
    assert sha(a) == sha(b)


def test_bad_architecture_exit_2(tmp_path, capsys):
    code = main(["train", "--config", "shuttle", "--set", "architecture.layer_sizes=[9,3,5,7,8]",
                 "--out", str(tmp_path / "m.json")])
    assert code == 2
    assert "first and last layer sizes must match" in capsys.readouterr().err


def test_config_file_and_errors(tmp_path, toy_csv):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"architecture": {"layer_sizes": [4, 2, 4], "lambda_hidden": 0.5,
                                                "lambda_last": 0.5}, "threshold": "q95"}))
    assert main(["train", "--config", str(cfg), "--data", str(toy_csv), "--out", str(tmp_path / "m.json")]) == 0
    cfg.write_text("{not json")
    assert main(["train", "--config", str(cfg), "--data", str(toy_csv)]) == 2
    assert main(["train", "--config", "no-such-config"]) == 2
    assert main(["train", "--data", str(toy_csv), "--set", "oops"]) == 2


def test_data_errors_exit_3(tmp_path, toy_csv):
    assert main(["train", "--data", str(tmp_path / "missing.csv"), *TOY]) == 3
    assert main(["train", "--data", str(toy_csv), "--set", "architecture.layer_sizes=[5,2,5]"]) == 3
    cardio_present = bundled_data("cardio.csv") is not None
    assert main(["train", "--config", "cardio", "--out", str(tmp_path / "m.json")]) == (0 if cardio_present else 3)


def test_eval_report(tmp_path, toy_csv, capsys):
    out = tmp_path / "r.json"
    assert main(["eval", "--data", str(toy_csv), "--out", str(out), "--seed", "5", *TOY]) == 0
    doc = json.loads(out.read_text())
    schemas.validate(doc, "eval_report")
    assert doc["mean_f1"] == 1.0
    assert "100.0±0.0" in capsys.readouterr().out
    again = tmp_path / "r2.json"
    main(["eval", "--data", str(toy_csv), "--out", str(again), "--seed", "5", *TOY])
    assert out.read_bytes() == again.read_bytes()


def test_eval_too_many_folds(tmp_path, toy_csv):
    assert main(["eval", "--data", str(toy_csv), "--set", "folds=30", *TOY,
                 "--out", str(tmp_path / "r.json")]) == 3


def test_eval_ionosphere_row(tmp_path, capsys):
    assert main(["eval", "--config", "ionosphere", "--out", str(tmp_path / "r.json")]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[-1].split()[0] == "ionosphere"


def test_predict_scores(tmp_path, toy_csv):
    model_path, scores = tmp_path / "m.json", tmp_path / "s.csv"
    main(["train", "--data", str(toy_csv), "--out", str(model_path), *TOY])
    assert main(["predict", "--model", str(model_path), "--data", str(toy_csv),
                 "--label-column", "label", "--out", str(scores)]) == 0
    rows = list(csv.DictReader(scores.open()))
    assert len(rows) == 140
    model = daef_model.load(model_path)
    errors = np.array([float(r["error"]) for r in rows])
    flags = np.array([r["anomaly"] == "1" for r in rows])
    np.testing.assert_array_equal(flags, anomaly.classify(errors, model.threshold.value))


def test_predict_without_threshold(tmp_path, toy_csv, capsys):
    model_path = tmp_path / "m.json"
    main(["train", "--data", str(toy_csv), "--out", str(model_path), *TOY])
    model = daef_model.load(model_path)
    model.threshold = None
    daef_model.save(model, model_path)
    scores = tmp_path / "s.csv"
    assert main(["predict", "--model", str(model_path), "--data", str(toy_csv),
                 "--label-column", "label", "--out", str(scores)]) == 0
    assert scores.read_text().splitlines()[0] == "index,error"
    assert "warning" in capsys.readouterr().err


def test_predict_shape_mismatch(tmp_path, toy_csv):
    model_path = tmp_path / "m.json"
    main(["train", "--data", str(toy_csv), "--out", str(model_path), *TOY])
    # without dropping the label column the data has one feature too many
    assert main(["predict", "--model", str(model_path), "--data", str(toy_csv)]) == 3


def test_fedsim_layer_sync(toy_csv, capsys):
    assert main(["fedsim", "--data", str(toy_csv), "--nodes", "4", *TOY]) == 0
    out = capsys.readouterr().out
    delta = float(out.strip().splitlines()[-1].split("=")[1].split()[0])
    assert delta < 1e-7
    assert "node3" in out and "global" in out


def test_fedsim_one_node_exact(toy_csv, capsys):
    assert main(["fedsim", "--data", str(toy_csv), "--nodes", "1", *TOY]) == 0
    assert "= 0.000e+00" in capsys.readouterr().out


def test_fedsim_aborted_session_exit_5(toy_csv, capsys):
    assert main(["fedsim", "--data", str(toy_csv), "--nodes", "2", "--timeout", "1e-9", *TOY]) == 5
    assert "aborted" in capsys.readouterr().err


def test_fedsim_post_hoc_reports_delta(toy_csv, capsys):
    assert main(["fedsim", "--data", str(toy_csv), "--nodes", "2", "--mode", "post_hoc", *TOY]) == 0
    assert "approximate" in capsys.readouterr().out


def test_threshold_command(tmp_path, capsys):
    errors = tmp_path / "e.txt"
    errors.write_text("1\n2\n3\n4\n100\n")
    assert main(["threshold", "--errors", str(errors), "--spec", "unusual_iqr"]) == 0
    assert capsys.readouterr().out.splitlines()[-1] == "unusual_iqr  7.0"
    assert main(["threshold", "--errors", str(errors), "--spec", "bogus"]) == 2
    assert main(["threshold"]) == 2


def test_convert_mat(tmp_path):
    import scipy.io

    scipy.io.savemat(tmp_path / "t.mat", {"X": np.ones((5, 2)), "y": np.array([[0], [1], [0], [0], [1]])})
    assert main(["convert-mat", str(tmp_path / "t.mat"), str(tmp_path / "t.csv")]) == 0
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "x0,x1,label"
    assert main(["convert-mat", str(tmp_path / "none.mat"), str(tmp_path / "x.csv")]) == 3
