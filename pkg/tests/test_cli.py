import csv
import json
from pathlib import Path

import numpy as np
import pytest

from magan.checkpoint import load_model
from magan.cli import build_config, evaluate_metrics, main
from magan.data import load_table_csv, write_table_csv
from magan.evaluation import correspondence_error, holdout_correlation
from magan.model import map_forward, read_history_csv

SMALL = ["--set", "gen_hidden=8", "--set", "disc_hidden=8", "--set", "minibatch_features=4", "--set", "batch_size=32"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def gaussian_dir(tmp_path):
    d = tmp_path / "gauss"
    assert run("gendata", "gaussian", "--seed", 1, "--points-per-cluster", 40, "--out", d) == 0
    return d


@pytest.fixture
def tabular_dir(tmp_path):
    d = tmp_path / "tab"
    assert run("gendata", "paired-tabular", "--seed", 2, "--n", 200, "--d", 8, "--shared", 4, "--out", d) == 0
    return d


def train_into(out, data_dir, *extra, iterations=10):
    return run(
        "train", "--domain1", data_dir / "domain1.csv", "--domain2", data_dir / "domain2.csv",
        "--out", out, "--set", f"iterations={iterations}", *SMALL, *extra,
    )


# --- gendata --------------------------------------------------------------------


def test_gendata_gaussian_has_class_columns(gaussian_dir):
    for name in ("domain1.csv", "domain2.csv"):
        header = (gaussian_dir / name).read_text().splitlines()[0].split(",")
        assert "__class" in header
    manifest = json.loads((gaussian_dir / "manifest.json").read_text())
    assert manifest["status"] == "complete" and manifest["seed"] == 1


def test_gendata_paired_pair_ids_biject(tmp_path):
    d = tmp_path / "p"
    assert run("gendata", "paired-tabular", "--n", 2000, "--d", 20, "--shared", 10, "--out", d) == 0
    a, b = load_table_csv(d / "domain1.csv"), load_table_csv(d / "domain2.csv")
    assert len(set(a.pair_ids)) == len(a.pair_ids) == 2000
    assert set(a.pair_ids) == set(b.pair_ids)


def test_gendata_is_byte_identical(tmp_path):
    for sub in ("a", "b"):
        assert run("gendata", "gaussian", "--seed", 4, "--points-per-cluster", 10, "--out", tmp_path / sub) == 0
    for name in ("domain1.csv", "domain2.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_gendata_digits(tmp_path):
    assert run("gendata", "digits-rotated", "--out", tmp_path) == 0
    a = load_table_csv(tmp_path / "domain1.csv")
    b = load_table_csv(tmp_path / "domain2.csv")
    assert a.n_features == b.n_features == 784
    assert a.pair_ids == b.pair_ids


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("MAGAN_SEED", "9")
    assert run("gendata", "gaussian", "--points-per-cluster", 5, "--out", tmp_path) == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["seed"] == 9
    assert build_config(None, [], None).seed == 9
    assert build_config(None, [], 3).seed == 3


@pytest.mark.parametrize(
    "argv",
    [
        ["gendata", "gaussian"],
        ["gendata", "spirals", "--out", "x"],
        ["train", "--domain1", "a.csv"],
        ["map", "--model", "m", "--input", "i", "--direction", "13", "--out", "o"],
    ],
)
def test_flag_errors_exit_2(argv, capsys):
    with pytest.raises(SystemExit) as info:
        run(*argv)
    assert info.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_bad_set_syntax_exits_2(gaussian_dir, tmp_path, capsys):
    assert train_into(tmp_path / "m", gaussian_dir, "--set", "novalue") == 2
    assert "usage" in capsys.readouterr().err


def test_invalid_config_exits_1(gaussian_dir, tmp_path, capsys):
    assert train_into(tmp_path / "m", gaussian_dir, "--set", "batch_size=-3") == 1
    assert "batch_size" in capsys.readouterr().err


# --- train ----------------------------------------------------------------------


def test_train_smoke_writes_artifacts(gaussian_dir, tmp_path, capsys):
    out = tmp_path / "m"
    assert train_into(out, gaussian_dir, "--set", "log_every=5") == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert all(Path(p).exists() for p in manifest["outputs"])
    assert (out / "model.magan").exists() and (out / "history.csv").exists()
    assert len(read_history_csv(out / "history.csv")) == 10
    assert "iter 5:" in capsys.readouterr().err


def test_train_config_file_and_override(gaussian_dir, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lambda_c": 0.5, "correspondence_mode": "unsupervised"}))
    assert train_into(tmp_path / "m", gaussian_dir, "--config", cfg, "--set", "lambda_c=0") == 0
    model = load_model(tmp_path / "m" / "model.magan")
    assert model.config.lambda_c == 0.0


def test_train_twice_gives_identical_checkpoints(gaussian_dir, tmp_path):
    assert train_into(tmp_path / "a", gaussian_dir, "--seed", 3) == 0
    assert train_into(tmp_path / "b", gaussian_dir, "--seed", 3) == 0
    assert (tmp_path / "a" / "model.magan").read_bytes() == (tmp_path / "b" / "model.magan").read_bytes()
    assert (tmp_path / "a" / "history.csv").read_bytes() == (tmp_path / "b" / "history.csv").read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exits_1(gaussian_dir, tmp_path, capsys):
    # an absurd learning rate drives the losses to inf/nan
    code = train_into(tmp_path / "m", gaussian_dir, "--set", "learning_rate=1e300", iterations=50)
    err = capsys.readouterr().err
    assert code == 1
    assert "diverged at iteration" in err


# --- map ------------------------------------------------------------------------


@pytest.fixture
def trained_gaussian(gaussian_dir, tmp_path):
    out = tmp_path / "model"
    assert train_into(out, gaussian_dir, iterations=300) == 0
    return out


def test_map_header_and_round_trip(trained_gaussian, gaussian_dir, tmp_path):
    src = gaussian_dir / "domain1.csv"
    assert run("map", "--model", trained_gaussian / "model.magan", "--input", src, "--direction", "12", "--out", tmp_path / "m12.csv") == 0
    header = (tmp_path / "m12.csv").read_text().splitlines()[0].split(",")
    assert header == ["x0", "x1", "__class"]
    assert run("map", "--model", trained_gaussian / "model.magan", "--input", tmp_path / "m12.csv", "--direction", "21", "--out", tmp_path / "back.csv") == 0
    back = load_table_csv(tmp_path / "back.csv").matrix
    orig = load_table_csv(src).matrix
    hist = read_history_csv(trained_gaussian / "history.csv")
    final_lr = np.mean([h.L_r1 for h in hist[-20:]])
    assert np.mean((back - orig) ** 2) < final_lr


def test_map_empty_input(trained_gaussian, tmp_path, capsys):
    empty = tmp_path / "e.csv"
    empty.write_text("x0,x1\n")
    out = tmp_path / "o.csv"
    assert run("map", "--model", trained_gaussian / "model.magan", "--input", empty, "--direction", "12", "--out", out) == 1
    assert not out.exists()


def test_map_dimension_mismatch(trained_gaussian, tmp_path, capsys):
    bad = tmp_path / "b.csv"
    bad.write_text("a,b,c\n1,2,3\n")
    assert run("map", "--model", trained_gaussian / "model.magan", "--input", bad, "--direction", "12", "--out", tmp_path / "o.csv") == 1
    assert "expects 2 input columns" in capsys.readouterr().err


# --- evaluate -------------------------------------------------------------------


def test_evaluate_matches_library(tabular_dir, tmp_path):
    m = tmp_path / "m"
    assert train_into(m, tabular_dir) == 0
    out = tmp_path / "ev"
    assert run(
        "evaluate", "--model", m / "model.magan", "--domain1", tabular_dir / "domain1.csv",
        "--domain2", tabular_dir / "domain2.csv", "--metric", "corr-error", "--metric", "assignment", "--out", out,
    ) == 0
    report = json.loads((out / "report.json").read_text())
    model = load_model(m / "model.magan")
    ds1, ds2 = load_table_csv(tabular_dir / "domain1.csv"), load_table_csv(tabular_dir / "domain2.csv")
    e1, e2 = correspondence_error(model, ds1, ds2)
    assert report["metrics"]["mse_1_from_2"] == e1
    assert report["metrics"]["mse_2_from_1"] == e2
    lib = evaluate_metrics(model, ds1, ds2, ["corr-error", "assignment"])
    assert lib["metrics"] == report["metrics"]
    rows = list(csv.reader((out / "metrics.csv").open()))
    assert rows[0] == ["metric", "value"]
    assert {r[0] for r in rows[1:]} == set(report["metrics"])


def test_evaluate_holdout_scatter(tabular_dir, tmp_path):
    ds1 = load_table_csv(tabular_dir / "domain1.csv")
    reduced = tmp_path / "reduced.csv"
    keep = [n for n in ds1.feature_names if n != "s3"]
    write_table_csv(ds1.with_matrix(ds1.matrix[:, [ds1.feature_index(n) for n in keep]], keep), reduced)
    m = tmp_path / "m"
    assert run(
        "train", "--domain1", reduced, "--domain2", tabular_dir / "domain2.csv", "--out", m,
        "--set", "iterations=10", *SMALL,
    ) == 0
    out = tmp_path / "ev"
    assert run(
        "evaluate", "--model", m / "model.magan", "--domain1", tabular_dir / "domain1.csv",
        "--domain2", tabular_dir / "domain2.csv", "--metric", "holdout", "--feature", "s3", "--out", out,
    ) == 0
    rows = list(csv.reader((out / "holdout_s3.csv").open()))
    assert rows[0] == ["true", "predicted"]
    assert all(len(r) == 2 for r in rows) and len(rows) == 201
    t = np.array([float(r[0]) for r in rows[1:]])
    p = np.array([float(r[1]) for r in rows[1:]])
    report = json.loads((out / "report.json").read_text())
    assert report["metrics"]["holdout_r_s3"] == holdout_correlation(t, p)
    model = load_model(m / "model.magan")
    np.testing.assert_array_equal(p, map_forward(model, load_table_csv(reduced).matrix, "12")[:, model.names2.index("s3")])


def test_evaluate_missing_prerequisites(gaussian_dir, tmp_path, capsys):
    m = tmp_path / "m"
    assert train_into(m, gaussian_dir) == 0
    code = run(
        "evaluate", "--model", m / "model.magan", "--domain1", gaussian_dir / "domain1.csv",
        "--domain2", gaussian_dir / "domain2.csv", "--metric", "corr-error", "--metric", "holdout", "--out", tmp_path / "e",
    )
    err = capsys.readouterr().err
    assert code == 1
    assert "corr-error: needs" in err and "holdout: needs" in err


# --- simulate -------------------------------------------------------------------


def test_simulate_single_run(gaussian_dir, tmp_path):
    out = tmp_path / "sim"
    assert run(
        "simulate", "--runs", 1, "--domain1", gaussian_dir / "domain1.csv", "--domain2", gaussian_dir / "domain2.csv",
        "--out", out, "--set", "iterations=10", *SMALL,
    ) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert sum(summary["frequencies"].values()) == 1
    rows = list(csv.reader((out / "frequencies.csv").open()))
    assert len(rows) == 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "complete"
    assert manifest["details"]["runs"] == {"0": "ok"}
    assert (out / "runs" / "run_0.json").exists()


def test_simulate_all_failed_exits_1(tmp_path):
    bad1, bad2 = tmp_path / "a.csv", tmp_path / "b.csv"
    bad1.write_text("p,__class\n1,0\n2,1\n")
    bad2.write_text("q,__class\n1,0\n2,1\n")  # no shared names, unsupervised mode fails
    out = tmp_path / "sim"
    assert run("simulate", "--runs", 2, "--domain1", bad1, "--domain2", bad2, "--out", out, "--set", "iterations=2", *SMALL) == 1
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["details"]["runs"] == {"0": "failed", "1": "failed"}


def test_simulate_interrupted_run_marks_incomplete(tmp_path, monkeypatch):
    import magan.cli as cli

    def boom(*a, on_result=None, **k):
        raise KeyboardInterrupt

    monkeypatch.setattr(cli, "stability_simulation", boom)
    out = tmp_path / "sim"
    with pytest.raises(KeyboardInterrupt):
        run("simulate", "--runs", 3, "--out", out, "--set", "iterations=2")
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "incomplete"
    assert set(manifest["details"]["runs"].values()) == {"pending"}


def test_schema_command(capsys):
    assert run("schema") == 0
    schema = json.loads(capsys.readouterr().out)
    assert "lambda_c" in schema["properties"]
