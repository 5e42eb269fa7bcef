import hashlib
import json

import numpy as np
import pandas as pd
import pytest

from cffe import cli
from cffe.dgp import DgpSpec, generate_panel
from cffe.errors import IoFailure
from cffe.forest import ForestConfig
from cffe.panel import PanelSchema, load_panel
from cffe.reporting import atomic_write, derive_seed, export_panel, infer_schema

from conftest import small_spec


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    return code, capsys.readouterr().err


@pytest.fixture
def small_csv(tmp_path, small_panel):
    ds, _ = small_panel
    path = tmp_path / "panel.csv"
    path.write_bytes(export_panel(ds))
    return path


def test_export_round_trip():
    ds, _ = generate_panel(DgpSpec(seed=12))
    raw = export_panel(ds)
    back = load_panel(raw, infer_schema(raw))
    assert back == ds
    assert export_panel(back) == raw


def test_export_layout(small_panel):
    ds, _ = small_panel
    one = export_panel(ds.subset_rows(np.arange(len(ds)) == 0))  # C01, never treated
    lines = one.decode().splitlines()
    assert len(lines) == 2 and lines[0].startswith("country,year,outcome,adoption_year,")
    assert lines[1].split(",")[3] == ""  # never-treated adoption stays empty


def test_atomic_write_failure(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(IoFailure):
        atomic_write(blocker / "inner.csv", b"data")


def test_derive_seed():
    assert derive_seed(1, "bootstrap") == derive_seed(1, "bootstrap")
    assert derive_seed(1, "bootstrap") != derive_seed(1, "cs")
    assert derive_seed(1, "bootstrap") != derive_seed(2, "bootstrap")


def test_defaults_mirror_library_defaults():
    parser = cli.build_parser()
    args = parser.parse_args(["estimate", "--input", "x", "--out-dir", "y"])
    cfg = ForestConfig()
    assert (args.trees, args.min_leaf, args.max_depth) == (cfg.n_trees, cfg.min_leaf, cfg.max_depth)
    assert (args.k_min, args.k_max) == (-10, 20)
    args = parser.parse_args(["dsge-irf", "--out-dir", "y"])
    assert args.chi == 0.03 and args.horizon == 300 and args.shock_size == -0.01


def test_simulate_then_estimate_noiseless(tmp_path, capsys):
    code, _ = run(capsys, "simulate", "--out-dir", tmp_path / "sim", "--seed", 4, "--sigma-eps", 0)
    assert code == 0
    truth = json.loads((tmp_path / "sim" / "ground_truth.json").read_text())
    assert truth["cate"]["tau"] == -0.35
    code, _ = run(capsys, "estimate", "--input", tmp_path / "sim" / "panel.csv",
                  "--out-dir", tmp_path / "est", "--trees", 20)
    assert code == 0
    curve = pd.read_csv(tmp_path / "est" / "att_curve.csv")
    assert np.abs(curve["att"] + 0.35).max() < 1e-6
    cum = pd.read_csv(tmp_path / "est" / "cumulative.csv")
    assert cum["horizon"].tolist() == list(range(25))


@pytest.mark.parametrize("estimator", ["twfe", "sa", "cs", "ife"])
def test_estimate_comparison_estimators(tmp_path, capsys, small_csv, estimator):
    code, err = run(capsys, "estimate", "--input", small_csv, "--out-dir", tmp_path / "o",
                    "--estimator", estimator, "--bootstrap-reps", 50)
    assert code == 0, err
    name = "ife.json" if estimator == "ife" else "event_study.csv"
    assert (tmp_path / "o" / name).exists()


def test_usage_errors_are_one_line(tmp_path, capsys, small_csv):
    code, err = run(capsys, "estimate", "--input", small_csv, "--out-dir", tmp_path, "--estimator", "ols")
    assert code == 2
    assert err.count("\n") == 1 and err.startswith("error: UsageError: ")
    code, err = run(capsys, "estimate", "--input", tmp_path / "missing.csv", "--out-dir", tmp_path)
    assert code == 1 and err.startswith("error: IoFailure: ")
    code, err = run(capsys, "estimate", "--input", small_csv, "--out-dir", tmp_path, "--trees", 0)
    assert code == 1 and err.startswith("error: InvalidSpec: ")


def test_domain_error_exit(tmp_path, capsys, small_csv):
    code, err = run(capsys, "placebo", "--input", small_csv, "--out-dir", tmp_path, "--fake-year", 2005)
    assert code == 1 and err.startswith("error: FakeDateTooLate: ") and err.count("\n") == 1


def test_controls_and_drop_country(tmp_path, capsys, small_csv):
    code, err = run(capsys, "loo", "--input", small_csv, "--out-dir", tmp_path / "a",
                    "--controls", "eu-only", "--eu-countries", "C01,C02,C03", "--drop-country", "T06")
    assert code == 0, err
    table = pd.read_csv(tmp_path / "a" / "loo.csv")
    assert sorted(table["dropped"]) == ["T01", "T02", "T03", "T04", "T05"]
    code, err = run(capsys, "loo", "--input", small_csv, "--out-dir", tmp_path / "b",
                    "--drop-country", "XXX")
    assert code == 2 and "XXX" in err


def test_pretrends_and_bootstrap_commands(tmp_path, capsys, small_csv):
    assert run(capsys, "pretrends", "--input", small_csv, "--out-dir", tmp_path, "--k-min", -5)[0] == 0
    assert pd.read_csv(tmp_path / "pretrends.csv")["df_num"].item() == 4
    assert run(capsys, "bootstrap", "--input", small_csv, "--out-dir", tmp_path, "--estimator", "twfe",
               "--bootstrap-reps", 50, "--k-min", -3, "--k-max", 5)[0] == 0
    assert pd.read_csv(tmp_path / "bootstrap.csv")["k"].tolist() == [-3, -2, 0, 1, 2, 3, 4, 5]


def test_placebo_command(tmp_path, capsys, small_csv):
    code, err = run(capsys, "placebo", "--input", small_csv, "--out-dir", tmp_path, "--trees", 50,
                    "--min-leaf", 10, "--placebo-countries", "C01,C02,C03", "--placebo-year", 2000)
    assert code == 0, err
    table = pd.read_csv(tmp_path / "placebo.csv")
    assert table["design"].tolist() == ["fake_date", "nontreated", "nontreated", "nontreated",
                                        "nontreated_joint"]
    assert table.loc[0, "year"] == 1996


def test_dsge_commands(tmp_path, capsys):
    assert run(capsys, "dsge-irf", "--out-dir", tmp_path, "--regime", "float", "--horizon", 200)[0] == 0
    irf = pd.read_csv(tmp_path / "irf_float.csv")
    assert set(irf["variable"]) >= {"x_H", "x_F", "e"} and irf["quarter"].max() == 199
    assert run(capsys, "dsge-compare", "--out-dir", tmp_path)[0] == 0
    doc = json.loads((tmp_path / "dsge_compare.json").read_text())
    assert doc["ratio"] > 1
    calib = tmp_path / "cal.txt"
    calib.write_text("phi_pi = 0.5\n")
    code, err = run(capsys, "dsge-irf", "--out-dir", tmp_path, "--calibration", calib)
    assert code == 1 and err.startswith("error: InvalidCalibration")


def test_report_marks_partial_bundles(tmp_path, capsys):
    ds, _ = generate_panel(small_spec(n_treated=2, n_control=4, seed=3))
    path = tmp_path / "tiny.csv"
    path.write_bytes(export_panel(ds))
    before = hashlib.sha256(path.read_bytes()).hexdigest()
    code, err = run(capsys, "report", "--input", path, "--out-dir", tmp_path / "rep", "--trees", 50,
                    "--min-leaf", 5, "--bootstrap-reps", 50, "--horizon", 120)
    assert code == 1 and err.startswith("error: IncompleteBundle: ")
    manifest = json.loads((tmp_path / "rep" / "manifest.json").read_text())
    assert manifest["status"] == "incomplete"
    assert manifest["tasks"]["loo"]["status"] == "failed"
    assert "TooFewTreated" in manifest["tasks"]["loo"]["error"]
    assert manifest["tasks"]["dsge"]["status"] == "ok"
    assert hashlib.sha256(path.read_bytes()).hexdigest() == before
