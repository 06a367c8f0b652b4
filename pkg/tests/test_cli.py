import csv
import json
import subprocess
import sys

import numpy as np
import numpy.testing as npt
import pytest

from conftest import homoscedastic_dataset
from hnervf import cli
from hnervf.estimation import fit
from hnervf.io import ConfigError, ParseError, SchemaError, ingest, load_config, write_dataset
from hnervf.simulation import DgpConfig, generate_dgp, land_price_fixture


def _write(path, text):
    path.write_text(text)
    return path


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- ingest


def test_ingest_small_file(tmp_path):
    f = _write(tmp_path / "d.csv", "cluster_id,y,x1,z1\na,1.0,1,1\nb,2.0,1,1\nb,3.5,1,1\n")
    d = ingest(f)
    assert d.m == 2 and d.N == 3 and d.p == 1 and d.q == 1


def test_ingest_missing_z1_is_schema_error(tmp_path):
    f = _write(tmp_path / "d.csv", "cluster_id,y,x1\na,1.0,1\n")
    with pytest.raises(SchemaError):
        ingest(f)
    f2 = _write(tmp_path / "e.csv", "cluster_id,y,x1,z2\na,1.0,1,1\n")
    with pytest.raises(SchemaError):
        ingest(f2)


def test_ingest_merges_split_cluster(tmp_path):
    f = _write(tmp_path / "d.csv", "cluster_id,y,x1,z1\nb,1,1,1\na,2,1,1\nb,3,1,1\nc,4,1,1\n")
    d = ingest(f)
    assert d.ids == ["b", "a", "c"]
    npt.assert_array_equal(d.clusters[0].y, [1.0, 3.0])


def test_ingest_parse_errors_carry_line_numbers(tmp_path):
    f = _write(tmp_path / "d.csv", "cluster_id,y,x1,z1\na,1,1,1\na,oops,1,1\n")
    with pytest.raises(ParseError, match="line 3"):
        ingest(f)
    g = _write(tmp_path / "g.csv", "cluster_id,y,x1,z1\na,1,1\n")
    with pytest.raises(ParseError, match="line 2"):
        ingest(g)
    h = _write(tmp_path / "h.csv", "cluster_id,y,x1,z1\na,,1,1\n")
    with pytest.raises(ParseError, match="missing value"):
        ingest(h)
    with pytest.raises(ParseError):
        ingest(_write(tmp_path / "i.csv", "cluster_id,y,x1,z1\n"))
    with pytest.raises(ParseError):
        ingest(tmp_path / "nope.csv")


def test_round_trip(tmp_path):
    d, _, _ = generate_dgp(DgpConfig(m=7, sizes=(1, 2, 3, 4, 5, 6, 7)), 3)
    write_dataset(d, tmp_path / "d.csv")
    back = ingest(tmp_path / "d.csv")
    assert back.ids == [str(i) for i in d.ids]
    for a, b in zip(d.clusters, back.clusters):
        assert np.array_equal(a.y, b.y) and np.array_equal(a.X, b.X) and np.array_equal(a.Z, b.Z)


# ---------------------------------------------------------------- config


def test_config_unknown_key(tmp_path):
    f = _write(tmp_path / "c.json", json.dumps({"fit": {"max_newton_iters": 5}, "colour": "red"}))
    with pytest.raises(ConfigError):
        load_config(f)
    assert load_config(None) == {}


def test_config_bad_json(tmp_path):
    with pytest.raises(ConfigError, match="line"):
        load_config(_write(tmp_path / "c.json", "{\n  'x': 1\n}"))


# ---------------------------------------------------------------- subcommands


@pytest.fixture
def fixture_csv(tmp_path):
    d, _ = land_price_fixture()
    path = tmp_path / "plp.csv"
    write_dataset(d, path)
    return path


def test_fit_writes_report(tmp_path, fixture_csv, capsys):
    out = tmp_path / "out"
    assert cli.main(["fit", "--data", str(fixture_csv), "--out", str(out)]) == 0
    rep = json.loads((out / "fit.json").read_text())
    assert rep["gamma"][1] < 0  # variance decays with distance
    assert set(rep["omega"]) >= {"full", "beta_beta", "gamma_tau", "tau_tau"}
    assert rep["diagnostics"]["newton_iterations"] >= 1
    assert len(rep["estimates"]) == 7
    assert rep["display"]["beta_0"] == f"{rep['beta'][0]:.2f}"
    assert "gamma_1=" in capsys.readouterr().out


def test_fit_report_matches_homoscedastic_oracle(tmp_path):
    rng = np.random.default_rng(21)
    d = homoscedastic_dataset(rng, m=12)
    write_dataset(d, tmp_path / "h.csv")
    assert cli.main(["fit", "--data", str(tmp_path / "h.csv"), "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "fit.json").read_text())
    b = np.linalg.lstsq(d.X, d.y, rcond=None)[0]
    r = d.within(d.y - d.X @ b)
    s2 = np.sum(r**2) / np.sum(d.sizes - 1)
    assert rep["gamma"][0] == pytest.approx(np.log(s2), abs=1e-10)
    assert rep["tau2"] == pytest.approx(max(np.mean((d.y - d.X @ b) ** 2) - s2, 0), abs=1e-10)


def test_bad_config_key_exit_code(tmp_path, fixture_csv):
    cfg = _write(tmp_path / "c.json", json.dumps({"bogus": 1}))
    assert cli.main(["fit", "--data", str(fixture_csv), "--config", str(cfg)]) == cli.EXIT_USAGE


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        cli.main(["fit"])
    assert exc.value.code == cli.EXIT_USAGE


def test_distinct_error_exit_codes(tmp_path):
    bad = _write(tmp_path / "bad.csv", "cluster_id,y,x1,z1\na,x,1,1\n")
    assert cli.main(["fit", "--data", str(bad), "--out", str(tmp_path)]) == cli.EXIT_PARSE
    noz = _write(tmp_path / "noz.csv", "cluster_id,y,x1\na,1,1\n")
    assert cli.main(["fit", "--data", str(noz), "--out", str(tmp_path)]) == cli.EXIT_SCHEMA
    single = _write(tmp_path / "s.csv", "cluster_id,y,x1,z1\na,1,1,1\nb,2,1,1\nc,4,1,1\n")
    assert cli.main(["fit", "--data", str(single), "--out", str(tmp_path)]) == cli.EXIT_ESTIMATION
    codes = {cli.EXIT_OK, cli.EXIT_USAGE, cli.EXIT_PARSE, cli.EXIT_SCHEMA, cli.EXIT_ESTIMATION, cli.EXIT_STUDY}
    assert len(codes) == 6


def test_predict_table(tmp_path, fixture_csv):
    assert cli.main(["predict", "--data", str(fixture_csv), "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "predict.csv")
    assert len(rows) == 52
    assert list(rows[0]) == cli.PREDICT_HEADER
    for r in rows:
        assert float(r["smse"]) == pytest.approx(np.sqrt(float(r["mse"])), rel=1e-15)
        assert float(r["dif"]) == pytest.approx(abs(float(r["mean"]) - float(r["eblup"])), abs=1e-12)


def test_predict_zero_tau2_gives_regression_fits(tmp_path):
    y = [3.0, -3.0, 2.9, -3.1, 3.1, -2.9, 3.0, -3.0]
    lines = ["cluster_id,y,x1,z1"] + [f"c{k // 2},{v},1,1" for k, v in enumerate(y)]
    f = _write(tmp_path / "t.csv", "\n".join(lines) + "\n")
    assert cli.main(["predict", "--data", str(f), "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "fit.json").read_text())
    assert rep["tau2"] == 0.0
    for r in _rows(tmp_path / "predict.csv"):
        assert float(r["eblup"]) == pytest.approx(rep["beta"][0], abs=1e-14)


def test_predict_custom_target(tmp_path, fixture_csv):
    cfg = _write(tmp_path / "c.json", json.dumps({"targets": [{"cluster_id": "s05", "c": [1, 2, 3, 0.5]}]}))
    assert cli.main(["predict", "--data", str(fixture_csv), "--config", str(cfg), "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "fit.json").read_text())
    row = [r for r in _rows(tmp_path / "predict.csv") if r["cluster_id"] == "s05"][0]
    d = ingest(fixture_csv)
    res = fit(d)
    from hnervf.prediction import blup

    c = d.clusters[d.ids.index("s05")]
    assert float(row["eblup"]) == pytest.approx(blup(res.params, c, np.array([1, 2, 3, 0.5])), rel=1e-12)
    assert rep["beta"] == pytest.approx(list(res.beta), rel=1e-15)


def _study_config(tmp_path, **study):
    return _write(tmp_path / "s.json", json.dumps({"study": study}))


def test_simulate_table1_shape(tmp_path):
    cfg = _study_config(tmp_path, R_mse=30, R_est=20)
    assert cli.main(["simulate", "--preset", "table1", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "study.csv")
    summary = [r for r in rows if r["quantity"] in ("RB", "CV", "RBN")]
    assert len(summary) == 5 * 4 * 3
    assert {(r["model"], r["group"]) for r in summary} == {(f"M{k}", str(g)) for k in range(1, 6) for g in range(1, 5)}


def test_simulate_fig1_rows_and_determinism(tmp_path):
    cfg = _study_config(tmp_path, R=25, distributions=["M1"])
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["simulate", "--preset", "fig1", "--config", str(cfg), "--out", str(a)]) == 0
    assert cli.main(["simulate", "--preset", "fig1", "--config", str(cfg), "--out", str(b)]) == 0
    rows = _rows(a / "study.csv")
    assert len(rows) == 40
    assert {r["estimator"] for r in rows} == {"HNERVF", "NER"}
    assert (a / "study.csv").read_text() == (b / "study.csv").read_text()


def test_simulate_conflicting_kind(tmp_path):
    cfg = _study_config(tmp_path, kind="eblup_mse", R_mse=5)
    assert cli.main(["simulate", "--preset", "table1", "--config", str(cfg), "--out", str(tmp_path)]) == cli.EXIT_USAGE


def test_simulate_study_failure_exit(tmp_path, monkeypatch):
    from hnervf import simulation
    from hnervf.errors import StudyFailureError

    def boom(*a, **k):
        raise StudyFailureError("too many failures")

    monkeypatch.setattr(simulation, "run_eblup_mse_study", boom)
    cfg = _study_config(tmp_path, R=5)
    assert cli.main(["simulate", "--preset", "fig1", "--config", str(cfg), "--out", str(tmp_path)]) == cli.EXIT_STUDY


def test_console_entry_point(tmp_path, fixture_csv):
    proc = subprocess.run(
        [sys.executable, "-m", "hnervf.cli", "fit", "--data", str(fixture_csv), "--out", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "fit.json").exists()
