from __future__ import annotations

import csv
import json

import pytest

from msthin.cli import main


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--seed", "3", "--out", str(d), "--set", "n=80"]) == 0
    return d


def test_simulate_writes_views_and_is_reproducible(simulated, tmp_path):
    for name in ("truth", "observed", "oracle", "naive1", "naive2"):
        assert (simulated / f"{name}.csv").exists()
    summary = json.loads((simulated / "summary.json").read_text())
    assert set(summary["counts"]) >= {"1-2", "1-3", "2-3"}
    assert main(["simulate", "--seed", "3", "--out", str(tmp_path), "--set", "n=80"]) == 0
    for name in ("truth.csv", "observed.csv", "summary.json"):
        assert (tmp_path / name).read_bytes() == (simulated / name).read_bytes()


def test_simulate_replications_get_subdirectories(tmp_path):
    assert main(["simulate", "--seed", "1", "--reps", "2", "--out", str(tmp_path), "--set", "n=20",
                 "--set", "views=observed"]) == 0
    assert (tmp_path / "rep_000" / "observed.csv").exists() and (tmp_path / "rep_001" / "truth.csv").exists()
    assert "mean_counts" in json.loads((tmp_path / "summary.json").read_text())


@pytest.mark.parametrize("argv", [
    ["simulate"],
    ["simulate", "--seed", "1", "--set", "n=0"],
    ["simulate", "--seed", "1", "--set", "colour=red"],
    ["simulate", "--seed", "1", "--set", "n"],
    ["simulate", "--seed", "1", "--set", "delays=maybe"],
])
def test_configuration_errors_exit_2(argv, tmp_path, capsys):
    assert main(argv + ["--out", str(tmp_path)]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_config_file_and_environment_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# small run\nn = 30\nreps = 1\n")
    monkeypatch.setenv("MSTHIN_N", "25")
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(cfg), "--seed", "2", "--out", str(out), "--set",
                 "views=observed"]) == 0
    echo = (out / "config.txt").read_text()
    assert "n = 25" in echo
    with open(out / "truth.csv") as fh:
        assert len({row[0] for row in csv.reader(fh)}) - 1 <= 25
    out2 = tmp_path / "out2"
    assert main(["simulate", "--config", str(cfg), "--seed", "2", "--out", str(out2), "--set", "n=10",
                 "--set", "views=observed"]) == 0
    assert "n = 10" in (out2 / "config.txt").read_text()


def test_estimate_and_missing_data(simulated, tmp_path):
    out = tmp_path / "fit"
    assert main(["estimate", "--data", str(simulated / "observed.csv"), "--method", "poisson",
                 "--out", str(out)]) == 0
    fit = json.loads((out / "fit.json").read_text())
    assert fit["method"] == "poisson" and len(fit["blocks"]["theta"]) == 7
    assert fit["converged"] is True
    assert main(["estimate", "--data", str(tmp_path / "nope.csv"), "--out", str(out)]) == 3


def test_bootstrap_writes_resamples(simulated, tmp_path):
    assert main(["bootstrap", "--data", str(simulated / "observed.csv"), "--method", "poisson", "--bootstrap", "2",
                 "--seed", "5", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "bootstrap.json").exists()
    rows = (tmp_path / "bootstrap_resamples.csv").read_text().splitlines()
    assert len(rows) == 3
    assert main(["bootstrap", "--data", str(simulated / "oracle.csv"), "--method", "naive1", "--bootstrap", "2",
                 "--seed", "5", "--out", str(tmp_path)]) == 2


def test_reserve_and_oe_rates(simulated, tmp_path):
    assert main(["reserve", "--out", str(tmp_path), "--set", "x_points=5", "--set", "step=1/32"]) == 0
    lines = (tmp_path / "estimand.csv").read_text().splitlines()
    assert lines[0] == "t,x,value" and len(lines) == 1 + 5 * 161
    for target in ("events", "delays", "adjudication"):
        out = tmp_path / target
        assert main(["oe-rates", "--data", str(simulated / "observed.csv"), "--set", f"target={target}",
                     "--out", str(out)]) == 0
        assert (out / "rates.csv").read_text().startswith("transition,bucket")
        assert (out / "rates_aggregated.csv").exists()


def test_reserve_without_exits_from_state_one_is_zero(tmp_path):
    assert main(["reserve", "--out", str(tmp_path), "--set", "theta=-inf,0,0,-inf,0,0,-0.3",
                 "--set", "x_points=3", "--set", "step=1/8"]) == 0
    values = {line.split(",")[2] for line in (tmp_path / "estimand.csv").read_text().splitlines()[1:]}
    assert values == {"0"}


def test_benchmark_single_replication(tmp_path):
    assert main(["benchmark", "--seed", "4", "--reps", "1", "--method", "poisson", "--out", str(tmp_path),
                 "--set", "n=150", "--set", "estimand=false"]) == 0
    for name in ("estimates.csv", "table_theta.csv", "summary.json"):
        assert (tmp_path / name).exists()
    rows = list(csv.DictReader(open(tmp_path / "table_theta.csv")))
    assert len(rows) == 7 and all(r["sd"] == "" and r["n"] == "1" for r in rows)
    assert main(["benchmark", "--seed", "4", "--method", "bayes", "--out", str(tmp_path)]) == 2
