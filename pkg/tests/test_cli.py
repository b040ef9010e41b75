"""Command-line workflow: simulate, fit, select, report."""

from __future__ import annotations

import csv
import json
import shutil
import subprocess
import sys
import time

import pytest

from stjm import cli

SIM = {"N": 50, "T_study": 16, "seed": 4}


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "sim.json").write_text(json.dumps(SIM))
    assert cli.main(["simulate", "--config", str(root / "sim.json"), "--out", str(root / "data")]) == 0
    return root


@pytest.fixture(scope="module")
def m1_fit(workdir):
    out = workdir / "fit_m1"
    started = time.time()
    code = cli.main(["fit", "--data", str(workdir / "data"), "--variant", "m1", "--method", "laplace", "--out", str(out)])
    assert code == 0
    return out, time.time() - started


class TestSimulate:
    def test_outputs(self, workdir):
        names = {p.name for p in (workdir / "data").iterdir()}
        assert {"origination.csv", "performance.csv", "truth.json", "manifest.json"} <= names
        man = json.loads((workdir / "data" / "manifest.json").read_text())
        assert man["seed"] == 4 and man["command"] == "simulate"
        assert "version" in man and "duration_s" in man

    def test_rerun_is_byte_identical(self, workdir, tmp_path):
        assert cli.main(["simulate", "--config", str(workdir / "sim.json"), "--out", str(tmp_path)]) == 0
        for name in ("origination.csv", "performance.csv", "truth.json"):
            assert (tmp_path / name).read_bytes() == (workdir / "data" / name).read_bytes()

    def test_missing_seed(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"N": 10}))
        assert cli.main(["simulate", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG

    def test_bad_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{N: 10")
        assert cli.main(["simulate", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG

    def test_seed_flag_overrides(self, tmp_path):
        assert cli.main(["simulate", "--seed", "3", "--out", str(tmp_path)]) == 0
        assert json.loads((tmp_path / "truth.json").read_text())["seed"] == 3


class TestFit:
    def test_m1_laplace(self, m1_fit):
        out, elapsed = m1_fit
        assert elapsed < 60
        rows = read_rows(out / "summary.csv")
        names = [r["name"] for r in rows]
        assert len(names) == len(set(names))
        assert {"tau_Y", "lambda", "nu0", "beta2[z1]"} <= set(names)
        bundle = cli.load_bundle(out)
        assert bundle["kind"] == "laplace" and bundle["label"] == "M1-laplace"

    def test_spatial_variant_needs_adjacency(self, workdir, tmp_path):
        code = cli.main(["fit", "--data", str(workdir / "data"), "--variant", "m2", "--method", "laplace", "--out", str(tmp_path)])
        assert code == cli.EXIT_CONFIG

    def test_mcmc_needs_seed(self, workdir, tmp_path):
        code = cli.main(["fit", "--data", str(workdir / "data"), "--variant", "m1", "--method", "mcmc", "--out", str(tmp_path)])
        assert code == cli.EXIT_CONFIG

    def test_missing_data(self, tmp_path):
        code = cli.main(["fit", "--data", str(tmp_path), "--variant", "m1", "--method", "laplace", "--out", str(tmp_path / "f")])
        assert code == cli.EXIT_DATA

    def test_unknown_variant_is_usage_error(self, workdir, tmp_path):
        assert cli.main(["fit", "--data", str(workdir / "data"), "--variant", "m7", "--out", str(tmp_path)]) == cli.EXIT_CONFIG

    def test_short_mcmc(self, workdir, tmp_path):
        cfg = tmp_path / "mc.json"
        cfg.write_text(json.dumps({"mcmc": {"iterations": 60, "burn_in": 20, "thin": 2}}))
        out = tmp_path / "fit"
        args = ["fit", "--data", str(workdir / "data"), "--variant", "m1", "--method", "mcmc", "--seed", "1", "--config", str(cfg), "--out", str(out)]
        assert cli.main(args) == 0
        assert (out / "chain.npz").exists() and (out / "chain.json").exists()
        assert cli.load_bundle(out)["result"].G == 20


class TestSelectAndReport:
    def test_single_fit_single_time(self, m1_fit, tmp_path):
        out, _ = m1_fit
        code = cli.main(["select", str(out), "--times", "12", "--draws", "4", "--seed", "1", "--out", str(tmp_path)])
        assert code == 0
        rows = read_rows(tmp_path / "cvdcl.csv")
        assert len(rows) == 1
        assert rows[0]["t"] == "12" and float(rows[0]["estimate"]) > 0
        area = read_rows(tmp_path / "cvdcl_by_area.csv")
        assert sum(float(r["contribution"]) for r in area) == pytest.approx(float(rows[0]["estimate"]), abs=1e-10)

    def test_two_fits_report_differences(self, m1_fit, workdir, tmp_path):
        out, _ = m1_fit
        other = workdir / "fit_m1_copy"
        if not other.exists():
            shutil.copytree(out, other)
        code = cli.main(["select", str(out), str(other), "--times", "12,14", "--draws", "4", "--seed", "2", "--out", str(tmp_path)])
        assert code == 0
        assert len(read_rows(tmp_path / "cvdcl.csv")) == 4

    def test_time_beyond_study(self, m1_fit, tmp_path):
        out, _ = m1_fit
        code = cli.main(["select", str(out), "--times", "16", "--draws", "4", "--seed", "1", "--out", str(tmp_path)])
        assert code == cli.EXIT_DATA

    def test_bad_times(self, m1_fit, tmp_path):
        out, _ = m1_fit
        assert cli.main(["select", str(out), "--times", "a,b", "--out", str(tmp_path)]) == cli.EXIT_CONFIG

    def test_report(self, m1_fit, tmp_path):
        out, _ = m1_fit
        assert cli.main(["report", str(out), "--out", str(tmp_path)]) == 0
        rows = read_rows(tmp_path / "parameters.csv")
        assert len(rows) == len(read_rows(out / "summary.csv"))
        assert "M1-laplace:mean" in rows[0]

    def test_console_script(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "stjm.cli", "simulate", "--out", str(tmp_path)], capture_output=True, text=True
        )
        assert proc.returncode == cli.EXIT_CONFIG
        assert "seed" in proc.stderr


@pytest.mark.slow
def test_laplace_and_mcmc_summaries_agree(workdir, m1_fit, tmp_path):
    cfg = tmp_path / "mc.json"
    cfg.write_text(json.dumps({"mcmc": {"iterations": 5000, "burn_in": 1000, "thin": 2}}))
    out = tmp_path / "mcmc"
    args = ["fit", "--data", str(workdir / "data"), "--variant", "m1", "--method", "mcmc", "--seed", "3", "--config", str(cfg), "--out", str(out)]
    assert cli.main(args) == 0
    lap = {r["name"]: r for r in read_rows(m1_fit[0] / "summary.csv")}
    mc = {r["name"]: r for r in read_rows(out / "summary.csv")}
    names = ["beta_01", "beta_11", "nu0", "lambda", "beta2[z1]", "beta2[z2]"]
    for n in names:
        assert abs(float(lap[n]["mean"]) - float(mc[n]["mean"])) <= 0.5 * float(mc[n]["sd"]), n


@pytest.mark.slow
def test_select_prefers_correct_model(tmp_path):
    (tmp_path / "sim.json").write_text(json.dumps({"N": 500, "T_study": 40, "seed": 2}))
    (tmp_path / "good.json").write_text(json.dumps({"covariates": ["z1", "z2"], "label": "correct"}))
    (tmp_path / "bad.json").write_text(json.dumps({"covariates": ["z1"], "label": "misspecified"}))
    assert cli.main(["simulate", "--config", str(tmp_path / "sim.json"), "--out", str(tmp_path / "data")]) == 0
    for name in ("good", "bad"):
        args = ["fit", "--data", str(tmp_path / "data"), "--variant", "m1", "--method", "laplace", "--config", str(tmp_path / f"{name}.json"), "--out", str(tmp_path / name)]
        assert cli.main(args) == 0
    args = ["select", str(tmp_path / "good"), str(tmp_path / "bad"), "--times", "12,18,24,30,36", "--draws", "10", "--seed", "1", "--out", str(tmp_path / "sel")]
    assert cli.main(args) == 0
    rows = read_rows(tmp_path / "sel" / "cvdcl.csv")
    est = {(r["model"], int(r["t"])): float(r["estimate"]) for r in rows}
    for t in (12, 18, 24, 30, 36):
        assert est["correct", t] < est["misspecified", t]
