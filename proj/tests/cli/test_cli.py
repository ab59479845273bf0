import csv
import json
import os
import shutil
import subprocess
from pathlib import Path

import pytest

CLI = os.environ.get("MFAM_CLI", "mfam")
HERE = Path(__file__).resolve().parent
SMALL = HERE / "sim-small.json"


def run(*args, check=None):
    proc = subprocess.run([CLI, *map(str, args)], capture_output=True, text=True)
    if check is not None:
        assert proc.returncode == check, proc.stderr
    return proc


def write_config(tmp_path, **changes):
    cfg = json.loads(SMALL.read_text())
    cfg.update(changes)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def baseline(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "a"
    run("pipeline", "--config", SMALL, "--out", out, check=0)
    return out


def test_dry_run_validates_without_output(tmp_path):
    proc = run("pipeline", "--config", SMALL, "--out", tmp_path / "dry", "--dry-run", check=0)
    assert "is valid" in proc.stdout
    assert "stage fit" in proc.stdout
    assert not (tmp_path / "dry").exists()


def test_schema_violations_exit_2_with_paths(tmp_path):
    cfg = write_config(tmp_path, seed=-1, bogus=1)
    proc = run("pipeline", "--config", cfg, "--dry-run", check=2)
    assert "/seed" in proc.stderr
    assert "/bogus: unknown key" in proc.stderr


def test_nested_schema_violation(tmp_path):
    cfg = json.loads(SMALL.read_text())
    cfg["fit"]["model"]["sampler"]["thin"] = 0
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    proc = run("fit", "--config", path, check=2)
    assert "/fit/model/sampler/thin" in proc.stderr


def test_stage_chain_is_checked(tmp_path):
    cfg = write_config(tmp_path, stages=["simulate", "fit"])
    proc = run("pipeline", "--config", cfg, "--dry-run", check=2)
    assert "/stages" in proc.stderr


def test_bad_flag_exits_2():
    assert run("pipeline", "--config", SMALL, "--chains", "0").returncode == 2


def test_pipeline_outputs(baseline):
    rep = baseline / "rep001"
    for rel in ["simulate/data.csv", "simulate/truth/truth.json", "gfpca/dim1.fpc.csv", "mfpca/basis.csv",
                "fit/posterior/samples.json", "fit/curves.csv", "evaluate/metrics.csv"]:
        assert (rep / rel).is_file(), rel
    assert not any(p.name.endswith(".partial") for p in rep.iterdir())
    for name in ["metrics.csv", "metrics_summary.csv", "coverage.csv", "manifest.json"]:
        assert (baseline / name).is_file()
    with open(baseline / "metrics_summary.csv") as f:
        rows = list(csv.DictReader(f))
    eta = [r for r in rows if r["component"] == "eta" and r["metric"] == "rrmse"]
    assert len(eta) == 3
    assert all(0 < float(r["mean"]) < 1.5 for r in eta)


def same_metrics(a, b):
    for name in ["metrics.csv", "metrics_summary.csv", "coverage.csv"]:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_rerun_is_byte_identical(baseline, tmp_path):
    run("pipeline", "--config", SMALL, "--out", tmp_path / "b", check=0)
    same_metrics(baseline, tmp_path / "b")


def test_threads_do_not_change_results(baseline, tmp_path):
    run("pipeline", "--config", SMALL, "--out", tmp_path / "t", "--threads", "2", check=0)
    same_metrics(baseline, tmp_path / "t")


def test_rerun_from_manifest(baseline, tmp_path):
    manifest = json.loads((baseline / "manifest.json").read_text())
    assert manifest["seed"] == 11
    assert manifest["versions"]["mfam"]
    hashes = {o["path"]: o["sha256"] for o in manifest["outputs"]}
    assert "metrics.csv" in hashes and len(hashes["metrics.csv"]) == 64
    run("pipeline", "--config", baseline / "manifest.json", "--out", tmp_path / "m", check=0)
    same_metrics(baseline, tmp_path / "m")
    again = json.loads((tmp_path / "m" / "manifest.json").read_text())
    assert {o["path"]: o["sha256"] for o in again["outputs"]} == hashes


def test_seed_override_changes_data(baseline, tmp_path):
    run("simulate", "--config", SMALL, "--out", tmp_path / "s", "--seed", "12", check=0)
    a = (baseline / "rep001/simulate/data.csv").read_bytes()
    b = (tmp_path / "s/rep001/simulate/data.csv").read_bytes()
    assert a != b


def test_evaluate_truth_against_itself(tmp_path):
    cfg = write_config(tmp_path, evaluate={"curves": "simulate/truth/truth_curves.csv",
                                           "basis": "simulate/truth/truth_basis"})
    out = tmp_path / "e"
    run("simulate", "--config", cfg, "--out", out, check=0)
    run("evaluate", "--config", cfg, "--out", out, check=0)
    with open(out / "metrics_summary.csv") as f:
        rows = [r for r in csv.DictReader(f) if r["metric"] == "rrmse"]
    assert {r["component"] for r in rows} == {"eta", "latent", "basis"}
    assert all(float(r["mean"]) == 0.0 for r in rows if r["component"] != "basis")
    # Least-squares reconstruction in the true basis: zero up to rounding.
    assert all(float(r["mean"]) < 1e-12 for r in rows if r["component"] == "basis")


def test_stage_failure_exits_1_and_cleans_up(tmp_path):
    out = tmp_path / "f"
    proc = run("fit", "--config", SMALL, "--out", out, check=1)
    assert "stage 'fit' failed" in proc.stderr
    rep = out / "rep001"
    assert not (rep / "fit").exists()
    assert not (rep / ".fit.partial").exists()


def test_bundled_configs_validate():
    root = HERE.parent.parent / "configs"
    for cfg in sorted(root.glob("*.json")):
        run("pipeline", "--config", cfg, "--dry-run", check=0)
