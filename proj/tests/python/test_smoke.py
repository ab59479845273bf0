import csv
import json
import math
import os
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

import mfam

ROOT = Path(os.environ.get("MFAM_SOURCE_DIR", Path(__file__).resolve().parents[2]))


@pytest.mark.parametrize("family,y,theta,expected", [
    ("poisson", 3, [2.5], stats.poisson.logpmf(3, 2.5)),
    ("bernoulli", 1, [0.3], math.log(0.3)),
    ("gaussian", 0.4, [1.0, 2.0], stats.norm.logpdf(0.4, 1.0, 2.0)),
    ("gamma", 1.7, [2.0, 3.0], stats.gamma.logpdf(1.7, 3.0, scale=2.0 / 3.0)),
    ("negbinomial", 4, [3.0, 2.0], stats.nbinom.logpmf(4, 2.0, 2.0 / 5.0)),
])
def test_logpdf_matches_scipy(family, y, theta, expected):
    assert mfam.logpdf(family, y, theta) == pytest.approx(expected, rel=1e-10)


def test_out_of_support_raises():
    with pytest.raises(ValueError):
        mfam.logpdf("poisson", -1, [1.0])


def test_poisson_score_by_finite_differences():
    loglik, score, hess = mfam.predictor_derivatives("poisson", 4, [0.3])
    h = 1e-5
    lo = mfam.predictor_derivatives("poisson", 4, [0.3 - h])[0]
    hi = mfam.predictor_derivatives("poisson", 4, [0.3 + h])[0]
    assert score[0] == pytest.approx((hi - lo) / (2 * h), abs=1e-6)
    assert hess[0] == pytest.approx((hi - 2 * loglik + lo) / h**2, abs=1e-3)


def test_bspline_partition_of_unity_and_penalty_null_space():
    t = np.linspace(0, 1, 37)
    B = mfam.bspline_design(8, 3, t)
    assert B.shape == (37, 12)
    assert np.allclose(B.sum(axis=1), 1.0)
    P = mfam.difference_penalty(12, 2)
    assert np.allclose(P @ np.ones(12), 0)
    assert np.allclose(P @ np.arange(12.0), 0)
    C = mfam.cyclic_difference_penalty(10, 2)
    assert np.allclose(C @ np.ones(10), 0)


def test_split_fourier_basis_is_orthonormal():
    grid = np.linspace(0, 1, 101)
    b = mfam.split_fourier_eigenbasis(5, 3, grid, seed=4)
    w = np.full(101, 0.01)
    w[[0, -1]] = 0.005
    psi = b["psi"]
    gram = sum(psi[:, k * 101:(k + 1) * 101] * w @ psi[:, k * 101:(k + 1) * 101].T for k in range(3))
    assert np.allclose(gram, np.eye(5), atol=1e-3)


def test_simulated_truth():
    sim = mfam.simulate(n=20, regime="regular", seed=3)
    data, truth = sim["data"], sim["truth"]
    assert data["families"] == ["bernoulli", "poisson", "gaussian"]
    assert len(data["y"]) == 20 * 3 * 11
    grid = np.asarray(truth["grid"])
    assert np.allclose(truth["beta1"], -np.cos(2 * np.pi * grid))
    assert truth["scores"].shape == (20, 6)
    assert len(truth["latent"]) == 3 and truth["latent"][0].shape == (20, 101)
    assert mfam.rrmse(truth["latent"][0], truth["latent"][0], grid) == 0.0


def test_pipeline_runs_from_python(tmp_path):
    cfg = json.loads((ROOT / "tests/cli/sim-small.json").read_text())
    cfg["replicates"] = 1
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / "run"
    mfam.run_pipeline(path, out=str(out))
    with open(out / "metrics_summary.csv") as f:
        eta = [r for r in csv.DictReader(f) if r["component"] == "eta" and r["metric"] == "rrmse"]
    assert len(eta) == 3
    assert (out / "manifest.json").is_file()


def test_invalid_config_raises(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"seed": -1}))
    with pytest.raises(ValueError):
        mfam.run_pipeline(path)
