import csv
import json
from pathlib import Path

import numpy as np
import pytest

from dynpot.cli import main, read_design
from dynpot.simulation import DgpSpec, dgp_preset

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--dgp", "1", "--T", "3000", "--seed", "7", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def tal_fit(sim, tmp_path_factory):
    out = tmp_path_factory.mktemp("tal")
    rc = main(["fit", "--data", str(sim / "data.csv"), "--out", str(out), "--estimator", "tal",
               "--ic", "bic", "--n-lambda-k", "6", "--n-lambda-sigma", "5"])
    assert rc == 0
    return out


def rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


class TestSimulate:
    def test_files_and_determinism(self, sim, tmp_path):
        assert main(["simulate", "--dgp", "1", "--T", "3000", "--seed", "7", "--out", str(tmp_path)]) == 0
        for name in ("data.csv", "truth.json"):
            assert (tmp_path / name).read_bytes() == (sim / name).read_bytes()

    def test_truth_roundtrip(self, sim):
        truth = json.loads((sim / "truth.json").read_text())
        assert truth["schema_version"] == 1
        spec = DgpSpec(**truth["spec"])
        assert spec.to_dict() == dgp_preset(1, 3000, seed=7).to_dict()
        assert len(truth["beta_true"]) == 2 * len(truth["predictors"]) + 3

    def test_data_layout(self, sim):
        head = rows(sim / "data.csv")[0]
        assert head[:3] == ["t", "loss", "u"]
        d = read_design(sim / "data.csv")
        assert d.panel.T == 3000
        assert "I1" in d.panel.integration_order

    def test_bad_preset(self, tmp_path):
        assert main(["simulate", "--dgp", "9", "--out", str(tmp_path)]) == 1


class TestFit:
    def test_mle_dense_table(self, sim, tmp_path):
        assert main(["fit", "--data", str(sim / "data.csv"), "--out", str(tmp_path), "--estimator", "mle"]) == 0
        fit = json.loads((tmp_path / "fit.json").read_text())
        assert fit["schema_version"] == 1
        table = rows(tmp_path / "fit_coefficients.csv")
        assert table[0] == ["predictor", "k", "sigma"]
        assert table[1][0] == "intercept" and table[-1][0] == "log_sigma_lag"
        assert all(r[1] != "" and r[2] != "" for r in table[1:-1])

    def test_tal_sparse(self, tal_fit):
        fit = json.loads((tal_fit / "fit.json").read_text())
        table = rows(tal_fit / "fit_coefficients.csv")
        n_scale = sum(r[2] != "" for r in table[2:-1])
        assert n_scale == len(fit["active_sigma"])
        assert len(table) - 3 > n_scale

    def test_several_criteria(self, sim, tmp_path):
        rc = main(["fit", "--data", str(sim / "data.csv"), "--out", str(tmp_path), "--ic", "aic,bic",
                   "--n-lambda-k", "4", "--n-lambda-sigma", "3"])
        assert rc == 0
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["fit_aic.json", "fit_aic_coefficients.csv", "fit_bic.json", "fit_bic_coefficients.csv"]

    def test_constant_predictor_is_computation_failure(self, sim, tmp_path):
        data = rows(sim / "data.csv")
        for r in data[1:]:
            r[3] = "1.5"
        with open(tmp_path / "bad.csv", "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(data)
        assert main(["fit", "--data", str(tmp_path / "bad.csv"), "--out", str(tmp_path / "o"),
                     "--estimator", "mle"]) == 2

    def test_missing_file(self, tmp_path):
        assert main(["fit", "--data", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == 1

    def test_unknown_estimator(self, sim, tmp_path):
        assert main(["fit", "--data", str(sim / "data.csv"), "--out", str(tmp_path), "--estimator", "ols"]) == 1


class TestBacktestCommand:
    def test_report(self, sim, tal_fit, tmp_path):
        args = ["backtest", "--fit", str(tal_fit / "fit.json"), "--data", str(sim / "data.csv"),
                "--out", str(tmp_path), "--alphas", "0.95,0.99"]
        assert main(args) == 0
        rep = json.loads((tmp_path / "backtest.json").read_text())
        assert set(rep["coverage"]) == {"0.95", "0.99"}
        first = (tmp_path / "coverage.csv").read_bytes()
        assert main(args) == 0
        assert (tmp_path / "coverage.csv").read_bytes() == first

    def test_alpha_below_threshold_probability(self, sim, tal_fit, tmp_path):
        assert main(["backtest", "--fit", str(tal_fit / "fit.json"), "--data", str(sim / "data.csv"),
                     "--out", str(tmp_path), "--alphas", "0.85"]) == 1


class TestFeaturesCommand:
    def test_golden(self, tmp_path):
        rc = main(["features", "--ticks", str(DATA / "ticks_fixture.csv"), "--out", str(tmp_path / "f.csv"),
                   "--window-h", "10", "--open", "09:30", "--close", "10:50"])
        assert rc == 0
        got, want = rows(tmp_path / "f.csv"), rows(DATA / "golden_features.csv")
        assert got[0] == want[0] and len(got) == len(want)
        for a, b in zip(got[1:], want[1:]):
            assert a[:3] == b[:3]

    def test_bad_ticks(self, tmp_path):
        (tmp_path / "t.csv").write_text("timestamp_ms,price,volume\n1,abc,2\n")
        assert main(["features", "--ticks", str(tmp_path / "t.csv"), "--out", str(tmp_path / "f.csv")]) == 1


class TestConfig:
    def test_flags_override_config(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text(f'[simulate]\ndgp = 2\nT = 400\nseed = 3\nout = "{tmp_path / "a"}"\n')
        assert main(["simulate", "--config", str(cfg)]) == 0
        assert main(["simulate", "--config", str(cfg), "--seed", "4", "--out", str(tmp_path / "b")]) == 0
        ta = json.loads((tmp_path / "a" / "truth.json").read_text())
        tb = json.loads((tmp_path / "b" / "truth.json").read_text())
        assert ta["T"] == tb["T"] == 400
        assert ta["spec"]["seed"] == 3 and tb["spec"]["seed"] == 4

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text("T = 400\ncolour = 1\n")
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 1

    def test_missing_required(self):
        assert main(["simulate"]) == 1

    def test_verbose_either_side(self, tmp_path):
        assert main(["-v", "simulate", "--T", "200", "--out", str(tmp_path / "a")]) == 0
        assert main(["simulate", "--T", "200", "--out", str(tmp_path / "b"), "-v"]) == 0


class TestStudyCommand:
    def test_zero_reps(self, tmp_path):
        assert main(["study", "--reps", "0", "--out", str(tmp_path)]) == 1

    def test_smoke(self, tmp_path):
        rc = main(["study", "--dgp", "2", "--T", "2000", "--reps", "1", "--seed", "5", "--ic", "bic",
                   "--n-lambda-k", "4", "--n-lambda-sigma", "3", "--out", str(tmp_path)])
        assert rc == 0
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["seeds"] == [5]
