import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from flagp import io as fio
from flagp.cli import main
from flagp.config import ConfigError, from_dict, load


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert run("simulate", "--preset", "unbiased", "--seed", 3, "--n-test", 20, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def fast_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    path.write_text(json.dumps({"seed": 1, "calibration": {"n_samples": 600, "n_burn": 300, "S_sub": 50}, "map": {"restarts": 2}}))
    return path


@pytest.fixture(scope="module")
def model_path(sim_dir, fast_config):
    path = sim_dir / "model.flagp"
    code = run("fit", "--config", fast_config, "--inputs", sim_dir / "inputs.csv", "--outputs", sim_dir / "outputs.csv",
               "--ranges", sim_dir / "ranges.json", "--model", path)
    assert code == 0
    return path


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestParser:
    def test_help_lists_commands(self):
        res = subprocess.run([sys.executable, "-m", "flagp.cli", "--help"], capture_output=True, text=True)
        assert res.returncode == 0
        for name in ("simulate", "fit", "predict", "calibrate", "map", "score", "bench"):
            assert name in res.stdout

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as exc:
            run("nope")
        assert exc.value.code == 2


class TestSimulate:
    def test_shapes(self, sim_dir):
        header, X = fio.read_csv(sim_dir / "inputs.csv")
        assert header == ["R", "C"] and X.shape == (242, 2)
        assert fio.read_outputs(sim_dir / "outputs.csv").shape == (4, 242)
        assert fio.read_outputs(sim_dir / "field_outputs.csv").shape[0] == 4
        assert json.loads((sim_dir / "truth.json").read_text())["theta"] == pytest.approx([0.1])

    def test_byte_identical_under_seed(self, sim_dir, tmp_path):
        assert run("simulate", "--preset", "unbiased", "--seed", 3, "--n-test", 20, "--out", tmp_path) == 0
        for name in ("inputs.csv", "outputs.csv", "field_inputs.csv", "field_outputs.csv", "test_outputs.csv"):
            assert sha(tmp_path / name) == sha(sim_dir / name)

    def test_emulation_preset(self, tmp_path):
        assert run("simulate", "--preset", "emulation", "--M", 50, "--n-test", 5, "--out", tmp_path) == 0
        assert fio.read_outputs(tmp_path / "outputs.csv").shape == (25, 50)
        assert fio.read_outputs(tmp_path / "test_outputs.csv").shape == (25, 5)

    def test_biased_preset(self, tmp_path):
        assert run("simulate", "--preset", "biased", "--M", 60, "--n-test", 5, "--out", tmp_path) == 0
        assert fio.read_outputs(tmp_path / "field_outputs.csv").shape == (100, 10)
        assert json.loads((tmp_path / "truth.json").read_text())["theta"] == pytest.approx([0.25, 9.8])


class TestFitPredict:
    def test_bundle_roundtrip_bit_identical(self, sim_dir, model_path, fast_config, tmp_path):
        from flagp.emulator import fit, predict
        from flagp.dataset import Ensemble, to_unit_hypercube

        names, ranges = fio.read_ranges(sim_dir / "ranges.json")
        X = to_unit_hypercube(fio.read_csv(sim_dir / "inputs.csv")[1], ranges)
        ens = Ensemble(X=X, Z_raw=fio.read_outputs(sim_dir / "outputs.csv"), input_ranges=ranges, names=names)
        cfg = load(fast_config)
        direct = fit(ens, cfg.emulator_config())
        loaded = fio.load_model(model_path)
        Xq = np.random.default_rng(0).random((7, 2))
        a = predict(direct, Xq, m=50, S=200, rng=4)
        b = predict(loaded, Xq, m=50, S=200, rng=4)
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_bundle_is_reproducible(self, sim_dir, model_path, fast_config, tmp_path):
        again = tmp_path / "again.flagp"
        run("fit", "--config", fast_config, "--inputs", sim_dir / "inputs.csv", "--outputs", sim_dir / "outputs.csv",
            "--ranges", sim_dir / "ranges.json", "--model", again)
        assert sha(again) == sha(model_path)
        manifest = json.loads((tmp_path / "again.flagp.manifest.json").read_text())
        assert manifest["config_sha256"] == load(fast_config).digest()
        assert set(manifest["versions"]) >= {"flagp", "numpy", "scipy"}

    def test_predict_and_score(self, tmp_path):
        sim_dir = tmp_path / "sim"
        assert run("simulate", "--preset", "unbiased", "--seed", 3, "--n-test", 200, "--out", sim_dir) == 0
        # full basis, so the bands are not missing truncation error
        cfg = tmp_path / "full.json"
        cfg.write_text(json.dumps({"basis": {"p": 4}}))
        model_path = tmp_path / "full.flagp"
        assert run("fit", "--config", cfg, "--inputs", sim_dir / "inputs.csv", "--outputs", sim_dir / "outputs.csv",
                   "--ranges", sim_dir / "ranges.json", "--model", model_path) == 0
        # held-out radii at the true drag coefficient, scored against the noise-free curves
        _, x = fio.read_csv(sim_dir / "test_inputs.csv")
        inputs = tmp_path / "joint.csv"
        fio.write_csv(inputs, ["R", "C"], np.column_stack([x[:, 0], np.full(len(x), 0.1)]))
        pred = tmp_path / "pred.csv"
        assert run("predict", "--config", cfg, "--model", model_path, "--inputs", inputs,
                   "--samples", 500, "--out", pred) == 0
        header, rows = fio.read_csv(pred)
        assert header == ["run", "index", "mean", "lower", "upper"] and rows.shape == (200 * 4, 5)
        assert np.all(rows[:, 3] <= rows[:, 4])
        report = tmp_path / "score.json"
        assert run("score", "--predictions", pred, "--truth", sim_dir / "test_outputs.csv", "--out", report) == 0
        scores = json.loads(report.read_text())
        assert scores["mape"] < 0.01 and scores["coverage_95"] > 0.9


class TestCalibrate:
    def test_end_to_end(self, sim_dir, model_path, fast_config, tmp_path):
        out = tmp_path / "cal"
        code = run("calibrate", "--config", fast_config, "--model", model_path, "--field-inputs", sim_dir / "field_inputs.csv",
                   "--field-outputs", sim_dir / "field_outputs.csv", "--test-inputs", sim_dir / "test_inputs.csv", "--out", out)
        assert code == 0
        header, post = fio.read_csv(out / "posterior.csv")
        assert header == ["iteration", "C", "sigma2", "log_post", "accepted"]
        assert post.shape == (600, 5)
        assert abs(post[300:, 1].mean() - 0.1) < 0.02
        diag = json.loads((out / "diagnostics.json").read_text())
        # short chain: the adapted proposal is still small, so only check that it moves
        assert 0.05 < diag["acceptance_rate"] < 0.9
        report = tmp_path / "score.json"
        assert run("score", "--predictions", out / "predictions.csv", "--truth", sim_dir / "test_outputs.csv", "--out", report) == 0
        assert json.loads(report.read_text())["mape"] < 0.05

    def test_map(self, sim_dir, model_path, fast_config, tmp_path):
        out = tmp_path / "map.json"
        assert run("map", "--config", fast_config, "--model", model_path, "--field-inputs", sim_dir / "field_inputs.csv",
                   "--field-outputs", sim_dir / "field_outputs.csv", "--out", out) == 0
        res = json.loads(out.read_text())
        assert res["names"] == ["C"] and abs(res["theta_natural"][0] - 0.1) < 0.02
        assert len(res["restarts"]) == 2


class TestErrors:
    def test_unknown_config_key(self, tmp_path, sim_dir):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"emulator": {"m": 50}, "colour": "blue"}))
        assert run("fit", "--config", bad, "--inputs", sim_dir / "inputs.csv", "--outputs", sim_dir / "outputs.csv",
                   "--ranges", sim_dir / "ranges.json", "--model", tmp_path / "m.flagp") == 2

    @pytest.mark.parametrize(
        "data",
        [
            {"calibration": {"n_samples": 100, "n_burn": 100}},
            {"calibration": {"S_sub": 1200}},
            {"nugget": 0},
            {"basis": {"rsvd": {"oversample": 5}}},
            {"lengthscale": {"method": "grid"}},
            {"calibration": {"estimator": "exact"}},
        ],
    )
    def test_invalid_configs(self, data):
        with pytest.raises(ConfigError):
            from_dict(data)

    def test_malformed_csv_reports_location(self, tmp_path, sim_dir, capsys):
        bad = tmp_path / "inputs.csv"
        bad.write_text("R,C\n0.1,0.1\n0.2,abc\n")
        code = run("fit", "--inputs", bad, "--outputs", sim_dir / "outputs.csv", "--ranges", sim_dir / "ranges.json",
                   "--model", tmp_path / "m.flagp")
        assert code == 3
        assert f"{bad}:3:2" in capsys.readouterr().err

    def test_m_larger_than_ensemble(self, tmp_path, sim_dir, model_path):
        cfg = tmp_path / "big.json"
        cfg.write_text(json.dumps({"emulator": {"m": 5000}}))
        assert run("predict", "--config", cfg, "--model", model_path, "--inputs", sim_dir / "inputs.csv", "--out", tmp_path / "p.csv") == 2

    def test_missing_model(self, tmp_path, sim_dir):
        assert run("predict", "--model", tmp_path / "none.flagp", "--inputs", sim_dir / "inputs.csv", "--out", tmp_path / "p.csv") == 3


class TestBench:
    def test_small_bench(self, tmp_path):
        out = tmp_path / "bench.csv"
        assert run("bench", "--M", 500, "--d", 2, "--n-pred", 5, "--out", out) == 0
        header, rows = fio.read_csv(out)
        assert header[-1] == "ratio" and rows.shape == (1, 8)
        assert rows[0, -1] > 1.0
