"""Command-line workflow: configuration, artifacts, exit codes and reproducibility."""
import numpy as np
import pytest

from flowcast import cli, data, evaluation, models

SMALL = ["--lag", "6", "--lead", "3", "--lstm1_units", "5", "--lstm2_units", "4",
         "--branch_dense_units", "4", "--fusion_dense_units", "3"]


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--days", 3, "--seed", 5, "--out", root / "raw.csv") == 0
    assert run("prepare", "--input", root / "raw.csv", "--out", root / "ds", *SMALL) == 0
    assert run("train", "--data", root / "ds", "--out", root / "m", "--variant", "MERGED_ATTN_FLOW",
               "--epochs", 2, *SMALL) == 0
    return root


class TestConfig:
    def test_unknown_key_in_file(self, tmp_path):
        (tmp_path / "c.txt").write_text("epochs = 3\nepoch = 4\n")
        assert run("synth", "--config", tmp_path / "c.txt", "--out", tmp_path / "r.csv") == 2

    def test_unknown_flag(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run("synth", "--no_such_key", 1)
        assert exc.value.code == 2

    def test_bad_value(self, tmp_path):
        assert run("synth", "--days", "many", "--out", tmp_path / "r.csv") == 2

    def test_flags_override_file(self, tmp_path):
        (tmp_path / "c.txt").write_text("# comment\ndays = 2\nseed = 9\n")
        assert run("synth", "--config", tmp_path / "c.txt", "--days", 1,
                   "--out", tmp_path / "r.csv") == 0
        assert len(data.read_csv(tmp_path / "r.csv")) == 288
        text = (tmp_path / "config.txt").read_text()
        assert "days = 1\n" in text and "seed = 9\n" in text
        assert "derived_seed_synth = " in text

    def test_derived_seeds_independent(self):
        s = cli.derived_seeds(0)
        assert len(set(s.values())) == 3 and s == cli.derived_seeds(0)
        assert s != cli.derived_seeds(1)


class TestSynth:
    def test_rows_and_header(self, tmp_path):
        assert run("synth", "--days", 30, "--out", tmp_path / "r.csv") == 0
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "timestamp,flow" and len(lines) == 1 + 8640

    def test_byte_identical_reruns(self, tmp_path):
        for name in ("a.csv", "b.csv"):
            assert run("synth", "--days", 2, "--seed", 3, "--out", tmp_path / name) == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_synth_params_flow_through(self, tmp_path):
        assert run("synth", "--days", 1, "--synth_noise_sd", 0, "--synth_events_per_day", 0,
                   "--out", tmp_path / "r.csv") == 0
        raw = data.read_csv(tmp_path / "r.csv")
        np.testing.assert_allclose(raw.flow, data.synth_base(288), rtol=0, atol=1e-9)


class TestPrepare:
    def test_manifest(self, work):
        man = data.read_manifest(work / "ds" / "manifest.txt")
        n = 3 * 288 - 1 - 6 - 3 + 1
        assert int(man["examples"]) == n
        assert int(man["train"]) + int(man["val"]) + int(man["test"]) == n
        assert man["source_sha256"] == data.file_sha256(work / "raw.csv")
        header = (work / "ds" / "windows.csv").read_text().split("\n", 1)[0].split(",")
        assert header[:4] == ["example_index", "start_time", "split", "x_0"]
        assert header[-1] == "y_2"

    def test_idempotent(self, work, tmp_path):
        assert run("prepare", "--input", work / "raw.csv", "--out", tmp_path / "ds", *SMALL) == 0
        for name in ("windows.csv", "manifest.txt"):
            assert (tmp_path / "ds" / name).read_bytes() == (work / "ds" / name).read_bytes()

    def test_loaded_dataset_matches_direct_preparation(self, work):
        ds = cli.load_dataset(work / "ds")
        direct = data.prepare_series(data.read_csv(work / "raw.csv"), 6, 3)
        np.testing.assert_array_equal(ds.x, direct.x)
        np.testing.assert_array_equal(ds.scaled["y"], direct.scaled["y"])
        assert ds.norm == direct.norm and ds.n_train == direct.n_train

    def test_missing_input(self, tmp_path):
        assert run("prepare", "--input", tmp_path / "nope.csv", "--out", tmp_path / "ds") == 3

    def test_malformed_input(self, tmp_path):
        (tmp_path / "bad.csv").write_text("timestamp,flow\n0,1\n300,x\n")
        assert run("prepare", "--input", tmp_path / "bad.csv", "--out", tmp_path / "ds") == 3


class TestTrainEval:
    def test_artifacts(self, work):
        assert (work / "m" / "model.bin").exists()
        lines = (work / "m" / "history.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss" and len(lines) == 3
        assert "input_sha256_windows = " in (work / "m" / "config.txt").read_text()

    def test_lag_mismatch_rejected(self, work, tmp_path):
        assert run("train", "--data", work / "ds", "--out", tmp_path / "m", "--epochs", 1) == 2

    def test_unknown_variant(self, work, tmp_path):
        assert run("train", "--data", work / "ds", "--out", tmp_path / "m", "--variant", "GRU",
                   *SMALL) == 2

    def test_eval_reproduces_best_validation_loss(self, work, tmp_path):
        assert run("eval", "--model", work / "m" / "model.bin", "--data", work / "ds",
                   "--out", tmp_path / "ev") == 0
        report = data.read_manifest(tmp_path / "ev" / "report.txt")
        val = float(report["val_normalized_mse"])
        hist = np.loadtxt(work / "m" / "history.csv", delimiter=",", skiprows=1, ndmin=2)
        assert abs(val - hist[:, 2].min()) < 1e-12
        y, yhat = evaluation.read_predictions(tmp_path / "ev" / "predictions.csv")
        assert float(report["rmse_1"]) == pytest.approx(evaluation.rmse(y[:, 0], yhat[:, 0]),
                                                        rel=1e-12)

    def test_corrupt_model(self, work, tmp_path):
        (tmp_path / "m.bin").write_bytes(b"garbage")
        assert run("eval", "--model", tmp_path / "m.bin", "--data", work / "ds",
                   "--out", tmp_path / "ev") == 5

    def test_missing_dataset(self, work, tmp_path):
        assert run("eval", "--model", work / "m" / "model.bin", "--data", tmp_path,
                   "--out", tmp_path / "ev") == 3

    def test_untrained_model_saliency(self, work, tmp_path):
        model = models.build("LSTM", models.ModelConfig(lag=6, lead=3, lstm1_units=5,
                                                        lstm2_units=4, branch_dense_units=4,
                                                        fusion_dense_units=3))
        models.save_model(model, tmp_path / "u.bin")
        assert run("saliency", "--model", tmp_path / "u.bin", "--data", work / "ds",
                   "--out", tmp_path / "s") == 5


class TestInspection:
    def test_saliency_files(self, work, tmp_path):
        assert run("saliency", "--model", work / "m" / "model.bin", "--data", work / "ds",
                   "--out", tmp_path / "s") == 0
        for h in (1, 2, 3):
            lines = (tmp_path / "s" / f"saliency_h{h}.csv").read_text().splitlines()
            assert lines[0] == "window_time,feature,step_index,value"
            windows = min(288, int(data.read_manifest(work / "ds" / "manifest.txt")["test"]))
            assert len(lines) == 1 + 2 * windows * 6

    def test_saliency_day_out_of_range(self, work, tmp_path):
        assert run("saliency", "--model", work / "m" / "model.bin", "--data", work / "ds",
                   "--saliency_day", 50, "--out", tmp_path / "s") == 2

    def test_features_files(self, work, tmp_path):
        assert run("features", "--model", work / "m" / "model.bin", "--data", work / "ds",
                   "--features_max_windows", 40, "--out", tmp_path / "f") == 0
        lines = (tmp_path / "f" / "features.csv").read_text().splitlines()
        assert lines[0] == "window_time,branch,dim_0,dim_1,dim_2,dim_3" and len(lines) == 81
        sep = data.read_manifest(tmp_path / "f" / "separability.txt")
        assert int(sep["windows"]) == 40 and -1.0 <= float(sep["silhouette"]) <= 1.0


class TestGrid:
    def test_rows_and_best(self, work, tmp_path):
        assert run("grid", "--data", work / "ds", "--out", tmp_path / "g", "--epochs", 1,
                   "--grid_learning_rates", "0.1,1.0", "--grid_batch_sizes", "32,64", *SMALL) == 0
        rows = (tmp_path / "g" / "grid.csv").read_text().splitlines()
        assert rows[0] == "model,batch_size,learning_rate,min_val_loss" and len(rows) == 5
        best = data.read_manifest(tmp_path / "g" / "best.txt")
        losses = [float(r.split(",")[3]) for r in rows[1:]]
        assert float(best["min_val_loss"]) == min(losses)

    def test_empty_grid(self, work, tmp_path):
        assert run("grid", "--data", work / "ds", "--out", tmp_path / "g",
                   "--grid_learning_rates", "", *SMALL) == 2
