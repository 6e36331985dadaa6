"""End-to-end CLI coverage: data generation, training, evaluation, the
significance test, and error reporting."""

import json

import pytest

from mvrd.cli import main
from mvrd.datasynth import load_features_file
from mvrd.teacher import load_teacher_file

TINY_CONFIG = """
# desk-scale smoke configuration
n_samples = 48
d_in = 8
teacher_dim = 8
len_text = 4
len_image = 4
len_clip = 2
seed = 5

d = 8
d_h = 16
heads = 4
encoder_heads = 2
epochs = 2
batch_size = 16
master_seed = 1
"""


@pytest.fixture()
def config_file(tmp_path):
    path = tmp_path / "config.txt"
    path.write_text(TINY_CONFIG, "utf-8")
    return path


@pytest.fixture()
def data_dir(tmp_path, config_file):
    out = tmp_path / "data"
    assert main(["gen-data", "--config", str(config_file), "--out", str(out)]) == 0
    return out


class TestGenData:
    def test_writes_loadable_files(self, data_dir):
        samples = load_features_file(data_dir / "features.jsonl")
        assert len(samples) == 48
        teacher = load_teacher_file(data_dir / "teacher.jsonl")
        assert set(teacher.embeddings) == {s.sample_id for s in samples}


class TestTrainEval:
    def test_train_then_eval(self, data_dir, config_file, tmp_path, capsys):
        run_dir = tmp_path / "run"
        code = main(
            [
                "train",
                "--config",
                str(config_file),
                "--features",
                str(data_dir / "features.jsonl"),
                "--teacher",
                str(data_dir / "teacher.jsonl"),
                "--out",
                str(run_dir),
            ]
        )
        assert code == 0
        metrics = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert set(metrics) == {"accuracy", "f1_fake", "f1_real", "auc"}
        assert (run_dir / "checkpoint.bin").exists()
        assert (run_dir / "report.jsonl").exists()

        code = main(
            [
                "eval",
                "--checkpoint",
                str(run_dir / "checkpoint.bin"),
                "--features",
                str(data_dir / "features.jsonl"),
            ]
        )
        assert code == 0
        evaluated = json.loads(capsys.readouterr().out.strip())
        assert 0.0 <= evaluated["accuracy"] <= 1.0


class TestGenTeacher:
    def test_mock_mode(self, data_dir, tmp_path):
        out = tmp_path / "teacher-mock.jsonl"
        code = main(
            [
                "gen-teacher",
                "--features",
                str(data_dir / "features.jsonl"),
                "--mode",
                "mock",
                "--d-t",
                "16",
                "--student-dim",
                "8",
                "--out",
                str(out),
            ]
        )
        assert code == 0
        loaded = load_teacher_file(out)
        assert loaded.spec.d_t == 16
        assert all(r.chain for r in loaded.records)


class TestTTest:
    def test_textbook_example(self, capsys):
        assert main(["ttest", "--a", "1,2,3,4,5", "--b", "2,3,4,5,6"]) == 0
        out = json.loads(capsys.readouterr().out.strip())
        assert out["t"] == pytest.approx(-1.0, abs=1e-12)
        assert out["dof"] == pytest.approx(8.0, abs=1e-12)
        assert out["p"] == pytest.approx(0.3466, abs=1e-3)


class TestGradCheckCommand:
    def test_passes_on_tiny_model(self, capsys):
        assert main(["grad-check", "--d", "8", "--samples", "2", "--seed", "1"]) == 0
        out = json.loads(capsys.readouterr().out.strip())
        assert out["passed"] is True
        assert out["max_rel_error"] < 1e-4


class TestErrors:
    def test_unknown_config_key_is_machine_parsable(self, tmp_path, capsys):
        bad = tmp_path / "bad.txt"
        bad.write_text("epochz = 3\n", "utf-8")
        code = main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")])
        assert code != 0
        err = json.loads(capsys.readouterr().err.strip())
        assert err["error"] == "ConfigError"
        assert "epochz" in err["message"]

    def test_missing_features_file(self, capsys):
        code = main(["train", "--features", "/nonexistent.jsonl", "--out", "/tmp/x"])
        assert code != 0
        err = json.loads(capsys.readouterr().err.strip())
        assert err["error"]

    def test_bad_value_type(self, tmp_path, capsys):
        bad = tmp_path / "bad.txt"
        bad.write_text("epochs = soon\n", "utf-8")
        code = main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")])
        assert code != 0
        err = json.loads(capsys.readouterr().err.strip())
        assert err["error"] == "ConfigError"


class TestSweepCommand:
    def test_tau_axis(self, data_dir, config_file, tmp_path, capsys):
        out = tmp_path / "sweep"
        code = main(
            [
                "sweep",
                "--config",
                str(config_file),
                "--features",
                str(data_dir / "features.jsonl"),
                "--teacher",
                str(data_dir / "teacher.jsonl"),
                "--axis",
                "tau",
                "--values",
                "1.0,2.0",
                "--seeds",
                "1",
                "--out",
                str(out),
            ]
        )
        assert code == 0
        lines = (out / "sweep_tau.jsonl").read_text("utf-8").strip().splitlines()
        assert len(lines) == 2
        assert json.loads(lines[0])["name"] == "tau=1.0"
