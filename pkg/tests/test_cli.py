import json

import pytest

from cozad.cli import main
from cozad.feature_io import SynthConfig, read_feature_file, synth_generate, write_feature_file


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def train_file(tmp_path):
    path = tmp_path / "train.cozf"
    assert run("synth-gen", "--out", path, "--n-normal", 8, "--feat-dim", 8,
               "--grid-h", 2, "--grid-w", 2, "--seed", 3) == 0
    return path


@pytest.fixture
def test_file(tmp_path):
    path = tmp_path / "test.cozf"
    assert run("synth-gen", "--out", path, "--n-normal", 6, "--n-anomalous", 4,
               "--feat-dim", 8, "--grid-h", 2, "--grid-w", 2, "--seed", 4) == 0
    return path


@pytest.fixture
def checkpoint(tmp_path, train_file):
    ckpt = tmp_path / "model.cozm"
    assert run("train", "--data", train_file, "--out", ckpt,
               "--epochs", 2, "--batch-size", 4, "--seed", 1) == 0
    return ckpt


class TestSynthGen:
    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a.cozf", tmp_path / "b.cozf"
        for path in (a, b):
            assert run("synth-gen", "--out", path, "--seed", 7, "--n-normal", 5,
                       "--feat-dim", 8, "--grid-h", 2, "--grid-w", 2) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_zero_anomalous_is_valid(self, tmp_path):
        path = tmp_path / "train.cozf"
        assert run("synth-gen", "--out", path, "--n-anomalous", 0, "--n-normal", 4,
                   "--feat-dim", 8, "--grid-h", 2, "--grid-w", 2) == 0
        ds = read_feature_file(path)
        assert ds.image_labels.sum() == 0

    def test_missing_out_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run("synth-gen", "--seed", 7)
        assert exc.value.code == 2

    def test_unwritable_path_is_runtime_error(self, tmp_path, capsys):
        assert run("synth-gen", "--out", tmp_path / "nodir" / "x.cozf",
                   "--n-normal", 2, "--feat-dim", 4, "--grid-h", 2, "--grid-w", 2) == 1
        assert "error:" in capsys.readouterr().err


class TestTrain:
    def test_writes_checkpoint_and_report(self, tmp_path, train_file):
        ckpt = tmp_path / "m.cozm"
        report = tmp_path / "report.json"
        assert run("train", "--data", train_file, "--out", ckpt, "--report", report,
                   "--epochs", 2, "--batch-size", 4, "--seed", 1) == 0
        assert ckpt.exists()
        doc = json.loads(report.read_bytes())
        assert doc["epochs"] == 2
        assert len(doc["train_loss"]) == 2
        assert doc["config"]["seed"] == 1
        assert (tmp_path / "report_curves.png").exists()
        assert (tmp_path / "report_uncertainty.png").exists()
        assert (tmp_path / "report_weights.png").exists()

    def test_toggles_accepted(self, tmp_path, train_file):
        ckpt = tmp_path / "m.cozm"
        assert run("train", "--data", train_file, "--out", ckpt, "--epochs", 1,
                   "--batch-size", 4, "--no-confident", "--no-meta", "--no-contrastive",
                   "--no-figures", "--seed", 0) == 0

    def test_anomalous_train_file_rejected(self, tmp_path, test_file, capsys):
        assert run("train", "--data", test_file, "--out", tmp_path / "m.cozm",
                   "--epochs", 1, "--seed", 0) == 1
        assert "anomal" in capsys.readouterr().err

    def test_rerun_byte_identical(self, tmp_path, train_file):
        ckpt = tmp_path / "m.cozm"
        report = tmp_path / "report.json"
        outs = []
        for _ in range(2):
            assert run("train", "--data", train_file, "--out", ckpt, "--report", report,
                       "--epochs", 2, "--batch-size", 4, "--seed", 5) == 0
            outs.append((
                ckpt.read_bytes(),
                report.read_bytes(),
                (tmp_path / "report_curves.png").read_bytes(),
                (tmp_path / "report_weights.png").read_bytes(),
            ))
        assert outs[0] == outs[1]

    def test_config_file_respected(self, tmp_path, train_file):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("epochs = 1\nbatch_size = 4\nuse_meta = false\n")
        report = tmp_path / "r.json"
        assert run("train", "--data", train_file, "--out", tmp_path / "m.cozm",
                   "--report", report, "--config", cfg, "--seed", 0, "--no-figures") == 0
        doc = json.loads(report.read_bytes())
        assert doc["epochs"] == 1
        assert doc["config"]["use_meta"] is False
        assert doc["val_loss"] == [None]


class TestScoreEval:
    def test_score_csv_and_maps(self, tmp_path, checkpoint, test_file):
        csv_path = tmp_path / "scores.csv"
        maps_path = tmp_path / "maps.cozf"
        assert run("score", "--checkpoint", checkpoint, "--data", test_file,
                   "--out", csv_path, "--maps", maps_path) == 0
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "image_index,image_score,label"
        assert len(lines) == 11
        maps = read_feature_file(maps_path)
        assert maps.feat_dim == 1
        assert maps.n_images == 10

    def test_eval_json_metrics(self, tmp_path, checkpoint, test_file):
        out = tmp_path / "metrics.json"
        assert run("eval", "--checkpoint", checkpoint, "--data", test_file,
                   "--out", out, "--csv", tmp_path / "s.csv", "--smooth-sigma", 0.0) == 0
        doc = json.loads(out.read_bytes())
        assert set(doc) >= {"i_auroc", "p_auroc", "image_scores", "notes"}
        assert doc["i_auroc"] is not None
        assert (tmp_path / "metrics_scores.png").exists()
        assert (tmp_path / "metrics_roc.png").exists()

    def test_dimension_mismatch_names_both(self, tmp_path, checkpoint, capsys):
        other = tmp_path / "wide.cozf"
        write_feature_file(
            synth_generate(SynthConfig(n_normal=3, feat_dim=16, grid_h=2, grid_w=2, seed=0)),
            other,
        )
        assert run("score", "--checkpoint", checkpoint, "--data", other,
                   "--out", tmp_path / "s.csv") == 1
        err = capsys.readouterr().err
        assert "8" in err and "16" in err

    def test_eval_rerun_byte_identical(self, tmp_path, checkpoint, test_file):
        blobs = []
        for tag in ("a", "b"):
            out = tmp_path / f"{tag}.json"
            assert run("eval", "--checkpoint", checkpoint, "--data", test_file,
                       "--out", out, "--no-figures") == 0
            blobs.append(out.read_bytes())
        assert blobs[0] == blobs[1]


class TestInspect:
    def test_prints_feature_header(self, train_file, capsys):
        assert run("inspect", train_file) == 0
        out = capsys.readouterr().out
        assert "n_images=8" in out
        assert "grid=2x2" in out
        assert "feat_dim=8" in out

    def test_prints_checkpoint_header(self, checkpoint, capsys):
        assert run("inspect", checkpoint) == 0
        out = capsys.readouterr().out
        assert "feat_dim=8" in out
        assert "hidden_dim=8" in out

    def test_confidence_csv_for_pair(self, tmp_path, checkpoint, train_file):
        out = tmp_path / "conf.csv"
        assert run("inspect", checkpoint, train_file, "--confidence-out", out) == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "index,score,weight,tau,epoch"
        assert len(lines) == 1 + 8 * 4

    def test_unknown_magic_is_error(self, tmp_path, capsys):
        bad = tmp_path / "junk.bin"
        bad.write_bytes(b"JUNKJUNK")
        assert run("inspect", bad) == 1
        assert "unrecognized magic" in capsys.readouterr().err
