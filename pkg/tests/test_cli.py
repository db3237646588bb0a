import numpy as np
import pytest

from svgpcr import cli
from svgpcr.checkpoint import load_checkpoint
from svgpcr.data_io import read_table

def train_flags(epochs=8):
    return ["--epochs", str(epochs), "--minibatch-size", "50", "--num-inducing", "8", "--learning-rate", "0.05"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert cli.run(["simulate", "--out-dir", str(d), "--num-instances", "300", "--num-classes", "3",
                    "--test-size", "150", "--seed", "2"]) == 0
    return d


@pytest.fixture(scope="module")
def trained(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert cli.run(["train", "--features", str(data / "features.csv"), "--annotations",
                    str(data / "annotations.csv"), "--out-dir", str(out), *train_flags()]) == 0
    return out


def test_simulate_outputs(data):
    header, rows = read_table(data / "annotations.csv")
    assert header == ["instance_id", "annotator_id", "label"] and len(rows) == 5 * 300
    for name in ("features.csv", "truth.csv", "true_confusions.csv", "test_features.csv", "test_truth.csv"):
        assert (data / name).exists()


def test_pipeline_accuracy(data, trained, tmp_path, capsys):
    assert cli.run(["predict", "--checkpoint", str(trained / "checkpoint.ckpt"),
                    "--features", str(data / "test_features.csv"), "--out-dir", str(tmp_path)]) == 0
    assert cli.run(["evaluate", "--predictions", str(tmp_path / "predictions.csv"),
                    "--truth", str(data / "test_truth.csv"), "--out-dir", str(tmp_path)]) == 0
    header, rows = read_table(tmp_path / "metrics.csv")
    glob = dict(zip(header, rows[-1]))
    assert glob["class"] == "global" and float(glob["accuracy"]) >= 0.95
    assert "accuracy" in capsys.readouterr().out


def test_train_outputs(trained):
    text = (trained / "training_log.csv").read_text()
    assert "# learning_rate=0.05" in text and "# minibatch_size=50" in text
    header, rows = read_table(trained / "training_log.csv")
    assert header[:3] == ["step", "epoch", "batch_size"] and len(rows) == 8 * 6
    assert read_table(trained / "timing.csv")[0] == ["step", "elapsed_seconds"]
    _, q = read_table(trained / "label_posterior.csv")
    assert len(q) == 300


def test_inspect_annotators(trained, tmp_path):
    assert cli.run(["inspect-annotators", "--checkpoint", str(trained / "checkpoint.ckpt"),
                    "--out-dir", str(tmp_path)]) == 0
    header, rows = read_table(tmp_path / "annotator_confusions.csv")
    assert header == ["annotator_id", "label", "true_class", "mean", "variance"]
    assert len(rows) == 5 * 3 * 3
    means = np.array([float(r[3]) for r in rows]).reshape(5, 3, 3)  # [a, j, i]
    np.testing.assert_allclose(means.sum(2), 1.0, atol=1e-12)


def test_identical_commands_give_identical_files(data, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.run(["train", "--features", str(data / "features.csv"), "--annotations",
                        str(data / "annotations.csv"), "--out-dir", str(out), *train_flags(2)]) == 0
        outs.append(out)
    for f in ("checkpoint.ckpt", "training_log.csv", "label_posterior.csv"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes(), f


def test_config_file_and_override_precedence(data, tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("epochs: 1\nminibatch_size: 100\nnum_inducing: 5\nlearning_rate: 0.5\n")
    out = tmp_path / "o"
    assert cli.run(["train", "--features", str(data / "features.csv"), "--annotations",
                    str(data / "annotations.csv"), "--config", str(cfg), "--learning-rate", "0.02",
                    "--out-dir", str(out)]) == 0
    ck = load_checkpoint(out / "checkpoint.ckpt")
    assert ck.config.learning_rate == 0.02 and ck.config.minibatch_size == 100 and ck.counters["step"] == 3


def test_resume_from_checkpoint(data, trained, tmp_path):
    out = tmp_path / "more"
    assert cli.run(["train", "--features", str(data / "features.csv"), "--annotations",
                    str(data / "annotations.csv"), "--checkpoint", str(trained / "checkpoint.ckpt"),
                    "--out-dir", str(out), *train_flags(10)]) == 0
    ck = load_checkpoint(out / "checkpoint.ckpt")
    assert ck.counters["step"] == 60 and len(ck.log.records) == 60


def test_batch_larger_than_dataset_is_rejected(data, tmp_path, capsys):
    out = tmp_path / "bad"
    rc = cli.run(["train", "--features", str(data / "features.csv"), "--annotations",
                  str(data / "annotations.csv"), "--out-dir", str(out), "--minibatch-size", "301"])
    assert rc == 2
    assert "minibatch_size 301 exceeds" in capsys.readouterr().err
    assert not out.exists() or not any(out.iterdir())


def test_dimension_mismatch_names_both(trained, tmp_path, capsys):
    feats = tmp_path / "f3.csv"
    feats.write_text("a,b,c\n1,2,3\n")
    rc = cli.run(["predict", "--checkpoint", str(trained / "checkpoint.ckpt"), "--features", str(feats),
                  "--out-dir", str(tmp_path / "p")])
    err = capsys.readouterr().err
    assert rc == 2 and "D=2" in err and "D=3" in err


def test_unknown_config_key_and_missing_file(data, tmp_path, capsys):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("epoch: 3\n")
    assert cli.run(["train", "--features", str(data / "features.csv"), "--annotations",
                    str(data / "annotations.csv"), "--config", str(cfg), "--out-dir", str(tmp_path / "x")]) == 2
    assert "unknown config keys" in capsys.readouterr().err
    assert cli.run(["predict", "--checkpoint", str(tmp_path / "nope.ckpt"), "--features", str(cfg),
                    "--out-dir", str(tmp_path / "y")]) == 2


def test_evaluate_rejects_unseen_class(tmp_path, capsys):
    (tmp_path / "p.csv").write_text("instance_id,p_0,p_1\n0,0.4,0.6\n")
    (tmp_path / "t.csv").write_text("instance_id,label\n0,2\n")
    assert cli.run(["evaluate", "--predictions", str(tmp_path / "p.csv"), "--truth", str(tmp_path / "t.csv"),
                    "--out-dir", str(tmp_path)]) == 2
    assert "unseen" in capsys.readouterr().err
    assert not (tmp_path / "metrics.csv").exists()
