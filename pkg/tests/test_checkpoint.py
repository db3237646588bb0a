import hashlib
import struct

import numpy as np
import pytest
import torch

from svgpcr import TrainConfig, Trainer, generate_annotations, controlled_annotators, make_toy_dataset
from svgpcr.checkpoint import MAGIC, Checkpoint, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from svgpcr.errors import CheckpointVersionError, IntegrityError
from svgpcr.trainer import initialize_model


@pytest.fixture(scope="module")
def trained():
    X, y = make_toy_dataset("gaussians", 60, 3, seed=5)
    ann, _ = generate_annotations(y, controlled_annotators(), seed=6, num_classes=3)
    cfg = TrainConfig(minibatch_size=16, num_inducing=5, epochs=2, learning_rate=0.05)
    tr = Trainer(initialize_model(X, ann, cfg), X, ann, cfg)
    tr.run(num_steps=6)
    return X, ann, tr


def test_round_trip_is_bitwise(trained, tmp_path):
    _, _, tr = trained
    path = tmp_path / "a.ckpt"
    data = save_checkpoint(tr, path)
    ck = load_checkpoint(path)
    assert to_bytes(ck) == data
    for (name, a), b in zip(tr.model.parameters().items(), ck.model.parameters().values()):
        assert a.shape == b.shape and torch.equal(a.detach(), b), name
    assert torch.equal(ck.model.labels.q, tr.model.labels.q)
    assert ck.log.records == tr.log.records
    assert ck.config == tr.config
    assert ck.counters == {"step": 6, "epoch": 1, "position": 2}
    assert ck.rng_state == {"seed": 0, "epoch": 1, "position": 2}
    np.testing.assert_array_equal(ck.annotator_ids, np.arange(5))


def test_truncated_and_corrupt_files(trained):
    data = to_bytes(Checkpoint.from_trainer(trained[2]))
    for bad in (data[:-1], data[: len(data) // 2], data[:10], b""):
        with pytest.raises(IntegrityError):
            from_bytes(bad)
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0x01
    with pytest.raises(IntegrityError, match="checksum"):
        from_bytes(bytes(flipped))
    with pytest.raises(IntegrityError):
        from_bytes(b"NOTACKPT" + data[len(MAGIC):])


def test_version_mismatch(trained):
    data = to_bytes(Checkpoint.from_trainer(trained[2]))
    body = bytearray(data[:-32])
    body[len(MAGIC):len(MAGIC) + 4] = struct.pack("<I", 99)
    with pytest.raises(CheckpointVersionError, match="version 99"):
        from_bytes(bytes(body) + hashlib.sha256(body).digest())


def test_restored_trainer_keeps_adam_state(trained):
    X, ann, tr = trained
    restored = from_bytes(to_bytes(Checkpoint.from_trainer(tr))).restore_trainer(X, ann)
    a = tr.optimizer.state_dict()["state"]
    b = restored.optimizer.state_dict()["state"]
    assert a.keys() == b.keys()
    for i in a:
        assert torch.equal(a[i]["exp_avg"], b[i]["exp_avg"])
        assert torch.equal(a[i]["exp_avg_sq"], b[i]["exp_avg_sq"])
        assert float(a[i]["step"]) == float(b[i]["step"])
    assert restored.step == tr.step
