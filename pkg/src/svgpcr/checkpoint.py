"""Versioned, checksummed binary checkpoints.

Layout: ``SVGPCRCK`` magic | uint32 version | uint64 header length |
UTF-8 JSON header | concatenated little-endian float64 arrays | SHA-256 of
all preceding bytes. The JSON header is written with sorted keys and every
array is stored verbatim, so save -> load -> save reproduces the same bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .crowd import CrowdPosterior, LabelPosterior
from .errors import CheckpointVersionError, IntegrityError
from .kernel import SEKernelParams
from .likelihood import RobustMax
from .sparse_gp import VariationalGP
from .trainer import SVGPCR, TrainConfig, Trainer, TrainingLog

MAGIC = b"SVGPCRCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<IQ")
_DIGEST = 32
LOG_COLUMNS = TrainingLog.COLUMNS


@dataclass
class Checkpoint:
    model: SVGPCR
    config: TrainConfig
    counters: dict = field(default_factory=lambda: {"step": 0, "epoch": 0, "position": 0})
    adam: dict = field(default_factory=dict)
    log: TrainingLog | None = None
    annotator_ids: np.ndarray | None = None
    instance_ids: np.ndarray | None = None
    format_version: int = FORMAT_VERSION

    @property
    def rng_state(self) -> dict:
        """Sampling is a pure function of (seed, epoch, position) so this is the whole RNG state."""
        return {"seed": self.config.seed, "epoch": self.counters["epoch"], "position": self.counters["position"]}

    @classmethod
    def from_trainer(cls, trainer: Trainer, annotator_ids=None, instance_ids=None) -> "Checkpoint":
        st = trainer.state_dict()
        if annotator_ids is None and trainer.ann is not None:
            annotator_ids = trainer.ann.annotator_ids
        return cls(trainer.model.detached(), trainer.config, st["counters"], st["adam"], st["log"],
                   annotator_ids, instance_ids)

    def restore_trainer(self, X, ann) -> Trainer:
        trainer = Trainer(self.model, X, ann, self.config)
        trainer.load_state_dict({"counters": self.counters, "adam": self.adam,
                                 "log": self.log if self.log is not None else TrainingLog()})
        return trainer


def _arrays(ck: Checkpoint) -> dict[str, np.ndarray]:
    m = ck.model
    arrays = {
        "gp/inducing_inputs": m.gp.inducing_inputs,
        "gp/means": m.gp.means,
        "gp/raw_scale": m.gp.raw_scale,
        "gp/log_variance": m.gp.kernel.log_variance,
        "gp/log_lengthscale": m.gp.kernel.log_lengthscale,
        "labels/q": m.labels.q,
    }
    if m.crowd is not None:
        arrays["crowd/raw_alpha"] = m.crowd.raw_alpha
        arrays["crowd/alpha_prior"] = m.crowd.alpha_prior
    arrays.update(ck.adam)
    if ck.log is not None:
        arrays["log/records"] = np.array(
            [[r[c] for c in LOG_COLUMNS] for r in ck.log.records], dtype=np.float64
        ).reshape(-1, len(LOG_COLUMNS))
    out = {}
    for name, a in arrays.items():
        if isinstance(a, torch.Tensor):
            a = a.detach().numpy()
        out[name] = np.asarray(a, dtype="<f8", order="C")  # keeps 0-d arrays 0-d
    return out


def to_bytes(ck: Checkpoint) -> bytes:
    arrays = _arrays(ck)
    index, offset = [], 0
    for name in sorted(arrays):
        a = arrays[name]
        index.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        offset += a.nbytes
    m = ck.model
    header = {
        "format_version": ck.format_version,
        "config": ck.config.to_dict(),
        "counters": {k: int(v) for k, v in ck.counters.items()},
        "rng_state": ck.rng_state,
        "model": {
            "num_classes": m.num_classes,
            "input_dim": m.input_dim,
            "num_inducing": m.gp.num_inducing,
            "jitter": m.gp.jitter,
            "epsilon": m.likelihood.epsilon,
            "quadrature_points": m.likelihood.quadrature_points,
            "has_crowd": m.crowd is not None,
        },
        "annotator_ids": None if ck.annotator_ids is None else [int(a) for a in ck.annotator_ids],
        "instance_ids": None if ck.instance_ids is None else [int(i) for i in ck.instance_ids],
        "arrays": index,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + _PREFIX.pack(ck.format_version, len(hbytes)) + hbytes
    body += b"".join(arrays[e["name"]].tobytes() for e in index)
    return body + hashlib.sha256(body).digest()


def from_bytes(data: bytes, source: str = "<bytes>") -> Checkpoint:
    head = len(MAGIC) + _PREFIX.size
    if len(data) < head + _DIGEST or data[:len(MAGIC)] != MAGIC:
        raise IntegrityError(f"{source}: not a checkpoint or truncated")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{source}: checksum mismatch (corrupt or truncated)")
    version, hlen = _PREFIX.unpack(data[len(MAGIC):head])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{source}: checkpoint format version {version} cannot be read by version {FORMAT_VERSION}; "
            "re-export it with a matching release"
        )
    header = json.loads(body[head:head + hlen].decode("utf-8"))
    blob = memoryview(body)[head + hlen:]
    arrays = {}
    for e in header["arrays"]:
        raw = np.frombuffer(blob, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"])
        arrays[e["name"]] = torch.from_numpy(raw.reshape(e["shape"]).astype(np.float64))

    meta = header["model"]
    kernel = SEKernelParams(arrays["gp/log_variance"], arrays["gp/log_lengthscale"])
    gp = VariationalGP(arrays["gp/inducing_inputs"], arrays["gp/means"], arrays["gp/raw_scale"],
                       kernel, meta["jitter"])
    crowd = None
    if meta["has_crowd"]:
        crowd = CrowdPosterior(arrays["crowd/raw_alpha"], arrays["crowd/alpha_prior"])
    likelihood = RobustMax(meta["num_classes"], meta["epsilon"], meta["quadrature_points"])
    model = SVGPCR(gp, crowd, LabelPosterior(arrays["labels/q"]), likelihood)

    log = None
    if "log/records" in arrays:
        log = TrainingLog()
        for row in arrays["log/records"].numpy():
            rec = dict(zip(LOG_COLUMNS, row.tolist()))
            for c in ("step", "epoch", "batch_size"):
                rec[c] = int(rec[c])
            log.records.append(rec)
    adam = {k: v for k, v in arrays.items() if k.startswith("adam/")}
    ids = header["annotator_ids"]
    inst = header["instance_ids"]
    return Checkpoint(
        model, TrainConfig.from_dict(header["config"]), header["counters"], adam, log,
        None if ids is None else np.asarray(ids, dtype=np.int64),
        None if inst is None else np.asarray(inst, dtype=np.int64),
        version,
    )


def save_checkpoint(state: Checkpoint | Trainer, path) -> bytes:
    ck = Checkpoint.from_trainer(state) if isinstance(state, Trainer) else state
    data = to_bytes(ck)
    Path(path).write_bytes(data)
    return data


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), str(path))

