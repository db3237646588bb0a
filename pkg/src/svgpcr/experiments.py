"""Synthetic experiments: controlled-annotator replication, inducing-point sweep, timing.

Used by the scripts in ``scripts/`` and by the acceptance tests, so both run the
exact same code paths.
"""
from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import torch

from .crowd import AnnotationSet
from .metrics import accuracy, confusion_recovery_error
from .simulator import controlled_annotators, generate_annotations, make_toy_dataset
from .trainer import TrainConfig, Trainer, initialize_model, predict_proba, refresh_all_responsibilities


@dataclass
class BlobsProblem:
    X: np.ndarray
    y: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    annotations: AnnotationSet
    confusions: np.ndarray  # A x K x K, column-stochastic


def blobs_problem(N: int = 2000, K: int = 5, test_size: int = 2000, seed: int = 0,
                  separation: float = 6.0) -> BlobsProblem:
    """Gaussian blobs labelled by the five controlled annotators with full coverage."""
    X, y = make_toy_dataset("gaussians", N, K, seed=seed, separation=separation)
    Xt, yt = make_toy_dataset("gaussians", test_size, K, seed=seed + 2, separation=separation)
    ann, mats = generate_annotations(y, controlled_annotators(), seed=seed + 1, num_classes=K)
    return BlobsProblem(X, y, Xt, yt, ann, np.stack(mats))


def replication_config(**overrides) -> TrainConfig:
    """Training settings for the blobs runs (M=20, 100 epochs)."""
    base = dict(minibatch_size=50, learning_rate=0.02, num_inducing=20, epochs=100, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class ReplicationResult:
    max_error: np.ndarray  # per annotator
    estimated: np.ndarray  # A x K x K posterior means
    reconstruction: float
    test_accuracy: float
    gold_test_accuracy: float
    seconds: float
    gold_seconds: float

    def spammer_deviation(self, a: int = 3) -> float:
        K = self.estimated.shape[-1]
        return float(np.abs(self.estimated[a] - 1.0 / K).max())

    def adversary_argmax(self, a: int = 4) -> np.ndarray:
        return self.estimated[a].argmax(0)


def run_replication(problem: BlobsProblem, config: TrainConfig, with_gold: bool = True) -> ReplicationResult:
    t0 = time.perf_counter()
    model = initialize_model(problem.X, problem.annotations, config)
    trainer = Trainer(model, problem.X, problem.annotations, config)
    trainer.run()
    refresh_all_responsibilities(trainer.model, problem.X, problem.annotations)
    seconds = time.perf_counter() - t0

    estimated = trainer.model.crowd.posterior_mean().detach().numpy()
    max_err, _ = confusion_recovery_error(estimated, problem.confusions)
    recon, _ = accuracy(trainer.model.labels.q.numpy(), problem.y)
    test_acc, _ = accuracy(predict_proba(trainer.model, problem.X_test), problem.y_test)

    gold_acc, gold_seconds = float("nan"), 0.0
    if with_gold:
        t0 = time.perf_counter()
        gold = initialize_model(problem.X, None, config, problem.confusions.shape[-1], gold_labels=problem.y)
        Trainer(gold, problem.X, None, config).run()
        gold_seconds = time.perf_counter() - t0
        gold_acc, _ = accuracy(predict_proba(gold, problem.X_test), problem.y_test)
    return ReplicationResult(max_err, estimated, recon, test_acc, gold_acc, seconds, gold_seconds)


def inducing_sweep(problem: BlobsProblem, sizes=(2, 10, 30), seeds=range(5), **overrides) -> np.ndarray:
    """Crowd-trained test accuracy, shape ``len(sizes) x len(seeds)``."""
    out = np.empty((len(sizes), len(seeds)))
    for i, M in enumerate(sizes):
        for j, s in enumerate(seeds):
            cfg = replication_config(num_inducing=M, seed=s, **overrides)
            out[i, j] = run_replication(problem, cfg, with_gold=False).test_accuracy
    return out


def _trainer_for(N: int, batch: int, num_inducing: int = 20, K: int = 5, seed: int = 0) -> Trainer:
    problem = blobs_problem(N, K, test_size=1, seed=seed)
    cfg = replication_config(minibatch_size=batch, num_inducing=num_inducing, epochs=10**6, seed=seed)
    return Trainer(initialize_model(problem.X, problem.annotations, cfg), problem.X, problem.annotations, cfg)


@contextmanager
def single_thread():
    """Timing on one thread keeps the measured shape free of parallel-efficiency effects."""
    old = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(old)


def step_seconds(batch: int, N: int = 4096, steps: int = 30, warmup: int = 5, repeats: int = 3) -> float:
    """Median wall time of one training step at minibatch size ``batch``."""
    with single_thread():
        tr = _trainer_for(N, batch)
        tr.run(num_steps=warmup)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            tr.run(num_steps=steps)
            times.append((time.perf_counter() - t0) / steps)
    return float(np.median(times))


def epoch_seconds(N: int, batch: int = 256, warmup: int = 2) -> float:
    """Wall time of one epoch's worth of steps over N instances, setup excluded."""
    with single_thread():
        tr = _trainer_for(N, batch)
        tr.run(num_steps=warmup)
        t0 = time.perf_counter()
        tr.run(num_steps=tr.steps_per_epoch)
        return time.perf_counter() - t0
