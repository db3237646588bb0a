"""Synthetic annotators and toy feature sets for controlled experiments."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .crowd import AnnotationSet
from .errors import ConfigError, InvalidInputError

KINDS = ("reliable", "spammer", "adversarial", "explicit")


@dataclass(frozen=True)
class AnnotatorSpec:
    kind: str
    p: float = 1.0
    shift: int = 1
    matrix: np.ndarray | None = None
    coverage: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown annotator kind {self.kind!r}")
        if self.kind in ("reliable", "adversarial") and not 0.0 < self.p <= 1.0:
            raise ConfigError(f"accuracy p must lie in (0, 1], got {self.p}")
        if not 0.0 < self.coverage <= 1.0:
            raise ConfigError(f"coverage must lie in (0, 1], got {self.coverage}")
        if self.kind == "explicit" and self.matrix is None:
            raise ConfigError("explicit annotators need a matrix")

    @classmethod
    def reliable(cls, p: float, coverage: float = 1.0) -> "AnnotatorSpec":
        return cls("reliable", p=p, coverage=coverage)

    @classmethod
    def spammer(cls, coverage: float = 1.0) -> "AnnotatorSpec":
        return cls("spammer", coverage=coverage)

    @classmethod
    def adversarial(cls, shift: int = 1, p: float = 0.9, coverage: float = 1.0) -> "AnnotatorSpec":
        return cls("adversarial", p=p, shift=shift, coverage=coverage)

    @classmethod
    def explicit(cls, matrix, coverage: float = 1.0) -> "AnnotatorSpec":
        return cls("explicit", matrix=np.asarray(matrix, dtype=np.float64), coverage=coverage)


def controlled_annotators() -> list[AnnotatorSpec]:
    """The five-annotator panel: 95%, 90%, 80% accurate, a spammer and a +1 adversary."""
    return [
        AnnotatorSpec.reliable(0.95),
        AnnotatorSpec.reliable(0.90),
        AnnotatorSpec.reliable(0.80),
        AnnotatorSpec.spammer(),
        AnnotatorSpec.adversarial(shift=1, p=0.9),
    ]


def _spread(rng: np.random.Generator, R: np.ndarray, rows_for_col, mass: float, j: int):
    rows = list(rows_for_col)
    if len(rows) == 0:
        return
    share = rng.dirichlet(np.ones(len(rows)))
    R[rows, j] = mass * share
    # absorb rounding so the column sums to one exactly
    R[rows[-1], j] = 1.0 - (R[:, j].sum() - R[rows[-1], j])


def build_confusion(spec: AnnotatorSpec, K: int, seed=None) -> np.ndarray:
    """K x K column-stochastic confusion matrix; entry (i, j) = P(label i | true class j).

    Off-diagonal mass is split by a seeded Dirichlet(1, ..., 1) draw per column.
    """
    if K < 2:
        raise ConfigError("need at least two classes")
    rng = np.random.default_rng(seed)
    if spec.kind == "spammer":
        return np.full((K, K), 1.0 / K)
    if spec.kind == "explicit":
        R = np.asarray(spec.matrix, dtype=np.float64)
        if R.shape != (K, K) or (R < 0).any() or not np.allclose(R.sum(0), 1.0, atol=1e-12):
            raise ConfigError("explicit matrix must be K x K and column-stochastic")
        return R.copy()
    R = np.zeros((K, K))
    for j in range(K):
        target = j if spec.kind == "reliable" else (j + spec.shift) % K
        R[target, j] = spec.p
        _spread(rng, R, [i for i in range(K) if i != target], 1.0 - spec.p, j)
    return R


def generate_annotations(true_labels, specs, seed=None, num_classes: int | None = None):
    """Draw each covered instance's label from the column of its true class.

    Returns ``(annotations, matrices)`` where ``matrices[a]`` is the exact
    confusion matrix used for annotator ``a``. Annotator ``a`` labels exactly
    ``round(coverage * N)`` instances.
    """
    y = np.asarray(true_labels, dtype=np.int64)
    K = int(y.max()) + 1 if num_classes is None else int(num_classes)
    if len(y) and (y.min() < 0 or y.max() >= K):
        raise InvalidInputError("true labels out of range")
    N = len(y)
    seeds = np.random.SeedSequence(seed).spawn(len(specs))
    inst, ann, lab, mats = [], [], [], []
    for a, (spec, ss) in enumerate(zip(specs, seeds)):
        rng = np.random.default_rng(ss)
        R = build_confusion(spec, K, rng)
        n_cov = int(round(spec.coverage * N))
        covered = np.arange(N) if n_cov == N else np.sort(rng.choice(N, n_cov, replace=False))
        cdf = np.cumsum(R, axis=0)
        cdf[-1] = 1.0
        u = rng.random(len(covered))
        labels = (u[:, None] >= cdf[:, y[covered]].T).sum(1)
        inst.append(covered)
        ann.append(np.full(len(covered), a))
        lab.append(labels)
        mats.append(R)
    annotations = AnnotationSet.from_triples(
        np.concatenate(inst), np.concatenate(ann), np.concatenate(lab),
        num_classes=K, num_instances=N, annotator_ids=np.arange(len(specs)),
    )
    return annotations, mats


def make_toy_dataset(kind: str = "gaussians", N: int = 300, K: int = 3, seed=None,
                     separation: float = 6.0, dim: int = 2, noise: float = 0.1):
    """Balanced toy classification data ``(X, labels)``.

    ``gaussians``: unit-variance blobs whose neighbouring centres sit
    ``separation`` standard deviations apart on a circle (padded with zeros
    when ``dim > 2``). ``two_moons``: the interleaved half circles, K = 2.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(N) % K
    rng.shuffle(labels)
    if kind == "gaussians":
        if dim < 2:
            raise ConfigError("gaussian blobs need dim >= 2")
        radius = separation / (2.0 * np.sin(np.pi / K)) if K > 2 else separation / 2.0
        angles = 2.0 * np.pi * np.arange(K) / K
        centres = np.zeros((K, dim))
        centres[:, 0] = radius * np.cos(angles)
        centres[:, 1] = radius * np.sin(angles)
        X = centres[labels] + rng.standard_normal((N, dim))
    elif kind == "two_moons":
        if K != 2:
            raise ConfigError("two_moons is a two-class dataset")
        t = rng.uniform(0.0, np.pi, N)
        X = np.where(
            labels[:, None] == 0,
            np.stack([np.cos(t), np.sin(t)], 1),
            np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], 1),
        )
        X = X + noise * rng.standard_normal((N, 2))
    else:
        raise ConfigError(f"unknown toy dataset {kind!r}")
    return X, labels
