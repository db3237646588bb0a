"""Squared-exponential kernel and jittered Cholesky factorization.

All tensors are float64 torch tensors so that every quantity downstream can be
differentiated by autograd. Inputs given as numpy arrays are converted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidInputError, NumericalError

DTYPE = torch.float64
DEFAULT_JITTER = 1e-6
MAX_JITTER = 1e-2


def as_tensor(x) -> torch.Tensor:
    """Convert array-likes to float64 tensors without copying existing tensors."""
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


@dataclass
class SEKernelParams:
    """Shared (variance, lengthscale) of the isotropic squared-exponential kernel.

    Both are stored on the log scale (``log_variance``, ``log_lengthscale``),
    so any real value of the stored tensors maps to a valid kernel.
    """

    log_variance: torch.Tensor
    log_lengthscale: torch.Tensor

    @classmethod
    def create(cls, variance: float = 1.0, lengthscale: float = 1.0) -> "SEKernelParams":
        if not (variance > 0 and lengthscale > 0):
            raise InvalidInputError(
                f"variance and lengthscale must be positive, got {variance}, {lengthscale}"
            )
        return cls(
            torch.tensor(math.log(variance), dtype=DTYPE),
            torch.tensor(math.log(lengthscale), dtype=DTYPE),
        )

    @classmethod
    def default(cls, input_dim: int) -> "SEKernelParams":
        return cls.create(1.0, math.sqrt(input_dim))

    @property
    def variance(self) -> torch.Tensor:
        return torch.exp(self.log_variance)

    @property
    def lengthscale(self) -> torch.Tensor:
        return torch.exp(self.log_lengthscale)


def median_lengthscale(X, max_points: int = 1000, seed: int = 0) -> float:
    """Median pairwise distance of (a seeded subsample of) ``X``."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) > max_points:
        X = X[np.random.default_rng(seed).choice(len(X), max_points, replace=False)]
    diff = X[:, None, :] - X[None, :, :]
    d = np.sqrt((diff**2).sum(-1))[np.triu_indices(len(X), 1)]
    med = float(np.median(d)) if d.size else 1.0
    return med if med > 0 else 1.0


def _check_inputs(X: torch.Tensor, name: str) -> torch.Tensor:
    if X.ndim != 2 or X.shape[1] < 1:
        raise InvalidInputError(f"{name} must be a 2-D array with D >= 1, got shape {tuple(X.shape)}")
    if not torch.isfinite(X).all():
        bad = torch.nonzero(~torch.isfinite(X).all(dim=1)).flatten()[:5].tolist()
        raise InvalidInputError(f"{name} has non-finite rows {bad}")
    return X


def kernel_matrix(params: SEKernelParams, A, B=None) -> torch.Tensor:
    """Cross-covariance ``gamma * exp(-|a_i - b_j|^2 / (2 sigma^2))``.

    Passing ``B=None`` (or the same object as ``A``) returns the symmetric
    Gram matrix of ``A`` with an exact diagonal equal to the variance.
    """
    A = _check_inputs(as_tensor(A), "A")
    same = B is None or B is A
    B = A if same else _check_inputs(as_tensor(B), "B")
    if A.shape[1] != B.shape[1]:
        raise InvalidInputError(f"input dimensions differ: {A.shape[1]} vs {B.shape[1]}")

    ls = params.lengthscale
    a = A / ls
    b = B / ls
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    sq = sq.clamp_min(0.0)
    if same:
        sq = 0.5 * (sq + sq.T)
        sq = sq - torch.diag_embed(torch.diagonal(sq))
    return params.variance * torch.exp(-0.5 * sq)


def kernel_diag(params: SEKernelParams, X) -> torch.Tensor:
    X = as_tensor(X)
    return params.variance * torch.ones(X.shape[0], dtype=DTYPE)


@dataclass(frozen=True)
class CholeskyFactor:
    L: torch.Tensor
    jitter_used: float


def _jitter_schedule(base_jitter: float, max_jitter: float):
    j = base_jitter
    if j <= 0:
        yield 0.0
        j = 1e-10
    while j <= max_jitter * (1 + 1e-12):
        yield j
        j *= 10.0


def cholesky_with_jitter(
    K, base_jitter: float = DEFAULT_JITTER, max_jitter: float = MAX_JITTER
) -> CholeskyFactor:
    """Lower Cholesky factor of ``K + jitter * I``.

    The jitter starts at ``base_jitter`` and grows by a factor of ten until the
    factorization succeeds; past ``max_jitter`` a NumericalError is raised.
    """
    K = as_tensor(K)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise InvalidInputError(f"expected a square matrix, got shape {tuple(K.shape)}")
    if not torch.isfinite(K).all():
        raise InvalidInputError("matrix has non-finite entries")
    asym = (K - K.T).abs().max().item() if K.numel() else 0.0
    if asym > 1e-8 * max(1.0, K.abs().max().item()):
        raise InvalidInputError(f"matrix is not symmetric (max asymmetry {asym:.3g})")

    eye = torch.eye(K.shape[0], dtype=K.dtype)
    for jitter in _jitter_schedule(base_jitter, max_jitter):
        L, info = torch.linalg.cholesky_ex(K + jitter * eye if jitter else K)
        if int(info) == 0 and bool((torch.diagonal(L) > 0).all()):
            return CholeskyFactor(L, jitter)

    with torch.no_grad():
        eig = torch.linalg.eigvalsh(K)
    lo, hi = eig.min().item(), eig.max().item()
    raise NumericalError(
        f"Cholesky failed at jitter {max_jitter:g}: eigenvalues in [{lo:.3g}, {hi:.3g}], "
        f"condition estimate {abs(hi) / max(abs(lo), 1e-300):.3g}"
    )
