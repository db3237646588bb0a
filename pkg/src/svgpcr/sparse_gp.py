"""Inducing-point variational posterior q(U) shared by K latent GPs.

q(u_k) = N(m_k, S_k) with S_k = L_k L_k^T. Each L_k is stored as an
unconstrained lower-triangular matrix whose diagonal holds log-values, so
gradient steps on the stored tensor can never break positive definiteness.
The parameterization is not whitened: m_k and S_k live in function space.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidInputError
from .kernel import (
    DEFAULT_JITTER,
    DTYPE,
    SEKernelParams,
    as_tensor,
    cholesky_with_jitter,
    kernel_diag,
    kernel_matrix,
)

MIN_VARIANCE = 1e-12


def _pack_scale(L: torch.Tensor) -> torch.Tensor:
    diag = torch.diagonal(L, dim1=-2, dim2=-1)
    if not bool((diag > 0).all()):
        raise InvalidInputError("scale factors need a strictly positive diagonal")
    return torch.tril(L, -1) + torch.diag_embed(torch.log(diag))


def _unpack_scale(raw: torch.Tensor) -> torch.Tensor:
    return torch.tril(raw, -1) + torch.diag_embed(torch.exp(torch.diagonal(raw, dim1=-2, dim2=-1)))


@dataclass
class VariationalGP:
    inducing_inputs: torch.Tensor  # M x D
    means: torch.Tensor  # M x K, column k is m_k
    raw_scale: torch.Tensor  # K x M x M, log-diagonal lower triangles
    kernel: SEKernelParams
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        M, D = self.inducing_inputs.shape
        if M < 1:
            raise InvalidInputError("need at least one inducing input")
        if self.means.shape[0] != M or self.means.shape[1] < 2:
            raise InvalidInputError(f"means must be M x K with K >= 2, got {tuple(self.means.shape)}")
        if tuple(self.raw_scale.shape) != (self.means.shape[1], M, M):
            raise InvalidInputError(f"raw_scale must be K x M x M, got {tuple(self.raw_scale.shape)}")

    @classmethod
    def create(cls, inducing_inputs, means, scale_factors, kernel: SEKernelParams,
               jitter: float = DEFAULT_JITTER) -> "VariationalGP":
        """Build from natural parameters; ``scale_factors`` are the K Cholesky factors L_k."""
        return cls(
            as_tensor(inducing_inputs).clone(),
            as_tensor(means).clone(),
            _pack_scale(as_tensor(scale_factors)),
            kernel,
            jitter,
        )

    @classmethod
    def initialize(cls, X, num_classes: int, num_inducing: int, seed: int = 0,
                   kernel: SEKernelParams | None = None, init: str = "random",
                   jitter: float = DEFAULT_JITTER) -> "VariationalGP":
        """m_k = 0, S_k = I and inducing inputs taken from the training inputs.

        ``init="random"`` subsamples M rows without replacement; ``"kmeans"``
        uses k-means centroids instead.
        """
        X = np.asarray(X, dtype=np.float64)
        M = int(num_inducing)
        if not 1 <= M <= len(X):
            raise InvalidInputError(f"num_inducing must lie in [1, {len(X)}], got {M}")
        rng = np.random.default_rng(seed)
        if init == "random":
            Z = X[np.sort(rng.choice(len(X), M, replace=False))]
        elif init == "kmeans":
            from scipy.cluster.vq import kmeans2

            Z, _ = kmeans2(X, M, minit="++", seed=rng)
        else:
            raise InvalidInputError(f"unknown inducing init {init!r}")
        kernel = kernel or SEKernelParams.default(X.shape[1])
        eye = torch.eye(M, dtype=DTYPE).expand(num_classes, M, M)
        return cls.create(Z, np.zeros((M, num_classes)), eye, kernel, jitter)

    @property
    def num_inducing(self) -> int:
        return self.inducing_inputs.shape[0]

    @property
    def num_classes(self) -> int:
        return self.means.shape[1]

    @property
    def scale_factors(self) -> torch.Tensor:
        return _unpack_scale(self.raw_scale)

    @property
    def covariances(self) -> torch.Tensor:
        L = self.scale_factors
        return L @ L.transpose(-1, -2)

    def parameters(self) -> dict[str, torch.Tensor]:
        return {
            "means": self.means,
            "raw_scale": self.raw_scale,
            "inducing_inputs": self.inducing_inputs,
            "log_variance": self.kernel.log_variance,
            "log_lengthscale": self.kernel.log_lengthscale,
        }

    def detached(self) -> "VariationalGP":
        """Independent snapshot with no autograd history."""
        out = copy.copy(self)
        out.inducing_inputs = self.inducing_inputs.detach().clone()
        out.means = self.means.detach().clone()
        out.raw_scale = self.raw_scale.detach().clone()
        out.kernel = SEKernelParams(
            self.kernel.log_variance.detach().clone(), self.kernel.log_lengthscale.detach().clone()
        )
        return out

    def prior_factor(self):
        return cholesky_with_jitter(kernel_matrix(self.kernel, self.inducing_inputs), self.jitter)


@dataclass
class MarginalGaussians:
    means: torch.Tensor  # n x K
    variances: torch.Tensor  # n x K


def marginal_q_f(gp: VariationalGP, X_batch) -> MarginalGaussians:
    """Marginals of q(f_k) at ``X_batch`` for every class.

    mean = B m_k, var = k(x, x) + [B (S_k - K_zz) B^T]_nn with
    B = K_xz K_zz^{-1}; only the diagonal of the covariance is formed.
    """
    X = as_tensor(X_batch)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InvalidInputError("X_batch must be a non-empty 2-D array")
    Lzz = gp.prior_factor().L
    Kzx = kernel_matrix(gp.kernel, gp.inducing_inputs, X)
    A = torch.linalg.solve_triangular(Lzz, Kzx, upper=False)  # L^-1 K_zx
    Bt = torch.linalg.solve_triangular(Lzz.T, A, upper=True)  # K_zz^-1 K_zx

    means = Bt.T @ gp.means
    LtBt = gp.scale_factors.transpose(-1, -2) @ Bt  # K x M x n
    var = (
        kernel_diag(gp.kernel, X)[:, None]
        - (A * A).sum(0)[:, None]
        + (LtBt * LtBt).sum(1).T
    )
    return MarginalGaussians(means, var.clamp_min(MIN_VARIANCE))


def predict_latent(gp: VariationalGP, X_star) -> MarginalGaussians:
    """Predictive latent marginals at new inputs (same algebra as ``marginal_q_f``)."""
    return marginal_q_f(gp, X_star)


def gaussian_kl_per_class(gp: VariationalGP) -> torch.Tensor:
    """KL(q(u_k) || p(u_k)) for each class, shape (K,)."""
    L = gp.prior_factor().L
    M = gp.num_inducing
    Lk = gp.scale_factors
    LinvLk = torch.linalg.solve_triangular(L.expand_as(Lk), Lk, upper=False)
    Linvm = torch.linalg.solve_triangular(L, gp.means, upper=False)
    logdet_prior = 2.0 * torch.log(torch.diagonal(L)).sum()
    logdet_q = 2.0 * torch.diagonal(gp.raw_scale, dim1=-2, dim2=-1).sum(-1)
    trace = (LinvLk * LinvLk).sum((-2, -1))
    maha = (Linvm * Linvm).sum(0)
    return 0.5 * (trace + maha - M + logdet_prior - logdet_q)


def gaussian_kl(gp: VariationalGP) -> torch.Tensor:
    return gaussian_kl_per_class(gp).sum()
