"""Robust-max multi-class likelihood evaluated by Gauss-Hermite quadrature.

Under independent Gaussian marginals f_j ~ N(mu_j, v_j), the probability that
class k attains the argmax is the one-dimensional integral

    P(k) = int N(f; mu_k, v_k) prod_{j != k} Phi((f - mu_j) / sqrt(v_j)) df.

With many competitors the integrand's mass sits in the tail of N(mu_k, v_k),
where a fixed H-point rule has few nodes. The rule is therefore adaptive: for
each (row, k) the nodes are centred at the mode c of the log-integrand and
scaled by its curvature s (a few Newton steps on a concave function), and the
Gaussian ratio N(f; mu_k, v_k) / N(f; c, s^2) is folded into the integrand.
The centre and scale are treated as constants, so gradients flow through the
integrand only. When v_k dominates, the other factors are near-steps on the
scale of N(mu_k, v_k) and no Gaussian rule resolves them, so the row's widest
class takes P = 1 - sum of the rest (exact for K = 2, where the remaining
integrand is smooth). Everything downstream is affine in P.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, InvalidInputError
from .kernel import DTYPE, as_tensor

DEFAULT_EPSILON = 1e-3
DEFAULT_QUADRATURE_POINTS = 20


@dataclass(frozen=True)
class QuadratureRule:
    """Physicists' Gauss-Hermite rule: int g(x) exp(-x^2) dx ~= sum_h w_h g(x_h)."""

    nodes: np.ndarray
    weights: np.ndarray

    def expect_standard_normal(self, g) -> float:
        """E[g(Z)] for Z ~ N(0, 1)."""
        return float(np.sum(self.weights * g(math.sqrt(2.0) * self.nodes)) / math.sqrt(math.pi))


def gauss_hermite(H: int) -> QuadratureRule:
    if not isinstance(H, (int, np.integer)) or not 2 <= H <= 128:
        raise ConfigError(f"quadrature order must be an integer in [2, 128], got {H!r}")
    nodes, weights = np.polynomial.hermite.hermgauss(int(H))
    return QuadratureRule(nodes, weights)


NEWTON_STEPS = 8
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def _mills(z: torch.Tensor) -> torch.Tensor:
    """phi(z) / Phi(z), the derivative of log Phi."""
    return torch.exp(-0.5 * z * z - _LOG_SQRT_2PI - torch.special.log_ndtr(z))


def _laplace_centre(mu, var, sd, off_diag):
    """Mode and curvature scale of log N(f; mu_k, v_k) + sum_j log Phi((f - mu_j) / sd_j), per (row, k)."""
    zero = torch.zeros((), dtype=DTYPE)

    def derivatives(c):
        z = (c[:, :, None] - mu[:, None, :]) / sd[:, None, :]
        r = _mills(z)
        grad = torch.where(off_diag, r / sd[:, None, :], zero).sum(-1) - (c - mu) / var
        hess = torch.where(off_diag, -r * (z + r) / var[:, None, :], zero).sum(-1) - 1.0 / var
        return grad, hess

    with torch.no_grad():
        c = mu.clone()
        for _ in range(NEWTON_STEPS):
            grad, hess = derivatives(c)
            c = c + (-grad / hess).clamp(-3.0 * sd, 3.0 * sd)
        _, hess = derivatives(c)
        return c, torch.sqrt(-1.0 / hess)


def prob_argmax_matrix(means, variances, rule: QuadratureRule) -> torch.Tensor:
    """P(f_k is the largest) for every row and class; returns an n x K tensor."""
    mu = as_tensor(means)
    var = as_tensor(variances)
    if mu.shape != var.shape or mu.ndim != 2:
        raise InvalidInputError(f"means/variances shapes differ: {tuple(mu.shape)} vs {tuple(var.shape)}")
    K = mu.shape[1]
    x = torch.as_tensor(rule.nodes, dtype=DTYPE)
    w = torch.as_tensor(rule.weights, dtype=DTYPE) / math.sqrt(math.pi)
    sd = torch.sqrt(var)
    off_diag = ~torch.eye(K, dtype=torch.bool)  # [k, j]
    c, s = _laplace_centre(mu, var, sd, off_diag)

    # f[n, k, h]: abscissae of the adapted rule for the k-th latent function
    f = c[:, :, None] + math.sqrt(2.0) * s[:, :, None] * x
    log_ratio = (
        -0.5 * (f - mu[:, :, None]) ** 2 / var[:, :, None] - 0.5 * torch.log(var)[:, :, None]
        + x * x + torch.log(s)[:, :, None]
    )
    # z[n, k, h, j] = (f_k - mu_j) / sd_j
    z = (f[..., None] - mu[:, None, None, :]) / sd[:, None, None, :]
    cdf = torch.where(off_diag[:, None, :], torch.special.ndtr(z), torch.ones((), dtype=DTYPE))
    direct = (cdf.prod(-1) * torch.exp(log_ratio) * w).sum(-1)
    # the widest class sees the others' CDFs as near-steps; take it as the complement instead
    widest = torch.nn.functional.one_hot(var.argmax(1), K).bool()
    rest = torch.where(widest, torch.zeros((), dtype=DTYPE), direct).sum(1, keepdim=True)
    return torch.where(widest, 1.0 - rest, direct)


def prob_argmax(means, variances, k: int, rule: QuadratureRule) -> float:
    """P(f_k >= f_j for all j != k) for one set of independent Gaussians."""
    mu = as_tensor(means).reshape(1, -1)
    var = as_tensor(variances).reshape(1, -1)
    if not 0 <= k < mu.shape[1]:
        raise InvalidInputError(f"class index {k} out of range")
    if not bool((var > 0).all()):
        raise InvalidInputError("variances must be positive")
    with torch.no_grad():
        return float(prob_argmax_matrix(mu, var, rule)[0, k].clamp(0.0, 1.0))


@dataclass
class RobustMax:
    """nu_k = 1 - eps on the argmax class and eps / (K - 1) elsewhere; eps is not trained."""

    num_classes: int
    epsilon: float = DEFAULT_EPSILON
    quadrature_points: int = DEFAULT_QUADRATURE_POINTS
    rule: QuadratureRule = field(init=False, repr=False)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("robust-max needs at least two classes")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        self.rule = gauss_hermite(self.quadrature_points)

    @property
    def log_hit(self) -> float:
        return math.log1p(-self.epsilon)

    @property
    def log_miss(self) -> float:
        return math.log(self.epsilon / (self.num_classes - 1))

    def variational_expectations(self, means, variances) -> torch.Tensor:
        return variational_expectation(means, variances, self.rule, self)

    def predict(self, means, variances) -> torch.Tensor:
        return predict_class_probs(means, variances, self.rule, self)


def variational_expectation(means, variances, rule: QuadratureRule, robustmax: RobustMax) -> torch.Tensor:
    """E_q(f_n)[log p(e_k | f_n)] as an n x K tensor."""
    p = prob_argmax_matrix(means, variances, rule).clamp(0.0, 1.0)
    return p * robustmax.log_hit + (1.0 - p) * robustmax.log_miss


def predict_class_probs(means, variances, rule: QuadratureRule, robustmax: RobustMax) -> torch.Tensor:
    """Predictive class probabilities; rows renormalized to sum to one exactly."""
    eps = robustmax.epsilon
    p = prob_argmax_matrix(means, variances, rule).clamp(0.0, 1.0)
    probs = p * (1.0 - eps) + (1.0 - p) * eps / (robustmax.num_classes - 1)
    return probs / probs.sum(1, keepdim=True)
