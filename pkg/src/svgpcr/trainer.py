"""Minibatch ELBO and stochastic maximization of the crowdsourced sparse GP.

Per step: draw a batch, refresh the batch's responsibilities q_n in closed
form, then take one Adam step on -ELBO with respect to the unconstrained
parameters {m_k, L_k, inducing inputs, log variance, log lengthscale,
log alpha_tilde}. The data terms are scaled by N / |batch| so that the
minibatch estimator is unbiased; the two KL terms are not scaled.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .crowd import (
    AnnotationSet,
    CrowdPosterior,
    LabelPosterior,
    annotation_term,
    dirichlet_kl,
    entropy_term,
    update_responsibilities,
)
from .data_io import epoch_batches
from .errors import ConfigError, DataError, NumericalError, TrainingError
from .kernel import DTYPE, SEKernelParams, as_tensor, median_lengthscale
from .likelihood import RobustMax
from .sparse_gp import VariationalGP, gaussian_kl, marginal_q_f

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    minibatch_size: int = 500
    learning_rate: float = 0.01
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    epochs: int = 100
    seed: int = 0
    quadrature_points: int = 20
    jitter: float = 1e-6
    num_inducing: int = 100
    eval_every: int = 0
    epsilon: float = 1e-3
    inducing_init: str = "random"  # or "kmeans"
    lengthscale_init: str = "sqrt_dim"  # or "median"
    diag_boost: float = 0.1
    prior_diagonal: float = 1.0  # alpha_ii of the Dirichlet prior; off-diagonal entries are 1

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)

    def validate(self, num_instances: int | None = None) -> "TrainConfig":
        def need(ok, msg):
            if not ok:
                raise ConfigError(msg)

        need(self.minibatch_size >= 1, "minibatch_size must be >= 1")
        need(self.learning_rate > 0, "learning_rate must be positive")
        need(len(self.adam_betas) == 2 and all(0 < b < 1 for b in self.adam_betas),
             "adam_betas must both lie in (0, 1)")
        need(self.adam_eps > 0, "adam_eps must be positive")
        need(self.epochs >= 0, "epochs must be >= 0")
        need(self.seed >= 0, "seed must be unsigned")
        need(2 <= self.quadrature_points <= 128, "quadrature_points must lie in [2, 128]")
        need(self.jitter >= 0, "jitter must be >= 0")
        need(self.num_inducing >= 1, "num_inducing must be >= 1")
        need(0 < self.epsilon < 1, "epsilon must lie in (0, 1)")
        need(self.inducing_init in ("random", "kmeans"), "inducing_init must be 'random' or 'kmeans'")
        need(self.lengthscale_init in ("sqrt_dim", "median"), "lengthscale_init must be 'sqrt_dim' or 'median'")
        need(self.diag_boost >= 0, "diag_boost must be >= 0")
        need(self.prior_diagonal > 0, "prior_diagonal must be positive")
        if num_instances is not None:
            need(self.minibatch_size <= num_instances,
                 f"minibatch_size {self.minibatch_size} exceeds the {num_instances} training instances")
            need(self.num_inducing <= num_instances,
                 f"num_inducing {self.num_inducing} exceeds the {num_instances} training instances")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SVGPCR:
    """Complete model state.

    With ``crowd=None`` the responsibilities are held fixed (e.g. one-hot gold
    labels) and the objective reduces to the plain SVGP classification bound.
    """

    gp: VariationalGP
    crowd: CrowdPosterior | None
    labels: LabelPosterior
    likelihood: RobustMax

    @property
    def num_classes(self) -> int:
        return self.gp.num_classes

    @property
    def input_dim(self) -> int:
        return self.gp.inducing_inputs.shape[1]

    def parameters(self) -> dict[str, torch.Tensor]:
        params = self.gp.parameters()
        if self.crowd is not None:
            params["raw_alpha"] = self.crowd.raw_alpha
        return params

    def detached(self) -> "SVGPCR":
        return SVGPCR(
            self.gp.detached(),
            None if self.crowd is None else self.crowd.detached(),
            LabelPosterior(self.labels.q.clone()),
            self.likelihood,
        )


def initialize_model(X, ann: AnnotationSet | None, config: TrainConfig,
                     num_classes: int | None = None, gold_labels=None) -> SVGPCR:
    """Fresh model: m_k = 0, S_k = I, alpha_tilde = prior + diagonal boost, uniform q."""
    X = np.asarray(X, dtype=np.float64)
    if ann is None and gold_labels is None:
        raise DataError("need annotations or gold labels")
    K = num_classes or (ann.num_classes if ann is not None else int(np.max(gold_labels)) + 1)
    if config.lengthscale_init == "median":
        kernel = SEKernelParams.create(1.0, median_lengthscale(X, seed=config.seed))
    else:
        kernel = SEKernelParams.default(X.shape[1])
    gp = VariationalGP.initialize(X, K, config.num_inducing, seed=config.seed, kernel=kernel,
                                  init=config.inducing_init, jitter=config.jitter)
    likelihood = RobustMax(K, config.epsilon, config.quadrature_points)
    if gold_labels is not None:
        return SVGPCR(gp, None, LabelPosterior.one_hot(gold_labels, K), likelihood)
    prior = torch.ones(K, K, dtype=DTYPE) + (config.prior_diagonal - 1.0) * torch.eye(K, dtype=DTYPE)
    crowd = CrowdPosterior.initialize(ann.num_annotators, K, prior, config.diag_boost)
    return SVGPCR(gp, crowd, LabelPosterior.uniform(len(X), K), likelihood)


TERMS = ("annotation_term", "likelihood_term", "entropy_term", "gaussian_kl", "dirichlet_kl")


@dataclass
class ElboBreakdown:
    """The five ELBO terms for one batch.

    The three data terms are unscaled batch sums; ``entropy_term`` is the
    entropy -sum q log q as it enters the bound. ``total`` equals
    scale * (annotation + likelihood + entropy) - gaussian_kl - dirichlet_kl.
    """

    annotation_term: torch.Tensor
    likelihood_term: torch.Tensor
    entropy_term: torch.Tensor
    gaussian_kl: torch.Tensor
    dirichlet_kl: torch.Tensor
    total: torch.Tensor
    scale: float

    def as_floats(self) -> dict[str, float]:
        out = {name: float(getattr(self, name).detach()) for name in TERMS}
        out["total"] = float(self.total.detach())
        out["scale"] = self.scale
        return out


def _zero() -> torch.Tensor:
    return torch.zeros((), dtype=DTYPE)


def elbo_minibatch(model: SVGPCR, X, ann: AnnotationSet | None, batch, refresh: bool = True) -> ElboBreakdown:
    """Minibatch estimate of the ELBO, differentiable w.r.t. ``model.parameters()``.

    With ``refresh`` the batch rows of q(Z) are first replaced by their
    closed-form optimum given the current GP and crowd parameters.
    """
    X = as_tensor(X)
    batch = np.asarray(batch, dtype=np.int64)
    if len(batch) == 0:
        raise DataError("empty minibatch")
    N = X.shape[0]
    if model.labels.q.shape[0] != N:
        raise DataError(f"model holds {model.labels.q.shape[0]} responsibilities but X has {N} rows")

    mg = marginal_q_f(model.gp, X[torch.as_tensor(batch)])
    ve = model.likelihood.variational_expectations(mg.means, mg.variances)
    if model.crowd is not None and refresh:
        model.labels.set_rows(batch, update_responsibilities(model.crowd, ann, ve.detach(), batch))
    rows = model.labels.rows(batch)

    terms = {
        "annotation_term": _zero() if model.crowd is None else annotation_term(model.crowd, rows, ann, batch),
        "likelihood_term": (rows * ve).sum(),
        "entropy_term": -entropy_term(rows, batch),
        "gaussian_kl": gaussian_kl(model.gp),
        "dirichlet_kl": _zero() if model.crowd is None else dirichlet_kl(model.crowd),
    }
    for name, value in terms.items():
        if not bool(torch.isfinite(value)):
            raise NumericalError(f"ELBO term {name} is not finite ({float(value)})")
    scale = N / len(batch)
    total = (
        scale * (terms["annotation_term"] + terms["likelihood_term"] + terms["entropy_term"])
        - terms["gaussian_kl"]
        - terms["dirichlet_kl"]
    )
    return ElboBreakdown(**terms, total=total, scale=scale)


def gradients(model: SVGPCR, X, ann: AnnotationSet | None, batch, refresh: bool = False) -> dict[str, torch.Tensor]:
    """d ELBO / d parameter for every trained (unconstrained) parameter, q(Z) held fixed."""
    params = model.parameters()
    flags = {name: p.requires_grad for name, p in params.items()}
    try:
        for p in params.values():
            p.requires_grad_(True)
        total = elbo_minibatch(model, X, ann, batch, refresh=refresh).total
        grads = torch.autograd.grad(total, list(params.values()))
    finally:
        for name, p in params.items():
            p.requires_grad_(flags[name])
    return dict(zip(params.keys(), grads))


@dataclass
class TrainingLog:
    """Per-step ELBO breakdowns plus wall-clock timings kept apart for reproducibility."""

    records: list[dict] = field(default_factory=list)
    timings: list[dict] = field(default_factory=list)

    COLUMNS = ("step", "epoch", "batch_size") + TERMS + ("total",)

    def append(self, step: int, epoch: int, batch_size: int, bd: ElboBreakdown, elapsed: float):
        row = {"step": step, "epoch": epoch, "batch_size": batch_size}
        row.update({k: v for k, v in bd.as_floats().items() if k != "scale"})
        self.records.append(row)
        self.timings.append({"step": step, "elapsed": elapsed})

    def totals(self) -> np.ndarray:
        return np.array([r["total"] for r in self.records])


class Trainer:
    """Owns the single mutable model copy, the Adam state and the sampling position."""

    def __init__(self, model: SVGPCR, X, ann: AnnotationSet | None, config: TrainConfig):
        self.X = as_tensor(X)
        self.config = config.validate(self.X.shape[0])
        if model.crowd is not None and ann is None:
            raise DataError("a crowd model needs annotations")
        if ann is not None and ann.num_instances != self.X.shape[0]:
            raise DataError(
                f"annotations cover {ann.num_instances} instances but features have {self.X.shape[0]} rows"
            )
        if model.input_dim != self.X.shape[1]:
            raise DataError(f"model expects D={model.input_dim}, features have D={self.X.shape[1]}")
        self.model = model
        self.ann = ann
        self.params = list(model.parameters().values())
        for p in self.params:
            p.requires_grad_(True)
        self.optimizer = torch.optim.Adam(
            self.params, lr=config.learning_rate, betas=config.adam_betas, eps=config.adam_eps
        )
        self.epoch = 0
        self.position = 0  # batches of the current epoch already consumed
        self.step = 0
        self.log = TrainingLog()
        self._batches = None
        self._t0 = time.perf_counter()

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.X.shape[0] / self.config.minibatch_size)

    def _next_batch(self) -> np.ndarray:
        if self._batches is None or self.position >= len(self._batches):
            if self._batches is not None:
                self.epoch += 1
                self.position = 0
            self._batches = epoch_batches(self.X.shape[0], self.config.minibatch_size, self.config.seed, self.epoch)
        batch = self._batches[self.position]
        self.position += 1
        return batch

    def train_step(self) -> ElboBreakdown:
        backup = [p.detach().clone() for p in self.params]
        q_backup = self.model.labels.q.clone()
        batch = self._next_batch()
        self.optimizer.zero_grad(set_to_none=True)
        try:
            bd = elbo_minibatch(self.model, self.X, self.ann, batch)
            (-bd.total).backward()
        except NumericalError as exc:
            self._abort(backup, q_backup, str(exc))
        if not all(bool(torch.isfinite(p.grad).all()) for p in self.params if p.grad is not None):
            self._abort(backup, q_backup, "non-finite gradient")
        self.optimizer.step()
        if not all(bool(torch.isfinite(p).all()) for p in self.params):
            self._abort(backup, q_backup, "non-finite parameters after update")
        self.step += 1
        self.log.append(self.step, self.epoch, len(batch), bd, time.perf_counter() - self._t0)
        return bd

    def _abort(self, backup, q_backup, reason: str):
        with torch.no_grad():
            for p, b in zip(self.params, backup):
                p.copy_(b)
        self.model.labels.q.copy_(q_backup)
        raise TrainingError(f"training aborted at step {self.step + 1}: {reason}",
                            last_good=self.model.detached(), step=self.step)

    def run(self, num_steps: int | None = None, callback=None) -> TrainingLog:
        """Advance ``num_steps`` steps, or until ``config.epochs`` epochs are complete."""
        total = self.config.epochs * self.steps_per_epoch
        target = total if num_steps is None else min(total, self.step + num_steps)
        while self.step < target:
            bd = self.train_step()
            if self.config.eval_every and callback is not None and self.step % self.config.eval_every == 0:
                callback(self, bd)
        return self.log

    def state_dict(self) -> dict:
        """Everything needed to resume bit-for-bit (consumed by data_io.save_checkpoint)."""
        opt = self.optimizer.state_dict()
        names = list(self.model.parameters().keys())
        adam = {}
        for i, name in enumerate(names):
            st = opt["state"].get(i)
            if st:
                adam[f"adam/{name}/exp_avg"] = st["exp_avg"].detach().clone()
                adam[f"adam/{name}/exp_avg_sq"] = st["exp_avg_sq"].detach().clone()
                adam[f"adam/{name}/step"] = torch.as_tensor(st["step"], dtype=DTYPE).reshape(()).clone()
        return {
            "counters": {"step": self.step, "epoch": self.epoch, "position": self.position},
            "adam": adam,
            "log": self.log,
        }

    def load_state_dict(self, state: dict) -> None:
        c = state["counters"]
        self.step, self.epoch, self.position = int(c["step"]), int(c["epoch"]), int(c["position"])
        self._batches = epoch_batches(self.X.shape[0], self.config.minibatch_size, self.config.seed, self.epoch)
        opt = self.optimizer.state_dict()
        names = list(self.model.parameters().keys())
        adam = state.get("adam", {})
        for i, name in enumerate(names):
            if f"adam/{name}/exp_avg" in adam:
                opt["state"][i] = {
                    "step": torch.as_tensor(float(adam[f"adam/{name}/step"]), dtype=torch.float32),
                    "exp_avg": adam[f"adam/{name}/exp_avg"].clone(),
                    "exp_avg_sq": adam[f"adam/{name}/exp_avg_sq"].clone(),
                }
        self.optimizer.load_state_dict(opt)
        if "log" in state and state["log"] is not None:
            self.log = state["log"]


def train(X, ann: AnnotationSet | None, config: TrainConfig, num_classes: int | None = None,
          gold_labels=None, model: SVGPCR | None = None, callback=None) -> tuple[SVGPCR, TrainingLog]:
    """Initialize (unless ``model`` is given) and run ``config.epochs`` epochs of Adam ascent."""
    X = np.asarray(X, dtype=np.float64)
    config.validate(len(X))
    if model is None:
        model = initialize_model(X, ann, config, num_classes, gold_labels)
    trainer = Trainer(model, X, ann if model.crowd is not None else None, config)
    trainer.run(callback=callback)
    return trainer.model, trainer.log


def predict_proba(model: SVGPCR, X, chunk_size: int = 2048) -> np.ndarray:
    """Predictive class probabilities for new inputs (rows sum to one)."""
    X = as_tensor(X)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise DataError(f"features have D={X.shape[1] if X.ndim == 2 else '?'}, model expects D={model.input_dim}")
    out = []
    with torch.no_grad():
        for i in range(0, X.shape[0], chunk_size):
            mg = marginal_q_f(model.gp, X[i:i + chunk_size])
            out.append(model.likelihood.predict(mg.means, mg.variances))
    return torch.cat(out).numpy()


def refresh_all_responsibilities(model: SVGPCR, X, ann: AnnotationSet, chunk_size: int = 2048) -> LabelPosterior:
    """Closed-form q(Z) for every training instance under the current parameters."""
    if model.crowd is None:
        return model.labels
    X = as_tensor(X)
    with torch.no_grad():
        for i in range(0, X.shape[0], chunk_size):
            batch = np.arange(i, min(i + chunk_size, X.shape[0]))
            mg = marginal_q_f(model.gp, X[torch.as_tensor(batch)])
            ve = model.likelihood.variational_expectations(mg.means, mg.variances)
            model.labels.set_rows(batch, update_responsibilities(model.crowd, ann, ve, batch))
    return model.labels
