"""Crowdsourcing layer: annotations, Dirichlet confusion posteriors and q(Z).

Confusion matrices are column-stochastic: entry (i, j) of R^a is the
probability that annotator ``a`` emits label i for an instance of true class j.
Each column j of R^a has a Dirichlet posterior with parameters
``alpha_tilde[a, :, j]``, stored as their logarithms.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DataError, InvalidInputError
from .kernel import DTYPE, as_tensor

DEFAULT_DIAG_BOOST = 0.1


@dataclass
class AnnotationSet:
    """Aggregated (instance, annotator, label) records with multiplicities.

    Records are sorted by instance so the rows belonging to a minibatch can be
    gathered in O(#records in batch) through ``indptr``.
    """

    instance: np.ndarray
    annotator: np.ndarray
    label: np.ndarray
    count: np.ndarray
    num_classes: int
    num_instances: int
    annotator_ids: np.ndarray
    indptr: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.num_classes < 2:
            raise DataError(f"need at least two classes, got {self.num_classes}")
        if len(self.instance) and self.instance.max() >= self.num_instances:
            raise DataError(
                f"annotation references instance {int(self.instance.max())} "
                f"but only {self.num_instances} instances exist"
            )
        order = np.lexsort((self.label, self.annotator, self.instance))
        for name in ("instance", "annotator", "label", "count"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name)[order], dtype=np.int64))
        self.indptr = np.zeros(self.num_instances + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.instance, minlength=self.num_instances), out=self.indptr[1:])

    @classmethod
    def from_triples(cls, instances, annotators, labels, num_classes: int | None = None,
                     num_instances: int | None = None, counts=None,
                     annotator_ids=None) -> "AnnotationSet":
        """Aggregate raw triples; duplicates accumulate into ``count``.

        ``annotators`` are external ids unless ``annotator_ids`` is given, in
        which case they must already be indices into it.
        """
        inst = np.asarray(instances, dtype=np.int64).ravel()
        ann = np.asarray(annotators, dtype=np.int64).ravel()
        lab = np.asarray(labels, dtype=np.int64).ravel()
        cnt = np.ones_like(inst) if counts is None else np.asarray(counts, dtype=np.int64).ravel()
        if not (len(inst) == len(ann) == len(lab) == len(cnt)):
            raise DataError("instance, annotator, label and count columns differ in length")
        if len(lab) and lab.min() < 0:
            raise DataError(f"labels must be non-negative, found {int(lab.min())}")
        if len(inst) and inst.min() < 0:
            raise DataError(f"instance ids must be non-negative, found {int(inst.min())}")
        if len(cnt) and cnt.min() < 1:
            raise DataError("record counts must be >= 1")

        if annotator_ids is None:
            annotator_ids, ann = np.unique(ann, return_inverse=True)
        else:
            annotator_ids = np.asarray(annotator_ids, dtype=np.int64)
            if len(ann) and (ann.min() < 0 or ann.max() >= len(annotator_ids)):
                raise DataError("annotator index out of range")
        K = int(lab.max()) + 1 if num_classes is None else int(num_classes)
        if len(lab) and lab.max() >= K:
            raise DataError(f"label {int(lab.max())} out of range for {K} classes")
        N = (int(inst.max()) + 1 if len(inst) else 0) if num_instances is None else int(num_instances)

        keys = np.stack([inst, ann, lab], axis=1)
        if len(keys):
            uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
            agg = np.zeros(len(uniq), dtype=np.int64)
            np.add.at(agg, inverse.ravel(), cnt)
        else:
            uniq, agg = keys.reshape(0, 3), cnt
        return cls(uniq[:, 0], uniq[:, 1], uniq[:, 2], agg, K, N, np.asarray(annotator_ids))

    @property
    def num_annotators(self) -> int:
        return len(self.annotator_ids)

    def __len__(self) -> int:
        return len(self.instance)

    def total_annotations(self) -> int:
        return int(self.count.sum())

    def annotators_of(self, n: int) -> set[int]:
        return set(self.annotator[self.indptr[n]:self.indptr[n + 1]].tolist())

    def records_for(self, batch) -> tuple[np.ndarray, np.ndarray]:
        """Record indices for the instances in ``batch`` and each record's position in the batch."""
        batch = np.asarray(batch, dtype=np.int64)
        if len(batch) and (batch.min() < 0 or batch.max() >= self.num_instances):
            raise DataError(f"batch references unknown instances (have {self.num_instances})")
        starts = self.indptr[batch]
        lengths = self.indptr[batch + 1] - starts
        total = int(lengths.sum())
        pos = np.repeat(np.arange(len(batch)), lengths)
        offsets = np.repeat(starts - np.concatenate([[0], np.cumsum(lengths)[:-1]]), lengths)
        return offsets + np.arange(total), pos

    def subset_annotators(self, keep) -> "AnnotationSet":
        keep = np.asarray(keep, dtype=np.int64)
        mask = np.isin(self.annotator, keep)
        remap = np.full(self.num_annotators, -1, dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        return AnnotationSet.from_triples(
            self.instance[mask], remap[self.annotator[mask]], self.label[mask],
            self.num_classes, self.num_instances, self.count[mask], self.annotator_ids[keep],
        )


@dataclass
class CrowdPosterior:
    raw_alpha: torch.Tensor  # A x K x K, log of alpha_tilde
    alpha_prior: torch.Tensor  # K x K, shared by all annotators

    @classmethod
    def create(cls, alpha_tilde, alpha_prior) -> "CrowdPosterior":
        at = as_tensor(alpha_tilde)
        ap = as_tensor(alpha_prior)
        if at.ndim != 3 or at.shape[1] != at.shape[2] or tuple(ap.shape) != tuple(at.shape[1:]):
            raise InvalidInputError(f"bad shapes {tuple(at.shape)} / {tuple(ap.shape)}")
        if not (bool((at > 0).all()) and bool((ap > 0).all())):
            raise InvalidInputError("Dirichlet parameters must be positive")
        return cls(torch.log(at).clone(), ap.clone())

    @classmethod
    def initialize(cls, num_annotators: int, num_classes: int, alpha_prior=None,
                   diag_boost: float = DEFAULT_DIAG_BOOST) -> "CrowdPosterior":
        """alpha_tilde = prior + ``diag_boost`` on the diagonal (breaks label switching)."""
        K = num_classes
        prior = torch.ones(K, K, dtype=DTYPE) if alpha_prior is None else as_tensor(alpha_prior)
        init = prior + diag_boost * torch.eye(K, dtype=DTYPE)
        return cls.create(init.expand(num_annotators, K, K), prior)

    @property
    def alpha_tilde(self) -> torch.Tensor:
        return torch.exp(self.raw_alpha)

    @property
    def num_annotators(self) -> int:
        return self.raw_alpha.shape[0]

    @property
    def num_classes(self) -> int:
        return self.raw_alpha.shape[1]

    def posterior_mean(self) -> torch.Tensor:
        at = self.alpha_tilde
        return at / at.sum(-2, keepdim=True)

    def posterior_variance(self) -> torch.Tensor:
        at = self.alpha_tilde
        a0 = at.sum(-2, keepdim=True)
        return at * (a0 - at) / (a0**2 * (a0 + 1.0))

    def detached(self) -> "CrowdPosterior":
        return CrowdPosterior(self.raw_alpha.detach().clone(), self.alpha_prior.clone())


@dataclass
class LabelPosterior:
    """Row-stochastic responsibilities q_nk over the true class of each instance."""

    q: torch.Tensor  # N x K

    @classmethod
    def uniform(cls, num_instances: int, num_classes: int) -> "LabelPosterior":
        return cls(torch.full((num_instances, num_classes), 1.0 / num_classes, dtype=DTYPE))

    @classmethod
    def one_hot(cls, labels, num_classes: int) -> "LabelPosterior":
        labels = np.asarray(labels, dtype=np.int64)
        q = torch.zeros(len(labels), num_classes, dtype=DTYPE)
        q[torch.arange(len(labels)), torch.as_tensor(labels)] = 1.0
        return cls(q)

    def rows(self, batch) -> torch.Tensor:
        return self.q[torch.as_tensor(np.asarray(batch, dtype=np.int64))]

    def set_rows(self, batch, rows: torch.Tensor) -> None:
        self.q[torch.as_tensor(np.asarray(batch, dtype=np.int64))] = rows.detach()


def expected_log_confusion(cp: CrowdPosterior, a: int | None = None) -> torch.Tensor:
    """E[log r_ij] = digamma(alpha_ij) - digamma(sum_c alpha_cj).

    Returns the K x K matrix of annotator ``a``, or the A x K x K stack when
    ``a`` is None.
    """
    raw = cp.raw_alpha
    if a is not None:
        if not 0 <= a < cp.num_annotators:
            raise IndexError(f"unknown annotator {a} (have {cp.num_annotators})")
        raw = raw[a]
    at = torch.exp(raw)
    return torch.special.digamma(at) - torch.special.digamma(at.sum(-2, keepdim=True))


def annotation_scores(cp: CrowdPosterior, ann: AnnotationSet, batch) -> torch.Tensor:
    """Per-instance sum over its annotations of E[log r_{y k}], weighted by count (n_b x K)."""
    recs, pos = ann.records_for(batch)
    K = cp.num_classes
    out = torch.zeros(len(np.asarray(batch)), K, dtype=DTYPE)
    if len(recs) == 0:
        return out
    elog = expected_log_confusion(cp)
    a = torch.as_tensor(ann.annotator[recs])
    y = torch.as_tensor(ann.label[recs])
    contrib = elog[a, y, :] * torch.as_tensor(ann.count[recs], dtype=DTYPE)[:, None]
    return out.index_add(0, torch.as_tensor(pos), contrib)


def _batch_rows(q, batch) -> torch.Tensor:
    if isinstance(q, LabelPosterior):
        if len(np.asarray(batch)) and int(np.max(batch)) >= q.q.shape[0]:
            raise DataError("batch references instances without responsibilities")
        return q.rows(batch)
    return as_tensor(q)


def annotation_term(cp: CrowdPosterior, q, ann: AnnotationSet, batch) -> torch.Tensor:
    """sum_{n in batch} sum_{a, y} count * sum_k q_nk E[log r^a_{y k}] (always <= 0)."""
    rows = _batch_rows(q, batch)
    return (rows * annotation_scores(cp, ann, batch)).sum()


def dirichlet_kl_columns(alpha_tilde: torch.Tensor, alpha_prior: torch.Tensor) -> torch.Tensor:
    """KL(Dir(alpha_tilde[..., :, j]) || Dir(alpha_prior[:, j])) for every column j."""
    lg = torch.lgamma
    at0 = alpha_tilde.sum(-2)
    log_b_prior = lg(alpha_prior).sum(-2) - lg(alpha_prior.sum(-2))
    log_b_post = lg(alpha_tilde).sum(-2) - lg(at0)
    dig = torch.special.digamma(alpha_tilde) - torch.special.digamma(at0)[..., None, :]
    return log_b_prior - log_b_post + ((alpha_tilde - alpha_prior) * dig).sum(-2)


def dirichlet_kl(cp: CrowdPosterior) -> torch.Tensor:
    return dirichlet_kl_columns(cp.alpha_tilde, cp.alpha_prior).sum()


def update_responsibilities(cp: CrowdPosterior, ann: AnnotationSet, gp_expectations, batch) -> torch.Tensor:
    """Closed-form mean-field rows of q(Z) for ``batch``.

    log q_nk = E_q(f)[log p(e_k | f_n)] + sum over the instance's annotations of
    E[log r^a_{y k}], normalized with log-sum-exp. Returns detached n_b x K rows.
    """
    with torch.no_grad():
        ve = as_tensor(gp_expectations)
        if ve.shape[0] != len(np.asarray(batch)):
            raise InvalidInputError("gp_expectations rows must align with the batch")
        logits = ve + annotation_scores(cp, ann, batch)
        return torch.softmax(logits, dim=1)


def update_alpha(cp: CrowdPosterior, q: LabelPosterior, ann: AnnotationSet) -> CrowdPosterior:
    """Conjugate full-data update alpha_tilde_ij = alpha_ij + sum_n q_nj count(n, a, i)."""
    A, K = cp.num_annotators, cp.num_classes
    qn = q.q.detach().numpy()
    stats = np.zeros((A, K, K))
    np.add.at(stats, (ann.annotator, ann.label), qn[ann.instance] * ann.count[:, None])
    alpha = cp.alpha_prior.numpy()[None] + stats
    return CrowdPosterior.create(alpha, cp.alpha_prior)


def entropy_term(q, batch) -> torch.Tensor:
    """sum_{n in batch} sum_k q_nk log q_nk with 0 log 0 = 0 (a value in [-|batch| log K, 0])."""
    rows = _batch_rows(q, batch)
    return torch.special.xlogy(rows, rows).sum()
