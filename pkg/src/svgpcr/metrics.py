"""Evaluation metrics: accuracy, mean true-class probability, AUC, confusion recovery."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import DataError


def _check(pred_probs, truth):
    P = np.asarray(pred_probs, dtype=np.float64)
    y = np.asarray(truth, dtype=np.int64)
    if P.ndim != 2 or len(P) != len(y):
        raise DataError(f"predictions {P.shape} do not match {len(y)} labels")
    K = P.shape[1]
    if len(y) and (y.min() < 0 or y.max() >= K):
        raise DataError(f"truth labels outside 0..{K - 1}")
    return P, y, K


def _per_class(values, y, K):
    out = np.full(K, np.nan)
    for k in range(K):
        sel = y == k
        if sel.any():
            out[k] = values[sel].mean()
    return out


def accuracy(pred_probs, truth) -> tuple[float, np.ndarray]:
    """Global and per-class accuracy of the argmax (ties go to the lowest index).

    Classes absent from ``truth`` get NaN in the per-class vector.
    """
    P, y, K = _check(pred_probs, truth)
    hit = (np.argmax(P, axis=1) == y).astype(np.float64)
    return float(hit.mean()), _per_class(hit, y, K)


def mean_likelihood(pred_probs, truth) -> tuple[float, np.ndarray]:
    """Mean probability assigned to the true class, globally and per class."""
    P, y, K = _check(pred_probs, truth)
    p_true = P[np.arange(len(y)), y]
    return float(p_true.mean()), _per_class(p_true, y, K)


def mean_log_likelihood(pred_probs, truth) -> float:
    P, y, _ = _check(pred_probs, truth)
    return float(np.mean(np.log(np.clip(P[np.arange(len(y)), y], 1e-300, None))))


def auc(scores, truth) -> float:
    """Mann-Whitney estimate of the ROC AUC; tied scores earn half credit."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(truth).ravel()
    if len(s) != len(y):
        raise DataError("scores and truth differ in length")
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC is undefined when only one class is present")
    ranks = rankdata(s)  # average ranks implement the half-credit rule
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion_recovery_error(estimated, true) -> tuple[np.ndarray, np.ndarray]:
    """Per-annotator (max, mean) absolute entrywise error between confusion matrices."""
    E = np.asarray(estimated, dtype=np.float64)
    T = np.asarray(true, dtype=np.float64)
    if E.shape != T.shape or E.ndim != 3:
        raise DataError(f"confusion stacks differ in shape: {E.shape} vs {T.shape}")
    err = np.abs(E - T)
    return err.max(axis=(1, 2)), err.mean(axis=(1, 2))


def label_reconstruction(q, truth) -> dict:
    """Accuracy and mean likelihood of q(Z) against the true training labels."""
    q = np.asarray(getattr(q, "q", q))
    if hasattr(q, "numpy"):
        q = q.numpy()
    acc, acc_k = accuracy(q, truth)
    lik, lik_k = mean_likelihood(q, truth)
    return {"accuracy": acc, "likelihood": lik, "per_class_accuracy": acc_k, "per_class_likelihood": lik_k}


def metrics_table(pred_probs, truth) -> list[dict]:
    """Rows of per-class and global metrics in the layout of the result tables."""
    P, y, K = _check(pred_probs, truth)
    acc, acc_k = accuracy(P, y)
    lik, lik_k = mean_likelihood(P, y)
    rows = [
        {"class": str(k), "count": int((y == k).sum()), "accuracy": acc_k[k], "likelihood": lik_k[k]}
        for k in range(K)
    ]
    glob = {"class": "global", "count": len(y), "accuracy": acc, "likelihood": lik,
            "mean_log_likelihood": mean_log_likelihood(P, y)}
    if K == 2 and 0 < (y == 1).sum() < len(y):
        glob["auc"] = auc(P[:, 1], y)
    rows.append(glob)
    return rows
