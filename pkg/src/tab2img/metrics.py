"""Classification metrics: accuracy and rank-based ROC AUC."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def accuracy(probs: np.ndarray, y: np.ndarray) -> float:
    """Argmax match rate; the first index wins ties."""
    probs = np.asarray(probs)
    y = np.asarray(y)
    if probs.shape[0] != y.shape[0]:
        raise ShapeError(f"{probs.shape[0]} predictions for {y.shape[0]} labels")
    return float((probs.argmax(axis=1) == y).mean())


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _binary_auc(scores: np.ndarray, positive: np.ndarray) -> float | None:
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _midranks(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc(probs: np.ndarray, y: np.ndarray) -> float | None:
    """ROC AUC with midrank tie handling.

    Binary problems score the positive-class probability; multiclass uses
    a macro one-vs-rest average over the classes present in ``y``. Returns
    None when no class has both positives and negatives.
    """
    probs = np.asarray(probs)
    y = np.asarray(y)
    if probs.shape[0] != y.shape[0]:
        raise ShapeError(f"{probs.shape[0]} predictions for {y.shape[0]} labels")
    n = probs.shape[1]
    if n == 2:
        return _binary_auc(probs[:, 1], y == 1)
    values = [v for c in range(n)
              if (v := _binary_auc(probs[:, c], y == c)) is not None]
    if not values:
        return None
    return float(np.mean(values))
