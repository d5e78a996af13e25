"""Softmax, inverse-frequency class weights and weighted cross-entropy."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def compute_class_weights(counts) -> np.ndarray:
    """Weights ``w_c = N_c / sum_j N_j`` with ``N_c = n / n_c``.

    Rare classes get large weights; the result sums to 1.  A zero count has
    no defined weight, so the caller has to merge or drop that class first.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size < 1:
        raise ValueError("counts must be a non-empty 1-D array")
    if np.any(counts < 1):
        raise ValueError(f"every class needs at least one sample, got counts {counts.tolist()}")
    big_n = counts.sum() / counts
    return big_n / big_n.sum()


def weighted_cross_entropy(
    logits: np.ndarray, labels: np.ndarray, weights: np.ndarray, reduction: str = "sum"
) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. ``logits`` (shape ``(B, C)``).

    ``reduction="sum"`` sums over the batch; ``"mean"`` divides that sum by B.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    b = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    w = weights[labels]
    loss = -(w * log_p[np.arange(b), labels]).sum()
    grad = np.exp(log_p)
    grad[np.arange(b), labels] -= 1.0
    grad *= w[:, None]
    if reduction == "mean":
        loss, grad = loss / b, grad / b
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return float(loss), grad


def weighted_ce_torch(
    logits: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor, reduction: str = "mean"
) -> torch.Tensor:
    """Differentiable counterpart of :func:`weighted_cross_entropy`.

    Note ``"mean"`` is the weighted sum divided by the batch size, not by the
    sum of the selected weights as in ``torch.nn.CrossEntropyLoss``.
    """
    loss = F.cross_entropy(logits, labels, weight=weights.to(logits.dtype), reduction="sum")
    if reduction == "mean":
        return loss / logits.shape[0]
    if reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return loss
