"""Weighted categorical cross-entropy and the attached L2 penalty."""

from __future__ import annotations

from typing import Tuple

import numpy as np

LOG_FLOOR = 1e-12  # clamp for log(p) so a confident wrong answer stays finite


def class_weights_from_counts(counts) -> np.ndarray:
    """Balanced class weights w_c = total / (K * count_c).

    Rare classes get proportionally larger loss multipliers; balanced
    counts give all-ones.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if counts.ndim != 1 or counts.size < 2:
        raise ValueError(f"need a flat list of >= 2 class counts, got shape {counts.shape}")
    if np.any(counts < 1):
        raise ValueError(f"every class count must be >= 1, got {counts.tolist()}")
    total = counts.sum()
    return (total / (counts.size * counts)).astype(np.float64)


def onehot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ValueError(f"labels must be a flat vector, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels out of range [0, {num_classes})")
    out = np.zeros((labels.size, num_classes), dtype=np.float64)
    out[np.arange(labels.size), labels] = 1.0
    return out


def _check_onehot(labels: np.ndarray) -> np.ndarray:
    """Validate one-hot rows and return the integer class per row."""
    if labels.ndim != 2:
        raise ValueError(f"one-hot labels must be 2-D, got shape {labels.shape}")
    is_unit = np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=1) == 1)
    if not is_unit:
        raise ValueError("labels are not one-hot (each row needs exactly one 1)")
    return labels.argmax(axis=1)


def weighted_cce(probs: np.ndarray, onehot_labels: np.ndarray,
                 weights) -> Tuple[float, np.ndarray]:
    """Class-weighted cross-entropy over softmax outputs.

    Returns ``(loss, grad_logits)`` where the gradient is taken w.r.t. the
    pre-softmax logits using the fused form w_y * (p - onehot) / N, so the
    caller never differentiates through softmax separately.
    """
    probs = np.asarray(probs)
    onehot_labels = np.asarray(onehot_labels)
    if probs.shape != onehot_labels.shape:
        raise ValueError(f"probs {probs.shape} and labels {onehot_labels.shape} disagree")
    y = _check_onehot(onehot_labels)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (probs.shape[1],):
        raise ValueError(f"need one weight per class, got shape {weights.shape}")
    n = probs.shape[0]
    p_true = probs[np.arange(n), y].astype(np.float64)
    w_true = weights[y]
    loss = float(-(w_true * np.log(np.maximum(p_true, LOG_FLOOR))).sum() / n)
    grad = (probs.astype(np.float64) - onehot_labels) * w_true[:, None] / n
    return loss, grad.astype(probs.dtype)


def total_loss(model, probs: np.ndarray, labels: np.ndarray, weights) -> float:
    """Cross-entropy plus the model's layer-attached L2 penalties."""
    cce, _ = weighted_cce(probs, labels, weights)
    return cce + model.l2_penalty()
