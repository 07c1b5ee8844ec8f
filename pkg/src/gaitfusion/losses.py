"""Batch-all triplet loss and part-wise softmax cross-entropy."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


def part_distances(embeddings: Tensor) -> Tensor:
    """Euclidean distances per part: [B, P, D] -> [P, B, B]."""
    x = T.transpose(embeddings, (1, 0, 2))
    diff = T.reshape(x, (x.shape[0], x.shape[1], 1, x.shape[2])) - T.reshape(
        x, (x.shape[0], 1, x.shape[1], x.shape[2]))
    return T.sqrt(T.sum_(diff * diff, axes=3))


def triplet_mask(labels) -> np.ndarray:
    """mask[a, p, n] is true when label(a) == label(p) != label(n) and a != p."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    return pos[:, :, None] & ~same[:, None, :]


def triplet_loss(embeddings: Tensor, labels, margin: float = 0.2) -> Tensor:
    """Batch-all hinge ``max(0, d(a,p) - d(a,n) + margin)`` per part, averaged
    over the triplets with positive loss (0 when there are none), then over
    parts."""
    if embeddings.ndim != 3:
        raise ShapeError(f"expected embeddings [B, P, D], got {embeddings.shape}")
    labels = np.asarray(labels)
    if labels.shape != (embeddings.shape[0],):
        raise ShapeError(f"expected {embeddings.shape[0]} labels, got shape {labels.shape}")
    if margin <= 0:
        raise ValueError("margin must be positive")
    mask = triplet_mask(labels)
    if not mask.any():
        raise ValueError("batch has no valid triplet (needs 2 samples of one identity and 2 identities)")
    d = part_distances(embeddings)
    P, B = d.shape[0], d.shape[1]
    hinge = T.reshape(d, (P, B, B, 1)) - T.reshape(d, (P, B, 1, B)) + margin
    hinge = T.relu(hinge) * mask.astype(d.dtype)
    active = (hinge.data > 0).sum(axis=(1, 2, 3))
    per_part = T.sum_(hinge, axes=(1, 2, 3)) / np.maximum(active, 1).astype(d.dtype)
    return T.mean(per_part)


def softmax_ce(logits: Tensor, labels) -> Tensor:
    """Cross-entropy of [B, P, K] logits against per-sequence labels, averaged over B and P."""
    if logits.ndim != 3:
        raise ShapeError(f"expected logits [B, P, K], got {logits.shape}")
    labels = np.asarray(labels)
    B, P, K = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"expected {B} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    logp = T.log_softmax(logits, axis=-1)
    picked = logp[np.arange(B)[:, None], np.arange(P)[None, :], labels[:, None]]
    return -T.mean(picked)
