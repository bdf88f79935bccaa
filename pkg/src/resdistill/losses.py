"""Training objectives for teacher and student networks.

The teacher minimizes a classification loss only. A student minimizes
``classification + alpha * feature_match`` where the feature term pulls its
embedding of the low-resolution image towards the (frozen) teacher embedding
of the same image at high resolution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

COS_CLAMP = 1e-7


class ZeroNormError(ValueError):
    """An embedding (or class weight) row has no direction to normalize."""


@dataclass
class LossBreakdown:
    classification: float
    feature_match: float
    alpha: float
    total: float
    tensor: Optional[Tensor] = field(default=None, repr=False, compare=False)


def _check_labels(labels, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise T.ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return labels


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class, max-shifted for stability."""
    n, k = logits.shape
    labels = _check_labels(labels, n, k)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    se = ez.sum(axis=1)
    rows = np.arange(n)
    loss = np.asarray((np.log(se) - z[rows, labels]).sum() / n)

    def backward(g):
        p = ez / se[:, None]
        p[rows, labels] -= 1.0
        return (p * (float(g) / n),)

    return T.emit("softmax_cross_entropy", loss, (logits,), backward)


def angular_margin_logits(cosines: Tensor, labels, scale: float, margin: float) -> Tensor:
    """``s*cos(theta_y + m)`` for the true class, ``s*cos(theta_j)`` elsewhere.

    Cosines are clamped to ``[-1 + 1e-7, 1 - 1e-7]`` and ``theta_y + m`` to at
    most pi; the gradient through either clamp is zero.
    """
    n, k = cosines.shape
    labels = _check_labels(labels, n, k)
    rows = np.arange(n)
    lo, hi = -1.0 + COS_CLAMP, 1.0 - COS_CLAMP
    c = np.clip(cosines.data, lo, hi)
    inside = (cosines.data >= lo) & (cosines.data <= hi)
    theta = np.arccos(c[rows, labels])
    shifted = theta + margin
    capped = shifted >= math.pi
    shifted = np.minimum(shifted, math.pi)
    out = c.copy()
    out[rows, labels] = np.cos(shifted)
    out *= scale
    target_slope = np.where(capped, 0.0, np.sin(shifted) / np.sin(theta))

    def backward(g):
        d = np.where(inside, g * scale, 0.0)
        d[rows, labels] *= target_slope
        return (d,)

    return T.emit("angular_margin", out, (cosines,), backward)


def cosine_logits(embeddings: Tensor, W: Tensor) -> Tensor:
    norms = np.sqrt((embeddings.data ** 2).sum(axis=1))
    if (norms < 1e-12).any():
        bad = int(np.argmax(norms < 1e-12))
        raise ZeroNormError(f"arcface: embedding row {bad} has zero norm")
    return T.linear(T.l2_normalize(embeddings), T.l2_normalize(W))


def arcface(embeddings: Tensor, W: Tensor, labels, scale_s: float = 16.0,
            margin_m: float = 0.3) -> Tensor:
    if scale_s <= 0:
        raise ValueError(f"arcface: scale must be > 0, got {scale_s}")
    if not 0.0 <= margin_m < math.pi / 2:
        raise ValueError(f"arcface: margin must lie in [0, pi/2), got {margin_m}")
    cos = cosine_logits(embeddings, W)
    return softmax_cross_entropy(angular_margin_logits(cos, labels, scale_s, margin_m), labels)


def feature_match(student_emb: Tensor, teacher_emb: Tensor) -> Tensor:
    """Batch-mean squared Euclidean distance; the teacher side is a constant."""
    return T.squared_distance_mean(student_emb, teacher_emb.detach())


def classification_loss(embeddings: Tensor, W: Tensor, labels, cls_kind: str = "softmax",
                        arc_scale: float = 16.0, arc_margin: float = 0.3) -> Tensor:
    if cls_kind == "softmax":
        return softmax_cross_entropy(T.linear(embeddings, W), labels)
    if cls_kind == "arcface":
        return arcface(embeddings, W, labels, arc_scale, arc_margin)
    raise ValueError(f"unknown classification loss {cls_kind!r}")


def class_scores(embeddings: np.ndarray, W: np.ndarray, cls_kind: str = "softmax") -> np.ndarray:
    """Margin-free scores used for accuracy: logits or cosines."""
    if cls_kind == "arcface":
        e = embeddings / np.maximum(np.linalg.norm(embeddings, axis=1, keepdims=True), 1e-12)
        w = W / np.maximum(np.linalg.norm(W, axis=1, keepdims=True), 1e-12)
        return e @ w.T
    return embeddings @ W.T


def combined_student_loss(embeddings: Tensor, W: Tensor, labels, alpha: float,
                          student_feat: Optional[Tensor] = None,
                          teacher_feat: Optional[Tensor] = None, cls_kind: str = "softmax",
                          arc_scale: float = 16.0, arc_margin: float = 0.3) -> LossBreakdown:
    """``total = classification + alpha * feature_match``.

    With ``alpha == 0`` the feature term is never computed, so no teacher
    features are needed. ``student_feat`` defaults to ``embeddings``.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    cls = classification_loss(embeddings, W, labels, cls_kind, arc_scale, arc_margin)
    if alpha == 0:
        return LossBreakdown(cls.item(), 0.0, 0.0, cls.item(), cls)
    if teacher_feat is None:
        raise ValueError("alpha > 0 requires teacher features")
    feat = feature_match(embeddings if student_feat is None else student_feat, teacher_feat)
    total = cls + feat * alpha
    return LossBreakdown(cls.item(), feat.item(), alpha, total.item(), total)
