"""Classification and center losses, the center update rule and feature distances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbones import ModelParams, forward
from .ndgrad import GradTape, Node, ShapeError, backward

LOG_CLAMP = 1e-12


@dataclass
class ClassCenters:
    """One feature-space center per class plus the center-loss hyperparameters."""

    centers: np.ndarray
    lr_center: float = 0.001
    lam: float = 0.001

    @classmethod
    def zeros(cls, n_classes: int, width: int, lr_center: float = 0.001, lam: float = 0.001) -> "ClassCenters":
        return cls(np.zeros((n_classes, width), dtype=np.float32), lr_center, lam)

    @property
    def n(self) -> int:
        return self.centers.shape[1]

    def copy(self) -> "ClassCenters":
        return ClassCenters(self.centers.copy(), self.lr_center, self.lam)


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise IndexError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    return labels


def cross_entropy(probs: np.ndarray, labels: np.ndarray, reduction: str = "mean") -> float:
    """Mean (or summed) ``-log p[i, labels[i]]`` with p clamped to [1e-12, 1]."""
    labels = _check_labels(labels, probs.shape[1])
    picked = np.clip(probs[np.arange(len(labels)), labels], LOG_CLAMP, 1.0)
    total = -np.log(picked.astype(np.float64)).sum()
    return float(total / len(labels)) if reduction == "mean" else float(total)


def center_loss(features: np.ndarray, labels: np.ndarray, centers: ClassCenters) -> float:
    """``0.5 * sum_i ||h_i - c_{y_i}||^2`` summed over the batch."""
    if features.shape[1] != centers.n:
        raise ShapeError(f"feature width {features.shape[1]} does not match center width {centers.n}")
    labels = _check_labels(labels, len(centers.centers))
    diff = features.astype(np.float64) - centers.centers[labels]
    return float(0.5 * np.sum(diff * diff))


def joint_loss(probs: np.ndarray, features: np.ndarray, labels: np.ndarray, centers: ClassCenters,
               reduction: str = "mean") -> float:
    """Cross entropy plus ``lam`` times the center loss."""
    ce = cross_entropy(probs, labels, reduction)
    if centers.lam == 0:
        return ce
    return ce + centers.lam * center_loss(features, labels, centers)


def joint_loss_node(tape: GradTape, probs: Node, features: Node, labels: np.ndarray, centers: ClassCenters,
                    reduction: str = "mean") -> Node:
    """Record the joint loss on ``tape`` so that backward reaches the parameters.

    The feature gradient is ``lam * (h_i - c_{y_i})``; centers are not differentiated
    (they follow :func:`update_centers`).
    """
    labels = _check_labels(labels, probs.value.shape[1])
    p, h = probs.value, features.value
    value = joint_loss(p, h, labels, centers, reduction)
    rows = np.arange(len(labels))
    scale = 1.0 / len(labels) if reduction == "mean" else 1.0

    def vjp(g, need):
        dp = np.zeros_like(p)
        picked = p[rows, labels]
        live = picked > LOG_CLAMP
        dp[rows[live], labels[live]] = -g * scale / picked[live]
        dh = None
        if centers.lam != 0:
            dh = (g * centers.lam * (h - centers.centers[labels])).astype(h.dtype)
        return dp, dh

    return tape.custom("joint_loss", (probs, features), np.asarray(value, dtype=p.dtype), vjp)


def update_centers(centers: ClassCenters, features: np.ndarray, labels: np.ndarray) -> ClassCenters:
    """``c_j <- c_j - lr * sum_{y_i=j}(c_j - h_i) / (1 + count_j)``; absent classes stay put."""
    labels = _check_labels(labels, len(centers.centers))
    K = len(centers.centers)
    counts = np.bincount(labels, minlength=K).astype(np.float64)
    sums = np.zeros((K, centers.n), dtype=np.float64)
    np.add.at(sums, labels, features.astype(np.float64))
    c = centers.centers.astype(np.float64)
    delta = (counts[:, None] * c - sums) / (1.0 + counts[:, None])
    new = (c - centers.lr_center * delta).astype(centers.centers.dtype)
    return ClassCenters(new, centers.lr_center, centers.lam)


def feature_distance(feature: np.ndarray, center: np.ndarray) -> float:
    """Squared euclidean distance divided by ``2n`` (element-averaged center loss)."""
    feature, center = np.asarray(feature), np.asarray(center)
    if feature.shape != center.shape:
        raise ShapeError(f"feature shape {feature.shape} does not match center shape {center.shape}")
    diff = feature.astype(np.float64) - center
    return float(np.dot(diff.ravel(), diff.ravel()) / (2 * diff.size))


def feature_distances(features: np.ndarray, centers: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Vectorised :func:`feature_distance` for each row against its labelled center."""
    diff = features.astype(np.float64) - centers[labels]
    return np.einsum("ij,ij->i", diff, diff) / (2 * features.shape[1])


@dataclass
class LossEval:
    loss: float
    grads: dict[str, np.ndarray]
    probs: np.ndarray
    features: np.ndarray


def evaluate(params: ModelParams, x: np.ndarray, labels: np.ndarray, centers: ClassCenters,
             reduction: str = "mean") -> LossEval:
    """Forward, joint loss and parameter gradients for one batch."""
    res = forward(params, x, record=True)
    loss = joint_loss_node(res.tape, res.probs_node, res.features_node, labels, centers, reduction)
    grads = backward(res.tape, loss)
    return LossEval(float(loss.value), grads, res.probs, res.features)
