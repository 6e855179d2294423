"""Mixed cross-entropy + Dice training loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, log_softmax, mean, sigmoid, softmax, softplus, sum_


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    beta: float = 0.5
    class_count: int = 9
    eps: float = 1e-5
    foreground_only: bool = True  # Dice skips class 0 when a background class exists

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError(f"need alpha, beta >= 0 with a positive sum, got {self.alpha}, {self.beta}")
        if self.class_count < 1:
            raise ValueError(f"class_count must be >= 1, got {self.class_count}")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")


@dataclass
class SegmentationBatch:
    images: np.ndarray  # N x C x H x W float
    masks: np.ndarray  # N x H x W integer labels
    class_count: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.masks.ndim != 3:
            raise ValueError(f"images must be 4-D and masks 3-D, got {self.images.shape}, {self.masks.shape}")
        if self.images.shape[0] != self.masks.shape[0] or self.images.shape[2:] != self.masks.shape[1:]:
            raise ValueError(f"images {self.images.shape} and masks {self.masks.shape} disagree")
        check_labels(self.masks, self.class_count)

    def __len__(self) -> int:
        return self.masks.shape[0]


def label_space(class_count: int) -> int:
    """Number of distinct labels: the single-logit binary case still has two."""
    return 2 if class_count == 1 else class_count


def check_labels(masks: np.ndarray, class_count: int) -> None:
    if not np.issubdtype(masks.dtype, np.integer):
        raise TypeError(f"masks must hold integer labels, got {masks.dtype}")
    hi = label_space(class_count)
    if masks.size and (masks.min() < 0 or masks.max() >= hi):
        raise ValueError(f"mask label out of range [0, {hi}): found {masks.min()}..{masks.max()}")


def _targets(logits: Tensor, masks: np.ndarray, cfg: LossConfig) -> np.ndarray:
    n, k, h, w = logits.shape
    if k != cfg.class_count:
        raise ValueError(f"logits carry {k} channels but class_count is {cfg.class_count}")
    if masks.shape != (n, h, w):
        raise ValueError(f"mask shape {masks.shape} does not match logits {logits.shape}")
    check_labels(masks, cfg.class_count)
    if k == 1:
        return (masks == 1)[:, None].astype(logits.dtype)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, masks[:, None].astype(np.intp), 1.0, axis=1)
    return onehot


def probabilities(logits: Tensor) -> Tensor:
    return sigmoid(logits) if logits.shape[1] == 1 else softmax(logits, axis=1)


def cross_entropy(logits: Tensor, masks: np.ndarray, cfg: LossConfig) -> Tensor:
    """Mean per-pixel CE (softmax) or BCE (single logit)."""
    y = _targets(logits, masks, cfg)
    if logits.shape[1] == 1:
        return mean(softplus(logits) - logits * y)
    n, _, h, w = logits.shape
    return sum_(log_softmax(logits, axis=1) * y) * (-1.0 / (n * h * w))


def dice_loss(logits: Tensor, masks: np.ndarray, cfg: LossConfig) -> Tensor:
    """1 - mean soft Dice over classes, pooled over the batch."""
    y = _targets(logits, masks, cfg)
    p = probabilities(logits)
    k = logits.shape[1]
    inter = sum_(p * y, axis=(0, 2, 3))
    denom = sum_(p, axis=(0, 2, 3)) + y.sum(axis=(0, 2, 3))
    score = (inter * 2.0 + cfg.eps) / (denom + cfg.eps)
    if cfg.foreground_only and k > 1:
        w = np.ones(k, dtype=logits.dtype)
        w[0] = 0.0
        return 1.0 - sum_(score * w) * (1.0 / (k - 1))
    return 1.0 - mean(score)


def mixed_loss(logits: Tensor, masks: np.ndarray, cfg: LossConfig) -> Tensor:
    return cross_entropy(logits, masks, cfg) * cfg.alpha + dice_loss(logits, masks, cfg) * cfg.beta


def predict_labels(logits: np.ndarray) -> np.ndarray:
    """Hard labels from N x K x H x W logits (threshold at 0 for a single logit)."""
    if logits.shape[1] == 1:
        return (logits[:, 0] > 0).astype(np.int64)
    return logits.argmax(axis=1)
