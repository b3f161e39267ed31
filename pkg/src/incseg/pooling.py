"""Score-map pooling and the image-level classification loss.

All functions accept score maps shaped (C, H, W) or (B, C, H, W); the
class axis is always -3.  Losses reduce over the batch axis by mean.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import (
    ConfigError,
    EmptyTargetError,
    NumericInputError,
    ShapeError,
    SingleClassStepError,
)

CLASS_DIM = -3

NGWP_EPS = 1e-5
FOCAL_LAMBDA = 0.01
FOCAL_GAMMA = 3.0


def softmax_normalize(z: torch.Tensor) -> torch.Tensor:
    """Per-pixel softmax over the class axis (max-subtraction stabilized)."""
    if z.dim() < 3:
        raise ShapeError(f"expected (..., C, H, W), got shape {tuple(z.shape)}")
    if not torch.isfinite(z).all():
        raise NumericInputError("score map contains non-finite values")
    return F.softmax(z, dim=CLASS_DIM)


def ngwp(z: torch.Tensor, m: torch.Tensor, epsilon: float = NGWP_EPS) -> torch.Tensor:
    """Per-class scores pooled with the normalized map as pixel weights.

    Gradient flows through both z and m; the epsilon guard keeps the pool
    finite when a class's total weight vanishes (masked variants).
    """
    if z.shape != m.shape:
        raise ShapeError(f"z/m shape mismatch: {tuple(z.shape)} vs {tuple(m.shape)}")
    if epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    weighted = (m * z).sum(dim=(-2, -1))
    weight = m.sum(dim=(-2, -1))
    return weighted / (epsilon + weight)


def focal_penalty(m: torch.Tensor, lam: float = FOCAL_LAMBDA,
                  gamma: float = FOCAL_GAMMA) -> torch.Tensor:
    """Coverage regularizer: (1 - mean m_c)^gamma * log(lam + mean m_c)."""
    if lam <= 0:
        raise ConfigError("lambda must be positive")
    if gamma < 0:
        raise ConfigError("gamma must be non-negative")
    coverage = m.mean(dim=(-2, -1))
    return (1.0 - coverage) ** gamma * torch.log(lam + coverage)


def pooled_logits(z: torch.Tensor, m: torch.Tensor | None = None,
                  epsilon: float = NGWP_EPS, lam: float = FOCAL_LAMBDA,
                  gamma: float = FOCAL_GAMMA) -> torch.Tensor:
    """Image-level class logits: weighted pooling plus the focal penalty."""
    if m is None:
        m = softmax_normalize(z)
    return ngwp(z, m, epsilon) + focal_penalty(m, lam, gamma)


def classification_loss(z: torch.Tensor, labels: torch.Tensor, classes,
                        mode: str = "new-only", m: torch.Tensor | None = None,
                        epsilon: float = NGWP_EPS, lam: float = FOCAL_LAMBDA,
                        gamma: float = FOCAL_GAMMA) -> torch.Tensor:
    """Multi-label soft-margin loss over the pooled scores of ``classes``.

    ``classes`` holds the channel indices the loss averages over (the new
    classes, or every channel in all-classes mode); ``labels`` is the 0/1
    presence indicator over those channels, shaped (|K|,) or (B, |K|).
    Even when restricted to new classes the loss reaches every channel of
    z through the per-pixel softmax in the pooling weights.
    """
    classes = list(classes)
    if len(classes) == 0:
        raise EmptyTargetError("classification loss needs a non-empty class set")
    if mode not in ("new-only", "all-classes"):
        raise ConfigError(f"unknown supervision mode {mode!r}")
    if mode == "new-only" and len(classes) == 1:
        raise SingleClassStepError(
            "a single new class leaves the soft-margin loss without negatives"
        )
    scores = pooled_logits(z, m, epsilon, lam, gamma)
    picked = scores[..., classes]
    labels = labels.to(picked.dtype)
    if labels.shape != picked.shape:
        raise ShapeError(
            f"labels shape {tuple(labels.shape)} does not match class set "
            f"({len(classes)} channels)"
        )
    return F.binary_cross_entropy_with_logits(picked, labels, reduction="mean")
