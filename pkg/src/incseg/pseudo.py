"""Online pseudo-supervision: hard/soft labels, composition with the old
model, and the dense multi-label segmentation loss.

The per-pixel targets are *not* a distribution over classes: new-class
channels carry smoothed localizer labels, old-class channels carry the
frozen model's sigmoid outputs, and the background channel takes the
element-wise minimum of the two sources.
"""

from __future__ import annotations

import struct

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractViolationError, SchemaError, ShapeError, UnsupportedError
from .pooling import CLASS_DIM


def hard_labels(m: torch.Tensor) -> torch.Tensor:
    """One-hot argmax over classes; ties go to the lowest class index."""
    idx = m.argmax(dim=CLASS_DIM, keepdim=True)
    out = torch.zeros_like(m)
    return out.scatter_(CLASS_DIM, idx, 1.0)


def smooth_labels(q_hard: torch.Tensor, m: torch.Tensor, alpha: float) -> torch.Tensor:
    """Convex combination alpha * hard + (1 - alpha) * soft.

    Both inputs are detached: the result is a training target, never a
    prediction, so no gradient may flow back into the localizer.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if q_hard.shape != m.shape:
        raise ShapeError("hard/soft label shape mismatch")
    return alpha * q_hard.detach() + (1.0 - alpha) * m.detach()


def compose_supervision(q: torch.Tensor, old_out: torch.Tensor,
                        schedule=None, t: int | None = None) -> torch.Tensor:
    """Merge localizer labels with frozen old-model outputs.

    Channel layout follows the schedule's channel order: background 0,
    then old classes, then new classes.  Background takes the min of the
    two sources (background-shift modeling); old classes come verbatim
    from the old model; new classes keep the localizer labels.
    """
    q = q.detach()
    old_out = old_out.detach()
    n_total = q.shape[CLASS_DIM]
    n_old = old_out.shape[CLASS_DIM]
    if q.shape[-2:] != old_out.shape[-2:]:
        raise SchemaError("supervision sources differ in spatial size")
    if not 1 <= n_old < n_total:
        raise SchemaError(
            f"old model covers {n_old} channels, current step covers {n_total}"
        )
    if schedule is not None and t is not None:
        if n_total != len(schedule.seen_classes(t)) or n_old != len(schedule.old_classes(t)):
            raise SchemaError("channel counts do not match the schedule's class sets")
    q_hat = q.clone()
    bg = torch.minimum(
        old_out.narrow(CLASS_DIM, 0, 1), q.narrow(CLASS_DIM, 0, 1)
    )
    q_hat.narrow(CLASS_DIM, 0, 1).copy_(bg)
    if n_old > 1:
        q_hat.narrow(CLASS_DIM, 1, n_old - 1).copy_(old_out.narrow(CLASS_DIM, 1, n_old - 1))
    return q_hat


def upsample_scores(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear per-channel upsampling of soft maps to ``size``.

    Applied to soft scores before hard-label extraction so the argmax is
    taken at full resolution; downscaling is out of contract.
    """
    h, w = size
    if h < x.shape[-2] or w < x.shape[-1]:
        raise UnsupportedError(
            f"target {size} is smaller than source {tuple(x.shape[-2:])}"
        )
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    out = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    return out.squeeze(0) if squeeze else out


def segmentation_loss(p: torch.Tensor, q_hat: torch.Tensor) -> torch.Tensor:
    """Dense multi-label soft-margin loss against the composed targets.

    Sums the per-class logistic BCE at each pixel and averages over
    pixels (and the batch); the logistic is applied to both terms of the
    BCE so the loss stays a proper function of the logits p.
    """
    q_hat = q_hat.detach()
    if p.shape != q_hat.shape:
        raise ShapeError(f"logits {tuple(p.shape)} vs targets {tuple(q_hat.shape)}")
    if q_hat.min() < 0 or q_hat.max() > 1:
        raise ContractViolationError("pseudo-supervision values must lie in [0, 1]")
    element = F.binary_cross_entropy_with_logits(p, q_hat, reduction="none")
    return element.sum(dim=CLASS_DIM).mean()


# --- inspection dump formats -------------------------------------------------

GRID_MAGIC_LEN = 12  # 3 * uint32 header: C, H, W


def write_soft_grid(path: str, maps: np.ndarray) -> None:
    """Write per-class soft maps as little-endian u32 C,H,W header + f32 grid."""
    maps = np.ascontiguousarray(maps, dtype="<f4")
    if maps.ndim != 3:
        raise ShapeError(f"expected (C, H, W) maps, got shape {maps.shape}")
    c, h, w = maps.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<III", c, h, w))
        fh.write(maps.tobytes(order="C"))


def read_soft_grid(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(GRID_MAGIC_LEN)
        if len(header) != GRID_MAGIC_LEN:
            raise ContractViolationError(f"{path}: truncated grid header")
        c, h, w = struct.unpack("<III", header)
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != c * h * w:
        raise ContractViolationError(f"{path}: payload does not match header {c}x{h}x{w}")
    return data.reshape(c, h, w).copy()
