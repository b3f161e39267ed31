"""Dense supervision of the localizer from the frozen previous-step model.

The previous model's sigmoid outputs, area-averaged down to the score-map
grid, act as targets for the old-class score channels.  The bundled
ablation variants swap this supervision for nothing, for frozen
concatenated channels, or for a hard softmax cross-entropy.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .pooling import CLASS_DIM

PRIOR_VARIANTS = ("none", "fixed", "ce", "loc")


def area_downsample(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Average-pool a map to ``size``, preserving soft probability mass."""
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    out = F.adaptive_avg_pool2d(x, size)
    return out.squeeze(0) if squeeze else out


def localization_prior_loss(z: torch.Tensor, omega: torch.Tensor) -> torch.Tensor:
    """Per-pixel logistic BCE between old-class scores and frozen targets.

    Averages over old classes and pixels; classes are treated
    independently (logistic, not softmax), so low targets everywhere can
    signal a pixel of a class unknown to the old model.  ``omega`` never
    receives gradient.
    """
    omega = omega.detach()
    n_old = omega.shape[CLASS_DIM]
    if z.shape[-2:] != omega.shape[-2:]:
        raise ShapeError(
            f"spatial mismatch: z {tuple(z.shape[-2:])} vs omega {tuple(omega.shape[-2:])}"
        )
    if n_old > z.shape[CLASS_DIM]:
        raise ShapeError("omega has more channels than the score map")
    z_old = z.narrow(CLASS_DIM, 0, n_old)
    return F.binary_cross_entropy_with_logits(z_old, omega, reduction="mean")


def ce_prior_loss(z: torch.Tensor, omega: torch.Tensor) -> torch.Tensor:
    """Softmax cross-entropy against the old model's per-pixel argmax.

    The ablation's hard variant: the softmax couples all channels, so the
    localizer is pushed toward the old model's top class even where the
    old model itself is uncertain.
    """
    omega = omega.detach()
    if z.shape[-2:] != omega.shape[-2:]:
        raise ShapeError("spatial mismatch between score map and old-model output")
    target = omega.argmax(dim=CLASS_DIM)
    if z.dim() == 3:
        return F.cross_entropy(z.unsqueeze(0), target.unsqueeze(0), reduction="mean")
    return F.cross_entropy(z, target, reduction="mean")


def fixed_prior_scores(z: torch.Tensor, omega: torch.Tensor) -> torch.Tensor:
    """Replace the old-class score channels with the frozen old outputs.

    Returns a score map whose first channels are ``omega`` (no gradient)
    and whose remaining channels are the learned new-class scores; the
    normalized map is then computed over the concatenated axis.
    """
    omega = omega.detach()
    n_old = omega.shape[CLASS_DIM]
    if n_old >= z.shape[CLASS_DIM]:
        raise ShapeError("fixed prior leaves no learned new-class channels")
    if z.shape[-2:] != omega.shape[-2:]:
        raise ShapeError("spatial mismatch between score map and old-model output")
    z_new = z.narrow(CLASS_DIM, n_old, z.shape[CLASS_DIM] - n_old)
    return torch.cat([omega.to(z.dtype), z_new], dim=CLASS_DIM)


def check_prior_config(variant: str, supervision_mode: str) -> None:
    if variant not in PRIOR_VARIANTS:
        raise ConfigError(f"unknown prior variant {variant!r}; expected one of {PRIOR_VARIANTS}")
    if variant == "fixed" and supervision_mode == "all-classes":
        raise ConfigError(
            "fixed prior keeps old channels frozen; all-classes supervision "
            "cannot train them"
        )
