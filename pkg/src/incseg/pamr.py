"""Pixel-adaptive refinement of score maps and the self-supervised loss.

Affinities are parameter-free: an RGB intensity kernel over a 3x3
neighborhood at several dilations, softmax-normalized per pixel.
Out-of-bounds neighbors are excluded before the softmax, so every
affinity row is a convex combination of real pixels.  Refinement builds
training targets only; its output carries no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ShapeError
from .pooling import CLASS_DIM

DILATIONS = (1, 2, 4, 8, 12)
OFFSETS = tuple((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0))
BG_CONFIDENCE = 0.7
FG_CONFIDENCE = 0.6

_STD_FLOOR = 1e-8  # constant-image guard; yields uniform affinities


def _neighbor_slots(dilations) -> list[tuple[int, int]]:
    return [(dy * d, dx * d) for d in dilations for dy, dx in OFFSETS]


def gather_neighbors(x: torch.Tensor, dilations=DILATIONS):
    """Stack dilated 3x3 neighbor values along a new axis.

    Returns (values, valid): values is (B, C, N, H, W) with zeros where a
    neighbor falls outside the image, valid is (N, H, W) bool.
    """
    b, c, h, w = x.shape
    slots = _neighbor_slots(dilations)
    values = x.new_zeros((b, c, len(slots), h, w))
    valid = torch.zeros((len(slots), h, w), dtype=torch.bool, device=x.device)
    for n, (dy, dx) in enumerate(slots):
        i0, i1 = max(0, -dy), h - max(0, dy)
        j0, j1 = max(0, -dx), w - max(0, dx)
        if i0 >= i1 or j0 >= j1:
            continue
        values[:, :, n, i0:i1, j0:j1] = x[:, :, i0 + dy:i1 + dy, j0 + dx:j1 + dx]
        valid[n, i0:i1, j0:j1] = True
    return values, valid


@dataclass
class AffinityField:
    """Normalized neighbor weights: (B, N, H, W), zero at invalid slots."""

    weights: torch.Tensor
    dilations: tuple[int, ...] = DILATIONS

    @property
    def connected(self) -> torch.Tensor:
        # pixels with at least one in-bounds neighbor
        return self.weights.sum(dim=1) > 0


def compute_affinity(image: torch.Tensor, dilations=DILATIONS) -> AffinityField:
    """Intensity affinities of an image already at score-map resolution.

    Kernel per neighbor: channel-mean of -(dx_c)^2 / (2 s_c^2), with s_c
    the per-image standard deviation of the channel's neighbor
    differences; softmax over the valid neighborhood.
    """
    squeeze = image.dim() == 3
    if squeeze:
        image = image.unsqueeze(0)
    if image.dim() != 4:
        raise ShapeError(f"expected (3, H, W) or (B, 3, H, W), got {tuple(image.shape)}")
    with torch.no_grad():
        neighbors, valid = gather_neighbors(image, dilations)
        diff = neighbors - image.unsqueeze(2)
        v = valid.to(image.dtype).view(1, 1, *valid.shape)
        count = v.sum().clamp_min(1.0)
        mean = (diff * v).sum(dim=(2, 3, 4), keepdim=True) / count
        var = (((diff - mean) ** 2) * v).sum(dim=(2, 3, 4), keepdim=True) / count
        std = var.sqrt().clamp_min(_STD_FLOOR)
        kernel = (-(diff ** 2) / (2.0 * std ** 2)).mean(dim=1)  # (B, N, H, W)
        kernel = kernel.masked_fill(~valid.unsqueeze(0), float("-inf"))
        weights = F.softmax(kernel, dim=1)
        weights = torch.nan_to_num(weights, nan=0.0)  # rows with no valid neighbor
    return AffinityField(weights=weights, dilations=tuple(dilations))


def pamr_refine(m: torch.Tensor, affinity: AffinityField, iterations: int = 10) -> torch.Tensor:
    """Iteratively replace each pixel's scores with its affinity-weighted
    neighborhood average; per-pixel class sums are preserved."""
    squeeze = m.dim() == 3
    out = m.detach()
    if squeeze:
        out = out.unsqueeze(0)
    if out.shape[-2:] != affinity.weights.shape[-2:]:
        raise ShapeError("score map and affinity field differ in spatial size")
    with torch.no_grad():
        w = affinity.weights.unsqueeze(1)  # (B, 1, N, H, W)
        connected = affinity.connected.unsqueeze(1)  # (B, 1, H, W)
        for _ in range(iterations):
            neighbors, _ = gather_neighbors(out, affinity.dilations)
            propagated = (neighbors * w).sum(dim=2)
            out = torch.where(connected, propagated, out)
    return out.squeeze(0) if squeeze else out


@dataclass
class RefinedPseudoGT:
    """Per-pixel class indices with ignore for unclaimed/clashing pixels,
    plus the coverage-based class weights of the refined map."""

    labels: torch.Tensor        # (H, W) or (B, H, W), long
    class_weights: torch.Tensor  # (C,) or (B, C)
    ignore_id: int = 255


def pseudo_gt_from_refined(m_ref: torch.Tensor, bg_confidence: float = BG_CONFIDENCE,
                           fg_confidence: float = FG_CONFIDENCE,
                           ignore_id: int = 255,
                           present: torch.Tensor | None = None) -> RefinedPseudoGT:
    """Threshold a refined map into a pseudo ground-truth mask.

    A pixel is claimed by class c when its score exceeds the class's
    confidence fraction of that class's spatial maximum (background uses
    the stricter fraction); pixels claimed by none or by several classes
    become ignore.  ``present`` (bool, (C,) or (B, C)) restricts claims to
    classes known to be in the image: the relative thresholds are
    scale-free, so without it a class that is absent (uniformly low map)
    would still claim most pixels and clash everything into ignore.
    """
    squeeze = m_ref.dim() == 3
    m = m_ref.detach()
    if squeeze:
        m = m.unsqueeze(0)
    b, c, h, w = m.shape
    thresholds = m.new_full((c,), fg_confidence)
    thresholds[0] = bg_confidence
    peak = m.amax(dim=(-2, -1), keepdim=True)
    claimed = m > thresholds.view(1, c, 1, 1) * peak
    if present is not None:
        if present.dim() == 1:
            present = present.unsqueeze(0)
        claimed &= present.to(torch.bool).view(b, c, 1, 1)
    n_claims = claimed.sum(dim=CLASS_DIM)
    labels = claimed.float().argmax(dim=CLASS_DIM)
    labels = torch.where(n_claims == 1, labels, torch.full_like(labels, ignore_id)).long()
    coverage = m.sum(dim=(-2, -1))  # (B, C)
    n_pixels = float(h * w)
    weights = (n_pixels - coverage) / (1.0 + n_pixels)
    if squeeze:
        labels, weights = labels.squeeze(0), weights.squeeze(0)
    return RefinedPseudoGT(labels=labels, class_weights=weights, ignore_id=ignore_id)


def sss_loss(m: torch.Tensor, gt: RefinedPseudoGT) -> torch.Tensor:
    """Class-weighted cross-entropy of the live normalized map against the
    refined pseudo ground truth; ignored pixels contribute nothing."""
    squeeze = m.dim() == 3
    probs = m.unsqueeze(0) if squeeze else m
    labels = gt.labels.unsqueeze(0) if squeeze else gt.labels
    weights = gt.class_weights.unsqueeze(0) if squeeze else gt.class_weights
    b, c, h, w = probs.shape
    if labels.shape != (b, h, w):
        raise ShapeError("pseudo ground truth does not match the score map")
    valid = labels != gt.ignore_id
    idx = labels.clamp(min=0, max=c - 1)
    log_probs = torch.log(probs.clamp_min(1e-12))
    picked = log_probs.gather(1, idx.unsqueeze(1)).squeeze(1)
    pixel_w = weights.detach().gather(1, idx.view(b, -1)).view(b, h, w)
    per_image = -(picked * pixel_w * valid.to(picked.dtype)).sum(dim=(-2, -1))
    return per_image.mean()
