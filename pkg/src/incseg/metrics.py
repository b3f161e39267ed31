"""Confusion-matrix accumulation and mean-IoU reporting with class groups."""

from __future__ import annotations

import numpy as np

from .errors import DataError, MetricError


class ConfusionMatrix:
    """C x C counts; rows are ground truth, columns are predictions.

    Ignore pixels are excluded on accumulation.  Shard-local matrices can
    be merged with ``+`` (element-wise addition, order-independent).
    """

    def __init__(self, num_classes: int, ignore_id: int = 255):
        self.num_classes = num_classes
        self.ignore_id = ignore_id
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred).ravel()
        gt = np.asarray(gt).ravel()
        if pred.shape != gt.shape:
            raise DataError(f"pred/gt shape mismatch: {pred.shape} vs {gt.shape}")
        keep = gt != self.ignore_id
        pred, gt = pred[keep], gt[keep]
        if pred.size == 0:
            return self
        bad = (pred < 0) | (pred >= self.num_classes) | (gt < 0) | (gt >= self.num_classes)
        if bad.any():
            raise DataError("class id outside [0, num_classes) in evaluation masks")
        flat = gt * self.num_classes + pred
        self.counts += np.bincount(flat, minlength=self.num_classes ** 2).reshape(
            self.num_classes, self.num_classes
        )
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise DataError("cannot merge confusion matrices of different sizes")
        merged = ConfusionMatrix(self.num_classes, self.ignore_id)
        merged.counts = self.counts + other.counts
        return merged


def miou(cm: ConfusionMatrix, groups: dict | None = None) -> dict:
    """Per-class IoU plus unweighted group means.

    ``groups`` maps group names (e.g. ``old``/``new``) to sets of class
    indices.  Classes with an empty union have undefined IoU (NaN) and are
    excluded from group means; the ``all`` group always covers every class.
    """
    if cm.total == 0:
        raise MetricError("confusion matrix is empty; mIoU is undefined")
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(union > 0, tp / np.maximum(union, 1), np.nan)

    def group_mean(indices) -> float:
        vals = per_class[sorted(indices)]
        vals = vals[~np.isnan(vals)]
        return float(vals.mean()) if vals.size else float("nan")

    result = {
        "per_class": per_class,
        "all": group_mean(range(cm.num_classes)),
        "gt_pixels": counts.sum(axis=1).astype(np.int64),
        "total_pixels": cm.total,
    }
    for name, indices in (groups or {}).items():
        result[name] = group_mean(indices)
    return result


def render_report(result: dict, class_names=None) -> str:
    """Human-readable table for a miou() result."""
    per_class = result["per_class"]
    names = class_names or [f"class-{i}" for i in range(len(per_class))]
    width = max(len(n) for n in names)
    lines = [f"{'class':<{width}}  {'IoU':>8}  {'gt px':>10}"]
    for i, iou in enumerate(per_class):
        val = "   undef" if np.isnan(iou) else f"{iou:8.4f}"
        lines.append(f"{names[i]:<{width}}  {val}  {result['gt_pixels'][i]:>10d}")
    lines.append("-" * (width + 22))
    for key in sorted(k for k in result if isinstance(result[k], float)):
        lines.append(f"{('mIoU ' + key):<{width}}  {result[key]:8.4f}")
    return "\n".join(lines) + "\n"


def render_report_kv(result: dict, class_ids=None) -> str:
    """Machine-readable key-value document for a miou() result."""
    per_class = result["per_class"]
    ids = class_ids or list(range(len(per_class)))
    lines = [f"pixels.total = {result['total_pixels']}"]
    for i, iou in enumerate(per_class):
        val = "undefined" if np.isnan(iou) else f"{iou:.6f}"
        lines.append(f"iou.{ids[i]} = {val}")
        lines.append(f"pixels.{ids[i]} = {result['gt_pixels'][i]}")
    for key in sorted(k for k in result if isinstance(result[k], float)):
        val = "undefined" if np.isnan(result[key]) else f"{result[key]:.6f}"
        lines.append(f"miou.{key} = {val}")
    return "\n".join(lines) + "\n"


def parse_report_kv(text: str) -> dict:
    """Parse a key-value report; numeric values become floats, the rest
    stay strings."""
    out: dict = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#") or "=" not in line:
            continue
        key, _, value = line.partition("=")
        value = value.strip()
        if value == "undefined":
            out[key.strip()] = float("nan")
        else:
            try:
                out[key.strip()] = float(value)
            except ValueError:
                out[key.strip()] = value
    return out
