"""Synthetic shapes dataset: colored geometric figures on textured backgrounds."""

from __future__ import annotations

import colorsys
import os

import numpy as np
from PIL import Image

from .data import SampleRecord, write_manifest
from .errors import ConfigError

SHAPE_KINDS = ("disc", "square", "triangle", "ring", "bar")


def shape_kind(class_id: int) -> str:
    return SHAPE_KINDS[(class_id - 1) % len(SHAPE_KINDS)]


def class_color(class_id: int) -> tuple[float, float, float]:
    """Stable, well-separated color per class id (golden-angle hues)."""
    hue = (0.12 + class_id * 0.381966) % 1.0
    return colorsys.hsv_to_rgb(hue, 0.7, 0.85)


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float,
                angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == "disc":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= r * 0.9
    if kind == "triangle":
        u = (dy + r) / (1.8 * r)
        return (u >= 0) & (u <= 1) & (np.abs(dx) <= u * r)
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.45 * r) ** 2)
    if kind == "bar":
        ca, sa = np.cos(angle), np.sin(angle)
        du = ca * dx + sa * dy
        dv = -sa * dx + ca * dy
        return (np.abs(du) <= 1.25 * r) & (np.abs(dv) <= 0.5 * r)
    raise ConfigError(f"unknown shape kind {kind!r}")


def _textured_background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = np.array(colorsys.hsv_to_rgb(0.28, 0.18, 0.45), dtype=np.float64)
    yy, xx = np.mgrid[0:size, 0:size] / size
    texture = np.zeros((size, size))
    for _ in range(2):
        fy, fx = rng.uniform(1.0, 4.0, size=2)
        phase = rng.uniform(0.0, 2 * np.pi)
        texture += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    texture = 0.05 * texture[..., None]
    noise = rng.normal(0.0, 0.03, size=(size, size, 3))
    return np.clip(base + texture + noise, 0.0, 1.0)


def synth_sample(rng: np.random.Generator, class_ids, image_size: int = 64,
                 min_shapes: int = 1, max_shapes: int = 3):
    """Render one image/mask pair; returns (image, mask, classes drawn)."""
    image = _textured_background(rng, image_size)
    mask = np.zeros((image_size, image_size), dtype=np.int64)
    n_shapes = int(rng.integers(min_shapes, max_shapes + 1))
    chosen = rng.choice(sorted(class_ids), size=min(n_shapes, len(class_ids)), replace=False)
    drawn: set[int] = set()
    for cid in chosen:
        cid = int(cid)
        placed = None
        for _ in range(30):
            r = rng.uniform(0.13, 0.22) * image_size
            cy = rng.uniform(r + 1, image_size - r - 1)
            cx = rng.uniform(r + 1, image_size - r - 1)
            angle = rng.uniform(0.0, np.pi)
            candidate = _shape_mask(shape_kind(cid), image_size, cy, cx, r, angle)
            if not (candidate & (mask > 0)).any():
                placed = candidate
                break
        if placed is None:
            continue
        color = np.array(class_color(cid)) * rng.uniform(0.9, 1.1)
        fill = color + rng.normal(0.0, 0.02, size=(image_size, image_size, 3))
        image = np.where(placed[..., None], np.clip(fill, 0.0, 1.0), image)
        mask[placed] = cid
        drawn.add(cid)
    return image.astype(np.float32), mask, frozenset(drawn)


def synth_dataset(n_images: int, n_classes: int, seed: int, image_size: int = 64,
                  min_shapes: int = 1, max_shapes: int = 3):
    """Deterministic list of (image, mask, classes) samples."""
    if n_classes < 3:
        raise ConfigError(f"need at least 3 classes, got {n_classes}")
    rng = np.random.default_rng(seed)
    class_ids = list(range(1, n_classes + 1))
    return [synth_sample(rng, class_ids, image_size, min_shapes, max_shapes)
            for _ in range(n_images)]


def mask_palette(n_classes: int, ignore_id: int = 255) -> list[int]:
    """Flat RGB palette for indexed-color mask images."""
    table = [(30, 30, 30)] + [
        tuple(int(round(255 * v)) for v in class_color(c)) for c in range(1, 256)
    ]
    table[ignore_id] = (255, 255, 255)
    return [v for rgb in table[:256] for v in rgb]


def save_mask_png(path: str, mask: np.ndarray, ignore_id: int = 255) -> None:
    im = Image.fromarray(mask.astype(np.uint8), mode="P")
    im.putpalette(mask_palette(int(mask.max()) + 1, ignore_id))
    im.save(path)


def write_dataset(out_dir: str, samples, manifest_name: str = "manifest.txt") -> str:
    """Write images/masks as PNG plus a manifest; returns the manifest path."""
    image_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(image_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    records = []
    for i, (image, mask, classes) in enumerate(samples):
        image_path = os.path.join(image_dir, f"img_{i:05d}.png")
        mask_path = os.path.join(mask_dir, f"msk_{i:05d}.png")
        Image.fromarray((image * 255).round().astype(np.uint8)).save(image_path)
        save_mask_png(mask_path, mask)
        records.append(SampleRecord(image=None, weak_labels=frozenset(classes),
                                    image_path=image_path, mask_path=mask_path))
    manifest_path = os.path.join(out_dir, manifest_name)
    write_manifest(manifest_path, records)
    return manifest_path
