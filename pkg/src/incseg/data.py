"""Sample records, step filtering, and the dataset manifest format.

A manifest is the ingestion boundary for datasets: one record per line,

    <image path> <mask path or -> [id,id,...]

with paths relative to the manifest's directory and an optional trailing
comma-separated weak-label id list.  Records used to *build* a benchmark
carry dense masks; step manifests for t > 0 carry only weak labels.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from .errors import DataError, ParseError, SupervisionError
from .schedule import IncrementalSchedule

PROTOCOLS = ("disjoint", "overlap")


@dataclass(eq=False)
class SampleRecord:
    """One image with its supervision payload.

    Exactly one of ``dense_mask`` / ``weak_labels`` drives training: dense
    at step 0, weak at later steps.  ``image`` is H*W*3 float32 in [0, 1];
    ``dense_mask`` is H*W integer class ids (255 = ignore).  Records
    compare by identity (they hold arrays).
    """

    image: np.ndarray | None
    dense_mask: np.ndarray | None = None
    weak_labels: frozenset[int] | None = None
    image_path: str | None = None
    mask_path: str | None = None


def derive_weak_labels(mask: np.ndarray, universe, background_id: int = 0,
                       ignore_id: int = 255) -> frozenset[int]:
    """Class ids present in ``mask``, minus background/ignore, intersected with ``universe``."""
    present = np.unique(mask)
    keep = {int(c) for c in present if c != background_id and c != ignore_id}
    return frozenset(keep & set(universe))


def _mask_classes(record: SampleRecord, schedule: IncrementalSchedule) -> set[int]:
    present = np.unique(record.dense_mask)
    return {int(c) for c in present
            if c != schedule.background_id and c != schedule.ignore_id}


def filter_step(dataset, schedule: IncrementalSchedule, t: int, protocol: str,
                base_prefilter: bool = False):
    """Select the records visible at step ``t`` under a benchmark protocol.

    disjoint keeps images whose classes all belong to previously seen or
    current classes and that contain at least one current class; overlap
    keeps any image containing a current class.  ``base_prefilter`` drops
    step-0 images containing any future class even under overlap (used by
    the coco-to-voc construction).

    Returned records at t > 0 carry derived weak labels over the full seen
    universe and no dense mask (the source records keep theirs for
    evaluation).  At t = 0 the dense mask is the supervision; pixels of
    classes not yet introduced are remapped to background in the training
    payload, the benchmark's background-shift convention (only reachable
    under overlap, where base images may contain future classes).
    """
    if not 0 <= t < schedule.num_steps:
        raise IndexError(f"step {t} out of range for a {schedule.num_steps}-step schedule")
    if protocol not in PROTOCOLS:
        raise DataError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")

    current = set(schedule.new_classes(t))
    allowed = {c for c in schedule.seen_classes(t) if c != schedule.background_id}
    future = set(schedule.future_classes(t))

    kept = []
    for record in dataset:
        if record.dense_mask is None:
            raise SupervisionError("filter_step needs dense masks to build benchmark splits")
        classes = _mask_classes(record, schedule)
        if not classes & current:
            continue
        if protocol == "disjoint" and not classes <= allowed:
            continue
        if base_prefilter and t == 0 and classes & future:
            continue
        if t == 0:
            extra = classes & future
            mask = record.dense_mask
            if extra:
                mask = mask.copy()
                mask[np.isin(mask, sorted(extra))] = schedule.background_id
            kept.append(replace(record, dense_mask=mask, weak_labels=None))
        else:
            weak = frozenset(classes & allowed)
            kept.append(replace(record, dense_mask=None, weak_labels=weak))
    return kept


def read_manifest(path: str):
    """Parse a manifest into records with paths resolved; pixel data not loaded."""
    root = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) not in (2, 3):
                raise ParseError(f"{path}:{lineno}: expected 2 or 3 fields, got {len(parts)}")
            image_path = os.path.join(root, parts[0])
            mask_path = None if parts[1] == "-" else os.path.join(root, parts[1])
            weak = None
            if len(parts) == 3:
                try:
                    ids = [int(v) for v in parts[2].split(",") if v]
                except ValueError as exc:
                    raise ParseError(f"{path}:{lineno}: bad weak-label list {parts[2]!r}") from exc
                weak = frozenset(ids)
            records.append(SampleRecord(image=None, dense_mask=None, weak_labels=weak,
                                        image_path=image_path, mask_path=mask_path))
    return records


def write_manifest(path: str, records) -> None:
    """Write records as manifest lines with paths relative to the manifest."""
    root = os.path.dirname(os.path.abspath(path))
    lines = []
    for record in records:
        if record.image_path is None:
            raise DataError("cannot write a manifest entry without an image path")
        image_rel = os.path.relpath(record.image_path, root)
        mask_rel = "-" if record.mask_path is None else os.path.relpath(record.mask_path, root)
        fields = [image_rel, mask_rel]
        if record.weak_labels is not None:
            fields.append(",".join(str(c) for c in sorted(record.weak_labels)))
        lines.append(" ".join(fields))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def load_pixels(record: SampleRecord, load_image: bool = True,
                load_mask: bool = True) -> SampleRecord:
    """Return a copy of ``record`` with image/mask arrays read from disk."""
    image = record.image
    mask = record.dense_mask
    if load_image and image is None and record.image_path is not None:
        with Image.open(record.image_path) as im:
            image = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    if load_mask and mask is None and record.mask_path is not None:
        with Image.open(record.mask_path) as im:
            mask = np.asarray(im, dtype=np.int64)
    return replace(record, image=image, dense_mask=mask)


def load_records(manifest_path: str, load_images: bool = True, load_masks: bool = True):
    return [load_pixels(r, load_images, load_masks) for r in read_manifest(manifest_path)]
