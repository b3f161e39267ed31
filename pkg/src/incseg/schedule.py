"""Incremental class schedules: presets, validation, and plain-text export."""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError, ParseError, ScheduleConflictError, SingleClassStepError

VOC_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat",
    "chair", "cow", "table", "dog", "horse", "motorbike", "person", "plant",
    "sheep", "sofa", "train", "tv-monitor",
)

COCO_BASE_CLASSES = (
    "truck", "traffic light", "fire hydrant", "stop sign", "parking meter",
    "bench", "elephant", "bear", "zebra", "giraffe", "backpack", "umbrella",
    "handbag", "tie", "suitcase", "frisbee", "skis", "snowboard",
    "sports ball", "kite", "baseball bat", "baseball glove", "skateboard",
    "surfboard", "tennis racket", "wine glass", "cup", "fork", "knife",
    "spoon", "bowl", "banana", "apple", "sandwich", "orange", "broccoli",
    "carrot", "hot dog", "pizza", "donut", "cake", "bed", "toilet", "laptop",
    "mouse", "remote", "keyboard", "cell phone", "microwave", "oven",
    "toaster", "sink", "refrigerator", "book", "clock", "vase", "scissors",
    "teddy bear", "hair drier", "toothbrush",
)

COCO_INCREMENT_CLASSES = (
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train",
    "boat", "bird", "cat", "dog", "horse", "sheep", "cow", "bottle", "chair",
    "couch", "potted plant", "dining table", "tv",
)

PRESETS = ("voc-15-5", "voc-10-10", "coco-to-voc", "custom")


@dataclass(frozen=True)
class IncrementalSchedule:
    """Ordered learning steps over disjoint class-id sets.

    Class ids are stable across steps; 0 is always background and never
    appears in a step set.  Model channels at step t follow
    ``channel_order(t)``: background first, then the step sets in
    introduction order (each sorted by id), so extending a model to step
    t+1 appends channels without reshuffling old ones.
    """

    steps: tuple[frozenset[int], ...]
    names: dict[int, str] = field(default_factory=dict)
    background_id: int = 0
    ignore_id: int = 255

    def __post_init__(self):
        seen: set[int] = set()
        for t, step in enumerate(self.steps):
            if self.background_id in step:
                raise ScheduleConflictError(
                    f"step {t} claims the background id {self.background_id}"
                )
            if self.ignore_id in step:
                raise ScheduleConflictError(f"step {t} claims the ignore id {self.ignore_id}")
            overlap = seen & step
            if overlap:
                raise ScheduleConflictError(f"step {t} reuses class ids {sorted(overlap)}")
            if t >= 1 and len(step) < 2:
                raise SingleClassStepError(
                    f"step {t} has {len(step)} class; incremental steps need >= 2"
                )
            if not step:
                raise ScheduleConflictError(f"step {t} is empty")
            seen |= step

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    def new_classes(self, t: int) -> frozenset[int]:
        """Class ids introduced at step ``t``."""
        return self.steps[t]

    def seen_classes(self, t: int) -> frozenset[int]:
        """Background plus every class id introduced up to and including ``t``."""
        ids = {self.background_id}
        for step in self.steps[: t + 1]:
            ids |= step
        return frozenset(ids)

    def old_classes(self, t: int) -> frozenset[int]:
        """Label set of the previous step (background included)."""
        if t == 0:
            return frozenset({self.background_id})
        return self.seen_classes(t - 1)

    def future_classes(self, t: int) -> frozenset[int]:
        ids: set[int] = set()
        for step in self.steps[t + 1 :]:
            ids |= step
        return frozenset(ids)

    def channel_order(self, t: int) -> list[int]:
        """Class ids in model-channel order for step ``t``."""
        order = [self.background_id]
        for step in self.steps[: t + 1]:
            order.extend(sorted(step))
        return order

    def name_of(self, class_id: int) -> str:
        if class_id == self.background_id:
            return self.names.get(class_id, "background")
        return self.names.get(class_id, f"class-{class_id}")


def _named_schedule(step_names: list[list[str]], all_names: tuple[str, ...]) -> IncrementalSchedule:
    # ids follow the canonical benchmark listing (VOC: alphabetical by the
    # original class names), so base ids precede incremental ids
    by_name = {name: i + 1 for i, name in enumerate(all_names)}
    steps = tuple(frozenset(by_name[n] for n in group) for group in step_names)
    names = {0: "background"} | {v: k for k, v in by_name.items()}
    return IncrementalSchedule(steps=steps, names=names)


def build_schedule(preset: str, custom_steps=None, names=None) -> IncrementalSchedule:
    """Build a schedule from a preset name or explicit ``custom_steps``.

    ``custom_steps`` is a list of class-id lists and must be given exactly
    when ``preset == "custom"``.
    """
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    if (custom_steps is not None) != (preset == "custom"):
        raise ConfigError("custom_steps must be given iff preset is 'custom'")

    if preset == "voc-15-5":
        return _named_schedule([list(VOC_CLASSES[:15]), list(VOC_CLASSES[15:])], VOC_CLASSES)
    if preset == "voc-10-10":
        return _named_schedule([list(VOC_CLASSES[:10]), list(VOC_CLASSES[10:])], VOC_CLASSES)
    if preset == "coco-to-voc":
        all_names = COCO_BASE_CLASSES + COCO_INCREMENT_CLASSES
        return _named_schedule([list(COCO_BASE_CLASSES), list(COCO_INCREMENT_CLASSES)], all_names)

    steps = tuple(frozenset(int(c) for c in group) for group in custom_steps)
    name_map = {0: "background"}
    if names:
        name_map |= {int(k): str(v) for k, v in names.items()}
    return IncrementalSchedule(steps=steps, names=name_map)


def export_schedule(schedule: IncrementalSchedule) -> str:
    """Render a schedule as a plain-text key-value document."""
    lines = [
        f"background = {schedule.background_id}",
        f"ignore = {schedule.ignore_id}",
    ]
    all_ids = sorted({c for step in schedule.steps for c in step})
    for cid in all_ids:
        lines.append(f"class.{cid} = {schedule.name_of(cid)}")
    for t, step in enumerate(schedule.steps):
        names = ", ".join(schedule.name_of(c) for c in sorted(step))
        lines.append(f"step.{t} = {names}")
    return "\n".join(lines) + "\n"


def import_schedule(text: str) -> IncrementalSchedule:
    """Parse the document produced by :func:`export_schedule`."""
    background_id, ignore_id = 0, 255
    names: dict[int, str] = {}
    step_names: dict[int, list[str]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        try:
            if key == "background":
                background_id = int(value)
            elif key == "ignore":
                ignore_id = int(value)
            elif key.startswith("class."):
                names[int(key[6:])] = value
            elif key.startswith("step."):
                step_names[int(key[5:])] = [v.strip() for v in value.split(",") if v.strip()]
            else:
                raise ParseError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from exc
    if not step_names:
        raise ParseError("no step.<t> entries found")
    by_name = {v: k for k, v in names.items()}
    steps = []
    for t in range(len(step_names)):
        if t not in step_names:
            raise ParseError(f"missing step.{t} entry")
        try:
            steps.append(frozenset(by_name[n] for n in step_names[t]))
        except KeyError as exc:
            raise ParseError(f"step.{t} references unknown class name {exc}") from exc
    names.setdefault(background_id, "background")
    return IncrementalSchedule(
        steps=tuple(steps), names=names, background_id=background_id, ignore_id=ignore_id
    )
