"""Event geometry: normalized (center, duration) boundaries and interval IoU.

An event boundary lives in normalized clip coordinates: ``center`` and
``duration`` are fractions of the clip length. The raw interval
``[center - duration/2, center + duration/2]`` may poke past the clip edge;
clamping to ``[0, 1]`` happens only when converting to seconds.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

Boundary = Tuple[float, float]


class ValidationError(ValueError):
    """Raised when a value violates a documented invariant."""


@dataclass(frozen=True)
class LabelVocabulary:
    """Ordered event class names plus the reserved trailing "empty" slot.

    ``empty_index`` equals ``len(classes)``; class ids 0..K-1 are real events.
    """

    classes: Tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.classes) < 1:
            raise ValidationError("vocabulary needs at least one class")
        if len(set(self.classes)) != len(self.classes):
            raise ValidationError("class names must be unique")
        object.__setattr__(self, "classes", tuple(self.classes))

    @property
    def size(self) -> int:
        return len(self.classes)

    @property
    def empty_index(self) -> int:
        return len(self.classes)

    def index(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise ValidationError(f"unknown class name: {name!r}") from None

    def name(self, class_id: int) -> str:
        if not 0 <= class_id < len(self.classes):
            raise ValidationError(f"class id {class_id} out of range")
        return self.classes[class_id]

    def __contains__(self, name: str) -> bool:
        return name in self.classes


def make_vocabulary(classes: Sequence[str]) -> LabelVocabulary:
    return LabelVocabulary(tuple(classes))


@dataclass(frozen=True)
class EventInstance:
    """One target event: class id plus normalized (center, duration)."""

    class_id: int
    center: float
    duration: float

    def __post_init__(self) -> None:
        if self.class_id < 0:
            raise ValidationError("class_id must be non-negative")
        if not 0.0 <= self.center <= 1.0:
            raise ValidationError(f"center {self.center} outside [0, 1]")
        if not 0.0 < self.duration <= 1.0:
            raise ValidationError(f"duration {self.duration} outside (0, 1]")

    @property
    def boundary(self) -> Boundary:
        return (self.center, self.duration)


@dataclass(frozen=True)
class Segment:
    """A time interval in seconds."""

    onset_s: float
    offset_s: float

    def __post_init__(self) -> None:
        if self.onset_s < 0:
            raise ValidationError(f"onset {self.onset_s} is negative")
        if self.offset_s < self.onset_s:
            raise ValidationError(
                f"offset {self.offset_s} precedes onset {self.onset_s}"
            )

    @property
    def length(self) -> float:
        return self.offset_s - self.onset_s


def _clamp01(x: float) -> float:
    return min(1.0, max(0.0, x))


def _check_boundary(b: Boundary, require_positive_length: bool = False) -> None:
    m, l = b
    if not 0.0 <= m <= 1.0:
        raise ValidationError(f"center {m} outside [0, 1]")
    if not 0.0 <= l <= 1.0:
        raise ValidationError(f"duration {l} outside [0, 1]")
    if require_positive_length and l <= 0.0:
        raise ValidationError("duration must be positive")


def boundary_to_segment(b: Boundary, clip_len_s: float) -> Segment:
    """Convert a normalized (center, duration) boundary to a clip segment.

    Endpoints that cross the clip edge are clamped to [0, clip_len_s].
    """
    _check_boundary(b, require_positive_length=True)
    if clip_len_s <= 0:
        raise ValidationError(f"clip length {clip_len_s} must be positive")
    m, l = b
    onset = _clamp01(m - l / 2.0) * clip_len_s
    offset = _clamp01(m + l / 2.0) * clip_len_s
    return Segment(onset, offset)


def segment_to_boundary(seg: Segment, clip_len_s: float) -> Boundary:
    """Inverse of :func:`boundary_to_segment` for segments inside the clip."""
    if clip_len_s <= 0:
        raise ValidationError(f"clip length {clip_len_s} must be positive")
    if seg.onset_s < 0 or seg.offset_s > clip_len_s:
        raise ValidationError(
            f"segment [{seg.onset_s}, {seg.offset_s}] outside clip of {clip_len_s}s"
        )
    if seg.length <= 0:
        raise ValidationError("segment must have positive length")
    m = (seg.onset_s + seg.offset_s) / 2.0 / clip_len_s
    l = seg.length / clip_len_s
    return (m, l)


def _endpoints(b: Boundary) -> Tuple[float, float]:
    m, l = b
    return (m - l / 2.0, m + l / 2.0)


def interval_iou(a: Boundary, b: Boundary) -> float:
    """Intersection over union of two (center, duration) intervals."""
    _check_boundary(a, require_positive_length=True)
    _check_boundary(b, require_positive_length=True)
    a0, a1 = _endpoints(a)
    b0, b1 = _endpoints(b)
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = (a1 - a0) + (b1 - b0) - inter
    return inter / union


def interval_giou(a: Boundary, b: Boundary) -> float:
    """Generalized IoU: IoU minus the dead fraction of the enclosing interval.

    Equals IoU when the intervals overlap or touch; goes negative (bounded
    below by -1) as they separate, which keeps a useful gradient for
    disjoint intervals.
    """
    _check_boundary(a, require_positive_length=True)
    _check_boundary(b, require_positive_length=True)
    a0, a1 = _endpoints(a)
    b0, b1 = _endpoints(b)
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = (a1 - a0) + (b1 - b0) - inter
    enclosure = max(a1, b1) - min(a0, b0)
    return inter / union - (enclosure - union) / enclosure
