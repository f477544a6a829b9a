"""Turn final-block predictions into event lists.

Decoding thresholds each slot's class scores at tau_cls (inclusive, so a
score forced to exactly the threshold by fusion is emitted). Fusion
modifies the score matrix using the clip-level tag decisions before
decoding; de-overlapping then suppresses lower-probability same-class
events that intersect an already kept one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set

import numpy as np

from .data import TimedEvent
from .geometry import LabelVocabulary, Segment, ValidationError, boundary_to_segment


@dataclass(frozen=True)
class DecisionConfig:
    tau_cls: float = 0.5
    tau_tag: float = 0.5
    fusion: Optional[int] = None  # None or strategy 1 / 2 / 3
    de_overlap: bool = True

    def __post_init__(self) -> None:
        if not (0 < self.tau_cls < 1 and 0 < self.tau_tag < 1):
            raise ValidationError("thresholds must lie in (0, 1)")
        if self.fusion not in (None, 1, 2, 3):
            raise ValidationError(f"unknown fusion strategy {self.fusion!r}")


@dataclass(frozen=True)
class EventPrediction:
    class_id: int
    prob: float
    segment: Segment
    query_index: int


def active_tags(tag_probs: np.ndarray, tau_tag: float) -> Set[int]:
    """Classes the clip-level tag head declares present."""
    return {int(c) for c in np.flatnonzero(np.asarray(tag_probs) >= tau_tag)}


def fuse(
    scores: np.ndarray,
    tag_active: Set[int],
    strategy: Optional[int],
    tau_cls: float = 0.5,
) -> np.ndarray:
    """Apply a tag-fusion strategy to an (N, K+1) score matrix.

    Strategy 1 zeroes classes the tags call inactive. Strategies 2 and 3
    additionally make sure every tag-active class reaches the decision
    threshold somewhere: the slot already holding the class's best score is
    raised to exactly tau_cls. Strategy 3 skips the zeroing.
    """
    scores = np.array(scores, dtype=np.float64, copy=True)
    if strategy is None:
        return scores
    n_classes = scores.shape[1] - 1
    if strategy in (1, 2):
        for c in range(n_classes):
            if c not in tag_active:
                scores[:, c] = 0.0
    if strategy in (2, 3):
        for c in sorted(tag_active):
            col = scores[:, c]
            if col.max() < tau_cls:
                col[int(np.argmax(col))] = tau_cls
    return scores


def decode(
    boundaries: np.ndarray,
    scores: np.ndarray,
    clip_len_s: float,
    cfg: DecisionConfig = DecisionConfig(),
) -> List[EventPrediction]:
    """Emit an event for every (slot, class) whose score reaches tau_cls.

    The empty column never emits. For softmax score rows with tau_cls at
    0.5 at most one class per slot can qualify, so each slot yields at most
    one event unless fusion raised an extra class to the threshold.
    """
    boundaries = np.asarray(boundaries, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    n, width = scores.shape
    events: List[EventPrediction] = []
    for q in range(n):
        if boundaries[q, 1] <= 0:
            continue  # saturated duration output, nothing to emit
        for c in range(width - 1):
            if scores[q, c] >= cfg.tau_cls:
                seg = boundary_to_segment(tuple(boundaries[q]), clip_len_s)
                events.append(
                    EventPrediction(
                        class_id=c, prob=float(scores[q, c]), segment=seg, query_index=q
                    )
                )
    return events


def decode_clip(
    boundaries: np.ndarray,
    class_scores: np.ndarray,
    tag_probs: np.ndarray,
    clip_len_s: float,
    cfg: DecisionConfig = DecisionConfig(),
) -> List[EventPrediction]:
    """Full decision pipeline for one clip: fuse, decode, de-overlap."""
    tags = active_tags(tag_probs, cfg.tau_tag)
    scores = fuse(class_scores, tags, cfg.fusion, cfg.tau_cls)
    events = decode(boundaries, scores, clip_len_s, cfg)
    if cfg.de_overlap:
        events = de_overlap(events)
    return events


def _overlaps(a: Segment, b: Segment) -> bool:
    return min(a.offset_s, b.offset_s) - max(a.onset_s, b.onset_s) > 0


def de_overlap(events: Sequence[EventPrediction]) -> List[EventPrediction]:
    """Keep only the highest-probability event among same-class overlaps.

    Greedy per class in descending probability; touching endpoints do not
    count as overlap. Events of different classes never suppress each other.
    """
    kept: List[EventPrediction] = []
    by_class: Dict[int, List[EventPrediction]] = {}
    for ev in events:
        by_class.setdefault(ev.class_id, []).append(ev)
    for class_id in sorted(by_class):
        accepted: List[EventPrediction] = []
        candidates = sorted(
            by_class[class_id],
            key=lambda e: (-e.prob, e.segment.onset_s, e.query_index),
        )
        for ev in candidates:
            if not any(_overlaps(ev.segment, kept_ev.segment) for kept_ev in accepted):
                accepted.append(ev)
        kept.extend(accepted)
    kept.sort(key=lambda e: (e.segment.onset_s, e.class_id, e.query_index))
    return kept


def predictions_to_timed_events(
    events: Sequence[EventPrediction], vocab: LabelVocabulary
) -> List[TimedEvent]:
    return [
        TimedEvent(vocab.name(ev.class_id), ev.segment.onset_s, ev.segment.offset_s)
        for ev in events
    ]


def prediction_record(
    clip_id: str,
    events: Sequence[EventPrediction],
    tag_probs: np.ndarray,
    vocab: LabelVocabulary,
) -> dict:
    """One exportable JSON record for a clip's decoded output."""
    return {
        "clip_id": clip_id,
        "events": [
            {
                "label": vocab.name(ev.class_id),
                "onset_s": ev.segment.onset_s,
                "offset_s": ev.segment.offset_s,
                "prob": ev.prob,
                "query": ev.query_index,
            }
            for ev in events
        ],
        "tags": {vocab.name(c): float(p) for c, p in enumerate(tag_probs)},
    }


def write_predictions(records: Sequence[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
