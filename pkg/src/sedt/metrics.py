"""Event-based, segment-based, and clip-tagging F-scores.

Event scoring matches predictions to same-class references one-to-one via
maximum bipartite matching on a collar-eligibility graph, which makes the
counts independent of event order. Segment scoring rasterizes activity
onto a fixed 1 s grid. Macro averages run over every class seen in the
references or the predictions; classes absent from both are skipped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from .data import TimedEvent
from .geometry import ValidationError


@dataclass(frozen=True)
class EventBasedConfig:
    onset_collar_s: float = 0.2
    offset_collar_s: float = 0.2
    offset_collar_frac: float = 0.2

    def __post_init__(self) -> None:
        if min(self.onset_collar_s, self.offset_collar_s, self.offset_collar_frac) <= 0:
            raise ValidationError("collars must be positive")


@dataclass(frozen=True)
class ClassCounts:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


@dataclass(frozen=True)
class MetricsReport:
    per_class: Dict[str, ClassCounts]
    macro_f1: float

    def to_dict(self) -> dict:
        return {
            "macro_f1": self.macro_f1,
            "per_class": {
                name: {
                    "tp": c.tp,
                    "fp": c.fp,
                    "fn": c.fn,
                    "precision": c.precision,
                    "recall": c.recall,
                    "f1": c.f1,
                }
                for name, c in sorted(self.per_class.items())
            },
        }


def _report(counts: Dict[str, List[int]]) -> MetricsReport:
    per_class = {name: ClassCounts(*vals) for name, vals in counts.items()}
    macro = (
        sum(c.f1 for c in per_class.values()) / len(per_class) if per_class else 0.0
    )
    return MetricsReport(per_class=per_class, macro_f1=macro)


def _observed_classes(*event_maps: Mapping[str, Sequence[TimedEvent]]) -> Set[str]:
    classes: Set[str] = set()
    for events_by_clip in event_maps:
        for events in events_by_clip.values():
            classes.update(ev.label for ev in events)
    return classes


def max_bipartite_matching(eligible: np.ndarray) -> int:
    """Size of a maximum matching of rows to columns (augmenting paths)."""
    n_left, n_right = eligible.shape
    match_right = [-1] * n_right

    def try_assign(i: int, visited: List[bool]) -> bool:
        for j in range(n_right):
            if eligible[i, j] and not visited[j]:
                visited[j] = True
                if match_right[j] == -1 or try_assign(match_right[j], visited):
                    match_right[j] = i
                    return True
        return False

    matched = 0
    for i in range(n_left):
        if try_assign(i, [False] * n_right):
            matched += 1
    return matched


def event_based_f1(
    preds_by_clip: Mapping[str, Sequence[TimedEvent]],
    refs_by_clip: Mapping[str, Sequence[TimedEvent]],
    cfg: EventBasedConfig = EventBasedConfig(),
    classes: Optional[Iterable[str]] = None,
) -> MetricsReport:
    """Collar-based event scoring.

    A prediction may match a same-clip same-class reference when its onset
    is within the onset collar and its offset within
    max(offset_collar_s, offset_collar_frac * reference length).
    """
    class_list = sorted(classes) if classes is not None else sorted(
        _observed_classes(preds_by_clip, refs_by_clip)
    )
    known = set(class_list)
    counts = {name: [0, 0, 0] for name in class_list}
    clip_ids = set(preds_by_clip) | set(refs_by_clip)
    for clip_id in clip_ids:
        preds = list(preds_by_clip.get(clip_id, ()))
        refs = list(refs_by_clip.get(clip_id, ()))
        for ev in preds + refs:
            if ev.label not in known:
                raise ValidationError(f"unknown class name {ev.label!r}")
        for name in class_list:
            p = [ev for ev in preds if ev.label == name]
            r = [ev for ev in refs if ev.label == name]
            if not p and not r:
                continue
            eligible = np.zeros((len(p), len(r)), dtype=bool)
            for i, pe in enumerate(p):
                for j, re in enumerate(r):
                    ref_len = re.offset_s - re.onset_s
                    offset_collar = max(
                        cfg.offset_collar_s, cfg.offset_collar_frac * ref_len
                    )
                    eligible[i, j] = (
                        abs(pe.onset_s - re.onset_s) <= cfg.onset_collar_s
                        and abs(pe.offset_s - re.offset_s) <= offset_collar
                    )
            tp = max_bipartite_matching(eligible)
            counts[name][0] += tp
            counts[name][1] += len(p) - tp
            counts[name][2] += len(r) - tp
    return _report(counts)


def segment_based_f1(
    preds_by_clip: Mapping[str, Sequence[TimedEvent]],
    refs_by_clip: Mapping[str, Sequence[TimedEvent]],
    clip_lens: Mapping[str, float],
    seg_len_s: float = 1.0,
    classes: Optional[Iterable[str]] = None,
) -> MetricsReport:
    """Fixed-grid activity scoring; the last segment may be shorter.

    A class is active in a segment when some event of that class intersects
    it with positive length.
    """
    if seg_len_s <= 0:
        raise ValidationError("segment length must be positive")
    class_list = sorted(classes) if classes is not None else sorted(
        _observed_classes(preds_by_clip, refs_by_clip)
    )
    counts = {name: [0, 0, 0] for name in class_list}
    clip_ids = set(preds_by_clip) | set(refs_by_clip)
    for clip_id in clip_ids:
        clip_len = clip_lens[clip_id]
        n_segs = int(np.ceil(clip_len / seg_len_s))
        for name in class_list:
            p_active = _active_segments(
                preds_by_clip.get(clip_id, ()), name, n_segs, seg_len_s, clip_len
            )
            r_active = _active_segments(
                refs_by_clip.get(clip_id, ()), name, n_segs, seg_len_s, clip_len
            )
            counts[name][0] += int(np.sum(p_active & r_active))
            counts[name][1] += int(np.sum(p_active & ~r_active))
            counts[name][2] += int(np.sum(~p_active & r_active))
    return _report(counts)


def _active_segments(
    events: Sequence[TimedEvent],
    label: str,
    n_segs: int,
    seg_len_s: float,
    clip_len: float,
) -> np.ndarray:
    active = np.zeros(n_segs, dtype=bool)
    for ev in events:
        if ev.label != label:
            continue
        for s in range(n_segs):
            lo = s * seg_len_s
            hi = min((s + 1) * seg_len_s, clip_len)
            if min(ev.offset_s, hi) - max(ev.onset_s, lo) > 0:
                active[s] = True
    return active


def tagging_macro_f1(
    tag_probs_by_clip: Mapping[str, Mapping[str, float]],
    refs_by_clip: Mapping[str, Set[str]],
    tau: float = 0.5,
) -> MetricsReport:
    """Clip-level multi-label F1 from per-class probabilities at threshold tau."""
    observed: Set[str] = set()
    for clip_id, probs in tag_probs_by_clip.items():
        observed.update(name for name, p in probs.items() if p >= tau)
    for tags in refs_by_clip.values():
        observed.update(tags)
    counts = {name: [0, 0, 0] for name in sorted(observed)}
    for clip_id, probs in tag_probs_by_clip.items():
        truth = refs_by_clip.get(clip_id, set())
        for name in counts:
            predicted = probs.get(name, 0.0) >= tau
            if predicted and name in truth:
                counts[name][0] += 1
            elif predicted:
                counts[name][1] += 1
            elif name in truth:
                counts[name][2] += 1
    return _report(counts)


def format_report_table(
    eb: MetricsReport, sb: MetricsReport, at: MetricsReport
) -> str:
    """Plain-text table with the event, segment, and tagging macro scores."""
    lines = [f"{'':<16}{'Eb[%]':>8}{'Sb[%]':>8}{'At[%]':>8}"]
    lines.append(
        f"{'macro F1':<16}{eb.macro_f1 * 100:>8.2f}{sb.macro_f1 * 100:>8.2f}"
        f"{at.macro_f1 * 100:>8.2f}"
    )
    classes = sorted(set(eb.per_class) | set(sb.per_class) | set(at.per_class))
    for name in classes:
        cells = []
        for report in (eb, sb, at):
            c = report.per_class.get(name)
            cells.append(f"{c.f1 * 100:>8.2f}" if c is not None else f"{'-':>8}")
        lines.append(f"{name:<16}" + "".join(cells))
    return "\n".join(lines)
