"""Training objectives for strong, weak, and mixed supervision.

Per decoder block, predictions are matched to targets (one-to-one during
the learning stage, optionally expanded one-to-many during fine-tuning)
and charged a weighted GIoU + L1 location term plus a cross-entropy class
term; empty-matched slots are pushed toward the reserved empty class.
Clip-level tag terms are binary cross-entropies from the audio slot and,
for weakly labeled clips, from max-pooled event class probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .data import STRONG, ClipAnnotation, annotation_to_instances, tag_vector
from .geometry import EventInstance, LabelVocabulary, ValidationError
from .matching import (
    Assignment,
    FineTuneConfig,
    OneToManyAssignment,
    build_cost_matrix,
    hungarian,
    one_to_many,
)
from .model import ModelOutput

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_iou: float = 2.0
    lambda_l1: float = 5.0
    lambda_at: float = 3.0
    lambda_at_p: float = 0.25
    empty_class_weight: float = 1.0

    def __post_init__(self) -> None:
        for name in ("lambda_iou", "lambda_l1", "lambda_at", "lambda_at_p", "empty_class_weight"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        return {
            "lambda_iou": self.lambda_iou,
            "lambda_l1": self.lambda_l1,
            "lambda_at": self.lambda_at,
            "lambda_at_p": self.lambda_at_p,
            "empty_class_weight": self.empty_class_weight,
        }


@dataclass
class LossBreakdown:
    """Scalar components of one loss evaluation, for logs and tests."""

    block_loc: List[float] = field(default_factory=list)
    block_cls: List[float] = field(default_factory=list)
    tag: float = 0.0
    pooled_tag: float = 0.0
    total: float = 0.0

    def to_dict(self) -> dict:
        return {
            "loc": self.block_loc,
            "cls": self.block_cls,
            "tag": self.tag,
            "pooled_tag": self.pooled_tag,
            "total": self.total,
        }


def interval_giou_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batched 1-D GIoU over trailing (center, duration) pairs."""
    a0, a1 = a[..., 0] - a[..., 1] / 2, a[..., 0] + a[..., 1] / 2
    b0, b1 = b[..., 0] - b[..., 1] / 2, b[..., 0] + b[..., 1] / 2
    inter = (torch.minimum(a1, b1) - torch.maximum(a0, b0)).clamp(min=0)
    union = (a1 - a0) + (b1 - b0) - inter
    enclosure = torch.maximum(a1, b1) - torch.minimum(a0, b0)
    return inter / union - (enclosure - union) / enclosure


def pair_location_loss(
    target_b: torch.Tensor, pred_b: torch.Tensor, weights: LossWeights
) -> torch.Tensor:
    """Per-pair lambda_iou * (1 - GIoU) + lambda_l1 * L1, elementwise."""
    giou = interval_giou_t(target_b, pred_b)
    l1 = (target_b - pred_b).abs().sum(dim=-1)
    return weights.lambda_iou * (1.0 - giou) + weights.lambda_l1 * l1


def location_loss(
    target_boundaries: torch.Tensor,
    pred_boundaries: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    """Sum of pair location losses over matched (non-empty) pairs."""
    if target_boundaries.numel() == 0:
        return pred_boundaries.new_zeros(())
    return pair_location_loss(target_boundaries, pred_boundaries, weights).sum()


def _slot_targets(
    base: Assignment,
    extras: Dict[int, Tuple[int, ...]],
    targets: Sequence[EventInstance],
    n_slots: int,
    empty_index: int,
) -> Tuple[List[int], List[bool], List[int], List[Tuple[float, float]]]:
    """Resolve, per prediction slot, its class target and any location target.

    Slots matched to a real target (in the base assignment or absorbed as a
    one-to-many extra) take that target's class and boundary; the rest keep
    the empty class.
    """
    absorbed = {j: i for i, js in extras.items() for j in js}
    slot_class: List[int] = []
    is_empty: List[bool] = []
    loc_slots: List[int] = []
    loc_boundaries: List[Tuple[float, float]] = []
    for j in range(n_slots):
        col = base.perm[j]
        if col < len(targets):
            tgt: Optional[EventInstance] = targets[col]
        elif j in absorbed:
            tgt = targets[absorbed[j]]
        else:
            tgt = None
        if tgt is None:
            slot_class.append(empty_index)
            is_empty.append(True)
        else:
            slot_class.append(tgt.class_id)
            is_empty.append(False)
            loc_slots.append(j)
            loc_boundaries.append(tgt.boundary)
    return slot_class, is_empty, loc_slots, loc_boundaries


def classification_loss(
    assignment: Assignment,
    class_probs: torch.Tensor,
    targets: Sequence[EventInstance],
    empty_index: int,
    weights: LossWeights,
    extras: Optional[Dict[int, Tuple[int, ...]]] = None,
) -> torch.Tensor:
    """Weighted negative log probability of each slot's assigned class."""
    n = class_probs.shape[0]
    slot_class, is_empty, _, _ = _slot_targets(
        assignment, extras or {}, targets, n, empty_index
    )
    w = torch.tensor(
        [weights.empty_class_weight if e else 1.0 for e in is_empty],
        dtype=class_probs.dtype,
        device=class_probs.device,
    )
    picked = class_probs[torch.arange(n), torch.tensor(slot_class)]
    return -(w * torch.log(picked.clamp(min=PROB_FLOOR))).sum()


def one_to_many_loss(
    pred_boundaries: torch.Tensor,
    class_probs: torch.Tensor,
    targets: Sequence[EventInstance],
    otm: OneToManyAssignment,
    empty_index: int,
    weights: LossWeights,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Location and class terms for one block under an expanded assignment.

    Each target is charged against its base match and every extra attached
    to it; slots absorbed as extras lose their empty-class term. With no
    extras this is exactly the one-to-one block loss.
    """
    n = class_probs.shape[0]
    cls = classification_loss(
        otm.base, class_probs, targets, empty_index, weights, extras=otm.extras
    )
    _, _, loc_slots, loc_boundaries = _slot_targets(
        otm.base, otm.extras, targets, n, empty_index
    )
    if loc_slots:
        tb = torch.tensor(
            loc_boundaries, dtype=pred_boundaries.dtype, device=pred_boundaries.device
        )
        loc = location_loss(tb, pred_boundaries[loc_slots], weights)
    else:
        loc = pred_boundaries.new_zeros(())
    return loc, cls


def tagging_loss(tag_probs: torch.Tensor, y_tags: torch.Tensor) -> torch.Tensor:
    """Mean-per-class binary cross-entropy on the audio-slot tag vector."""
    p = tag_probs.clamp(min=PROB_FLOOR, max=1.0 - PROB_FLOOR)
    return -(y_tags * torch.log(p) + (1 - y_tags) * torch.log(1 - p)).mean()


def pooled_tagging_loss(class_probs: torch.Tensor, y_tags: torch.Tensor) -> torch.Tensor:
    """BCE against the per-class max over event slots (empty column excluded)."""
    pooled = class_probs[:, :-1].max(dim=0).values
    return tagging_loss(pooled, y_tags)


def match_block(
    boundaries: torch.Tensor,
    class_probs: torch.Tensor,
    targets: Sequence[EventInstance],
    weights: LossWeights,
    finetune: Optional[FineTuneConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> OneToManyAssignment:
    """Hungarian assignment for one block, expanded when fine-tuning."""
    np_probs = class_probs.detach().cpu().numpy()
    np_bounds = boundaries.detach().cpu().numpy()
    base = hungarian(build_cost_matrix(np_probs, np_bounds, targets, weights))
    if finetune is None:
        return OneToManyAssignment(base=base, extras={})
    return one_to_many(base, np_bounds, targets, finetune, weights, rng=rng)


def strong_clip_loss(
    output: ModelOutput,
    clip_index: int,
    targets: Sequence[EventInstance],
    y_tags: torch.Tensor,
    empty_index: int,
    weights: LossWeights,
    finetune: Optional[FineTuneConfig] = None,
    rng: Optional[np.random.Generator] = None,
    fixed_assignments: Optional[Sequence[OneToManyAssignment]] = None,
) -> Tuple[torch.Tensor, LossBreakdown]:
    """Deeply supervised block losses plus the weighted audio-tag term."""
    bd = LossBreakdown()
    total = output.boundaries.new_zeros(())
    for m in range(output.n_blocks):
        boundaries = output.boundaries[m, clip_index]
        class_probs = output.class_probs[m, clip_index]
        if fixed_assignments is not None:
            otm = fixed_assignments[m]
        else:
            otm = match_block(boundaries, class_probs, targets, weights, finetune, rng)
        loc, cls = one_to_many_loss(
            boundaries, class_probs, targets, otm, empty_index, weights
        )
        total = total + loc + cls
        bd.block_loc.append(float(loc.detach()))
        bd.block_cls.append(float(cls.detach()))
    tag = tagging_loss(output.tag_probs[clip_index], y_tags)
    total = total + weights.lambda_at * tag
    bd.tag = float(tag.detach())
    bd.total = float(total.detach())
    return total, bd


def weak_clip_loss(
    output: ModelOutput,
    clip_index: int,
    y_tags: torch.Tensor,
    weights: LossWeights,
) -> Tuple[torch.Tensor, LossBreakdown]:
    """Tag terms only: audio-slot BCE plus max-pooled event-class BCE."""
    tag = tagging_loss(output.tag_probs[clip_index], y_tags)
    pooled = pooled_tagging_loss(output.class_probs[-1, clip_index], y_tags)
    total = weights.lambda_at * tag + weights.lambda_at_p * pooled
    bd = LossBreakdown(
        tag=float(tag.detach()), pooled_tag=float(pooled.detach()), total=float(total.detach())
    )
    return total, bd


def mixed_batch_loss(
    output: ModelOutput,
    annotations: Sequence[ClipAnnotation],
    vocab: LabelVocabulary,
    weights: LossWeights,
    finetune: Optional[FineTuneConfig] = None,
    rng_for_clip: Optional[Callable[[int], np.random.Generator]] = None,
    fixed_assignments: Optional[Sequence[Optional[Sequence[OneToManyAssignment]]]] = None,
) -> Tuple[torch.Tensor, LossBreakdown]:
    """Mean over clips, routing each clip by its supervision flag."""
    if output.batch_size != len(annotations):
        raise ValidationError("batch size mismatch between output and annotations")
    dtype = output.tag_probs.dtype
    device = output.tag_probs.device
    total = output.boundaries.new_zeros(())
    agg = LossBreakdown(
        block_loc=[0.0] * output.n_blocks, block_cls=[0.0] * output.n_blocks
    )
    for b, ann in enumerate(annotations):
        y = torch.as_tensor(tag_vector(ann, vocab), dtype=dtype, device=device)
        if ann.supervision == STRONG:
            targets = annotation_to_instances(ann, vocab)
            rng = rng_for_clip(b) if rng_for_clip is not None else None
            fixed = fixed_assignments[b] if fixed_assignments is not None else None
            loss_b, bd = strong_clip_loss(
                output,
                b,
                targets,
                y,
                vocab.empty_index,
                weights,
                finetune=finetune,
                rng=rng,
                fixed_assignments=fixed,
            )
            for m in range(output.n_blocks):
                agg.block_loc[m] += bd.block_loc[m]
                agg.block_cls[m] += bd.block_cls[m]
        else:
            loss_b, bd = weak_clip_loss(output, b, y, weights)
            agg.pooled_tag += bd.pooled_tag
        agg.tag += bd.tag
        total = total + loss_b
    n = len(annotations)
    total = total / n
    agg.block_loc = [v / n for v in agg.block_loc]
    agg.block_cls = [v / n for v in agg.block_cls]
    agg.tag /= n
    agg.pooled_tag /= n
    agg.total = float(total.detach())
    return total, agg
