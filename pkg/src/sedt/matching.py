"""Bipartite assignment between predictions and (empty-padded) targets.

The cost matrix is square N x N: one row per prediction, columns for the
G real targets followed by N - G "empty" slots. Real-target cost combines
a negated class probability with a weighted GIoU + L1 location distance;
empty columns cost zero, so the solver implicitly decides which
predictions detect nothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from .geometry import EventInstance, ValidationError


def location_cost(
    target: Tuple[float, float], pred: Tuple[float, float], weights
) -> float:
    """Weighted GIoU-plus-L1 distance between two (center, duration) pairs."""
    tm, tl = target
    pm, pl = pred
    t0, t1 = tm - tl / 2.0, tm + tl / 2.0
    p0, p1 = pm - pl / 2.0, pm + pl / 2.0
    inter = max(0.0, min(t1, p1) - max(t0, p0))
    union = (t1 - t0) + (p1 - p0) - inter
    enclosure = max(t1, p1) - min(t0, p0)
    giou = inter / union - (enclosure - union) / enclosure
    l1 = abs(tm - pm) + abs(tl - pl)
    return weights.lambda_iou * (1.0 - giou) + weights.lambda_l1 * l1


def match_cost(
    class_prob_row: np.ndarray,
    pred_boundary: Tuple[float, float],
    target: Optional[EventInstance],
    weights,
) -> float:
    """Pairwise assignment cost; empty targets cost zero for any prediction."""
    if target is None:
        return 0.0
    return -float(class_prob_row[target.class_id]) + location_cost(
        target.boundary, pred_boundary, weights
    )


def build_cost_matrix(
    class_probs: np.ndarray,
    boundaries: np.ndarray,
    targets: Sequence[EventInstance],
    weights,
) -> np.ndarray:
    """N x N assignment costs with targets padded by empty slots."""
    n = class_probs.shape[0]
    g = len(targets)
    if g > n:
        raise ValidationError(f"{g} targets exceed the {n} prediction slots")
    cost = np.zeros((n, n), dtype=np.float64)
    for col, target in enumerate(targets):
        for row in range(n):
            cost[row, col] = match_cost(
                class_probs[row], tuple(boundaries[row]), target, weights
            )
    return cost


@dataclass(frozen=True)
class Assignment:
    """A minimum-cost bijection: perm[prediction] = target slot."""

    perm: Tuple[int, ...]
    total_cost: float

    def __post_init__(self) -> None:
        if sorted(self.perm) != list(range(len(self.perm))):
            raise ValidationError("assignment must be a permutation")

    def empty_matched(self, n_targets: int) -> Tuple[int, ...]:
        """Prediction indices assigned to empty slots."""
        return tuple(j for j, col in enumerate(self.perm) if col >= n_targets)


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-total-cost assignment via shortest augmenting paths, O(n^3)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValidationError(f"cost matrix must be square, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValidationError("cost matrix contains non-finite entries")
    n = cost.shape[0]
    c = cost.tolist()
    u = [0.0] * n  # row potentials
    v = [0.0] * (n + 1)  # column potentials, index n is the virtual start column
    col_to_row = [-1] * (n + 1)
    for i in range(n):
        col_to_row[n] = i
        j_cur = n
        min_to = [math.inf] * n
        prev_col = [n] * n
        used = [False] * (n + 1)
        while col_to_row[j_cur] != -1:
            used[j_cur] = True
            row = col_to_row[j_cur]
            delta = math.inf
            j_next = -1
            for j in range(n):
                if used[j]:
                    continue
                cur = c[row][j] - u[row] - v[j]
                if cur < min_to[j]:
                    min_to[j] = cur
                    prev_col[j] = j_cur
                if min_to[j] < delta:
                    delta = min_to[j]
                    j_next = j
            for j in range(n + 1):
                if used[j]:
                    u[col_to_row[j]] += delta
                    v[j] -= delta
                elif j < n:
                    min_to[j] -= delta
            j_cur = j_next
        while j_cur != n:  # walk the augmenting path back to the start
            j_prev = prev_col[j_cur]
            col_to_row[j_cur] = col_to_row[j_prev]
            j_cur = j_prev
    perm = [0] * n
    for j in range(n):
        perm[col_to_row[j]] = j
    total = float(sum(cost[col_to_row[j], j] for j in range(n)))
    return Assignment(perm=tuple(perm), total_cost=total)


@dataclass(frozen=True)
class FineTuneConfig:
    """One-to-many relaxation knobs: admission threshold and sampling rate.

    ``alpha`` may be the string "all" to retain every admitted prediction.
    """

    epsilon: float = 1.0
    alpha: Union[float, str] = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if math.isnan(self.epsilon):
            raise ValidationError("epsilon must not be NaN")
        if self.alpha != "all":
            if not isinstance(self.alpha, (int, float)) or self.alpha < 0:
                raise ValidationError(f"alpha must be >= 0 or 'all', got {self.alpha!r}")

    def retention_probability(self, n_targets: int, n_predictions: int) -> float:
        if self.alpha == "all":
            return 1.0
        return min(1.0, self.alpha * n_targets / n_predictions)


@dataclass(frozen=True)
class OneToManyAssignment:
    """A one-to-one base assignment plus sampled extra matches.

    ``extras`` maps a target index to prediction indices that were
    empty-matched in the base assignment but sit within the location-cost
    threshold of that target.
    """

    base: Assignment
    extras: Dict[int, Tuple[int, ...]]

    def __post_init__(self) -> None:
        seen = set()
        for preds in self.extras.values():
            for j in preds:
                if j in seen:
                    raise ValidationError("extra prediction assigned twice")
                seen.add(j)

    def extra_count(self) -> int:
        return sum(len(v) for v in self.extras.values())

    def absorbed(self) -> frozenset:
        """Predictions that joined some target's matched set as extras."""
        return frozenset(j for preds in self.extras.values() for j in preds)


def one_to_many(
    base: Assignment,
    boundaries: np.ndarray,
    targets: Sequence[EventInstance],
    cfg: FineTuneConfig,
    weights,
    rng: Optional[np.random.Generator] = None,
) -> OneToManyAssignment:
    """Attach well-located empty-matched predictions to their nearest targets.

    For each empty-matched prediction the nearest target (by location cost,
    ties to the lowest target index) is found; predictions whose distance is
    strictly below ``cfg.epsilon`` are each retained independently with
    probability min(1, alpha * G / N) and joined to that target's set.
    """
    n = len(base.perm)
    g = len(targets)
    if g == 0:
        return OneToManyAssignment(base=base, extras={})
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    p_keep = cfg.retention_probability(g, n)
    extras: Dict[int, list] = {}
    for j in base.empty_matched(g):
        costs = [
            location_cost(t.boundary, tuple(boundaries[j]), weights) for t in targets
        ]
        nearest = int(np.argmin(costs))
        if costs[nearest] < cfg.epsilon and rng.uniform() < p_keep:
            extras.setdefault(nearest, []).append(j)
    return OneToManyAssignment(
        base=base, extras={i: tuple(v) for i, v in extras.items()}
    )
