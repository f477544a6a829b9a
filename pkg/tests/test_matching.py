"""Assignment solver against brute force, and the one-to-many relaxation."""

import itertools
import math

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from sedt.geometry import EventInstance, ValidationError
from sedt.losses import LossWeights
from sedt.matching import (
    Assignment,
    FineTuneConfig,
    OneToManyAssignment,
    build_cost_matrix,
    hungarian,
    location_cost,
    match_cost,
    one_to_many,
)

W = LossWeights(lambda_iou=2.0, lambda_l1=5.0)


def brute_force_min(cost: np.ndarray) -> float:
    n = cost.shape[0]
    best = math.inf
    rows = np.arange(n)
    for perm in itertools.permutations(range(n)):
        best = min(best, float(cost[rows, list(perm)].sum()))
    return best


class TestMatchCost:
    def test_perfect_prediction(self):
        target = EventInstance(class_id=1, center=0.5, duration=0.2)
        probs = np.array([0.0, 1.0, 0.0])
        assert match_cost(probs, (0.5, 0.2), target, W) == pytest.approx(-1.0)

    def test_empty_target_is_free(self):
        probs = np.array([0.9, 0.05, 0.05])
        assert match_cost(probs, (0.1, 0.9), None, W) == 0.0

    def test_splits_into_class_and_location_terms(self):
        target = EventInstance(class_id=0, center=0.3, duration=0.2)
        pred_b = (0.4, 0.3)
        probs = np.array([0.5, 0.5])
        expected = -0.5 + location_cost((0.3, 0.2), pred_b, W)
        assert match_cost(probs, pred_b, target, W) == pytest.approx(expected, abs=1e-12)

    def test_worked_example_value(self):
        # p=0.5, giou=0.5, l1=0.1 under weights (2, 5): -0.5 + 1.0 + 0.5
        p_term = -0.5
        loc_term = 2.0 * (1.0 - 0.5) + 5.0 * 0.1
        assert p_term + loc_term == pytest.approx(1.0)


class TestHungarian:
    def test_identity_on_diagonal_costs(self):
        cost = np.ones((4, 4)) - np.eye(4)
        a = hungarian(cost)
        assert a.perm == (0, 1, 2, 3)
        assert a.total_cost == 0.0

    def test_two_by_two(self):
        a = hungarian(np.array([[1.0, 2.0], [3.0, 1.0]]))
        assert a.perm == (0, 1)
        assert a.total_cost == pytest.approx(2.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(123)
        for n in range(2, 8):
            for _ in range(200):
                cost = rng.uniform(-5, 5, size=(n, n))
                a = hungarian(cost)
                assert a.total_cost == pytest.approx(brute_force_min(cost), abs=1e-9)

    def test_matches_scipy(self):
        rng = np.random.default_rng(7)
        for n in (3, 8, 15, 20):
            for _ in range(20):
                cost = rng.standard_normal((n, n)) * 10
                a = hungarian(cost)
                r, c = linear_sum_assignment(cost)
                assert a.total_cost == pytest.approx(float(cost[r, c].sum()), abs=1e-9)

    def test_scale_covariance(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            cost = rng.uniform(0.1, 4, size=(5, 5))
            for scale in (0.5, 3.0, 100.0):
                scaled = hungarian(cost * scale)
                assert scaled.total_cost == pytest.approx(
                    brute_force_min(cost * scale), abs=1e-9
                )

    def test_total_cost_equals_selected_entries(self):
        rng = np.random.default_rng(9)
        cost = rng.standard_normal((6, 6))
        a = hungarian(cost)
        picked = sum(cost[i, a.perm[i]] for i in range(6))
        assert a.total_cost == pytest.approx(picked, abs=1e-12)

    def test_rejects_bad_input(self):
        with pytest.raises(ValidationError):
            hungarian(np.full((3, 3), np.nan))
        with pytest.raises(ValidationError):
            hungarian(np.zeros((2, 3)))


class TestCostMatrix:
    def test_empty_columns_are_zero(self):
        probs = np.full((4, 3), 1 / 3)
        bounds = np.tile([0.5, 0.2], (4, 1))
        targets = [EventInstance(0, 0.5, 0.2)]
        cost = build_cost_matrix(probs, bounds, targets, W)
        assert cost.shape == (4, 4)
        assert np.all(cost[:, 1:] == 0)
        assert np.all(cost[:, 0] == pytest.approx(-1 / 3))

    def test_too_many_targets_rejected(self):
        probs = np.full((1, 2), 0.5)
        bounds = np.array([[0.5, 0.2]])
        targets = [EventInstance(0, 0.5, 0.2), EventInstance(0, 0.4, 0.2)]
        with pytest.raises(ValidationError):
            build_cost_matrix(probs, bounds, targets, W)


def _otm_fixture():
    """10 predictions, 2 targets; 5 empty-matched are within epsilon=1."""
    targets = [EventInstance(0, 0.3, 0.2), EventInstance(1, 0.7, 0.2)]
    bounds = np.zeros((10, 2))
    bounds[0] = (0.3, 0.2)
    bounds[1] = (0.7, 0.2)
    for j in range(2, 7):  # near target 0, location cost well under 1
        bounds[j] = (0.3 + 0.001 * j, 0.2)
    for j in range(7, 10):  # far from both targets
        bounds[j] = (0.95, 0.05)
    base = Assignment(perm=tuple(range(10)), total_cost=0.0)
    return base, bounds, targets


class TestOneToMany:
    def test_epsilon_below_all_costs_keeps_base(self):
        base, bounds, targets = _otm_fixture()
        cfg = FineTuneConfig(epsilon=-math.inf, alpha=1.0, seed=0)
        otm = one_to_many(base, bounds, targets, cfg, W)
        assert otm.extras == {}

    def test_alpha_zero_keeps_base(self):
        base, bounds, targets = _otm_fixture()
        cfg = FineTuneConfig(epsilon=1.0, alpha=0.0, seed=0)
        otm = one_to_many(base, bounds, targets, cfg, W)
        assert otm.extras == {}

    def test_no_targets_keeps_base(self):
        base = Assignment(perm=(0, 1, 2), total_cost=0.0)
        cfg = FineTuneConfig(epsilon=1.0, alpha=1.0)
        otm = one_to_many(base, np.tile([0.5, 0.2], (3, 1)), [], cfg, W)
        assert otm.extras == {}

    def test_all_mode_retains_every_admitted_prediction(self):
        base, bounds, targets = _otm_fixture()
        cfg = FineTuneConfig(epsilon=1.0, alpha="all", seed=0)
        otm = one_to_many(base, bounds, targets, cfg, W)
        assert otm.extra_count() == 5
        assert otm.absorbed() == frozenset(range(2, 7))
        assert set(otm.extras) == {0}  # all near target 0

    def test_extras_are_subset_of_empty_matched(self):
        base, bounds, targets = _otm_fixture()
        rng = np.random.default_rng(77)
        for seed in range(50):
            cfg = FineTuneConfig(epsilon=rng.uniform(0, 5), alpha=1.0, seed=seed)
            otm = one_to_many(base, bounds, targets, cfg, W)
            assert otm.absorbed() <= set(base.empty_matched(len(targets)))

    def test_epsilon_monotone(self):
        base, bounds, targets = _otm_fixture()
        sizes = []
        for eps in (-1.0, 0.05, 0.5, 1.0, 5.0, 50.0):
            cfg = FineTuneConfig(epsilon=eps, alpha="all", seed=0)
            sizes.append(one_to_many(base, bounds, targets, cfg, W).extra_count())
        assert sizes == sorted(sizes)
        assert sizes[-1] == 8  # every empty-matched prediction admitted

    def test_retention_statistics(self):
        base, bounds, targets = _otm_fixture()
        cfg = FineTuneConfig(epsilon=1.0, alpha=1.0)
        counts = []
        for i in range(10_000):
            rng = np.random.default_rng([999, i])
            otm = one_to_many(base, bounds, targets, cfg, W, rng=rng)
            counts.append(otm.extra_count())
        mean = float(np.mean(counts))
        # 5 admitted, each kept with prob alpha*G/N = 0.2 -> expectation 1.0
        assert abs(mean - 1.0) <= 0.05

    def test_deterministic_under_seed(self):
        base, bounds, targets = _otm_fixture()
        cfg = FineTuneConfig(epsilon=1.0, alpha=1.0, seed=5)
        a = one_to_many(base, bounds, targets, cfg, W)
        b = one_to_many(base, bounds, targets, cfg, W)
        assert a.extras == b.extras

    def test_argmin_tie_breaks_to_lowest_target(self):
        targets = [EventInstance(0, 0.4, 0.2), EventInstance(1, 0.4, 0.2)]
        bounds = np.array([[0.4, 0.2], [0.4, 0.2], [0.6, 0.2]])
        base = Assignment(perm=(0, 1, 2), total_cost=0.0)
        cfg = FineTuneConfig(epsilon=100.0, alpha="all", seed=0)
        otm = one_to_many(base, bounds, targets, cfg, W)
        assert otm.extras == {0: (2,)}

    def test_invalid_config_rejected(self):
        with pytest.raises(ValidationError):
            FineTuneConfig(epsilon=math.nan)
        with pytest.raises(ValidationError):
            FineTuneConfig(alpha=-0.5)
        with pytest.raises(ValidationError):
            FineTuneConfig(alpha="most")
