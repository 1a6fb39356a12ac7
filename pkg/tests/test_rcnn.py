import logging

import numpy as np
import pytest

from wsodet.boxgeom import Box, boxes_to_array
from wsodet.gradcore import finite_diff_check, softmax_over_classes
from wsodet.harness.selfcheck import random_boxes
from wsodet.rcnn import (
    RcnnTargets,
    WH_CLAMP,
    apply_regression,
    assign_rcnn_targets,
    encode_deltas,
    rcnn_loss,
    smooth_l1,
)
from wsodet.sce import Seed, SeedSet


class TestEncodeDeltas:
    def test_identity_pair(self):
        arr = np.array([[0.0, 0.0, 10.0, 10.0]])
        deltas = encode_deltas(arr, arr)
        assert np.allclose(deltas, 0.0, atol=1e-15)

    def test_known_shift_and_scale(self):
        prop = np.array([[0.0, 0.0, 10.0, 10.0]])
        seed = np.array([[0.0, 0.0, 20.0, 10.0]])
        deltas = encode_deltas(prop, seed)
        assert deltas[0, 0] == pytest.approx(0.5)  # (10 - 5) / 10
        assert deltas[1, 0] == pytest.approx(0.0)
        assert deltas[2, 0] == pytest.approx(np.log(2.0))
        assert deltas[3, 0] == pytest.approx(0.0)


class TestAssignRcnnTargets:
    def test_proposal_equal_to_seed(self):
        box = Box(5, 5, 25, 30)
        seeds = SeedSet([Seed(box=box, cls=2, confidence=0.8, index=0)])
        t = assign_rcnn_targets([box], seeds, 0.5, num_classes=4)
        assert t.labels[0] == 2
        assert t.weights[0] == pytest.approx(0.8)
        assert t.reg_mask[0]
        assert np.allclose(t.reg_targets[:, 0], 0.0, atol=1e-12)

    def test_background_has_no_regression(self):
        seeds = SeedSet([Seed(box=Box(0, 0, 10, 10), cls=1, confidence=0.5, index=0)])
        t = assign_rcnn_targets([Box(60, 60, 90, 90)], seeds, 0.5, num_classes=4)
        assert t.labels[0] == 4
        assert not t.reg_mask[0]

    def test_classification_matches_mcc_assignment(self):
        from wsodet.sce import assign_mcc_targets

        rng = np.random.default_rng(0)
        arr = random_boxes(rng, 40)
        s_arr = random_boxes(rng, 5)
        seeds = SeedSet(
            [
                Seed(box=Box(*s_arr[i]), cls=int(rng.integers(3)),
                     confidence=float(rng.uniform(0.2, 1)))
                for i in range(5)
            ]
        )
        got = assign_rcnn_targets(arr, seeds, 0.5, num_classes=3)
        want = assign_mcc_targets(arr, seeds, 0.5, num_classes=3)
        assert np.array_equal(got.labels, want.labels)
        assert np.array_equal(got.weights, want.weights)

    def test_degenerate_foreground_excluded_with_warning(self, caplog):
        seed_box = Box(0, 0, 0, 10)  # zero width
        seeds = SeedSet([Seed(box=seed_box, cls=0, confidence=1.0, index=0)])
        # the degenerate proposal coincides with the degenerate seed: IoU is 0
        # by the zero-union convention, so force the foreground path with a
        # normal seed and a zero-height proposal instead
        prop = Box(0, 0, 10, 0)
        seeds2 = SeedSet([Seed(box=Box(0, 0, 10, 0.4), cls=0, confidence=1.0, index=0)])
        with caplog.at_level(logging.WARNING):
            t = assign_rcnn_targets([prop], seeds2, 0.0, num_classes=2)
        assert t.labels[0] == 0  # still classified foreground
        assert not t.reg_mask[0]
        assert any("degenerate" in rec.message for rec in caplog.records)


class TestSmoothL1:
    def test_piecewise_values(self):
        v, d = smooth_l1(np.array([0.5, 2.0, -2.0, 1.0]))
        assert v[0] == pytest.approx(0.125)
        assert v[1] == pytest.approx(1.5)
        assert v[2] == pytest.approx(1.5)
        assert d[1] == 1.0 and d[2] == -1.0

    def test_continuity_at_kink(self):
        eps = 1e-9
        below, _ = smooth_l1(np.array([1.0 - eps]))
        above, _ = smooth_l1(np.array([1.0 + eps]))
        assert abs(below[0] - above[0]) < 1e-8
        _, d_below = smooth_l1(np.array([1.0 - eps]))
        _, d_above = smooth_l1(np.array([1.0 + eps]))
        assert abs(d_below[0] - d_above[0]) < 1e-8


class TestRcnnLoss:
    def _targets(self, labels, weights, reg_targets=None, reg_mask=None, n=None):
        n = n or len(labels)
        return RcnnTargets(
            labels=np.asarray(labels),
            weights=np.asarray(weights, dtype=float),
            reg_targets=np.zeros((4, n)) if reg_targets is None else reg_targets,
            reg_mask=np.zeros(n, dtype=bool) if reg_mask is None else reg_mask,
        )

    def test_all_background_no_regression_term(self):
        from wsodet.sce import MccTargets, mcc_loss

        probs = np.full((3, 4), 1 / 3)
        targets = self._targets([2, 2, 2, 2], [1, 1, 1, 1])
        out = rcnn_loss(probs, np.zeros((4, 4)), targets)
        assert out.reg.value == 0.0
        want = mcc_loss(probs, MccTargets(np.array([2, 2, 2, 2]), np.ones(4)))
        assert out.cls.value == pytest.approx(want.value, abs=1e-12)
        assert out.total == pytest.approx(out.cls.value)

    def test_exact_regression_zero_loss(self):
        reg_t = np.zeros((4, 1))
        targets = self._targets([0], [1.0], reg_t, np.array([True]))
        out = rcnn_loss(np.array([[0.9], [0.1]]), np.zeros((4, 1)), targets)
        assert out.reg.value == 0.0

    def test_unit_weight_contribution_above_kink(self):
        # a single coordinate off by 2 contributes |2| - 0.5 = 1.5
        reg_t = np.zeros((4, 1))
        deltas = np.zeros((4, 1))
        deltas[0, 0] = 2.0
        targets = self._targets([0], [1.0], reg_t, np.array([True]))
        out = rcnn_loss(np.array([[1.0], [0.0]]), deltas, targets)
        assert out.reg.value == pytest.approx(1.5)

    def test_gradients_pass_finite_difference(self):
        rng = np.random.default_rng(1)
        c, n = 3, 5
        labels = np.array([0, 2, 3, 1, 3])
        weights = rng.uniform(0.1, 1.0, n)
        reg_mask = labels < c
        reg_targets = rng.normal(0, 0.5, (4, n)) * reg_mask
        targets = self._targets(labels, weights, reg_targets, reg_mask)

        def fn(point):
            logits = point[: (c + 1) * n].reshape(c + 1, n)
            deltas = point[(c + 1) * n :].reshape(4, n)
            out = rcnn_loss(softmax_over_classes(logits), deltas, targets)
            return out.total, np.concatenate([out.cls.grad.ravel(), out.reg.grad.ravel()])

        for _ in range(20):
            point = rng.normal(0, 1.0, (c + 1) * n + 4 * n)
            assert finite_diff_check(fn, point, epsilon=1e-5) <= 1e-5

    def test_class_specific_variant(self):
        rng = np.random.default_rng(2)
        c, n = 2, 3
        labels = np.array([0, 1, 2])
        weights = np.ones(n)
        reg_mask = labels < c
        reg_targets = rng.normal(0, 0.5, (4, n)) * reg_mask
        targets = self._targets(labels, weights, reg_targets, reg_mask)

        def fn(point):
            logits = point[: (c + 1) * n].reshape(c + 1, n)
            deltas = point[(c + 1) * n :].reshape(4 * c, n)
            out = rcnn_loss(
                softmax_over_classes(logits), deltas, targets,
                num_classes=c, class_specific=True,
            )
            return out.total, np.concatenate([out.cls.grad.ravel(), out.reg.grad.ravel()])

        point = rng.normal(0, 1.0, (c + 1) * n + 4 * c * n)
        assert finite_diff_check(fn, point, epsilon=1e-5) <= 1e-5


class TestApplyRegression:
    def test_zero_deltas_identity(self):
        arr = random_boxes(np.random.default_rng(3), 6)
        out = apply_regression(arr, np.zeros((4, 6)))
        assert np.allclose(out, arr, atol=1e-12)

    def test_known_decode(self):
        deltas = np.array([[0.5], [0.0], [np.log(2.0)], [0.0]])
        out = apply_regression(np.array([[0.0, 0.0, 10.0, 10.0]]), deltas)
        # center moves to (10, 5), width doubles: exact inverse of the encoding
        assert np.allclose(out[0], [0.0, 0.0, 20.0, 10.0], atol=1e-12)

    def test_round_trip_identity(self):
        rng = np.random.default_rng(4)
        props = random_boxes(rng, 200)
        seeds = random_boxes(rng, 200)
        deltas = encode_deltas(props, seeds)
        out = apply_regression(props, deltas)
        assert np.allclose(out, seeds, atol=1e-9)

    def test_wh_clamp(self):
        deltas = np.array([[0.0], [0.0], [50.0], [50.0]])
        out = apply_regression(np.array([[0.0, 0.0, 10.0, 10.0]]), deltas)
        assert out[0, 2] - out[0, 0] == pytest.approx(10.0 * np.exp(WH_CLAMP))

    def test_bounds_clipping(self):
        deltas = np.array([[1.0], [1.0], [0.0], [0.0]])
        out = apply_regression(
            np.array([[90.0, 90.0, 100.0, 100.0]]), deltas, bounds=(100.0, 100.0)
        )
        assert np.all(out <= 100.0)

    def test_class_specific_picks(self):
        rng = np.random.default_rng(5)
        props = random_boxes(rng, 3)
        deltas = rng.normal(0, 0.2, (8, 3))  # two classes
        picks = np.array([1, 0, 1])
        out = apply_regression(props, deltas, class_picks=picks)
        for i, c in enumerate(picks):
            want = apply_regression(props[i : i + 1], deltas[4 * c : 4 * c + 4, i : i + 1])
            assert np.allclose(out[i], want[0], atol=1e-12)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            apply_regression(np.array([[0.0, 0.0, 1.0, 1.0]]), np.full((4, 1), np.nan))
