import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wsodet.boxgeom import Box, iou_matrix
from wsodet.harness.selfcheck import random_boxes, reference_scc
from wsodet.inference import (
    Detection,
    aggregate,
    detect,
    eval_corloc,
    eval_ilc,
    eval_map,
    format_detections,
    scc,
)


class TestAggregate:
    def test_single_member(self):
        m = np.random.default_rng(0).normal(size=(4, 3))
        assert np.array_equal(aggregate([m]), m)

    def test_zeros_and_ones(self):
        out = aggregate([np.zeros((2, 2)), np.ones((2, 2))])
        assert np.all(out == 0.5)

    def test_matches_scalar_mean(self):
        rng = np.random.default_rng(1)
        mats = [rng.normal(size=(3, 4)) for _ in range(4)]
        out = aggregate(mats)
        for i in range(3):
            for j in range(4):
                want = sum(m[i, j] for m in mats) / 4
                assert out[i, j] == pytest.approx(want, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            aggregate([np.zeros((2, 2)), np.zeros((3, 2))])

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate([])


class TestScc:
    def test_hand_trace(self):
        midn = np.array([[0.9, 0.0005, 0.2], [0.8, 0.0002, 0.0001]])
        fused = np.ones((2, 4))
        out = scc(fused, midn, scale=0.01, tau_midn=0.001)
        # both rows confident, argmax class 0 -> classes 1, 2 scaled
        assert np.all(out[:, 0] == 1.0)
        assert np.all(out[:, 1] == 0.01)
        assert np.all(out[:, 2] == 0.01)
        assert np.all(out[:, 3] == 1.0)  # background untouched

    def test_every_class_present_is_identity(self):
        midn = np.eye(3) * 0.5
        fused = np.random.default_rng(2).uniform(size=(3, 4))
        out = scc(fused, midn, scale=0.01, tau_midn=0.001)
        assert np.array_equal(out, fused)

    def test_scale_one_is_identity(self):
        rng = np.random.default_rng(3)
        fused = rng.uniform(size=(5, 4))
        midn = rng.uniform(0, 0.01, size=(5, 3))
        out = scc(fused, midn, scale=1.0, tau_midn=0.001)
        assert np.array_equal(out, fused)

    def test_empty_confident_set_noop_and_flag(self):
        fused = np.random.default_rng(4).uniform(size=(3, 3))
        midn = np.full((3, 2), 1e-9)
        assert np.array_equal(scc(fused, midn, 0.01, 0.001), fused)
        scaled = scc(fused, midn, 0.01, 0.001, empty_noop=False)
        assert np.array_equal(scaled[:, :2], fused[:, :2] * 0.01)
        assert np.array_equal(scaled[:, 2], fused[:, 2])

    def test_matches_reference(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            n = int(rng.integers(1, 15))
            c = int(rng.integers(1, 5))
            fused = rng.uniform(size=(n, c + 1))
            midn = rng.uniform(0, 0.02, size=(n, c))
            lam = float(rng.uniform(0, 1))
            tau = float(rng.uniform(0, 0.015))
            assert np.array_equal(
                scc(fused, midn, lam, tau), reference_scc(fused, midn, lam, tau)
            )

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=150, deadline=None)
    def test_column_laws(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 10))
        c = int(rng.integers(1, 5))
        fused = rng.uniform(size=(n, c + 1))
        midn = rng.uniform(0, 0.01, size=(n, c))
        lam = float(rng.uniform(0, 1))
        out = scc(fused, midn, lam, 0.001)
        # background column bit-unchanged
        assert np.array_equal(out[:, c], fused[:, c])
        for col in range(c):
            same = np.array_equal(out[:, col], fused[:, col])
            scaled = np.array_equal(out[:, col], fused[:, col] * lam)
            assert same or scaled

    def test_input_never_mutated(self):
        rng = np.random.default_rng(6)
        fused = rng.uniform(size=(4, 4))
        snapshot = fused.copy()
        scc(fused, rng.uniform(0, 0.01, size=(4, 3)), 0.01, 0.001)
        assert np.array_equal(fused, snapshot)


class TestDetect:
    def test_all_below_threshold(self):
        fused = np.full((3, 3), 1e-5)
        out = detect(fused, random_boxes(np.random.default_rng(0), 3), np.zeros((4, 3)), 1e-3, 0.3)
        assert out == []

    def test_single_survivor(self):
        boxes = np.array([[0.0, 0.0, 10.0, 10.0]])
        fused = np.array([[0.9, 0.0, 0.05]])
        out = detect(fused, boxes, np.zeros((4, 1)), 1e-3, 0.3)
        assert len(out) == 1
        assert out[0].cls == 0
        assert out[0].score == pytest.approx(0.9)
        assert out[0].box == Box(0, 0, 10, 10)

    def test_matches_composition_oracle(self):
        from wsodet.boxgeom import nms as nms_op
        from wsodet.rcnn import apply_regression

        rng = np.random.default_rng(7)
        for _ in range(30):
            n = int(rng.integers(1, 20))
            c = 3
            boxes = random_boxes(rng, n)
            fused = rng.uniform(size=(n, c + 1))
            deltas = rng.normal(0, 0.1, (4, n))
            got = detect(fused, boxes, deltas, 0.2, 0.4)
            want = []
            for cls in range(c):
                cand = np.flatnonzero(fused[:, cls] > 0.2)
                if cand.size == 0:
                    continue
                refined = apply_regression(boxes[cand], deltas[:, cand])
                keep = nms_op(refined, fused[cand, cls], 0.4)
                dets = [
                    Detection(Box(*refined[k]), cls, float(fused[cand[k], cls]))
                    for k in keep
                ]
                dets.sort(key=lambda d: -d.score)
                want.extend(dets)
            assert got == want

    def test_per_class_nms_bound(self):
        rng = np.random.default_rng(8)
        n = 30
        boxes = random_boxes(rng, n)
        fused = rng.uniform(size=(n, 4))
        out = detect(fused, boxes, np.zeros((4, n)), 1e-3, 0.3)
        for cls in range(3):
            cls_boxes = np.array([d.box.as_tuple() for d in out if d.cls == cls])
            if cls_boxes.shape[0] < 2:
                continue
            m = iou_matrix(cls_boxes, cls_boxes)
            np.fill_diagonal(m, 0.0)
            assert m.max() <= 0.3 + 1e-12
            scores = [d.score for d in out if d.cls == cls]
            assert scores == sorted(scores, reverse=True)


def _det(img_dets):
    return {
        img: [Detection(Box(*b), c, s) for b, c, s in dets]
        for img, dets in img_dets.items()
    }


def _gt(img_gts):
    return {img: [(Box(*b), c) for b, c in gts] for img, gts in img_gts.items()}


class TestEvalMap:
    def test_perfect_detections(self):
        gt = _gt({"a": [((0, 0, 10, 10), 0)], "b": [((5, 5, 15, 15), 1)]})
        dets = _det(
            {"a": [((0, 0, 10, 10), 0, 1.0)], "b": [((5, 5, 15, 15), 1, 1.0)]}
        )
        aps, mean_ap = eval_map(dets, gt, num_classes=2)
        assert mean_ap == 1.0
        assert aps[0] == 1.0 and aps[1] == 1.0

    def test_zero_detections(self):
        gt = _gt({"a": [((0, 0, 10, 10), 0)]})
        aps, mean_ap = eval_map({"a": []}, gt, num_classes=1)
        assert mean_ap == 0.0

    def test_hand_computed_mixed_case(self):
        # class 0: three GT boxes, detections rank TP, TP, duplicate-FP, miss-FP
        #   precision/recall points: (1, 1/3), (1, 2/3), (2/3, 2/3), (1/2, 2/3)
        #   11-point AP = 7/11; class 1: single GT found first -> AP 1.0
        gt = _gt(
            {
                "i1": [((0, 0, 10, 10), 0), ((20, 20, 30, 30), 1)],
                "i2": [((0, 0, 10, 10), 0)],
                "i3": [((50, 50, 60, 60), 0)],
            }
        )
        dets = _det(
            {
                "i1": [((0, 0, 10, 10), 0, 0.9), ((20, 20, 30, 30), 1, 0.95)],
                "i2": [((0, 0, 10, 10), 0, 0.8), ((0, 0, 10, 10), 0, 0.7)],
                "i3": [((80, 80, 90, 90), 0, 0.6), ((50, 50, 60, 60), 1, 0.5)],
            }
        )
        aps, mean_ap = eval_map(dets, gt, num_classes=2)
        assert aps[0] == pytest.approx(7 / 11, abs=1e-12)
        assert aps[1] == pytest.approx(1.0, abs=1e-12)
        assert mean_ap == pytest.approx(9 / 11, abs=1e-12)

    def test_class_without_gt_excluded(self, caplog):
        import logging

        gt = _gt({"a": [((0, 0, 10, 10), 0)]})
        dets = _det({"a": [((0, 0, 10, 10), 0, 0.9), ((0, 0, 10, 10), 1, 0.8)]})
        with caplog.at_level(logging.INFO):
            aps, mean_ap = eval_map(dets, gt, num_classes=2)
        assert 1 not in aps
        assert mean_ap == 1.0

    def test_area_variant_monotone_envelope(self):
        gt = _gt({"a": [((0, 0, 10, 10), 0), ((20, 20, 30, 30), 0)]})
        dets = _det(
            {"a": [((0, 0, 10, 10), 0, 0.9), ((40, 40, 50, 50), 0, 0.8), ((20, 20, 30, 30), 0, 0.7)]}
        )
        aps11, _ = eval_map(dets, gt, num_classes=1, eleven_point=True)
        aps_area, _ = eval_map(dets, gt, num_classes=1, eleven_point=False)
        # exact area: 0.5 * 1.0 + 0.5 * 2/3 = 5/6
        assert aps_area[0] == pytest.approx(5 / 6, abs=1e-12)
        assert aps11[0] == pytest.approx((6 * 1.0 + 5 * (2 / 3)) / 11, abs=1e-12)


class TestEvalCorloc:
    def test_perfect(self):
        gt = _gt({"a": [((0, 0, 10, 10), 0)], "b": [((5, 5, 15, 15), 1)]})
        dets = _det({"a": [((0, 0, 10, 10), 0, 0.9)], "b": [((5, 5, 15, 15), 1, 0.8)]})
        assert eval_corloc(dets, gt) == 1.0

    def test_no_detections(self):
        gt = _gt({"a": [((0, 0, 10, 10), 0)]})
        assert eval_corloc({"a": []}, gt) == 0.0

    def test_mixed_pairs(self):
        gt = _gt(
            {
                "a": [((0, 0, 10, 10), 0), ((20, 20, 40, 40), 1)],
                "b": [((0, 0, 10, 10), 0)],
            }
        )
        dets = _det(
            {
                # top class-0 det misses, lower one hits -> pair incorrect
                "a": [
                    ((50, 50, 60, 60), 0, 0.9),
                    ((0, 0, 10, 10), 0, 0.5),
                    ((20, 20, 40, 40), 1, 0.7),
                ],
                "b": [((1, 1, 10, 10), 0, 0.8)],  # IoU 81/100 -> correct
            }
        )
        # pairs: (a,0) wrong, (a,1) right, (b,0) right
        assert eval_corloc(dets, gt) == pytest.approx(2 / 3)


class TestEvalIlc:
    def test_all_present(self):
        labels = {"a": np.array([1, 0])}
        dets = _det({"a": [((0, 0, 1, 1), 0, 0.5), ((0, 0, 2, 2), 0, 0.4)]})
        assert eval_ilc(dets, labels) == 1.0

    def test_all_absent(self):
        labels = {"a": np.array([1, 0])}
        dets = _det({"a": [((0, 0, 1, 1), 1, 0.5)]})
        assert eval_ilc(dets, labels) == 0.0

    def test_mixed_counts(self):
        labels = {"a": np.array([1, 0]), "b": np.array([0, 1])}
        dets = _det(
            {
                "a": [((0, 0, 1, 1), 0, 0.5), ((0, 0, 1, 1), 1, 0.4)],
                "b": [((0, 0, 1, 1), 1, 0.9), ((0, 0, 1, 1), 1, 0.8), ((0, 0, 1, 1), 0, 0.7)],
            }
        )
        assert eval_ilc(dets, labels) == pytest.approx(3 / 5)

    def test_no_detections_is_none(self):
        assert eval_ilc({"a": []}, {"a": np.array([1])}) is None


class TestFormatDetections:
    def test_sorted_and_formatted(self):
        dets = {
            "img_b": [Detection(Box(1.234, 2.345, 3.456, 4.567), 0, 0.1234567)],
            "img_a": [
                Detection(Box(0, 0, 1, 1), 1, 0.5),
                Detection(Box(0, 0, 2, 2), 0, 0.25),
                Detection(Box(0, 0, 3, 3), 1, 0.75),
            ],
        }
        text = format_detections(dets)
        lines = text.strip().split("\n")
        assert lines == [
            "img_a 0 0.250000 0.00 0.00 2.00 2.00",
            "img_a 1 0.750000 0.00 0.00 3.00 3.00",
            "img_a 1 0.500000 0.00 0.00 1.00 1.00",
            "img_b 0 0.123457 1.23 2.35 3.46 4.57",
        ]

    def test_empty(self):
        assert format_detections({}) == ""
