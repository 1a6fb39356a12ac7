"""Independent reference implementations and the runnable check suites.

Every reference here is deliberately written as plain scalar Python (explicit
loops, no shared helpers from the main modules) so that agreement with the
vectorized implementations is a genuine two-route check. The ``check`` CLI
command runs these suites; the test suite reuses the same references.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import boxgeom, gradcore, inference, midn, rcnn, sce
from ..boxgeom import Box


# ---------------------------------------------------------------------------
# scalar reference implementations


def reference_iou(a: tuple, b: tuple) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def reference_nms(boxes: list[tuple], scores: list[float], threshold: float) -> list[int]:
    """O(n^2) greedy suppression, one comparison at a time."""
    remaining = list(range(len(boxes)))
    keep = []
    while remaining:
        best = remaining[0]
        for i in remaining[1:]:
            if scores[i] > scores[best]:
                best = i
        keep.append(best)
        survivors = []
        for i in remaining:
            if i == best:
                continue
            if reference_iou(boxes[best], boxes[i]) <= threshold:
                survivors.append(i)
        remaining = survivors
    return keep


def reference_assignment(
    proposals: list[tuple], seeds: list[tuple]
) -> list[tuple[float, int]]:
    """Exhaustive pairwise max-IoU search with lowest-index tie break."""
    out = []
    for p in proposals:
        best_iou, best_idx = -1.0, -1
        for j, s in enumerate(seeds):
            v = reference_iou(p, s)
            if v > best_iou:
                best_iou, best_idx = v, j
        out.append((best_iou, best_idx))
    return out


def reference_mine_seeds(
    scores: np.ndarray, labels: np.ndarray, boxes: list[tuple], alpha: float, tau: float
) -> list[tuple[int, int]]:
    """Filter-then-reference-NMS mining; returns (class, proposal index) pairs."""
    out = []
    for c in range(scores.shape[0]):
        if not labels[c]:
            continue
        row = [float(v) for v in scores[c]]
        m = max(row)
        selected = [i for i, v in enumerate(row) if v >= alpha * m]
        kept = reference_nms(
            [boxes[i] for i in selected], [row[i] for i in selected], tau
        )
        out.extend((c, selected[k]) for k in kept)
    return out


def reference_scc(
    fused: np.ndarray, midn_scores: np.ndarray, scale: float, tau: float, empty_noop: bool = True
) -> np.ndarray:
    """Literal per-row transcription of the correction algorithm."""
    n, c_plus_1 = fused.shape
    num_classes = c_plus_1 - 1
    confident = [i for i in range(n) if max(midn_scores[i]) > tau]
    if not confident and empty_noop:
        return fused.copy()
    present = set()
    for i in confident:
        best, best_c = -math.inf, 0
        for c in range(num_classes):
            if midn_scores[i][c] > best:
                best, best_c = midn_scores[i][c], c
        present.add(best_c)
    out = fused.copy()
    for c in range(num_classes):
        if c not in present:
            for i in range(n):
                out[i][c] = out[i][c] * scale
    return out


def reference_average_precision(
    records: list[tuple[str, float, tuple]],
    gt: dict[str, list[tuple]],
    iou_threshold: float = 0.5,
    eleven_point: bool = True,
) -> float | None:
    """Scalar AP for one class from (image, score, box) detections."""
    npos = sum(len(v) for v in gt.values())
    if npos == 0:
        return None
    order = sorted(range(len(records)), key=lambda i: -records[i][1])
    used = {img: [False] * len(v) for img, v in gt.items()}
    precisions, recalls = [], []
    tp = fp = 0
    for i in order:
        img, _score, box = records[i]
        candidates = gt.get(img, [])
        best, best_j = -1.0, -1
        for j, g in enumerate(candidates):
            v = reference_iou(box, g)
            if v > best:
                best, best_j = v, j
        if best >= iou_threshold and not used[img][best_j]:
            used[img][best_j] = True
            tp += 1
        else:
            fp += 1
        precisions.append(tp / (tp + fp))
        recalls.append(tp / npos)
    if eleven_point:
        total = 0.0
        for t in [k / 10.0 for k in range(11)]:
            best = 0.0
            for p, r in zip(precisions, recalls):
                if r >= t and p > best:
                    best = p
            total += best
        return total / 11.0
    area = 0.0
    prev_r = 0.0
    for k in range(len(recalls)):
        p_max = max(precisions[k:]) if k < len(precisions) else 0.0
        area += (recalls[k] - prev_r) * p_max
        prev_r = recalls[k]
    return area


def reference_midn_loss(x_img, y, w) -> float:
    total = 0.0
    for c in range(len(x_img)):
        p = min(max(x_img[c], 1e-7), 1 - 1e-7)
        total -= w[c] * (y[c] * math.log(p) + (1 - y[c]) * math.log(1 - p))
    return total


def reference_icbc_loss(probs, targets, weights) -> float:
    c_dim, u = probs.shape
    if u == 0:
        return 0.0
    total = 0.0
    for c in range(c_dim):
        for i in range(u):
            p = min(max(probs[c][i], 1e-7), 1 - 1e-7)
            total -= weights[c][i] * (
                targets[c][i] * math.log(p) + (1 - targets[c][i]) * math.log(1 - p)
            )
    return total / u


def reference_mcc_loss(probs, labels, weights) -> float:
    n = probs.shape[1]
    total = 0.0
    for i in range(n):
        p = min(max(probs[labels[i]][i], 1e-7), 1 - 1e-7)
        total -= weights[i] * math.log(p)
    return total / n


# ---------------------------------------------------------------------------
# random instance helpers


def random_boxes(rng: np.random.Generator, n: int, span: float = 50.0) -> np.ndarray:
    x1 = rng.uniform(0, span, n)
    y1 = rng.uniform(0, span, n)
    w = rng.uniform(0.5, span / 2, n)
    h = rng.uniform(0.5, span / 2, n)
    return np.stack([x1, y1, x1 + w, y1 + h], axis=1)


def _tuples(arr: np.ndarray) -> list[tuple]:
    return [tuple(row) for row in arr]


# ---------------------------------------------------------------------------
# gradient suite


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _midn_case(rng: np.random.Generator):
    c = int(rng.integers(1, 5))
    r = int(rng.integers(1, 13))
    y = np.zeros(c)
    y[rng.integers(c)] = 1
    extra = rng.random(c) < 0.3
    y = np.maximum(y, extra)
    w = rng.uniform(0.2, 1.0, c)

    def fn(point: np.ndarray) -> tuple[float, np.ndarray]:
        half = point.size // 2
        x_cls = point[:half].reshape(c, r)
        x_det = point[half:].reshape(c, r)
        scores = midn.midn_forward(x_cls, x_det)
        lv = midn.midn_loss(scores.x_img, y, w)
        g_cls, g_det = midn.midn_backward(scores, lv.grad)
        return lv.value, np.concatenate([g_cls.ravel(), g_det.ravel()])

    return fn, rng.normal(0, 1.0, 2 * c * r)


def _icbc_case(rng: np.random.Generator):
    c = int(rng.integers(1, 5))
    u = int(rng.integers(1, 13))
    targets = (rng.random((c, u)) < 0.3).astype(float)
    weights = np.where(rng.random((c, u)) < 0.5, rng.uniform(0.1, 1.5, (c, u)), 0.0)
    sample = sce.IcbcSampleSet(
        features=np.zeros((u, 1)),
        targets=targets,
        weights=weights,
        kinds=["pos"] * u,
        classes=np.zeros(u, dtype=np.int64),
        feature_rows=np.arange(u),
    )

    def fn(point: np.ndarray) -> tuple[float, np.ndarray]:
        logits = point.reshape(c, u)
        lv = sce.icbc_loss(gradcore.sigmoid(logits), sample)
        return lv.value, lv.grad.ravel()

    return fn, rng.normal(0, 1.5, c * u)


def _mcc_case(rng: np.random.Generator):
    c = int(rng.integers(2, 5))
    r = int(rng.integers(1, 13))
    labels = rng.integers(0, c, r)
    weights = rng.uniform(0.05, 1.0, r)
    targets = sce.MccTargets(labels=labels, weights=weights)

    def fn(point: np.ndarray) -> tuple[float, np.ndarray]:
        lv = sce.mcc_loss(gradcore.softmax_over_classes(point.reshape(c, r)), targets)
        return lv.value, lv.grad.ravel()

    return fn, rng.normal(0, 1.5, c * r)


def _rcnn_case(rng: np.random.Generator):
    c = int(rng.integers(2, 5))
    r = int(rng.integers(2, 13))
    labels = rng.integers(0, c + 1, r)
    if not (labels < c).any():
        labels[0] = 0
    weights = rng.uniform(0.05, 1.0, r)
    reg_mask = labels < c
    reg_targets = rng.normal(0, 0.7, (4, r)) * reg_mask
    targets = rcnn.RcnnTargets(
        labels=labels, weights=weights, reg_targets=reg_targets, reg_mask=reg_mask
    )

    def fn(point: np.ndarray) -> tuple[float, np.ndarray]:
        cls_logits = point[: (c + 1) * r].reshape(c + 1, r)
        deltas = point[(c + 1) * r :].reshape(4, r)
        out = rcnn.rcnn_loss(
            gradcore.softmax_over_classes(cls_logits), deltas, targets
        )
        return out.total, np.concatenate([out.cls.grad.ravel(), out.reg.grad.ravel()])

    return fn, rng.normal(0, 1.0, (c + 1) * r + 4 * r)


GRADIENT_CASES = {
    "midn_image_loss": _midn_case,
    "icbc_binary_loss": _icbc_case,
    "mcc_cross_entropy": _mcc_case,
    "rcnn_cls_plus_smooth_l1": _rcnn_case,
}


def check_gradients(trials: int = 100, seed: int = 0, tol: float = 1e-5) -> list[CheckResult]:
    results = []
    for case_id, (name, case) in enumerate(GRADIENT_CASES.items()):
        rng = np.random.default_rng((seed, 7, case_id))
        worst = 0.0
        for _ in range(trials):
            fn, point = case(rng)
            worst = max(worst, gradcore.finite_diff_check(fn, point, epsilon=1e-5))
        results.append(
            CheckResult(name, worst <= tol, f"max relative error {worst:.3e} over {trials} trials")
        )
    return results


# ---------------------------------------------------------------------------
# oracle equivalence suites


def check_nms_oracle(trials: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng((seed, 1))
    for k in range(trials):
        n = int(rng.integers(1, 25))
        arr = random_boxes(rng, n)
        scores = rng.uniform(0, 1, n)
        thr = float(rng.uniform(0.05, 0.9))
        got = boxgeom.nms(arr, scores, thr)
        want = reference_nms(_tuples(arr), scores.tolist(), thr)
        if got != want:
            return CheckResult("nms_oracle", False, f"mismatch at trial {k}")
    return CheckResult("nms_oracle", True, f"{trials} random instances matched")


def check_assignment_oracle(trials: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng((seed, 2))
    for k in range(trials):
        n = int(rng.integers(1, 40))
        m = int(rng.integers(1, 8))
        props = random_boxes(rng, n)
        seeds = random_boxes(rng, m)
        ious, idx = boxgeom.max_iou_assignment(props, seeds)
        want = reference_assignment(_tuples(props), _tuples(seeds))
        for i in range(n):
            if idx[i] != want[i][1] or abs(ious[i] - want[i][0]) > 1e-9:
                return CheckResult("assignment_oracle", False, f"mismatch at trial {k} row {i}")
    return CheckResult("assignment_oracle", True, f"{trials} random instances matched")


def check_mining_oracle(trials: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng((seed, 3))
    for k in range(trials):
        c = int(rng.integers(1, 5))
        n = int(rng.integers(1, 25))
        scores = rng.uniform(0, 1, (c, n))
        labels = (rng.random(c) < 0.6).astype(int)
        if labels.sum() == 0:
            labels[int(rng.integers(c))] = 1
        arr = random_boxes(rng, n)
        alpha = float(rng.uniform(0.5, 0.99))
        tau = float(rng.uniform(0.05, 0.6))
        seeds = sce.mine_base_seeds(scores, labels, arr, alpha, tau)
        got = [(s.cls, s.confidence, s.box.as_tuple()) for s in seeds]
        want = [
            (c_, float(scores[c_][i]), tuple(arr[i]))
            for c_, i in reference_mine_seeds(scores, labels, _tuples(arr), alpha, tau)
        ]
        if got != want:
            return CheckResult("seed_mining_oracle", False, f"mismatch at trial {k}")
    return CheckResult("seed_mining_oracle", True, f"{trials} random instances matched")


def check_scc_oracle(trials: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng((seed, 4))
    for k in range(trials):
        n = int(rng.integers(1, 20))
        c = int(rng.integers(1, 6))
        fused = rng.uniform(0, 1, (n, c + 1))
        m = rng.uniform(0, 0.02, (n, c))
        tau = float(rng.uniform(0.0, 0.015))
        lam = float(rng.uniform(0.0, 1.0))
        got = inference.scc(fused, m, lam, tau)
        want = reference_scc(fused, m, lam, tau)
        if not np.array_equal(got, want):
            return CheckResult("scc_oracle", False, f"mismatch at trial {k}")
    return CheckResult("scc_oracle", True, f"{trials} random instances matched")


def check_map_oracle(trials: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng((seed, 5))
    for k in range(trials):
        num_classes = int(rng.integers(1, 4))
        n_images = int(rng.integers(1, 4))
        gt: dict[str, list] = {}
        dets: dict[str, list] = {}
        for i in range(n_images):
            img = f"im{i}"
            n_gt = int(rng.integers(0, 4))
            arr = random_boxes(rng, n_gt, span=30.0)
            gt[img] = [(Box(*row), int(rng.integers(num_classes))) for row in arr]
            n_det = int(rng.integers(0, 6))
            det_arr = random_boxes(rng, n_det, span=30.0)
            dets[img] = [
                inference.Detection(Box(*row), int(rng.integers(num_classes)), float(rng.uniform()))
                for row in det_arr
            ]
        aps, mean_ap = inference.eval_map(dets, gt, num_classes)
        want_values = []
        for c in range(num_classes):
            records = [
                (img, d.score, d.box.as_tuple())
                for img in sorted(gt)
                for d in dets[img]
                if d.cls == c
            ]
            gt_c = {img: [b.as_tuple() for b, cc in gt[img] if cc == c] for img in gt}
            ap = reference_average_precision(records, gt_c)
            if ap is not None:
                want_values.append(ap)
                if abs(aps[c] - ap) > 1e-9:
                    return CheckResult("map_oracle", False, f"AP mismatch trial {k} class {c}")
            elif c in aps:
                return CheckResult("map_oracle", False, f"class {c} should be skipped, trial {k}")
        want_map = float(np.mean(want_values)) if want_values else 0.0
        if abs(mean_ap - want_map) > 1e-9:
            return CheckResult("map_oracle", False, f"mAP mismatch at trial {k}")
    return CheckResult("map_oracle", True, f"{trials} random instances matched")


def check_oracles(trials: int = 1000, seed: int = 0) -> list[CheckResult]:
    return [
        check_nms_oracle(trials, seed),
        check_assignment_oracle(trials, seed),
        check_mining_oracle(trials, seed),
        check_scc_oracle(trials, seed),
        check_map_oracle(min(trials, 400), seed),
    ]


# ---------------------------------------------------------------------------
# geometry invariants


def check_geometry_invariants(trials: int = 10000, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng((seed, 6))
    results = []

    ok, detail = True, ""
    for k in range(trials // 4):
        n = int(rng.integers(1, 20))
        arr = random_boxes(rng, n)
        scores = rng.uniform(0, 1, n)
        thr = float(rng.uniform(0.05, 0.95))
        keep = boxgeom.nms(arr, scores, thr)
        kept = arr[keep]
        m = boxgeom.iou_matrix(kept, kept)
        np.fill_diagonal(m, 0.0)
        if m.size and m.max() > thr + 1e-12:
            ok, detail = False, f"pairwise IoU {m.max():.4f} > {thr} at trial {k}"
            break
    results.append(CheckResult("nms_pairwise_bound", ok, detail or "held on all trials"))

    ok, detail = True, ""
    for k in range(trials // 4):
        b = Box(*random_boxes(rng, 1)[0])
        n = int(rng.integers(1, 6))
        cells = boxgeom.grid_boxes(b, n)
        total = sum(c.area for c in cells)
        if abs(total - b.area) > 1e-9 * max(b.area, 1.0):
            ok, detail = False, f"area sum off by {abs(total - b.area):.2e} at trial {k}"
            break
        for c in cells:
            if c.x1 < b.x1 - 1e-12 or c.x2 > b.x2 + 1e-12 or c.y1 < b.y1 - 1e-12 or c.y2 > b.y2 + 1e-12:
                ok, detail = False, f"cell escapes box at trial {k}"
                break
        if not ok:
            break
    results.append(CheckResult("grid_tiling_exact", ok, detail or "held on all trials"))

    ok, detail = True, ""
    for k in range(trials // 4):
        c = int(rng.integers(1, 4))
        n = int(rng.integers(1, 20))
        scores = rng.uniform(0, 1, (c, n))
        labels = np.ones(c, dtype=int)
        arr = random_boxes(rng, n)
        alpha = float(rng.uniform(0.5, 0.99))
        seeds = sce.mine_base_seeds(scores, labels, arr, alpha, 0.3)
        for s in seeds:
            if s.confidence < alpha * scores[s.cls].max() - 1e-12:
                ok, detail = False, f"seed below soft threshold at trial {k}"
                break
        if not ok:
            break
    results.append(CheckResult("mining_soft_threshold", ok, detail or "held on all trials"))

    ok, detail = True, ""
    for k in range(trials // 4):
        n = int(rng.integers(2, 20))
        arr = random_boxes(rng, n)
        scores = rng.uniform(0, 1, (1, n))
        seeds = sce.mine_base_seeds(scores, np.array([1]), arr, 0.8, 0.3)
        icbc_scores = rng.uniform(0, 1, (1, n))
        tuned = sce.icbc_finetune_seeds(seeds, arr, icbc_scores, 0.5)
        for s in tuned:
            if s.origin != sce.ORIGIN_FINETUNED:
                continue
            parents = [
                p for p in seeds if p.cls == s.cls
            ]
            best = max(boxgeom.iou(s.box, p.box) for p in parents)
            if best < 0.5 - 1e-12:
                ok, detail = False, f"fine-tuned seed drifted below tau_sur at trial {k}"
                break
        if not ok:
            break
    results.append(CheckResult("finetune_overlap_bound", ok, detail or "held on all trials"))
    return results


def run_all_checks(verbose_print=None) -> bool:
    """Run every suite; returns True when all pass."""
    results = (
        check_gradients(trials=30)
        + check_oracles(trials=300)
        + check_geometry_invariants(trials=2000)
    )
    all_ok = True
    for res in results:
        all_ok &= res.passed
        if verbose_print is not None:
            verbose_print(f"[{'PASS' if res.passed else 'FAIL'}] {res.name}: {res.detail}")
    return all_ok
