"""Inference-side score aggregation, correction, detection and metrics.

Scores at this boundary are (proposals, classes) — transposed from the
training-side (classes, proposals) orientation. The correction step
down-scales the fused score columns of classes the image-level detector
considers absent before thresholding, regression refinement and per-class
NMS produce the final detections.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .boxgeom import Box, boxes_to_array, iou_matrix, nms
from .rcnn import apply_regression

logger = logging.getLogger(__name__)


@dataclass
class PipelineScores:
    """Per-image score bundle: stage outputs, image-level detector scores, fused mean.

    ``stage_scores`` holds the K (R, C+1) classifier outputs (refinement
    stages plus the final classification head); ``midn`` is the (R, C) fused
    two-stream matrix; ``fused`` their elementwise mean before correction.
    """

    stage_scores: list[np.ndarray]
    midn: np.ndarray
    fused: np.ndarray


@dataclass(frozen=True)
class Detection:
    box: Box
    cls: int
    score: float


def aggregate(stage_scores: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise mean of K same-shape score matrices."""
    if len(stage_scores) == 0:
        raise ValueError("need at least one score matrix to aggregate")
    first = np.asarray(stage_scores[0], dtype=np.float64)
    out = first.copy()
    for m in stage_scores[1:]:
        m = np.asarray(m, dtype=np.float64)
        if m.shape != first.shape:
            raise ValueError(f"shape mismatch in aggregation: {m.shape} vs {first.shape}")
        out += m
    return out / len(stage_scores)


def scc(
    fused: np.ndarray,
    midn: np.ndarray,
    scale: float,
    tau_midn: float,
    empty_noop: bool = True,
) -> np.ndarray:
    """Down-scale fused score columns of classes the image-level detector rejects.

    Proposals whose max image-detector score exceeds ``tau_midn`` vote with
    their argmax class; the union of votes is the predicted present set, and
    every other foreground column of ``fused`` is multiplied by ``scale``.
    The background column is never touched. When no proposal is confident the
    input is returned unchanged (``empty_noop=False`` scales every foreground
    column instead).
    """
    fused = np.asarray(fused, dtype=np.float64)
    midn = np.asarray(midn, dtype=np.float64)
    num_classes = midn.shape[1]
    if fused.shape[0] != midn.shape[0] or fused.shape[1] != num_classes + 1:
        raise ValueError(
            f"fused {fused.shape} and image-detector {midn.shape} shapes are inconsistent"
        )
    confident = np.flatnonzero(midn.max(axis=1) > tau_midn)
    if confident.size == 0:
        if empty_noop:
            return fused.copy()
        present: np.ndarray = np.array([], dtype=np.int64)
    else:
        present = np.unique(np.argmax(midn[confident], axis=1))
    out = fused.copy()
    absent = np.setdiff1d(np.arange(num_classes), present)
    out[:, absent] *= scale
    return out


def detect(
    fused: np.ndarray,
    boxes: Sequence[Box] | np.ndarray,
    reg_deltas: np.ndarray,
    score_threshold: float,
    nms_threshold: float,
    bounds: tuple[float, float] | None = None,
    class_picks_per_class: bool = False,
) -> list[Detection]:
    """Threshold, refine and suppress per foreground class.

    For every foreground class the proposals scoring above
    ``score_threshold`` are regression-refined, suppressed with per-class
    NMS, and emitted as detections. Output is ordered by class then
    descending score.
    """
    fused = np.asarray(fused, dtype=np.float64)
    arr = boxes_to_array(boxes)
    num_classes = fused.shape[1] - 1
    out: list[Detection] = []
    for c in range(num_classes):
        scores = fused[:, c]
        cand = np.flatnonzero(scores > score_threshold)
        if cand.size == 0:
            continue
        if class_picks_per_class:
            picks = np.full(cand.size, c, dtype=np.int64)
            refined = apply_regression(arr[cand], reg_deltas[:, cand], picks, bounds=bounds)
        else:
            refined = apply_regression(arr[cand], reg_deltas[:, cand], bounds=bounds)
        keep = nms(refined, scores[cand], nms_threshold)
        dets = [Detection(Box(*refined[k]), c, float(scores[cand[k]])) for k in keep]
        dets.sort(key=lambda d: -d.score)
        out.extend(dets)
    return out


def eval_map(
    detections: dict[str, list[Detection]],
    ground_truth: dict[str, list[tuple[Box, int]]],
    num_classes: int,
    iou_threshold: float = 0.5,
    eleven_point: bool = True,
) -> tuple[dict[int, float], float]:
    """Per-class average precision and its mean, VOC-style.

    Detections are matched greedily in descending score order; a detection is
    a true positive iff its IoU with an unmatched ground-truth box of its
    class is at least ``iou_threshold`` (the max-IoU ground truth is tried,
    matched at most once). AP uses 11-point interpolation by default, or the
    exact area under the precision/recall curve with ``eleven_point=False``.
    Classes without ground truth are excluded from the mean.
    """
    image_ids = sorted(ground_truth.keys())
    aps: dict[int, float] = {}
    for c in range(num_classes):
        gt_boxes = {
            img: boxes_to_array([b for b, k in ground_truth[img] if k == c])
            for img in image_ids
        }
        npos = sum(g.shape[0] for g in gt_boxes.values())
        if npos == 0:
            logger.info("class %d has no ground-truth instances; skipped in mAP", c)
            continue
        records = []
        for img in image_ids:
            for d in detections.get(img, []):
                if d.cls == c:
                    records.append((img, d.score, d.box))
        records.sort(key=lambda r: -r[1])
        matched = {img: np.zeros(g.shape[0], dtype=bool) for img, g in gt_boxes.items()}
        tp = np.zeros(len(records))
        fp = np.zeros(len(records))
        for i, (img, _score, box) in enumerate(records):
            g = gt_boxes[img]
            if g.shape[0] == 0:
                fp[i] = 1.0
                continue
            overlaps = iou_matrix(boxes_to_array([box]), g)[0]
            j = int(np.argmax(overlaps))
            if overlaps[j] >= iou_threshold and not matched[img][j]:
                matched[img][j] = True
                tp[i] = 1.0
            else:
                fp[i] = 1.0
        cum_tp = np.cumsum(tp)
        cum_fp = np.cumsum(fp)
        recall = cum_tp / npos
        precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
        aps[c] = _average_precision(recall, precision, eleven_point)
    mean_ap = float(np.mean(list(aps.values()))) if aps else 0.0
    return aps, mean_ap


def _average_precision(recall: np.ndarray, precision: np.ndarray, eleven_point: bool) -> float:
    if eleven_point:
        total = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            mask = recall >= t
            total += float(precision[mask].max()) if mask.any() else 0.0
        return total / 11.0
    # exact area under the monotonized precision envelope
    r = np.concatenate([[0.0], recall, [1.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    for i in range(p.size - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    steps = np.flatnonzero(r[1:] != r[:-1])
    return float(np.sum((r[steps + 1] - r[steps]) * p[steps + 1]))


def eval_corloc(
    detections: dict[str, list[Detection]],
    ground_truth: dict[str, list[tuple[Box, int]]],
    iou_threshold: float = 0.5,
) -> float:
    """Fraction of (image, present class) pairs whose top detection hits a ground truth.

    A pair is correct iff the top-scoring detection of that class in that
    image overlaps some same-class ground-truth box at IoU >= threshold;
    pairs without any detection count as incorrect.
    """
    total = 0
    correct = 0
    for img in sorted(ground_truth.keys()):
        gts = ground_truth[img]
        for c in sorted({k for _, k in gts}):
            total += 1
            cls_dets = [d for d in detections.get(img, []) if d.cls == c]
            if not cls_dets:
                continue
            top = max(cls_dets, key=lambda d: d.score)
            g = boxes_to_array([b for b, k in gts if k == c])
            overlaps = iou_matrix(boxes_to_array([top.box]), g)[0]
            if overlaps.max() >= iou_threshold:
                correct += 1
    return correct / total if total else 0.0


def eval_ilc(
    detections: dict[str, list[Detection]],
    image_labels: dict[str, np.ndarray],
) -> float | None:
    """Fraction of detections whose class is present in their image's label set.

    Returns None when there are no detections at all.
    """
    total = 0
    positive = 0
    for img, dets in detections.items():
        labels = np.asarray(image_labels[img])
        for d in dets:
            total += 1
            if labels[d.cls]:
                positive += 1
    if total == 0:
        return None
    return positive / total


def format_detections(detections: dict[str, list[Detection]]) -> str:
    """Render detections as the canonical one-record-per-line text stream.

    Fields: image id, class id, score (6 decimals), x1 y1 x2 y2 (2 decimals),
    sorted by (image id, class id, descending score).
    """
    rows = []
    for img in sorted(detections.keys()):
        for d in detections[img]:
            rows.append((img, d.cls, -d.score, d))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    lines = [
        f"{img} {d.cls} {d.score:.6f} {d.box.x1:.2f} {d.box.y1:.2f} {d.box.x2:.2f} {d.box.y2:.2f}"
        for img, _cls, _negscore, d in rows
    ]
    return "\n".join(lines) + ("\n" if lines else "")
