"""R-CNN refinement head: target assignment, classification + smooth-L1 losses,
box delta encoding and decoding.

Regression uses the standard center/log-size parameterization. The head is
class-agnostic by default (one 4-vector per proposal); a class-specific
variant (4 rows per foreground class) sits behind a flag.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .boxgeom import Box, boxes_to_array
from .gradcore import LossValue, Matrix
from .sce import MccTargets, SeedSet, _nearest_seed, mcc_loss

logger = logging.getLogger(__name__)

# upper clamp on dw/dh before exp, prevents overflow on untrained heads
WH_CLAMP = float(np.log(1000.0 / 16.0))


@dataclass
class RcnnTargets:
    """Per-proposal classification labels/weights plus foreground regression targets.

    ``reg_targets`` is (4, R) and only meaningful where ``reg_mask`` is True;
    degenerate foreground proposals are excluded from regression.
    """

    labels: np.ndarray
    weights: np.ndarray
    reg_targets: np.ndarray
    reg_mask: np.ndarray


@dataclass
class RcnnLoss:
    """Combined classification and regression loss with per-branch gradients."""

    total: float
    cls: LossValue  # grad w.r.t. classification logits, (C+1, R)
    reg: LossValue  # grad w.r.t. regression deltas, same shape as the input


def _centers(arr: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    w = arr[:, 2] - arr[:, 0]
    h = arr[:, 3] - arr[:, 1]
    cx = arr[:, 0] + 0.5 * w
    cy = arr[:, 1] + 0.5 * h
    return cx, cy, w, h


def encode_deltas(proposals: np.ndarray, matched: np.ndarray) -> np.ndarray:
    """Encode matched boxes relative to proposals as (4, N) deltas.

    ``dx = (sx - px) / pw``, ``dy = (sy - py) / ph``, ``dw = log(sw / pw)``,
    ``dh = log(sh / ph)``. Callers must mask out degenerate rows first.
    """
    px, py, pw, ph = _centers(boxes_to_array(proposals))
    sx, sy, sw, sh = _centers(boxes_to_array(matched))
    return np.stack(
        [(sx - px) / pw, (sy - py) / ph, np.log(sw / pw), np.log(sh / ph)], axis=0
    )


def assign_rcnn_targets(
    boxes: Sequence[Box] | np.ndarray,
    seeds: SeedSet,
    tau_h: float,
    num_classes: int,
    zero_overlap_seed_weight: bool = True,
    prop_iou: np.ndarray | None = None,
) -> RcnnTargets:
    """Assign classification and regression targets from the final seed set.

    Classification follows the same max-overlap rule as the stage
    classifiers. Foreground proposals get deltas toward their matched seed;
    a foreground proposal or matched seed with zero width or height is
    dropped from regression with a warning.
    """
    if len(seeds) == 0:
        raise ValueError("target assignment requires a non-empty seed set")
    arr = boxes_to_array(boxes)
    max_ious, nearest = _nearest_seed(arr, seeds, prop_iou)
    labels = np.where(max_ious >= tau_h, seeds.classes[nearest], num_classes).astype(np.int64)
    weights = seeds.confidences[nearest].copy()
    if not zero_overlap_seed_weight:
        weights[max_ious == 0.0] = 1.0

    fg = labels < num_classes
    matched = seeds.boxes_array[nearest]
    pw = arr[:, 2] - arr[:, 0]
    ph = arr[:, 3] - arr[:, 1]
    sw = matched[:, 2] - matched[:, 0]
    sh = matched[:, 3] - matched[:, 1]
    valid = (pw > 0) & (ph > 0) & (sw > 0) & (sh > 0)
    dropped = fg & ~valid
    if dropped.any():
        logger.warning(
            "excluding %d degenerate foreground proposal(s) from regression",
            int(dropped.sum()),
        )
    reg_mask = fg & valid
    reg_targets = np.zeros((4, arr.shape[0]))
    if reg_mask.any():
        reg_targets[:, reg_mask] = encode_deltas(arr[reg_mask], matched[reg_mask])
    return RcnnTargets(labels=labels, weights=weights, reg_targets=reg_targets, reg_mask=reg_mask)


def smooth_l1(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise smooth-L1 value and derivative: 0.5 u^2 below |u|=1, |u|-0.5 above."""
    u = np.asarray(u, dtype=np.float64)
    small = np.abs(u) < 1.0
    value = np.where(small, 0.5 * u * u, np.abs(u) - 0.5)
    dvalue = np.where(small, u, np.sign(u))
    return value, dvalue


def rcnn_loss(
    cls_probs: Matrix,
    reg_deltas: Matrix,
    targets: RcnnTargets,
    num_classes: int | None = None,
    class_specific: bool = False,
) -> RcnnLoss:
    """Weighted cross-entropy plus weighted smooth-L1 over foreground rows.

    The regression term averages over the foreground count, each sample
    weighted like its classification term. ``reg_deltas`` is (4, R) for the
    class-agnostic head, or (4C, R) with ``class_specific=True`` where
    foreground row blocks are selected by label.
    """
    cls_lv = mcc_loss(cls_probs, MccTargets(labels=targets.labels, weights=targets.weights))

    deltas = np.asarray(reg_deltas, dtype=np.float64)
    grad = np.zeros_like(deltas)
    fg = np.flatnonzero(targets.reg_mask)
    if fg.size == 0:
        reg_lv = LossValue(0.0, grad)
    else:
        w = targets.weights[fg]
        if class_specific:
            if num_classes is None:
                raise ValueError("class_specific regression needs num_classes")
            offsets = 4 * targets.labels[fg]
            rows = offsets[None, :] + np.arange(4)[:, None]  # (4, n_fg)
            pred = deltas[rows, fg[None, :]]
        else:
            pred = deltas[:, fg]
        u = pred - targets.reg_targets[:, fg]
        val, dval = smooth_l1(u)
        value = float((w * val.sum(axis=0)).sum()) / fg.size
        g = dval * w[None, :] / fg.size
        if class_specific:
            grad[rows, fg[None, :]] = g
        else:
            grad[:, fg] = g
        reg_lv = LossValue(value, grad)

    return RcnnLoss(total=cls_lv.value + reg_lv.value, cls=cls_lv, reg=reg_lv)


def apply_regression(
    boxes: Sequence[Box] | np.ndarray,
    deltas: Matrix,
    class_picks: np.ndarray | None = None,
    bounds: tuple[float, float] | None = None,
) -> np.ndarray:
    """Decode regression deltas into refined boxes, (N, 4).

    Exact inverse of :func:`encode_deltas`: ``cx' = px + dx * pw``,
    ``w' = pw * exp(dw)`` (dw/dh clamped above at ``WH_CLAMP``), analogous for
    y. ``class_picks`` selects the 4-row block per proposal for class-specific
    deltas. ``bounds=(W, H)`` clips the result to the image.
    """
    arr = boxes_to_array(boxes)
    deltas = np.asarray(deltas, dtype=np.float64)
    n = arr.shape[0]
    if class_picks is not None:
        rows = 4 * np.asarray(class_picks, dtype=np.int64)[None, :] + np.arange(4)[:, None]
        deltas = deltas[rows, np.arange(n)[None, :]]
    if deltas.shape != (4, n):
        raise ValueError(f"expected (4, {n}) deltas, got {deltas.shape}")
    if not np.all(np.isfinite(deltas)):
        raise ValueError("non-finite regression deltas")

    px, py, pw, ph = _centers(arr)
    dx, dy = deltas[0], deltas[1]
    dw = np.minimum(deltas[2], WH_CLAMP)
    dh = np.minimum(deltas[3], WH_CLAMP)
    cx = px + dx * pw
    cy = py + dy * ph
    w = pw * np.exp(dw)
    h = ph * np.exp(dh)
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    if bounds is not None:
        bw, bh = bounds
        out[:, 0] = np.clip(out[:, 0], 0.0, bw)
        out[:, 2] = np.clip(out[:, 2], 0.0, bw)
        out[:, 1] = np.clip(out[:, 1], 0.0, bh)
        out[:, 3] = np.clip(out[:, 3], 0.0, bh)
    return out
