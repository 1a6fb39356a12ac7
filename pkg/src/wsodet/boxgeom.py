"""Axis-aligned box geometry: IoU, seed assignment, greedy NMS, scaling, gridding.

Boxes use continuous corner coordinates ``(x1, y1, x2, y2)`` with
``x1 <= x2`` and ``y1 <= y2``; area is ``(x2 - x1) * (y2 - y1)`` with no
+1 pixel convention. All functions are pure and safe for concurrent use;
random state is always passed explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in image coordinates, corner convention."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"degenerate corner order: {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class BoxAssignment:
    """Per-proposal record of its highest-IoU seed box."""

    max_iou: float
    seed_index: int
    seed_class: int


def boxes_to_array(boxes: Sequence[Box] | np.ndarray) -> np.ndarray:
    """Convert a sequence of boxes to an (N, 4) float64 array (pass-through for arrays)."""
    if isinstance(boxes, np.ndarray):
        arr = np.asarray(boxes, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 4:
            raise ValueError(f"box array must have shape (N, 4), got {arr.shape}")
        return arr
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64).reshape(-1, 4)


def array_to_boxes(arr: np.ndarray) -> list[Box]:
    return [Box(*row) for row in np.asarray(arr, dtype=np.float64)]


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when the union has zero area."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        inter = 0.0
    else:
        inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between an (N, 4) and an (M, 4) array of corner boxes.

    Degenerate pairs (zero union area) get IoU 0.
    """
    a = boxes_to_array(a)
    b = boxes_to_array(b)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def max_iou_assignment(
    proposals: np.ndarray | Sequence[Box], seed_boxes: np.ndarray | Sequence[Box]
) -> tuple[np.ndarray, np.ndarray]:
    """Max IoU and argmax seed index per proposal; ties go to the lowest seed index."""
    m = iou_matrix(boxes_to_array(proposals), boxes_to_array(seed_boxes))
    if m.shape[1] == 0:
        raise ValueError("empty seed set: no supervision available")
    idx = np.argmax(m, axis=1)
    return m[np.arange(m.shape[0]), idx], idx


def assign_to_seeds(
    proposals: Sequence[Box] | np.ndarray,
    seed_boxes: Sequence[Box] | np.ndarray,
    seed_classes: Sequence[int] | np.ndarray,
) -> list[BoxAssignment]:
    """Assign each proposal to its highest-IoU seed box.

    Args:
        proposals: boxes to assign.
        seed_boxes: non-empty seed boxes.
        seed_classes: class id per seed box.

    Returns:
        One :class:`BoxAssignment` per proposal carrying the max IoU, the
        winning seed index (ties broken by lowest index) and that seed's class.

    Raises:
        ValueError: if the seed set is empty.
    """
    classes = np.asarray(seed_classes)
    ious, idx = max_iou_assignment(proposals, seed_boxes)
    if classes.shape[0] != boxes_to_array(seed_boxes).shape[0]:
        raise ValueError("seed_classes length does not match seed_boxes")
    return [
        BoxAssignment(float(ious[i]), int(idx[i]), int(classes[idx[i]]))
        for i in range(len(ious))
    ]


def nms(
    boxes: Sequence[Box] | np.ndarray,
    scores: Sequence[float] | np.ndarray,
    iou_threshold: float,
) -> list[int]:
    """Greedy non-maximum suppression.

    Repeatedly keeps the highest-scoring remaining box (score ties broken by
    lower index) and discards remaining boxes whose IoU with it is strictly
    above ``iou_threshold``. Returns kept indices in selection order.
    """
    arr = boxes_to_array(boxes)
    s = np.asarray(scores, dtype=np.float64)
    if arr.shape[0] != s.shape[0]:
        raise ValueError("boxes and scores must have the same length")
    n = arr.shape[0]
    if n == 0:
        return []
    if n == 1:
        return [0]
    return nms_with_overlaps(iou_matrix(arr, arr), s, iou_threshold)


def nms_with_overlaps(
    overlaps: np.ndarray,
    scores: np.ndarray,
    iou_threshold: float,
    indices: np.ndarray | None = None,
) -> list[int]:
    """Greedy NMS given a precomputed pairwise IoU matrix (same semantics as :func:`nms`).

    With ``indices``, ``overlaps`` is a full matrix over a larger box set and
    the candidates are ``indices`` (scores aligned with them); returned
    positions still index the candidate list.
    """
    s = np.asarray(scores, dtype=np.float64)
    n = s.shape[0]
    if n == 0:
        return []
    # stable sort on -score keeps original order within ties -> lower index wins
    order = np.argsort(-s, kind="stable")
    rows = order if indices is None else np.asarray(indices)[order]
    keep: list[int] = []
    alive = np.ones(n, dtype=bool)  # position-in-order indexing
    for pos in range(n):
        if not alive[pos]:
            continue
        keep.append(int(order[pos]))
        alive[pos + 1 :] &= overlaps[rows[pos], rows[pos + 1 :]] <= iou_threshold
    return keep


def scale_box(
    box: Box,
    theta: float,
    rng: np.random.Generator,
    bounds: tuple[float, float] | None = None,
) -> Box:
    """Randomly rescale a box around its fixed center.

    Width is drawn uniformly from ``[(1 - theta) * w, (1 + theta) * w]`` and
    height from the analogous interval (width drawn first). With ``theta=0``
    the box is returned unchanged. When ``bounds=(W, H)`` is given the result
    is clipped to ``[0, W] x [0, H]``.
    """
    if not 0.0 <= theta < 1.0:
        raise ValueError(f"theta must be in [0, 1), got {theta}")
    w = box.width
    h = box.height
    new_w = rng.uniform((1.0 - theta) * w, (1.0 + theta) * w)
    new_h = rng.uniform((1.0 - theta) * h, (1.0 + theta) * h)
    cx, cy = box.center
    x1, x2 = cx - 0.5 * new_w, cx + 0.5 * new_w
    y1, y2 = cy - 0.5 * new_h, cy + 0.5 * new_h
    if bounds is not None:
        bw, bh = bounds
        x1, x2 = max(0.0, x1), min(bw, x2)
        y1, y2 = max(0.0, y1), min(bh, y2)
        x2 = max(x1, x2)
        y2 = max(y1, y2)
    return Box(x1, y1, x2, y2)


def grid_boxes(box: Box, n: int) -> list[Box]:
    """Partition a box into an n-by-n grid of equal cells in row-major order.

    Cells tile the box exactly: linspace edges make the outer cell borders
    bit-equal to the input corners.
    """
    if n < 1:
        raise ValueError(f"grid size must be >= 1, got {n}")
    xs = np.linspace(box.x1, box.x2, n + 1)
    ys = np.linspace(box.y1, box.y2, n + 1)
    return [
        Box(xs[c], ys[r], xs[c + 1], ys[r + 1])
        for r in range(n)
        for c in range(n)
    ]


def clip_box(box: Box, width: float, height: float) -> Box:
    """Clip a box to ``[0, width] x [0, height]``, preserving corner order."""
    x1 = min(max(box.x1, 0.0), width)
    x2 = min(max(box.x2, 0.0), width)
    y1 = min(max(box.y1, 0.0), height)
    y2 = min(max(box.y2, 0.0), height)
    return Box(x1, y1, max(x1, x2), max(y1, y2))
