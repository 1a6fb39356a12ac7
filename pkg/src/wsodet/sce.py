"""Self-classification enhancement stage: seed mining, ICBC sampling, losses.

One instance of this machinery runs per refinement stage. A stage mines seed
boxes from the previous stage's class scores (the fused MIDN scores for the
first stage), optionally fine-tunes them with intra-class binary
classification (ICBC) scores, builds the ICBC training set by IoU and
gridding sampling, and assigns multi-class classification (MCC) pseudo
labels from the mined seeds.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .boxgeom import (
    Box,
    boxes_to_array,
    iou_matrix,
    max_iou_assignment,
    nms,
    nms_with_overlaps,
)
from .gradcore import LinearHead, LossValue, Matrix, linear_forward, sigmoid

logger = logging.getLogger(__name__)

_CLAMP = 1e-7

ORIGIN_BASE = "base"
ORIGIN_FINETUNED = "finetuned"


@dataclass(frozen=True)
class Seed:
    """A mined pseudo ground-truth box.

    ``index`` records which proposal the seed is (mined seeds are always
    proposals); -1 for seeds constructed from arbitrary boxes.
    """

    box: Box
    cls: int
    confidence: float
    origin: str = ORIGIN_BASE
    index: int = -1


class SeedSet:
    """Ordered collection of seeds with cached array views."""

    def __init__(self, seeds: Sequence[Seed]):
        self.seeds = list(seeds)
        self._arr: np.ndarray | None = None
        self._classes: np.ndarray | None = None
        self._conf: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.seeds)

    def __iter__(self):
        return iter(self.seeds)

    def __getitem__(self, i: int) -> Seed:
        return self.seeds[i]

    @property
    def boxes_array(self) -> np.ndarray:
        if self._arr is None:
            self._arr = boxes_to_array([s.box for s in self.seeds])
        return self._arr

    @property
    def classes(self) -> np.ndarray:
        if self._classes is None:
            self._classes = np.array([s.cls for s in self.seeds], dtype=np.int64)
        return self._classes

    @property
    def confidences(self) -> np.ndarray:
        if self._conf is None:
            self._conf = np.array([s.confidence for s in self.seeds], dtype=np.float64)
        return self._conf

    @property
    def indices(self) -> np.ndarray:
        return np.array([s.index for s in self.seeds], dtype=np.int64)

    def proposal_overlaps(self, prop_iou: np.ndarray | None, boxes) -> np.ndarray:
        """(S, R) IoU of seeds against all proposals, via the cached proposal
        matrix when every seed is an indexed proposal."""
        if prop_iou is not None:
            idx = self.indices
            if np.all(idx >= 0):
                return prop_iou[idx]
        return iou_matrix(self.boxes_array, boxes_to_array(boxes))


def icbc_forward(head: LinearHead, features: Matrix) -> Matrix:
    """Per-class sigmoid scores, (classes, samples) orientation."""
    return sigmoid(linear_forward(head, features)).T


def mine_base_seeds(
    scores: Matrix,
    labels: np.ndarray,
    boxes: Sequence[Box] | np.ndarray,
    alpha: float,
    tau_nms: float,
    prop_iou: np.ndarray | None = None,
) -> SeedSet:
    """Mine base seed boxes with a soft per-class score threshold plus NMS.

    For every present class the proposals scoring at least ``alpha`` times
    the class maximum are kept, then greedily deduplicated with NMS at
    ``tau_nms``. Survivors become seeds whose confidence is their class
    score. The class argmax always survives, so every present class yields
    at least one seed.

    Args:
        scores: (C, R) foreground class scores (no background row).
        labels: binary presence vector of length C.
        boxes: the R proposals.
        alpha: soft threshold fraction of the per-class max score.
        tau_nms: NMS IoU threshold for seed deduplication.
        prop_iou: optional precomputed proposal-proposal IoU matrix.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if not np.all(np.isfinite(scores)):
        raise ValueError("seed mining requires finite scores")
    present = np.flatnonzero(labels != 0)
    if present.size == 0:
        raise ValueError("no present class: nothing to mine")
    arr = boxes_to_array(boxes)
    box_list = list(boxes) if not isinstance(boxes, np.ndarray) else None

    seeds: list[Seed] = []
    for c in present:
        row = scores[c]
        selected = np.flatnonzero(row >= alpha * row.max())
        if prop_iou is not None:
            keep = nms_with_overlaps(prop_iou, row[selected], tau_nms, indices=selected)
        else:
            keep = nms(arr[selected], row[selected], tau_nms)
        for k in keep:
            j = int(selected[k])
            box = box_list[j] if box_list is not None else Box(*arr[j])
            seeds.append(Seed(box=box, cls=int(c), confidence=float(row[j]), index=j))
    return SeedSet(seeds)


def mine_top_seeds(
    scores: Matrix,
    labels: np.ndarray,
    boxes: Sequence[Box] | np.ndarray,
) -> SeedSet:
    """Classic top-scoring mining: the single argmax proposal per present class.

    The recall-oriented alternative is :func:`mine_base_seeds`; this is the
    ablation baseline it replaces.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if not np.all(np.isfinite(scores)):
        raise ValueError("seed mining requires finite scores")
    present = np.flatnonzero(labels != 0)
    if present.size == 0:
        raise ValueError("no present class: nothing to mine")
    arr = boxes_to_array(boxes)
    box_list = list(boxes) if not isinstance(boxes, np.ndarray) else None
    seeds = []
    for c in present:
        j = int(np.argmax(scores[c]))
        box = box_list[j] if box_list is not None else Box(*arr[j])
        seeds.append(Seed(box=box, cls=int(c), confidence=float(scores[c, j]), index=j))
    return SeedSet(seeds)


def icbc_finetune_seeds(
    base: SeedSet,
    boxes: Sequence[Box] | np.ndarray,
    icbc_scores: Matrix,
    tau_sur: float,
    prop_iou: np.ndarray | None = None,
) -> SeedSet:
    """Refine each base seed toward the best-ICBC proposal in its surroundings.

    The surrounding set of a seed is every proposal with IoU >= ``tau_sur``
    against it (the seed's own proposal is included, IoU 1). The surrounding
    proposal with the maximum ICBC score in the seed's class is appended as a
    fine-tuned seed carrying the parent's confidence, unless its box and
    class exactly duplicate an already-collected seed. Returns base plus the
    fine-tuned additions.
    """
    icbc_scores = np.asarray(icbc_scores, dtype=np.float64)
    arr = boxes_to_array(boxes)
    box_list = list(boxes) if not isinstance(boxes, np.ndarray) else None
    if len(base) == 0:
        return SeedSet([])

    overlaps = base.proposal_overlaps(prop_iou, arr)  # (S, R)
    masked = np.where(overlaps >= tau_sur, icbc_scores[base.classes], -np.inf)
    best = np.argmax(masked, axis=1)
    has_surrounding = np.isfinite(masked[np.arange(len(base)), best])

    result = list(base.seeds)
    seen = {(s.box.as_tuple(), s.cls) for s in result}
    for si, seed in enumerate(base.seeds):
        if not has_surrounding[si]:
            continue
        j = int(best[si])
        box = box_list[j] if box_list is not None else Box(*arr[j])
        key = (box.as_tuple(), seed.cls)
        if key in seen:
            continue
        seen.add(key)
        result.append(
            Seed(
                box=box,
                cls=seed.cls,
                confidence=seed.confidence,
                origin=ORIGIN_FINETUNED,
                index=j,
            )
        )
    return SeedSet(result)


def _nearest_seed(
    arr: np.ndarray, seeds: SeedSet, prop_iou: np.ndarray | None
) -> tuple[np.ndarray, np.ndarray]:
    """Per-proposal (max IoU, nearest seed index), ties to the lowest seed index."""
    if prop_iou is None:
        return max_iou_assignment(arr, seeds.boxes_array)
    overlaps = seeds.proposal_overlaps(prop_iou, arr)  # (S, R)
    nearest = np.argmax(overlaps, axis=0)
    return overlaps[nearest, np.arange(arr.shape[0])], nearest


def _scaled_grid_cells(
    seed_arr: np.ndarray,
    theta: float,
    grid_n: int,
    rng: np.random.Generator,
    bounds: tuple[float, float] | None,
) -> np.ndarray:
    """Center-preserving random rescale of every seed box, split into grid cells.

    Batched equivalent of per-seed ``scale_box`` + ``grid_boxes``: all widths
    are drawn first, then all heights. Returns an (S * grid_n^2, 4) array of
    cells in seed order, row-major within each seed.
    """
    w = seed_arr[:, 2] - seed_arr[:, 0]
    h = seed_arr[:, 3] - seed_arr[:, 1]
    nw = rng.uniform((1.0 - theta) * w, (1.0 + theta) * w)
    nh = rng.uniform((1.0 - theta) * h, (1.0 + theta) * h)
    cx = 0.5 * (seed_arr[:, 0] + seed_arr[:, 2])
    cy = 0.5 * (seed_arr[:, 1] + seed_arr[:, 3])
    x1, x2 = cx - 0.5 * nw, cx + 0.5 * nw
    y1, y2 = cy - 0.5 * nh, cy + 0.5 * nh
    if bounds is not None:
        bw, bh = bounds
        x1, x2 = np.clip(x1, 0.0, bw), np.clip(x2, 0.0, bw)
        y1, y2 = np.clip(y1, 0.0, bh), np.clip(y2, 0.0, bh)
        x2, y2 = np.maximum(x1, x2), np.maximum(y1, y2)
    # cell edges at exact fractions of the scaled box
    t = np.arange(grid_n + 1) / grid_n
    xs = x1[:, None] * (1.0 - t) + x2[:, None] * t  # (S, n+1)
    ys = y1[:, None] * (1.0 - t) + y2[:, None] * t
    s = seed_arr.shape[0]
    cell_x1 = np.repeat(xs[:, :-1][:, None, :], grid_n, axis=1)  # (S, n, n)
    cell_x2 = np.repeat(xs[:, 1:][:, None, :], grid_n, axis=1)
    cell_y1 = np.repeat(ys[:, :-1][:, :, None], grid_n, axis=2)
    cell_y2 = np.repeat(ys[:, 1:][:, :, None], grid_n, axis=2)
    cells = np.stack([cell_x1, cell_y1, cell_x2, cell_y2], axis=-1)
    return cells.reshape(s * grid_n * grid_n, 4)


@dataclass
class IcbcSampleSet:
    """ICBC training set: IoU-sampled proposals plus gridded mis-located boxes.

    ``features`` stacks the selected proposal feature rows and the
    synthesized grid-cell features, (U, F). ``targets`` and ``weights`` are
    (C, U): a sample's target is 1 only in its class and only for positive
    samples; its weight is nonzero only in its class (nearest-seed confidence
    for IoU samples, the fixed grid weight for grid cells).
    """

    features: np.ndarray
    targets: np.ndarray
    weights: np.ndarray
    kinds: list[str]  # "pos" | "neg" | "grid" per sample
    classes: np.ndarray
    feature_rows: np.ndarray  # proposal index per sample; -1 for grid cells

    def __len__(self) -> int:
        return self.features.shape[0]


def sample_icbc(
    boxes: Sequence[Box] | np.ndarray,
    seeds: SeedSet,
    features: Matrix,
    num_classes: int,
    tau_l: float,
    tau_h: float,
    theta: float,
    grid_n: int,
    rng: np.random.Generator,
    grid_feature_fn: Callable[[list[Box]], np.ndarray],
    grid_weight: float = 1.5,
    bounds: tuple[float, float] | None = None,
    gridding: bool = True,
    prop_iou: np.ndarray | None = None,
) -> IcbcSampleSet:
    """Build the ICBC sample set from seed overlaps and gridded seed boxes.

    IoU sampling: proposals with max seed IoU >= ``tau_h`` are positives for
    their nearest seed's class, those in ``[tau_l, tau_h)`` are mis-located
    negatives; both are weighted by the nearest seed's confidence in that
    class. Gridding: each seed box is rescaled by ``theta`` around its center
    and split into ``grid_n x grid_n`` cells, which join as negatives at
    ``grid_weight`` in the seed's class; their features come from
    ``grid_feature_fn``.
    """
    if len(seeds) == 0:
        raise ValueError("ICBC sampling requires a non-empty seed set")
    features = np.asarray(features, dtype=np.float64)
    arr = boxes_to_array(boxes)
    max_ious, nearest = _nearest_seed(arr, seeds, prop_iou)
    seed_cls = seeds.classes
    seed_conf = seeds.confidences

    pos_idx = np.flatnonzero(max_ious >= tau_h)
    neg_idx = np.flatnonzero((max_ious >= tau_l) & (max_ious < tau_h))
    iou_idx = np.concatenate([pos_idx, neg_idx])

    feat_blocks = [features[iou_idx]]
    classes = seed_cls[nearest[iou_idx]]
    weight_vals = seed_conf[nearest[iou_idx]]
    kinds = ["pos"] * pos_idx.size + ["neg"] * neg_idx.size
    feature_rows = iou_idx

    if gridding:
        cells = _scaled_grid_cells(seeds.boxes_array, theta, grid_n, rng, bounds)
        cell_feats = np.asarray(grid_feature_fn(cells), dtype=np.float64)
        feat_blocks.append(cell_feats.reshape(len(cells), features.shape[1]))
        per_cell = grid_n * grid_n
        classes = np.concatenate([classes, np.repeat(seed_cls, per_cell)])
        weight_vals = np.concatenate([weight_vals, np.full(len(cells), grid_weight)])
        kinds += ["grid"] * len(cells)
        feature_rows = np.concatenate([feature_rows, np.full(len(cells), -1, dtype=np.int64)])

    n = classes.shape[0]
    feat = np.concatenate(feat_blocks, axis=0)
    targets = np.zeros((num_classes, n))
    targets[classes[: pos_idx.size], np.arange(pos_idx.size)] = 1.0
    weights = np.zeros((num_classes, n))
    weights[classes, np.arange(n)] = weight_vals
    return IcbcSampleSet(
        features=feat,
        targets=targets,
        weights=weights,
        kinds=kinds,
        classes=classes.astype(np.int64),
        feature_rows=feature_rows.astype(np.int64),
    )


def icbc_loss(icbc_probs: Matrix, samples: IcbcSampleSet) -> LossValue:
    """Weighted binary cross-entropy over the ICBC sample set.

    ``icbc_probs`` is (C, U) sigmoid output for the sampled features. The
    value averages over samples; the returned gradient is w.r.t. the
    pre-sigmoid logits: ``w * (p - y) / U``. An empty sample set yields a
    zero loss and gradient (the stage is skipped).
    """
    probs = np.asarray(icbc_probs, dtype=np.float64)
    n = len(samples)
    if n == 0:
        logger.info("empty ICBC sample set: stage skipped")
        return LossValue(0.0, np.zeros_like(probs))
    if probs.shape != samples.targets.shape:
        raise ValueError(f"score shape {probs.shape} != target shape {samples.targets.shape}")
    p = np.clip(probs, _CLAMP, 1.0 - _CLAMP)
    y = samples.targets
    w = samples.weights
    ll = y * np.log(p) + (1.0 - y) * np.log1p(-p)
    value = -float((w * ll).sum()) / n
    grad = w * (probs - y) / n
    return LossValue(value=value, grad=grad)


@dataclass
class MccTargets:
    """Per-proposal pseudo labels and confidence weights for a stage classifier.

    Labels are foreground class ids in ``[0, C)`` or the background id ``C``.
    """

    labels: np.ndarray
    weights: np.ndarray


def assign_mcc_targets(
    boxes: Sequence[Box] | np.ndarray,
    seeds: SeedSet,
    tau_h: float,
    num_classes: int,
    zero_overlap_seed_weight: bool = True,
    prop_iou: np.ndarray | None = None,
) -> MccTargets:
    """Label proposals by max seed overlap: nearest class above ``tau_h``, else background.

    Every proposal's weight is the confidence of its max-overlap seed (ties
    to the lowest seed index). ``zero_overlap_seed_weight=False`` switches
    proposals with zero overlap to every seed to weight 1 instead.
    """
    if len(seeds) == 0:
        raise ValueError("target assignment requires a non-empty seed set")
    arr = boxes_to_array(boxes)
    max_ious, nearest = _nearest_seed(arr, seeds, prop_iou)
    labels = np.where(max_ious >= tau_h, seeds.classes[nearest], num_classes)
    weights = seeds.confidences[nearest].copy()
    if not zero_overlap_seed_weight:
        weights[max_ious == 0.0] = 1.0
    return MccTargets(labels=labels.astype(np.int64), weights=weights)


def mcc_loss(mcc_probs: Matrix, targets: MccTargets) -> LossValue:
    """Weighted cross-entropy over softmax-normalized stage scores.

    ``mcc_probs`` is (C+1, R) with columns summing to 1. The value averages
    over proposals with per-proposal weights; the returned gradient is w.r.t.
    the pre-softmax logits: ``w_i * (p[:, i] - onehot(label_i)) / R``.
    """
    probs = np.asarray(mcc_probs, dtype=np.float64)
    n = probs.shape[1]
    if n == 0:
        return LossValue(0.0, np.zeros_like(probs))
    labels = targets.labels
    w = targets.weights
    picked = np.clip(probs[labels, np.arange(n)], _CLAMP, 1.0 - _CLAMP)
    value = -float(np.sum(w * np.log(picked))) / n
    grad = probs * (w / n)[None, :]
    grad[labels, np.arange(n)] -= w / n
    return LossValue(value=value, grad=grad)
