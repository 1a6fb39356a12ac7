"""Multiple instance detection head: two-stream fusion, image loss, MCT weights.

Scores live in (classes, proposals) orientation. The two streams are
normalized along orthogonal directions — classes for the classification
stream, proposals for the detection stream — and fused elementwise; image
scores are the per-class sums of the fused matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gradcore import (
    LossValue,
    Matrix,
    softmax_backward_columns,
    softmax_backward_rows,
    softmax_over_classes,
    softmax_over_proposals,
)

_CLAMP = 1e-7  # probability floor/ceiling before logarithms


@dataclass
class MidnScores:
    """Fused proposal scores and aggregated image scores.

    ``s_cls`` and ``s_det`` are the normalized streams, retained so the
    backward pass can reuse them.
    """

    x_box: Matrix  # (C, R), entries in (0, 1)
    x_img: np.ndarray  # (C,)
    s_cls: Matrix
    s_det: Matrix


def midn_forward(x_cls: Matrix, x_det: Matrix) -> MidnScores:
    """Fuse the two score streams and aggregate over proposals.

    ``x_box = softmax_over_classes(x_cls) * softmax_over_proposals(x_det)``
    and ``x_img[c] = sum_i x_box[c, i]``.
    """
    x_cls = np.asarray(x_cls, dtype=np.float64)
    x_det = np.asarray(x_det, dtype=np.float64)
    if x_cls.shape != x_det.shape:
        raise ValueError(f"stream shapes differ: {x_cls.shape} vs {x_det.shape}")
    s_cls = softmax_over_classes(x_cls)
    s_det = softmax_over_proposals(x_det)
    x_box = s_cls * s_det
    x_img = x_box.sum(axis=1)
    # each row sums a product of two normalized factors; mass cannot exceed 1
    assert np.all(x_img < 1.0 + 1e-9)
    return MidnScores(x_box=x_box, x_img=x_img, s_cls=s_cls, s_det=s_det)


def midn_loss(
    x_img: np.ndarray, labels: np.ndarray, class_weights: np.ndarray | None = None
) -> LossValue:
    """Binary cross-entropy between aggregated image scores and image labels.

    Scores are clamped to ``[1e-7, 1 - 1e-7]`` before the logarithms. The
    returned gradient is w.r.t. ``x_img`` (zero where the clamp is active).
    ``class_weights`` defaults to all ones.
    """
    x_img = np.asarray(x_img, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    w = np.ones_like(x_img) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    p = np.clip(x_img, _CLAMP, 1.0 - _CLAMP)
    value = -float(np.sum(w * (y * np.log(p) + (1.0 - y) * np.log1p(-p))))
    grad = w * (-y / p + (1.0 - y) / (1.0 - p))
    grad[(x_img < _CLAMP) | (x_img > 1.0 - _CLAMP)] = 0.0
    return LossValue(value=value, grad=grad)


def midn_backward(scores: MidnScores, grad_img: np.ndarray) -> tuple[Matrix, Matrix]:
    """Propagate dL/dx_img back to the two pre-softmax score matrices.

    Returns ``(grad_x_cls, grad_x_det)``.
    """
    grad_box = np.broadcast_to(
        np.asarray(grad_img, dtype=np.float64)[:, None], scores.x_box.shape
    )
    grad_s_cls = grad_box * scores.s_det
    grad_s_det = grad_box * scores.s_cls
    grad_x_cls = softmax_backward_columns(scores.s_cls, grad_s_cls)
    grad_x_det = softmax_backward_rows(scores.s_det, grad_s_det)
    return grad_x_cls, grad_x_det


def mct_weights(
    x_img: np.ndarray,
    labels: np.ndarray,
    tolerance: int = 1,
    weight: float = 0.4,
    gate: bool = True,
    inclusive: bool = False,
) -> np.ndarray:
    """Rank-based class weights tolerating likely-misclassified classes.

    All classes are ranked by image score descending (rank 0 highest, ties by
    class index). With ``n_p`` present classes, present classes ranked in
    ``[n_p, n_p + tolerance)`` and absent classes ranked in ``[0, n_p)`` get
    ``weight``; everything else gets 1. With ``gate=True`` (default) the
    absent-class down-weighting only applies when at least one present class
    fell into its window, treating the two windows as paired mistakes.
    ``inclusive=True`` switches both windows to closed intervals.
    """
    x_img = np.asarray(x_img, dtype=np.float64)
    y = np.asarray(labels)
    n_classes = x_img.shape[0]
    n_present = int(np.sum(y != 0))
    if n_present < 1:
        raise ValueError("at least one class must be present")

    order = np.argsort(-x_img, kind="stable")
    rank = np.empty(n_classes, dtype=np.int64)
    rank[order] = np.arange(n_classes)

    present = y != 0
    hi = n_present + tolerance
    if inclusive:
        tolerated = present & (rank >= n_present) & (rank <= hi)
        suspicious = ~present & (rank <= n_present)
    else:
        tolerated = present & (rank >= n_present) & (rank < hi)
        suspicious = ~present & (rank < n_present)

    weights = np.ones(n_classes, dtype=np.float64)
    if gate and not tolerated.any():
        return weights
    weights[tolerated] = weight
    weights[suspicious] = weight
    return weights
