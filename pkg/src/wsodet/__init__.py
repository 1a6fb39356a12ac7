"""Weakly supervised object detection, desk scale.

A complete two-stage multiple-instance detection pipeline — two-stream image
classification head, chained refinement stages with intra-class binary
classification and seed mining, an R-CNN style refinement head, and
inference-time score correction — trained end to end on a deterministic
synthetic benchmark with a frozen feature model in place of a CNN backbone.
"""

from .boxgeom import Box, BoxAssignment, assign_to_seeds, grid_boxes, iou, nms, scale_box
from .gradcore import LinearHead, LossValue, finite_diff_check, sgd_step
from .inference import Detection, aggregate, detect, eval_corloc, eval_ilc, eval_map, scc
from .midn import MidnScores, mct_weights, midn_forward, midn_loss
from .sce import Seed, SeedSet, icbc_finetune_seeds, icbc_loss, mcc_loss, mine_base_seeds
from .rcnn import apply_regression, assign_rcnn_targets, rcnn_loss

__version__ = "0.1.0"

__all__ = [
    "Box",
    "BoxAssignment",
    "Detection",
    "LinearHead",
    "LossValue",
    "MidnScores",
    "Seed",
    "SeedSet",
    "aggregate",
    "apply_regression",
    "assign_rcnn_targets",
    "assign_to_seeds",
    "detect",
    "eval_corloc",
    "eval_ilc",
    "eval_map",
    "finite_diff_check",
    "grid_boxes",
    "icbc_finetune_seeds",
    "icbc_loss",
    "iou",
    "mcc_loss",
    "mct_weights",
    "midn_forward",
    "midn_loss",
    "mine_base_seeds",
    "nms",
    "scale_box",
    "scc",
    "sgd_step",
    "rcnn_loss",
]
