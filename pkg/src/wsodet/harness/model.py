"""Head assembly and per-image forward passes shared by training and inference."""

from __future__ import annotations

import numpy as np

from ..gradcore import LinearHead, linear_forward, softmax_over_classes
from ..midn import MidnScores, midn_forward
from ..sce import icbc_forward
from .config import RunConfig


def feature_dim(cfg: RunConfig) -> int:
    return 2 * cfg.num_classes + cfg.noise_dim


def head_names(cfg: RunConfig) -> list[str]:
    names = ["midn_cls", "midn_det"]
    names += [f"mcc_{t}" for t in range(cfg.num_stages)]
    names += [f"icbc_{t}" for t in range(cfg.num_stages)]
    names += ["rcnn_cls", "rcnn_reg"]
    return names


def build_heads(cfg: RunConfig, rng: np.random.Generator) -> dict[str, LinearHead]:
    """Create all scoring heads in a fixed order with deterministic init."""
    f = feature_dim(cfg)
    c = cfg.num_classes
    reg_out = 4 * c if cfg.class_specific_reg else 4
    dims = {"midn_cls": c, "midn_det": c, "rcnn_cls": c + 1, "rcnn_reg": reg_out}
    for t in range(cfg.num_stages):
        dims[f"mcc_{t}"] = c + 1
        dims[f"icbc_{t}"] = c
    return {name: LinearHead.init(f, dims[name], rng, scale=cfg.init_scale) for name in head_names(cfg)}


def midn_streams(heads: dict[str, LinearHead], features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pre-softmax (C, R) score matrices for the two streams."""
    x_cls = linear_forward(heads["midn_cls"], features).T
    x_det = linear_forward(heads["midn_det"], features).T
    return x_cls, x_det


def midn_scores(heads: dict[str, LinearHead], features: np.ndarray) -> MidnScores:
    x_cls, x_det = midn_streams(heads, features)
    return midn_forward(x_cls, x_det)


def stage_probs(heads: dict[str, LinearHead], t: int, features: np.ndarray) -> np.ndarray:
    """(C+1, R) softmax scores of refinement stage t."""
    return softmax_over_classes(linear_forward(heads[f"mcc_{t}"], features).T)


def stage_icbc(heads: dict[str, LinearHead], t: int, features: np.ndarray) -> np.ndarray:
    """(C, R) sigmoid scores of the stage-t intra-class binary classifier."""
    return icbc_forward(heads[f"icbc_{t}"], features)


def rcnn_outputs(heads: dict[str, LinearHead], features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Softmax classification scores (C+1, R) and regression deltas (4[, C], R)."""
    cls_probs = softmax_over_classes(linear_forward(heads["rcnn_cls"], features).T)
    deltas = linear_forward(heads["rcnn_reg"], features).T
    return cls_probs, deltas
