"""End-to-end training loop composing the image loss, the stage losses and the
refinement-head loss into one total, with per-batch SGD on every head.

Seed mining, sampling and target construction only read scores; no gradient
flows through them. Separate RNG streams cover initialization, batch order
and gridding so that toggling one component never perturbs another's draws.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from ..gradcore import HeadGrads, LinearHead, linear_forward, save_checkpoint, sgd_step, sigmoid
from ..midn import mct_weights, midn_backward, midn_loss
from ..rcnn import assign_rcnn_targets, rcnn_loss
from ..sce import (
    SeedSet,
    assign_mcc_targets,
    icbc_finetune_seeds,
    icbc_loss,
    mcc_loss,
    mine_base_seeds,
    mine_top_seeds,
    sample_icbc,
)
from .config import RunConfig
from .model import build_heads, head_names, midn_scores, stage_icbc, stage_probs, rcnn_outputs
from .synth import PreparedScene, gen_dataset, gen_features, prepare_scenes

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Raised when a loss goes non-finite; carries the offending image and stage."""


@dataclass
class TrainResult:
    heads: dict[str, LinearHead]
    log_lines: list[str]
    train_scenes: list[PreparedScene]
    test_scenes: list[PreparedScene]
    snapshots: dict[int, dict[str, LinearHead]]


@dataclass
class _ImageLosses:
    midn: float = 0.0
    mcc: float = 0.0
    icbc: float = 0.0
    rcnn_cls: float = 0.0
    rcnn_reg: float = 0.0


def _check_finite(value: float, scene_id: str, stage: str) -> None:
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss at image {scene_id}, stage {stage}")


def _image_pass(
    cfg: RunConfig,
    heads: dict[str, LinearHead],
    prepared: PreparedScene,
    grads: dict[str, HeadGrads],
    rng_grid: np.random.Generator,
    midn_only: bool,
) -> _ImageLosses:
    """Forward, losses and gradient accumulation for one image."""
    features = prepared.features
    boxes = prepared.prop_array
    prop_iou = prepared.prop_iou
    labels = prepared.scene.labels
    scene = prepared.scene
    bounds = (scene.width, scene.height)
    losses = _ImageLosses()

    scores = midn_scores(heads, features)
    class_weights = mct_weights(scores.x_img, labels, cfg.mct_tn, cfg.mct_a,
                                gate=cfg.mct_gate, inclusive=cfg.mct_inclusive) if cfg.mct else None
    lv_midn = midn_loss(scores.x_img, labels, class_weights)
    _check_finite(lv_midn.value, scene.scene_id, "midn")
    losses.midn = lv_midn.value
    g_cls, g_det = midn_backward(scores, lv_midn.grad)
    grads["midn_cls"].dw += features.T @ g_cls.T
    grads["midn_cls"].db += g_cls.sum(axis=1)
    grads["midn_det"].dw += features.T @ g_det.T
    grads["midn_det"].db += g_det.sum(axis=1)

    if midn_only:
        return losses

    prev_scores = scores.x_box  # (C, R); stage t mines from stage t-1
    seeds = SeedSet([])
    for t in range(cfg.num_stages):
        stage_name = f"stage_{t}"
        probs = stage_probs(heads, t, features)
        if cfg.igsm_soft:
            base = mine_base_seeds(
                prev_scores, labels, boxes, cfg.alpha, cfg.tau_nms, prop_iou=prop_iou
            )
        else:
            base = mine_top_seeds(prev_scores, labels, boxes)

        if cfg.icbc:
            icbc_scores_props = stage_icbc(heads, t, features)
            seeds = (
                icbc_finetune_seeds(base, boxes, icbc_scores_props, cfg.tau_sur, prop_iou=prop_iou)
                if cfg.igsm_finetune
                else base
            )
            samples = sample_icbc(
                boxes,
                base,
                features,
                cfg.num_classes,
                cfg.tau_l,
                cfg.tau_h,
                cfg.theta,
                cfg.grid_n,
                rng_grid,
                grid_feature_fn=lambda cells: gen_features(scene, cells, cfg),
                grid_weight=cfg.grid_q,
                bounds=bounds,
                gridding=cfg.gridding,
                prop_iou=prop_iou,
            )
            icbc_probs_u = sigmoid(linear_forward(heads[f"icbc_{t}"], samples.features)).T
            lv_icbc = icbc_loss(icbc_probs_u, samples)
            _check_finite(lv_icbc.value, scene.scene_id, stage_name + "/icbc")
            losses.icbc += lv_icbc.value
            # total loss carries gamma * L_icbc
            g_logits = cfg.gamma * lv_icbc.grad  # (C, U)
            grads[f"icbc_{t}"].dw += samples.features.T @ g_logits.T
            grads[f"icbc_{t}"].db += g_logits.sum(axis=1)
        else:
            seeds = base

        targets = assign_mcc_targets(
            boxes, seeds, cfg.tau_h, cfg.num_classes, cfg.zero_overlap_seed_weight,
            prop_iou=prop_iou,
        )
        lv_mcc = mcc_loss(probs, targets)
        _check_finite(lv_mcc.value, scene.scene_id, stage_name + "/mcc")
        losses.mcc += lv_mcc.value
        grads[f"mcc_{t}"].dw += features.T @ lv_mcc.grad.T
        grads[f"mcc_{t}"].db += lv_mcc.grad.sum(axis=1)

        prev_scores = probs[: cfg.num_classes, :]

    rc_probs, deltas = rcnn_outputs(heads, features)
    rtargets = assign_rcnn_targets(
        boxes, seeds, cfg.tau_h, cfg.num_classes, cfg.zero_overlap_seed_weight,
        prop_iou=prop_iou,
    )
    lv_rcnn = rcnn_loss(rc_probs, deltas, rtargets, cfg.num_classes, cfg.class_specific_reg)
    _check_finite(lv_rcnn.total, scene.scene_id, "rcnn")
    losses.rcnn_cls = lv_rcnn.cls.value
    losses.rcnn_reg = lv_rcnn.reg.value
    grads["rcnn_cls"].dw += features.T @ lv_rcnn.cls.grad.T
    grads["rcnn_cls"].db += lv_rcnn.cls.grad.sum(axis=1)
    grads["rcnn_reg"].dw += features.T @ lv_rcnn.reg.grad.T
    grads["rcnn_reg"].db += lv_rcnn.reg.grad.sum(axis=1)
    return losses


def train(
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    prepared: tuple[list[PreparedScene], list[PreparedScene]] | None = None,
    snapshot_hook: Callable[[int, dict[str, LinearHead]], None] | None = None,
) -> TrainResult:
    """Train all heads on the synthetic benchmark for ``cfg.iterations`` batches.

    When ``out_dir`` is given, writes ``checkpoint.bin``, ``train_log.jsonl``
    and ``config.json`` there. ``prepared`` allows reusing an already-built
    dataset (it must match the config's seed and sizes).
    """
    if prepared is None:
        train_raw, test_raw = gen_dataset(cfg)
        train_set = prepare_scenes(train_raw, cfg)
        test_set = prepare_scenes(test_raw, cfg)
    else:
        train_set, test_set = prepared

    rng_init = np.random.default_rng(np.random.SeedSequence(entropy=(cfg.seed, 0x1217)))
    rng_order = np.random.default_rng(np.random.SeedSequence(entropy=(cfg.seed, 0x0DE8)))
    rng_grid = np.random.default_rng(np.random.SeedSequence(entropy=(cfg.seed, 0x69D)))
    heads = build_heads(cfg, rng_init)
    names = head_names(cfg)

    log_lines: list[str] = []
    snapshots: dict[int, dict[str, LinearHead]] = {}
    queue: list[int] = []
    n_train = len(train_set)

    for step in range(cfg.iterations):
        lr = cfg.lr * (cfg.lr_drop_factor if step >= cfg.lr_drop_at else 1.0)
        while len(queue) < cfg.batch_size:
            queue.extend(rng_order.permutation(n_train).tolist())
        batch = [queue.pop(0) for _ in range(cfg.batch_size)]

        grads = {name: HeadGrads.zeros_like(heads[name]) for name in names}
        totals = _ImageLosses()
        midn_only = step < cfg.midn_warmup
        for idx in batch:
            img_losses = _image_pass(cfg, heads, train_set[idx], grads, rng_grid, midn_only)
            totals.midn += img_losses.midn
            totals.mcc += img_losses.mcc
            totals.icbc += img_losses.icbc
            totals.rcnn_cls += img_losses.rcnn_cls
            totals.rcnn_reg += img_losses.rcnn_reg

        inv = 1.0 / cfg.batch_size
        for name in names:
            grads[name].scale_(inv)
            sgd_step(heads[name], grads[name], lr, cfg.momentum, cfg.weight_decay)

        l_midn = totals.midn * inv
        l_mcc = totals.mcc * inv
        l_icbc = totals.icbc * inv
        l_rcnn_cls = totals.rcnn_cls * inv
        l_rcnn_reg = totals.rcnn_reg * inv
        l_total = l_midn + l_mcc + cfg.gamma * l_icbc + l_rcnn_cls + l_rcnn_reg
        log_lines.append(
            json.dumps(
                {
                    "step": step,
                    "lr": lr,
                    "l_midn": l_midn,
                    "l_mcc": l_mcc,
                    "l_icbc": l_icbc,
                    "l_rcnn_cls": l_rcnn_cls,
                    "l_rcnn_reg": l_rcnn_reg,
                    "l_total": l_total,
                },
                sort_keys=True,
            )
        )

        if cfg.snapshot_every and (step + 1) % cfg.snapshot_every == 0:
            snapshots[step + 1] = {name: heads[name].copy() for name in names}
            if snapshot_hook is not None:
                snapshot_hook(step + 1, snapshots[step + 1])

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(heads, out / "checkpoint.bin")
        (out / "train_log.jsonl").write_text("\n".join(log_lines) + "\n")
        cfg.save(out / "config.json")
        for step_id, snap in snapshots.items():
            save_checkpoint(snap, out / f"checkpoint_{step_id:06d}.bin")

    return TrainResult(
        heads=heads,
        log_lines=log_lines,
        train_scenes=train_set,
        test_scenes=test_set,
        snapshots=snapshots,
    )
