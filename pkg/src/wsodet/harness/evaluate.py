"""Inference over prepared scenes and metric computation."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..gradcore import LinearHead
from ..inference import (
    Detection,
    aggregate,
    detect,
    eval_corloc,
    eval_ilc,
    eval_map,
    format_detections,
    scc,
)
from .config import RunConfig
from .model import midn_scores, rcnn_outputs, stage_probs
from .synth import PreparedScene


def image_detections(
    cfg: RunConfig,
    heads: dict[str, LinearHead],
    prepared: PreparedScene,
    use_scc: bool | None = None,
    midn_only: bool = False,
) -> list[Detection]:
    """Run the full inference path on one image.

    ``use_scc`` overrides the config switch; ``midn_only`` scores detections
    from the fused two-stream matrix alone (no stage aggregation, no
    correction), which is the comparison arm of the classification-accuracy
    experiment.
    """
    features = prepared.features
    boxes = prepared.prop_array
    bounds = (prepared.scene.width, prepared.scene.height)
    scores = midn_scores(heads, features)
    midn_matrix = scores.x_box.T  # (R, C)
    rc_probs, deltas = rcnn_outputs(heads, features)

    if midn_only:
        fused = np.concatenate([midn_matrix, np.zeros((midn_matrix.shape[0], 1))], axis=1)
    else:
        stage_outputs = [
            stage_probs(heads, t, features).T for t in range(cfg.num_stages)
        ]
        stage_outputs.append(rc_probs.T)
        fused = aggregate(stage_outputs)
        apply_scc = cfg.scc if use_scc is None else use_scc
        if apply_scc:
            fused = scc(fused, midn_matrix, cfg.scc_lambda, cfg.scc_tau_midn, cfg.scc_empty_noop)

    return detect(
        fused,
        boxes,
        deltas,
        cfg.score_threshold,
        cfg.det_nms,
        bounds=bounds,
        class_picks_per_class=cfg.class_specific_reg,
    )


def run_inference(
    cfg: RunConfig,
    heads: dict[str, LinearHead],
    scenes: list[PreparedScene],
    use_scc: bool | None = None,
    midn_only: bool = False,
) -> dict[str, list[Detection]]:
    return {
        p.scene_id: image_detections(cfg, heads, p, use_scc=use_scc, midn_only=midn_only)
        for p in scenes
    }


def ground_truth_map(scenes: list[PreparedScene]) -> dict[str, list[tuple]]:
    return {
        p.scene_id: [(o.bbox, o.cls) for o in p.scene.objects] for p in scenes
    }


def label_map(scenes: list[PreparedScene]) -> dict[str, np.ndarray]:
    return {p.scene_id: p.scene.labels for p in scenes}


def evaluate(
    cfg: RunConfig,
    heads: dict[str, LinearHead],
    train_scenes: list[PreparedScene],
    test_scenes: list[PreparedScene],
    use_scc: bool | None = None,
) -> dict:
    """Compute the metrics document: per-class AP, mAP, CorLoc, ILC accuracy.

    mAP and ILC accuracy come from the test split; CorLoc from the training
    split, following the usual split conventions.
    """
    test_dets = run_inference(cfg, heads, test_scenes, use_scc=use_scc)
    train_dets = run_inference(cfg, heads, train_scenes, use_scc=use_scc)
    aps, mean_ap = eval_map(
        test_dets, ground_truth_map(test_scenes), cfg.num_classes,
        eleven_point=cfg.eleven_point_map,
    )
    corloc = eval_corloc(train_dets, ground_truth_map(train_scenes))
    ilc = eval_ilc(test_dets, label_map(test_scenes))
    return {
        "ap": {str(c): aps.get(c) for c in range(cfg.num_classes)},
        "map": mean_ap,
        "corloc": corloc,
        "ilc": ilc,
        "config_digest": cfg.digest(),
        "detections_test": test_dets,
        "detections_train": train_dets,
    }


def metrics_document(metrics: dict) -> str:
    """Canonical JSON metrics document (detections stripped)."""
    doc = {k: v for k, v in metrics.items() if not k.startswith("detections_")}
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def write_artifacts(metrics: dict, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(metrics_document(metrics))
    (out / "detections_test.txt").write_text(format_detections(metrics["detections_test"]))
    (out / "detections_trainval.txt").write_text(format_detections(metrics["detections_train"]))
