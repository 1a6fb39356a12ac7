"""Synthetic benchmark: scenes, procedural proposals, frozen feature model.

A scene is a blank canvas with 1-4 objects. Each object has a full extent
box and a smaller discriminative part box strictly inside it. The feature
model scores a box by its overlap with parts and extents, with parts scoring
higher — so a detector that chases the strongest feature locks onto parts,
which is exactly the failure mode the refinement machinery has to fix.
Everything is a pure function of (seed, scene, box): datasets, proposals and
features replay bit-identically.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np

from ..boxgeom import Box, boxes_to_array, clip_box, iou_matrix
from .config import RunConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SceneObject:
    cls: int
    bbox: Box  # full extent
    part: Box  # discriminative part, strictly inside bbox


@dataclass
class SyntheticScene:
    scene_id: str
    index: int
    width: float
    height: float
    objects: list[SceneObject]
    labels: np.ndarray  # (C,) binary presence vector


@dataclass
class PreparedScene:
    """A scene bundled with its proposals and cached proposal features."""

    scene: SyntheticScene
    proposals: list[Box]
    prop_array: np.ndarray
    features: np.ndarray
    _prop_iou: np.ndarray | None = None

    @property
    def scene_id(self) -> str:
        return self.scene.scene_id

    @property
    def prop_iou(self) -> np.ndarray:
        """Pairwise proposal IoU matrix, computed once per scene on first use."""
        if self._prop_iou is None:
            self._prop_iou = iou_matrix(self.prop_array, self.prop_array)
        return self._prop_iou


def _sample_object(
    rng: np.random.Generator, cfg: RunConfig, placed_same_class: list[Box], cls: int
) -> SceneObject | None:
    """Try to place one object of a given class; None if it cannot fit."""
    for _ in range(30):
        w = rng.uniform(18.0, 45.0)
        h = rng.uniform(18.0, 45.0)
        x1 = rng.uniform(0.0, cfg.canvas_w - w)
        y1 = rng.uniform(0.0, cfg.canvas_h - h)
        bbox = Box(x1, y1, x1 + w, y1 + h)
        if placed_same_class:
            overlaps = iou_matrix(
                boxes_to_array([bbox]), boxes_to_array(placed_same_class)
            )[0]
            if overlaps.max() > 0.3:
                continue
        # part area ratio stays inside [0.05, 0.4]; at most one cap binds below
        ratio = rng.uniform(cfg.part_ratio_lo, cfg.part_ratio_hi)
        aspect = rng.uniform(0.75, 1.33)
        dw = w * np.sqrt(ratio * aspect)
        dh = ratio * w * h / dw
        if dw > 0.9 * w:
            dw = 0.9 * w
            dh = ratio * w * h / dw
        if dh > 0.9 * h:
            dh = 0.9 * h
            dw = ratio * w * h / dh
        px = x1 + rng.uniform(0.02, 0.98) * (w - dw)
        py = y1 + rng.uniform(0.02, 0.98) * (h - dh)
        part = Box(px, py, px + dw, py + dh)
        return SceneObject(cls=cls, bbox=bbox, part=part)
    return None


def _gen_scene(scene_id: str, index: int, rng: np.random.Generator, cfg: RunConfig) -> SyntheticScene:
    for _ in range(20):
        n_objects = int(rng.integers(1, 5))
        objects: list[SceneObject] = []
        for _ in range(n_objects):
            cls = int(rng.integers(cfg.num_classes))
            same = [o.bbox for o in objects if o.cls == cls]
            obj = _sample_object(rng, cfg, same, cls)
            if obj is None:
                logger.info("scene %s: skipped an unplaceable object", scene_id)
                continue
            objects.append(obj)
        if objects:
            labels = np.zeros(cfg.num_classes, dtype=np.int64)
            for o in objects:
                labels[o.cls] = 1
            return SyntheticScene(
                scene_id=scene_id,
                index=index,
                width=cfg.canvas_w,
                height=cfg.canvas_h,
                objects=objects,
                labels=labels,
            )
    raise RuntimeError(f"could not generate any object for scene {scene_id}")


def gen_dataset(cfg: RunConfig) -> tuple[list[SyntheticScene], list[SyntheticScene]]:
    """Deterministic train/test scene lists for a config's seed and sizes."""
    root = np.random.SeedSequence(entropy=(cfg.seed, 0xD47A))
    children = root.spawn(cfg.train_scenes + cfg.test_scenes)
    train = [
        _gen_scene(f"train_{i:04d}", i, np.random.default_rng(children[i]), cfg)
        for i in range(cfg.train_scenes)
    ]
    test = [
        _gen_scene(
            f"test_{i:04d}",
            cfg.train_scenes + i,
            np.random.default_rng(children[cfg.train_scenes + i]),
            cfg,
        )
        for i in range(cfg.test_scenes)
    ]
    return train, test


def gen_proposals(scene: SyntheticScene, seed: int) -> list[Box]:
    """Procedural region proposals: object jitters, sliding windows, random boxes.

    Each object contributes its extent and part boxes verbatim plus jittered
    copies (center shift and rescale up to 30% of size); three window scales
    sweep the canvas; uniform random boxes fill in the rest. Exact duplicate
    coordinates are dropped.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, scene.index, 0xB0)))
    w_canvas, h_canvas = scene.width, scene.height
    proposals: list[Box] = []

    def add(box: Box) -> None:
        clipped = clip_box(box, w_canvas, h_canvas)
        if clipped.width >= 2.0 and clipped.height >= 2.0:
            proposals.append(clipped)

    for obj in scene.objects:
        for base in (obj.bbox, obj.part):
            add(base)
            w, h = base.width, base.height
            cx, cy = base.center
            for _ in range(11):
                nw = w * rng.uniform(0.7, 1.3)
                nh = h * rng.uniform(0.7, 1.3)
                ncx = cx + rng.uniform(-0.3, 0.3) * w
                ncy = cy + rng.uniform(-0.3, 0.3) * h
                add(Box(ncx - 0.5 * nw, ncy - 0.5 * nh, ncx + 0.5 * nw, ncy + 0.5 * nh))

    for size in (20.0, 40.0, 60.0):
        stride = size / 2.0
        xs = list(np.arange(0.0, w_canvas - size + 1e-9, stride))
        if xs[-1] < w_canvas - size:
            xs.append(w_canvas - size)
        ys = list(np.arange(0.0, h_canvas - size + 1e-9, stride))
        if ys[-1] < h_canvas - size:
            ys.append(h_canvas - size)
        for y in ys:
            for x in xs:
                add(Box(x, y, x + size, y + size))

    for _ in range(50):
        bw = rng.uniform(8.0, 70.0)
        bh = rng.uniform(8.0, 70.0)
        x1 = rng.uniform(0.0, w_canvas - bw)
        y1 = rng.uniform(0.0, h_canvas - bh)
        add(Box(x1, y1, x1 + bw, y1 + bh))

    unique: dict[tuple, Box] = {}
    for box in proposals:
        unique.setdefault(box.as_tuple(), box)
    return list(unique.values())


def _noise_features(scene_id: str, arr: np.ndarray, cfg: RunConfig) -> np.ndarray:
    """Seeded per-box noise dims: a pure function of (scene id, exact box coords)."""
    n = arr.shape[0]
    dim = cfg.noise_dim
    if dim == 0:
        return np.zeros((n, 0))
    if dim % 2 != 0:
        raise ValueError("noise_dim must be even")
    prefix = scene_id.encode("utf-8") + b"|"
    raw = np.empty((n, dim), dtype=np.uint64)
    digest_size = 8 * dim
    for i in range(n):
        h = hashlib.blake2b(prefix + arr[i].tobytes(), digest_size=digest_size)
        raw[i] = np.frombuffer(h.digest(), dtype="<u8")
    # uniforms in (0, 1) from the top 53 bits, then Box-Muller pairs
    u = (raw >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
    u = np.clip(u, 2.0 ** -53, 1.0 - 2.0 ** -53)
    half = dim // 2
    r = np.sqrt(-2.0 * np.log(u[:, :half]))
    phi = 2.0 * np.pi * u[:, half:]
    normals = np.concatenate([r * np.cos(phi), r * np.sin(phi)], axis=1)
    return cfg.noise_scale * normals


def gen_features(scene: SyntheticScene, boxes, cfg: RunConfig) -> np.ndarray:
    """Frozen feature model: per-class part/extent overlap channels plus noise.

    Feature layout per box: for each class c, feature ``2c`` is the max IoU
    with any class-c part box times ``s_part`` and ``2c + 1`` the max IoU
    with any class-c extent box times ``s_full`` (``s_part > s_full`` makes
    parts the stronger signal); the final ``noise_dim`` entries are seeded
    noise. Pure in (scene id, box), shared by proposals and grid cells.
    """
    arr = boxes_to_array(boxes)
    n = arr.shape[0]
    feats = np.zeros((n, 2 * cfg.num_classes + cfg.noise_dim))
    if n == 0:
        return feats
    for c in range(cfg.num_classes):
        parts = [o.part for o in scene.objects if o.cls == c]
        extents = [o.bbox for o in scene.objects if o.cls == c]
        if parts:
            feats[:, 2 * c] = cfg.s_part * iou_matrix(arr, boxes_to_array(parts)).max(axis=1)
            feats[:, 2 * c + 1] = cfg.s_full * iou_matrix(arr, boxes_to_array(extents)).max(axis=1)
    feats[:, 2 * cfg.num_classes :] = _noise_features(scene.scene_id, arr, cfg)
    return feats


def prepare_scenes(scenes: list[SyntheticScene], cfg: RunConfig) -> list[PreparedScene]:
    """Attach proposals and cached proposal features to each scene."""
    prepared = []
    for scene in scenes:
        proposals = gen_proposals(scene, cfg.seed)
        arr = boxes_to_array(proposals)
        prepared.append(
            PreparedScene(
                scene=scene,
                proposals=proposals,
                prop_array=arr,
                features=gen_features(scene, arr, cfg),
            )
        )
    return prepared


def dataset_summary_lines(scenes: list[SyntheticScene]) -> list[str]:
    """Canonical one-line-per-scene dataset dump (used by the gen-data command)."""
    lines = []
    for s in scenes:
        objs = ";".join(
            f"{o.cls}:{o.bbox.x1:.2f},{o.bbox.y1:.2f},{o.bbox.x2:.2f},{o.bbox.y2:.2f}"
            f":{o.part.x1:.2f},{o.part.y1:.2f},{o.part.x2:.2f},{o.part.y2:.2f}"
            for o in s.objects
        )
        labels = "".join(str(int(v)) for v in s.labels)
        lines.append(f"{s.scene_id} {s.width:g}x{s.height:g} labels={labels} objects={objs}")
    return lines
