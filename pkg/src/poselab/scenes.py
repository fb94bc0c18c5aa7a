"""Synthetic articulated stick-figure scenes with keypoint annotations.

Each scene renders 1..max_persons figures as bright anti-aliased bone
segments (plus joint blobs) over a textured noise background.  Keypoints sit
at the joints; a figure translated partly out of frame gets its out-of-bounds
keypoints marked invisible.  Generation is deterministic per (seed, scene id).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import PersonInstance, normalize_instance

__all__ = [
    "SceneSpec",
    "RawInstance",
    "Annotation",
    "COCO17_SKELETON",
    "STAR5_SKELETON",
    "canonical_pose",
    "gen_scene",
    "gen_dataset",
    "normalized_instances",
]

# tree-shaped 17-node skeleton (nose-rooted): eyes/ears, arms, hips, legs
COCO17_SKELETON: tuple[tuple[int, int], ...] = (
    (0, 1), (0, 2), (1, 3), (2, 4),
    (0, 5), (0, 6), (5, 7), (7, 9), (6, 8), (8, 10),
    (5, 11), (6, 12), (11, 13), (13, 15), (12, 14), (14, 16),
)

# 5-node smoke-test skeleton: chest-rooted star
STAR5_SKELETON: tuple[tuple[int, int], ...] = ((1, 0), (1, 2), (1, 3), (1, 4))

_CANONICAL_17 = np.array(
    [
        (0.00, -0.46),  # nose
        (-0.05, -0.50), (0.05, -0.50),  # eyes
        (-0.11, -0.48), (0.11, -0.48),  # ears
        (-0.18, -0.30), (0.18, -0.30),  # shoulders
        (-0.30, -0.10), (0.30, -0.10),  # elbows
        (-0.36, 0.10), (0.36, 0.10),  # wrists
        (-0.12, 0.08), (0.12, 0.08),  # hips
        (-0.14, 0.30), (0.14, 0.30),  # knees
        (-0.15, 0.50), (0.15, 0.50),  # ankles
    ]
)

_CANONICAL_5 = np.array(
    [
        (0.00, -0.45),  # head
        (0.00, 0.00),  # chest
        (-0.40, 0.05),  # left hand
        (0.40, 0.05),  # right hand
        (0.00, 0.45),  # pelvis
    ]
)


def canonical_pose(num_keypoints: int) -> np.ndarray:
    if num_keypoints == 17:
        return _CANONICAL_17.copy()
    if num_keypoints == 5:
        return _CANONICAL_5.copy()
    raise ValueError(f"no canonical pose for {num_keypoints} keypoints")


def default_skeleton(num_keypoints: int) -> tuple[tuple[int, int], ...]:
    return COCO17_SKELETON if num_keypoints == 17 else STAR5_SKELETON


@dataclass(frozen=True)
class SceneSpec:
    img_size: int = 160
    max_persons: int = 4
    num_keypoints: int = 5
    skeleton: tuple[tuple[int, int], ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.img_size < 64:
            raise ValueError("img_size must be >= 64")
        skel = self.skeleton or default_skeleton(self.num_keypoints)
        object.__setattr__(self, "skeleton", tuple(skel))
        if not _is_tree(self.skeleton, self.num_keypoints):
            raise ValueError("skeleton must form a tree over the keypoints")


def _is_tree(edges: tuple[tuple[int, int], ...], n: int) -> bool:
    if len(edges) != n - 1:
        return False
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra == rb:
            return False
        parent[ra] = rb
    return True


@dataclass
class RawInstance:
    """Pixel-coordinate annotation of one person."""

    keypoints: list  # [(x, y, v), ...] pixels, v in {0, 1}
    bbox: list  # [x0, y0, x1, y1] pixels
    area: float


@dataclass
class Annotation:
    scene_id: int
    width: int
    height: int
    instances: list = field(default_factory=list)


def _sample_figure(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Keypoints of one figure in pixel coordinates, possibly truncated."""
    size = spec.img_size
    base = canonical_pose(spec.num_keypoints)
    scale = rng.uniform(0.28, 0.55) * size
    theta = rng.normal(0.0, 0.25)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    jitter = rng.normal(0.0, 0.03, size=base.shape)
    pts = (base + jitter) @ rot.T * scale
    # keep the torso mostly in frame; the margin allows limb truncation
    cx = rng.uniform(0.2 * size, 0.8 * size)
    cy = rng.uniform(0.2 * size, 0.8 * size)
    return pts + np.array([cx, cy])


def _render(image: np.ndarray, pts: np.ndarray, skeleton, rng: np.random.Generator) -> None:
    size = image.shape[0]
    ys, xs = np.mgrid[0:size, 0:size]
    sigma = max(size / 160.0, 0.8)
    for a, b in skeleton:
        pa, pb = pts[a], pts[b]
        seg = pb - pa
        seg_len2 = float(seg @ seg)
        if seg_len2 < 1e-9:
            continue
        rel = np.stack([xs - pa[0], ys - pa[1]], axis=-1)
        tproj = np.clip((rel @ seg) / seg_len2, 0.0, 1.0)
        nearest = pa + tproj[..., None] * seg
        d2 = (xs - nearest[..., 0]) ** 2 + (ys - nearest[..., 1]) ** 2
        np.maximum(image, 0.85 * np.exp(-d2 / (2 * sigma**2)), out=image)
    for px, py in pts:
        d2 = (xs - px) ** 2 + (ys - py) ** 2
        np.maximum(image, np.exp(-d2 / (2 * (1.6 * sigma) ** 2)), out=image)


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    coarse = rng.uniform(0.0, 0.25, size=(size // 8, size // 8))
    tex = np.kron(coarse, np.ones((8, 8)))
    return (tex + rng.uniform(0.0, 0.05, size=(size, size))).astype(np.float64)


def gen_scene(spec: SceneSpec, rng: np.random.Generator, scene_id: int = 0):
    """Render one scene; returns (image float32 (S,S) in [0,1], Annotation)."""
    size = spec.img_size
    image = _background(size, rng)
    ann = Annotation(scene_id=scene_id, width=size, height=size)
    n_persons = int(rng.integers(1, spec.max_persons + 1))
    for _ in range(n_persons):
        for _attempt in range(20):
            pts = _sample_figure(spec, rng)
            vis = (
                (pts[:, 0] >= 0) & (pts[:, 0] < size) & (pts[:, 1] >= 0) & (pts[:, 1] < size)
            )
            if vis.any():
                break
        else:
            continue
        _render(image, pts, spec.skeleton, rng)
        vx = pts[vis]
        x0, y0 = vx.min(axis=0)
        x1, y1 = vx.max(axis=0)
        pad = 0.04 * max(x1 - x0, y1 - y0, 1.0)
        x0 = float(np.clip(x0 - pad, 0.0, size - 1.0))
        y0 = float(np.clip(y0 - pad, 0.0, size - 1.0))
        x1 = float(np.clip(x1 + pad, x0 + 0.5, size - 1.0 + 0.5))
        y1 = float(np.clip(y1 + pad, y0 + 0.5, size - 1.0 + 0.5))
        ann.instances.append(
            RawInstance(
                keypoints=[[float(x), float(y), int(v)] for (x, y), v in zip(pts, vis)],
                bbox=[float(x0), float(y0), float(x1), float(y1)],
                area=float((x1 - x0) * (y1 - y0)),
            )
        )
    return np.clip(image, 0.0, 1.0).astype(np.float32), ann


def gen_dataset(spec: SceneSpec, count: int):
    """Generate ``count`` scenes with independent per-scene RNG streams."""
    images = []
    annotations = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence((spec.seed, i)))
        img, ann = gen_scene(spec, rng, scene_id=i)
        images.append(img)
        annotations.append(ann)
    return images, annotations


def normalized_instances(ann: Annotation) -> list[PersonInstance]:
    """Convert an annotation's pixel instances to normalized ones."""
    return [
        normalize_instance(
            [(x, y, bool(v)) for x, y, v in inst.keypoints],
            ann.width,
            ann.height,
            bbox=tuple(inst.bbox),
            area=inst.area,
        )
        for inst in ann.instances
    ]
