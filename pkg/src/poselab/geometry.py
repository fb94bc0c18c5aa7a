"""Keypoint geometry: normalization, keypoint similarity, and derived boxes.

Coordinates are normalized to [0, 1] by dividing pixel values by the larger
image side, so a square image maps onto the full unit square and a
non-square one onto a sub-rectangle.  The similarity between a predicted and
a ground-truth keypoint at normalized distance d is

    KS = exp(-d^2 / (2 s^2 kappa^2))

with s the instance scale (sqrt of normalized area) and kappa a per-keypoint
fall-off parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

__all__ = [
    "Keypoint",
    "PersonInstance",
    "KsParams",
    "DegenerateInstanceError",
    "normalize_instance",
    "keypoint_similarity",
    "instance_oks",
    "bbox_from_keypoints",
]

DEFAULT_KAPPA = 0.1


class DegenerateInstanceError(ValueError):
    """Instance lacks the geometry an operation needs (no area, no visible kp)."""


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    visible: bool = True


@dataclass(frozen=True)
class PersonInstance:
    """One person: keypoints plus a derived (or annotated) box and area."""

    keypoints: tuple[Keypoint, ...]
    bbox: tuple[float, float, float, float]
    area: float

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if x0 > x1 or y0 > y1:
            raise ValueError(f"bbox corners out of order: {self.bbox}")

    @property
    def num_keypoints(self) -> int:
        return len(self.keypoints)

    @property
    def scale(self) -> float:
        """s of the similarity metric: sqrt of the normalized area."""
        return math.sqrt(self.area)


@dataclass(frozen=True)
class KsParams:
    """Per-keypoint fall-off vector; every entry must be positive."""

    kappa: tuple[float, ...]

    def __post_init__(self):
        if any(k <= 0 for k in self.kappa):
            raise ValueError("all fall-off parameters must be > 0")

    @classmethod
    def uniform(cls, num_keypoints: int, kappa: float = DEFAULT_KAPPA) -> "KsParams":
        return cls(kappa=(kappa,) * num_keypoints)


def normalize_instance(
    keypoints: list[tuple[float, float, bool]],
    img_w: int,
    img_h: int,
    bbox: tuple[float, float, float, float] | None = None,
    area: float | None = None,
) -> PersonInstance:
    """Convert pixel-coordinate annotations to a normalized PersonInstance.

    All coordinates are divided by max(img_w, img_h); the area scales by the
    inverse square of the same divisor.  When no bbox/area is supplied they
    are derived from the visible keypoints.
    """
    if img_w <= 0 or img_h <= 0:
        raise ValueError(f"image dimensions must be positive, got {img_w}x{img_h}")
    div = float(max(img_w, img_h))
    kps = tuple(Keypoint(x / div, y / div, bool(v)) for x, y, v in keypoints)
    if bbox is not None:
        bbox = tuple(c / div for c in bbox)
    if area is not None:
        area = area / (div * div)
    if bbox is None:
        bbox = _tight_bbox(kps, margin=0.0)
    if area is None:
        area = (bbox[2] - bbox[0]) * (bbox[3] - bbox[1])
    return PersonInstance(keypoints=kps, bbox=bbox, area=area)


def keypoint_similarity(d: float, s: float, kappa: float) -> float:
    """Gaussian similarity of a keypoint displaced by normalized distance d."""
    if s <= 0:
        raise ValueError(f"scale must be > 0, got {s}")
    if kappa <= 0:
        raise ValueError(f"kappa must be > 0, got {kappa}")
    if d < 0:
        raise ValueError(f"distance must be >= 0, got {d}")
    return math.exp(-(d * d) / (2.0 * s * s * kappa * kappa))


def instance_oks(pred: PersonInstance, gt: PersonInstance, params: KsParams) -> float:
    """Mean keypoint similarity over the ground truth's visible keypoints.

    The scale s comes from the ground-truth instance.  With no visible
    keypoint the similarity is undefined; we return 1 only when the
    prediction coincides with the ground truth exactly, else 0.
    """
    if pred.num_keypoints != gt.num_keypoints:
        raise ValueError(
            f"keypoint counts differ: {pred.num_keypoints} vs {gt.num_keypoints}"
        )
    if gt.area <= 0:
        raise DegenerateInstanceError("ground-truth instance has zero area")
    s = gt.scale
    total = 0.0
    count = 0
    for p, g, kappa in zip(pred.keypoints, gt.keypoints, params.kappa):
        if not g.visible:
            continue
        d = math.hypot(p.x - g.x, p.y - g.y)
        total += keypoint_similarity(d, s, kappa)
        count += 1
    if count == 0:
        same = all(
            p.x == g.x and p.y == g.y for p, g in zip(pred.keypoints, gt.keypoints)
        )
        return 1.0 if same else 0.0
    return total / count


def _tight_bbox(kps: tuple[Keypoint, ...], margin: float) -> tuple[float, float, float, float]:
    xs = [k.x for k in kps if k.visible]
    ys = [k.y for k in kps if k.visible]
    if not xs:
        raise DegenerateInstanceError("no visible keypoints to derive a bbox from")
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if margin > 0.0:
        pad = margin * math.hypot(x1 - x0, y1 - y0)
        x0, y0, x1, y1 = x0 - pad, y0 - pad, x1 + pad, y1 + pad
    return (x0, y0, x1, y1)


def bbox_from_keypoints(
    keypoints: tuple[Keypoint, ...] | PersonInstance, margin: float = 0.0
) -> tuple[float, float, float, float]:
    """Tight box over visible keypoints, padded by ``margin`` of its diagonal."""
    if isinstance(keypoints, PersonInstance):
        keypoints = keypoints.keypoints
    return _tight_bbox(tuple(keypoints), margin)


def instance_from_keypoints(
    keypoints: list[Keypoint] | list[tuple[float, float, bool]],
    margin: float = 0.0,
    area: float | None = None,
) -> PersonInstance:
    """Build a normalized PersonInstance with a keypoint-derived box."""
    kps = tuple(
        k if isinstance(k, Keypoint) else Keypoint(k[0], k[1], bool(k[2]))
        for k in keypoints
    )
    bbox = _tight_bbox(kps, margin)
    if area is None:
        area = (bbox[2] - bbox[0]) * (bbox[3] - bbox[1])
    return PersonInstance(keypoints=kps, bbox=bbox, area=area)
