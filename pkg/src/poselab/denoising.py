"""Positive/negative denoising query generation and group layout.

Pose denoising perturbs each ground-truth keypoint by a displacement whose
similarity value is sampled directly: draw KS, invert the similarity metric
to get the displacement magnitude

    alpha = s * kappa * sqrt(-2 ln KS)

and move the keypoint by alpha along a uniformly random unit vector.
Positive queries sample KS from [0.5, 1), negative ones from [0.1, 0.5).
Box denoising shifts the two box corners by (a1*h, a2*w) with the a's drawn
from a central band (positives) or the surrounding band (negatives).

Queries are organized in groups; an attention mask keeps each group and the
ordinary matching queries from ever attending across partitions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geometry import (
    DegenerateInstanceError,
    Keypoint,
    KsParams,
    PersonInstance,
)
from .tensor import AttnMask

__all__ = [
    "Polarity",
    "NoisySample",
    "DnLayout",
    "POSITIVE_KS_BAND",
    "NEGATIVE_KS_BAND",
    "DEFAULT_LAMBDA_BOX",
    "alpha_from_ks",
    "gen_pose_queries",
    "gen_box_queries",
    "build_dn_layout",
    "build_attention_mask",
]

POSITIVE_KS_BAND = (0.5, 1.0)
NEGATIVE_KS_BAND = (0.1, 0.5)
DEFAULT_LAMBDA_BOX = 0.5


class Polarity(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


@dataclass
class NoisySample:
    """A perturbed instance plus the similarity values that produced it."""

    instance: PersonInstance
    polarity: Polarity
    sampled_ks: list  # per-keypoint KS draws (pose) or per-corner (a1, a2) pairs (box)
    source_gt: int


@dataclass(frozen=True)
class DnLayout:
    """Index arrangement of denoising queries ahead of the matching queries.

    Queries 0..total_dn_queries-1 are denoising queries, laid out group by
    group; within a group all positives come first, then all negatives, one
    of each per ground-truth instance.  Matching queries start at
    ``matching_query_offset``.
    """

    groups: int
    num_gt: int
    matching_query_offset: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "matching_query_offset", self.total_dn_queries)

    @property
    def total_dn_queries(self) -> int:
        return self.groups * 2 * self.num_gt

    def group_slice(self, g: int) -> slice:
        width = 2 * self.num_gt
        return slice(g * width, (g + 1) * width)

    def positive_indices(self, g: int) -> range:
        base = g * 2 * self.num_gt
        return range(base, base + self.num_gt)

    def negative_indices(self, g: int) -> range:
        base = g * 2 * self.num_gt + self.num_gt
        return range(base, base + self.num_gt)

    def partition_of(self, index: int) -> int:
        """Group id for DN queries, ``groups`` for matching queries."""
        if index < self.total_dn_queries:
            return index // (2 * self.num_gt)
        return self.groups


def alpha_from_ks(ks: float, s: float, kappa: float) -> float:
    """Displacement magnitude whose similarity equals ``ks`` exactly."""
    if not 0.0 < ks <= 1.0:
        raise ValueError(f"similarity must be in (0, 1], got {ks}")
    if s <= 0 or kappa <= 0:
        raise ValueError("scale and kappa must be > 0")
    return s * kappa * math.sqrt(-2.0 * math.log(ks))


def _unit_vector(rng: np.random.Generator) -> tuple[float, float]:
    theta = rng.uniform(0.0, 2.0 * math.pi)
    return math.cos(theta), math.sin(theta)


def gen_pose_queries(
    gt: PersonInstance,
    polarity: Polarity,
    params: KsParams,
    rng: np.random.Generator,
    source_gt: int = 0,
) -> NoisySample:
    """Perturb every keypoint of ``gt`` into the polarity's similarity band."""
    if not any(k.visible for k in gt.keypoints):
        raise DegenerateInstanceError("instance has no visible keypoint")
    lo, hi = POSITIVE_KS_BAND if polarity == Polarity.POSITIVE else NEGATIVE_KS_BAND
    s = gt.scale
    noisy = []
    sampled = []
    for kp, kappa in zip(gt.keypoints, params.kappa):
        ks = float(rng.uniform(lo, hi))
        alpha = alpha_from_ks(ks, s, kappa)
        nx, ny = _unit_vector(rng)
        x = min(max(kp.x + alpha * nx, 0.0), 1.0)
        y = min(max(kp.y + alpha * ny, 0.0), 1.0)
        noisy.append(Keypoint(x, y, kp.visible))
        sampled.append(ks)
    inst = PersonInstance(keypoints=tuple(noisy), bbox=gt.bbox, area=gt.area)
    return NoisySample(inst, polarity, sampled, source_gt)


def _band_draw(rng: np.random.Generator, lam: float, polarity: Polarity) -> float:
    if polarity == Polarity.POSITIVE:
        return float(rng.uniform(-lam, lam))
    mag = float(rng.uniform(lam, 2.0 * lam))
    return mag if rng.uniform() < 0.5 else -mag


def gen_box_queries(
    gt_box: tuple[float, float, float, float],
    polarity: Polarity,
    rng: np.random.Generator,
    lambda_box: float = DEFAULT_LAMBDA_BOX,
    source_gt: int = 0,
) -> NoisySample:
    """Shift both box corners by scaled uniform noise, re-canonicalizing.

    A negative draw can cross the corners; re-sorting the coordinates then
    models the vanishing-box regime.
    """
    if lambda_box <= 0:
        raise ValueError(f"lambda_box must be > 0, got {lambda_box}")
    x0, y0, x1, y1 = gt_box
    w = x1 - x0
    h = y1 - y0
    if w <= 0 or h <= 0:
        raise DegenerateInstanceError(f"zero-area box {gt_box}")
    draws = []
    corners = []
    for cx, cy in ((x0, y0), (x1, y1)):
        a1 = _band_draw(rng, lambda_box, polarity)
        a2 = _band_draw(rng, lambda_box, polarity)
        corners.append((cx + a2 * w, cy + a1 * h))
        draws.append((a1, a2))
    (nx0, ny0), (nx1, ny1) = corners
    bx0, bx1 = sorted((nx0, nx1))
    by0, by1 = sorted((ny0, ny1))
    inst = PersonInstance(keypoints=(), bbox=(bx0, by0, bx1, by1), area=(bx1 - bx0) * (by1 - by0))
    return NoisySample(inst, polarity, draws, source_gt)


def build_dn_layout(
    gts: list[PersonInstance],
    num_groups: int,
    params: KsParams,
    rng: np.random.Generator,
) -> tuple[DnLayout, list[NoisySample]]:
    """One positive and one negative pose sample per GT in every group."""
    if num_groups < 1:
        raise ValueError("num_groups must be >= 1")
    layout = DnLayout(groups=num_groups if gts else 0, num_gt=len(gts))
    samples: list[NoisySample] = []
    for _ in range(layout.groups):
        for i, gt in enumerate(gts):
            samples.append(gen_pose_queries(gt, Polarity.POSITIVE, params, rng, i))
        for i, gt in enumerate(gts):
            samples.append(gen_pose_queries(gt, Polarity.NEGATIVE, params, rng, i))
    return layout, samples


def build_attention_mask(layout: DnLayout, num_matching: int) -> AttnMask:
    """Block attention between different partitions (DN groups vs matching).

    "Not blocked" is an equivalence relation: queries see each other iff
    they share a partition, so the mask is symmetric and block-diagonal.
    """
    total = layout.total_dn_queries + num_matching
    part = np.array([layout.partition_of(i) for i in range(total)])
    blocked = part[:, None] != part[None, :]
    return AttnMask(blocked)
