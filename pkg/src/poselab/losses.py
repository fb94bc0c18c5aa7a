"""Similarity-driven varifocal classification loss, matching, and totals.

The classification loss has two branches, switched by the quality target q
(the instance keypoint similarity of a matched prediction, or 0):

    q > 0:  -q * (q * log(c) + (1 - q) * log(1 - c))
    q = 0:  -alpha * c**gamma * log(1 - c)

Matching queries are assigned to ground truth by minimum-cost bipartite
matching; denoising queries bypass matching entirely and supervise against
their source instance (positives) or the q = 0 branch (negatives).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .config import LossWeights
from .denoising import DnLayout, NoisySample, Polarity
from .geometry import KsParams, PersonInstance, instance_oks
from .model import LayerPrediction
from .tensor import Tensor, stack

__all__ = [
    "MatchResult",
    "LossBreakdown",
    "ksvf_loss",
    "ksvf_loss_scalar",
    "match_cost",
    "hungarian_match",
    "brute_force_match",
    "total_loss",
]

PROB_EPS = 1e-7


@dataclass(frozen=True)
class MatchResult:
    """A partial injection from prediction indices to ground-truth indices."""

    pairs: tuple[tuple[int, int], ...]
    unmatched_predictions: tuple[int, ...]


@dataclass
class LayerLosses:
    ksvf: float = 0.0
    keypoint_l1: float = 0.0
    oks_term: float = 0.0
    dn_ksvf: float = 0.0
    dn_keypoint_l1: float = 0.0


@dataclass
class FrozenTargets:
    """Discrete and detached per-layer quantities of one loss evaluation.

    The assignment comes from a combinatorial solver and the target q is a
    stop-gradient value; both are constants to reverse mode.  Re-using them
    makes a finite-difference probe of the loss differentiable, so the two
    routes measure the same function.
    """

    assigned: dict  # matching query index -> gt index
    q: dict  # matching query index -> classification target


@dataclass
class LossBreakdown:
    """Per-layer scalar terms plus the weighted total (a live Tensor)."""

    layers: list[LayerLosses] = field(default_factory=list)
    total: Tensor | None = None
    frozen: list[FrozenTargets] = field(default_factory=list)

    def as_dict(self) -> dict:
        out = {"total": float(self.total.data) if self.total is not None else 0.0}
        for i, layer in enumerate(self.layers):
            for name in ("ksvf", "keypoint_l1", "oks_term", "dn_ksvf", "dn_keypoint_l1"):
                out[f"layer{i}.{name}"] = getattr(layer, name)
        return out


def ksvf_loss(q: float, c: Tensor, weights: LossWeights) -> Tensor:
    """Differentiable (in c) similarity-varifocal loss for one prediction."""
    c = c.clamp(PROB_EPS, 1.0 - PROB_EPS)
    if q > 0.0:
        return (c.log() * q + (1.0 - c).log() * (1.0 - q)) * (-q)
    return (1.0 - c).log() * (c**weights.vf_gamma) * (-weights.vf_alpha)


def ksvf_loss_scalar(q: float, c: float, alpha: float = 0.75, gamma: float = 2.0) -> float:
    """Plain-float reference of the same loss for oracles and quick checks."""
    c = min(max(c, PROB_EPS), 1.0 - PROB_EPS)
    if q > 0.0:
        return -q * (q * math.log(c) + (1.0 - q) * math.log(1.0 - c))
    return -alpha * c**gamma * math.log(1.0 - c)


def _focal_cost(prob: float, gamma: float = 2.0, alpha: float = 0.25) -> float:
    """DETR-style focal matching cost for a candidate positive."""
    prob = min(max(prob, PROB_EPS), 1.0 - PROB_EPS)
    pos = alpha * (1.0 - prob) ** gamma * (-math.log(prob))
    neg = (1.0 - alpha) * prob**gamma * (-math.log(1.0 - prob))
    return pos - neg


def prediction_instances(
    preds: LayerPrediction, indices: range | list[int], params: KsParams
) -> list[PersonInstance]:
    """Materialize predicted keypoints as PersonInstance objects."""
    from .geometry import Keypoint, instance_from_keypoints

    kps = preds.keypoints.data
    out = []
    for i in indices:
        pts = tuple(Keypoint(float(x), float(y), True) for x, y in kps[i])
        out.append(instance_from_keypoints(list(pts)))
    return out


def match_cost(
    preds: LayerPrediction,
    matching_indices: range,
    gts: list[PersonInstance],
    params: KsParams,
    weights: LossWeights,
) -> np.ndarray:
    """N x #gt cost matrix mixing classification, L1, and similarity terms."""
    if not gts:
        raise ValueError("match_cost requires at least one ground-truth instance")
    probs = 1.0 / (1.0 + np.exp(-preds.refined_logits.data))
    kps = preds.keypoints.data
    cost = np.zeros((len(matching_indices), len(gts)), dtype=np.float64)
    for row, i in enumerate(matching_indices):
        cls = _focal_cost(float(probs[i]))
        pred_inst = None
        for j, gt in enumerate(gts):
            vis = np.array([k.visible for k in gt.keypoints])
            gt_xy = np.array([(k.x, k.y) for k in gt.keypoints])
            l1 = float(np.abs(kps[i][vis] - gt_xy[vis]).mean()) if vis.any() else 0.0
            if pred_inst is None:
                pred_inst = _as_instance(kps[i])
            oks = instance_oks(pred_inst, gt, params)
            cost[row, j] = weights.cls * cls + weights.l1 * l1 + weights.oks * (1.0 - oks)
    return cost


def _as_instance(kp_array: np.ndarray) -> PersonInstance:
    from .geometry import Keypoint, instance_from_keypoints

    pts = [Keypoint(float(x), float(y), True) for x, y in kp_array]
    return instance_from_keypoints(pts)


def hungarian_match(cost: np.ndarray) -> MatchResult:
    """Minimum-cost assignment; ties resolved toward lexicographically
    smallest pair list among optimal assignments."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return MatchResult(pairs=(), unmatched_predictions=tuple(range(cost.shape[0])))
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(cost)
    best = float(cost[rows, cols].sum())
    pairs = _lexicographic_refine(cost, best)
    matched_rows = {i for i, _ in pairs}
    unmatched = tuple(i for i in range(cost.shape[0]) if i not in matched_rows)
    return MatchResult(pairs=tuple(pairs), unmatched_predictions=unmatched)


def _lexicographic_refine(cost: np.ndarray, best: float, tol: float = 1e-9) -> list:
    """Fix pairs in lexicographic order while preserving optimal total cost.

    Rows are visited in ascending order; a row is matched to the smallest
    column that keeps the total optimal, or skipped when every optimal
    solution leaves it unmatched (possible only with more rows than columns).
    """
    n, m = cost.shape
    rows_left = list(range(n))
    cols_left = list(range(m))
    pairs: list[tuple[int, int]] = []
    remaining = best
    while rows_left and cols_left:
        i = rows_left[0]
        rest_rows = rows_left[1:]
        chosen = None
        for j in cols_left:
            rest_cols = [c for c in cols_left if c != j]
            if rest_rows and rest_cols:
                sub = cost[np.ix_(rest_rows, rest_cols)]
                r, c = linear_sum_assignment(sub)
                rest = float(sub[r, c].sum())
            else:
                rest = 0.0
            if cost[i, j] + rest <= remaining + tol:
                chosen = j
                break
        rows_left.pop(0)
        if chosen is None:
            continue  # row i is unmatched in every optimal solution
        pairs.append((i, chosen))
        remaining -= cost[i, chosen]
        cols_left.remove(chosen)
    return pairs


def brute_force_match(cost: np.ndarray) -> tuple[float, tuple]:
    """Exhaustive-permutation oracle: optimal total cost and best pairs."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    best_cost = math.inf
    best_pairs: tuple = ()
    if n <= m:
        for perm in itertools.permutations(range(m), n):
            total = sum(cost[i, j] for i, j in enumerate(perm))
            cand = tuple((i, j) for i, j in enumerate(perm))
            if total < best_cost - 1e-12 or (
                abs(total - best_cost) <= 1e-12 and cand < best_pairs
            ):
                best_cost = total
                best_pairs = cand
    else:
        for rows in itertools.permutations(range(n), m):
            total = sum(cost[i, j] for j, i in enumerate(rows))
            cand = tuple(sorted((i, j) for j, i in enumerate(rows)))
            if total < best_cost - 1e-12 or (
                abs(total - best_cost) <= 1e-12 and cand < best_pairs
            ):
                best_cost = total
                best_pairs = cand
    return best_cost, best_pairs


def _l1_term(pred_kps: Tensor, gt: PersonInstance) -> Tensor | None:
    vis = [idx for idx, k in enumerate(gt.keypoints) if k.visible]
    if not vis:
        return None
    gt_xy = np.array([(gt.keypoints[i].x, gt.keypoints[i].y) for i in vis])
    sel = pred_kps[np.array(vis)]  # (V, 2)
    diff = sel - Tensor(gt_xy, dtype=sel.dtype)
    return diff.abs().mean()


def _oks_tensor(pred_kps: Tensor, gt: PersonInstance, params: KsParams) -> Tensor | None:
    """Differentiable instance keypoint similarity of predictions vs one GT."""
    vis = [idx for idx, k in enumerate(gt.keypoints) if k.visible]
    if not vis or gt.area <= 0:
        return None
    s2 = gt.area
    gt_xy = np.array([(gt.keypoints[i].x, gt.keypoints[i].y) for i in vis])
    kappa2 = np.array([params.kappa[i] ** 2 for i in vis])
    sel = pred_kps[np.array(vis)]
    diff = sel - Tensor(gt_xy, dtype=sel.dtype)
    d2 = (diff * diff).sum(axis=1)
    ks = (d2 * Tensor(-1.0 / (2.0 * s2 * kappa2), dtype=sel.dtype)).exp()
    return ks.mean()


def total_loss(
    layer_preds: list[LayerPrediction],
    gts: list[PersonInstance],
    layout: DnLayout,
    dn_samples: list[NoisySample],
    params: KsParams,
    weights: LossWeights,
    frozen: list[FrozenTargets] | None = None,
) -> LossBreakdown:
    """Assemble the supervised loss over all decoder layers.

    Matching queries are Hungarian-assigned per layer; matched ones are
    pulled toward their ground truth with L1 + (1 - similarity) and a
    classification target q equal to the recomputed instance similarity.
    Denoising positives regress to their source instance with q equal to the
    mean sampled similarity; negatives only feed the q = 0 branch.

    ``frozen`` replays the assignment and classification targets recorded in
    a previous evaluation's ``LossBreakdown.frozen`` instead of recomputing
    them; gradient verification needs this because both are constants to
    reverse mode.
    """
    breakdown = LossBreakdown()
    terms: list[Tensor] = []
    offset = layout.matching_query_offset
    for li, preds in enumerate(layer_preds):
        ll = LayerLosses()
        probs = preds.refined_logits.sigmoid()
        n_match = preds.keypoints.shape[0] - layout.total_dn_queries
        match_rows = range(offset, offset + n_match)
        assigned: dict[int, int] = {}
        if frozen is not None:
            assigned = frozen[li].assigned
        elif gts:
            cost = match_cost(preds, match_rows, gts, params, weights)
            result = hungarian_match(cost)
            assigned = {offset + i: j for i, j in result.pairs}
        layer_frozen = FrozenTargets(assigned=dict(assigned), q={})
        layer_terms: list[Tensor] = []
        for i in match_rows:
            if i in assigned:
                gt = gts[assigned[i]]
                if frozen is not None:
                    q = frozen[li].q[i]
                else:
                    pred_inst = _as_instance(preds.keypoints.data[i])
                    q = instance_oks(pred_inst, gt, params)
                layer_frozen.q[i] = q
                cls = ksvf_loss(q, probs[i], weights) * weights.cls
                layer_terms.append(cls)
                ll.ksvf += float(cls.data)
                l1 = _l1_term(preds.keypoints[i], gt)
                if l1 is not None:
                    l1 = l1 * weights.l1
                    layer_terms.append(l1)
                    ll.keypoint_l1 += float(l1.data)
                oks = _oks_tensor(preds.keypoints[i], gt, params)
                if oks is not None:
                    ot = (1.0 - oks) * weights.oks
                    layer_terms.append(ot)
                    ll.oks_term += float(ot.data)
            else:
                cls = ksvf_loss(0.0, probs[i], weights) * weights.cls
                layer_terms.append(cls)
                ll.ksvf += float(cls.data)
        for di, sample in enumerate(dn_samples):
            gt = gts[sample.source_gt]
            if sample.polarity == Polarity.POSITIVE:
                q = float(np.mean(sample.sampled_ks))
                cls = ksvf_loss(q, probs[di], weights) * weights.cls
                layer_terms.append(cls)
                ll.dn_ksvf += float(cls.data)
                l1 = _l1_term(preds.keypoints[di], gt)
                if l1 is not None:
                    l1 = l1 * weights.l1
                    layer_terms.append(l1)
                    ll.dn_keypoint_l1 += float(l1.data)
            else:
                cls = ksvf_loss(0.0, probs[di], weights) * weights.cls
                layer_terms.append(cls)
                ll.dn_ksvf += float(cls.data)
        breakdown.layers.append(ll)
        breakdown.frozen.append(layer_frozen)
        terms.extend(layer_terms)
    if terms:
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        denom = max(len(gts), 1) * len(layer_preds)
        breakdown.total = total * (1.0 / denom)
    else:
        breakdown.total = Tensor(0.0)
    return breakdown
