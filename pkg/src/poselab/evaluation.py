"""Similarity-threshold average precision over a set of annotated scenes.

Score-sorted predictions are greedily matched to ground truth per scene (one
ground truth per prediction, best similarity first) at each threshold in
0.50:0.05:0.95; precision-recall curves are integrated with 101-point
interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import KsParams, PersonInstance, instance_oks

__all__ = ["ApReport", "OKS_THRESHOLDS", "eval_ap"]

OKS_THRESHOLDS = np.arange(0.5, 0.96, 0.05)


@dataclass(frozen=True)
class ApReport:
    ap: float
    ap50: float
    ap75: float
    ar: float

    def as_dict(self) -> dict:
        return {"AP": self.ap, "AP50": self.ap50, "AP75": self.ap75, "AR": self.ar}


def _interpolated_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    if precision.size == 0:
        return 0.0
    levels = np.linspace(0.0, 1.0, 101)
    ap = 0.0
    for r in levels:
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 101.0


def eval_ap(
    predictions: list[list[tuple[PersonInstance, float]]],
    gts: list[list[PersonInstance]],
    params: KsParams,
) -> ApReport:
    """Evaluate per-scene prediction lists against per-scene ground truth.

    ``predictions[i]`` and ``gts[i]`` describe the same scene; every
    prediction carries a confidence score used for global ranking.
    """
    if len(predictions) != len(gts):
        raise ValueError("predictions and ground truth must cover the same scenes")
    num_gt = sum(len(g) for g in gts)
    flat = [
        (score, scene, inst)
        for scene, preds in enumerate(predictions)
        for inst, score in preds
    ]
    # stable order: score desc, then scene and insertion order for ties
    flat.sort(key=lambda t: -t[0])
    # cache similarity of each prediction against each gt in its scene
    oks_cache = [
        np.array([instance_oks(inst, gt, params) for gt in gts[scene]])
        for _, scene, inst in flat
    ]

    ap_per_t = []
    recall_per_t = []
    for t in OKS_THRESHOLDS:
        matched: list[set] = [set() for _ in gts]
        tp = np.zeros(len(flat))
        fp = np.zeros(len(flat))
        for i, (_, scene, _inst) in enumerate(flat):
            oks_row = oks_cache[i]
            best_j = -1
            best_oks = t
            for j, val in enumerate(oks_row):
                if j in matched[scene]:
                    continue
                if val >= best_oks:
                    best_oks = val
                    best_j = j
            if best_j >= 0:
                matched[scene].add(best_j)
                tp[i] = 1
            else:
                fp[i] = 1
        ctp = np.cumsum(tp)
        cfp = np.cumsum(fp)
        precision = ctp / np.maximum(ctp + cfp, 1e-12)
        recall = ctp / num_gt if num_gt else np.zeros_like(ctp)
        ap_per_t.append(_interpolated_ap(precision, recall) if num_gt else 0.0)
        recall_per_t.append(float(recall[-1]) if recall.size and num_gt else 0.0)

    ap_per_t = np.array(ap_per_t)
    return ApReport(
        ap=float(ap_per_t.mean()),
        ap50=float(ap_per_t[0]),
        ap75=float(ap_per_t[5]),
        ar=float(np.mean(recall_per_t)),
    )
