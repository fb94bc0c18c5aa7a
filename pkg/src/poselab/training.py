"""Training loop: Adam with decoupled weight decay, denoising scheduling,
prediction extraction, and the metric trace."""

from __future__ import annotations

import contextlib
import gc
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .denoising import DnLayout, build_dn_layout
from .evaluation import ApReport, eval_ap
from .geometry import Keypoint, KsParams, PersonInstance, instance_from_keypoints
from .losses import total_loss
from .model import PoseModel
from .scenes import Annotation, normalized_instances
from .tensor import NumericError, Tensor

__all__ = ["AdamW", "TrainResult", "predict", "evaluate_model", "train_loop"]


class AdamW:
    """Adam with weight decay applied directly to the weights (decoupled)."""

    def __init__(self, params: dict[str, Tensor], lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-4):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1**self.t)
            vhat = self.v[k] / (1 - b2**self.t)
            p.data -= self.lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


@contextlib.contextmanager
def _gc_paused():
    """Suspend cyclic garbage collection while building/freeing tapes.

    The autodiff graph is acyclic (closures reference parents only), so
    reference counting reclaims it on its own; the cycle collector merely
    rescans the large live graph on every allocation burst, which dominates
    training time.
    """
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was_enabled:
            gc.enable()


@dataclass
class TrainResult:
    model: PoseModel
    trace: list = field(default_factory=list)


def predict(model: PoseModel, image: np.ndarray) -> list[tuple[PersonInstance, float]]:
    """Inference: matching queries only, final decoder layer."""
    preds = model.forward(Tensor(image))
    final = preds[-1]
    kps = final.keypoints.data
    scores = 1.0 / (1.0 + np.exp(-final.refined_logits.data))
    out = []
    for i in range(kps.shape[0]):
        pts = [Keypoint(float(x), float(y), True) for x, y in kps[i]]
        out.append((instance_from_keypoints(pts), float(scores[i])))
    return out


def evaluate_model(
    model: PoseModel,
    images: list[np.ndarray],
    annotations: list[Annotation],
    params: KsParams,
) -> ApReport:
    with _gc_paused():
        predictions = [predict(model, img) for img in images]
    gts = [normalized_instances(ann) for ann in annotations]
    return eval_ap(predictions, gts, params)


def _effective_groups(requested: int, num_queries: int, num_gt: int) -> int:
    """Scale the group count down so total DN queries never exceed N."""
    if requested <= 0 or num_gt == 0:
        return 0
    return min(requested, num_queries // (2 * num_gt))


def train_loop(
    model: PoseModel,
    images: list[np.ndarray],
    annotations: list[Annotation],
    run: RunConfig,
    denoising: bool = True,
    val_images: list[np.ndarray] | None = None,
    val_annotations: list[Annotation] | None = None,
    eval_every: int = 0,
    log_every: int = 10,
    opt: AdamW | None = None,
) -> TrainResult:
    """Deterministic single-threaded training over pre-generated scenes.

    Pass `opt` to continue from existing optimizer state (e.g. when training
    in chunks with evaluation between them); otherwise a fresh AdamW is
    built from `run.optim`.
    """
    cfg = model.config
    params = KsParams.uniform(cfg.num_keypoints, cfg.kappa)
    if opt is None:
        opt = AdamW(
            model.parameters(),
            lr=run.optim.lr,
            beta1=run.optim.beta1,
            beta2=run.optim.beta2,
            eps=run.optim.eps,
            weight_decay=run.optim.weight_decay,
        )
    rng = np.random.default_rng(np.random.SeedSequence((run.seed, 0xD7)))
    gts_per_scene = [normalized_instances(ann) for ann in annotations]
    result = TrainResult(model=model)
    if run.iterations == 0:
        return result
    n_scenes = len(images)
    with _gc_paused():
        for it in range(run.iterations):
            idx = rng.choice(n_scenes, size=min(run.batch_size, n_scenes), replace=False)
            opt.zero_grad()
            batch_records = []
            for si in idx:
                gts = gts_per_scene[si]
                groups = _effective_groups(cfg.dn_groups if denoising else 0, cfg.num_queries, len(gts))
                if groups > 0:
                    layout, samples = build_dn_layout(gts, groups, params, rng)
                else:
                    layout, samples = DnLayout(groups=0, num_gt=0), []
                preds = model.forward(Tensor(images[si]), samples or None, layout)
                breakdown = total_loss(preds, gts, layout, samples, params, run.loss)
                loss = breakdown.total * (1.0 / len(idx))
                if not np.isfinite(loss.data):
                    raise NumericError(
                        f"non-finite loss at iteration {it}, scene {si}: {breakdown.as_dict()}"
                    )
                loss.backward()
                batch_records.append(breakdown)
            opt.step()
            if log_every and (it % log_every == 0 or it == run.iterations - 1):
                record = {"iteration": it}
                agg: dict[str, float] = {}
                for b in batch_records:
                    for k, v in b.as_dict().items():
                        agg[k] = agg.get(k, 0.0) + v / len(batch_records)
                record.update(agg)
                if eval_every and val_images is not None and (it % eval_every == 0 or it == run.iterations - 1):
                    report = evaluate_model(model, val_images, val_annotations, params)
                    record.update(report.as_dict())
                result.trace.append(record)
    return result
