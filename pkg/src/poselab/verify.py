"""Whole-model gradient verification against finite differences."""

from __future__ import annotations

import numpy as np

from .config import LossWeights, ModelConfig
from .denoising import DnLayout, build_dn_layout
from .geometry import KsParams
from .losses import total_loss
from .model import PoseModel
from .scenes import SceneSpec, gen_scene
from .tensor import Tensor, grad_check_blocks

__all__ = ["end_to_end_grad_check"]


def end_to_end_grad_check(
    config: ModelConfig,
    seed: int = 0,
    samples_per_block: int = 6,
    img_size: int = 64,
    denoising: bool = True,
    eps: float = 1e-6,
) -> dict:
    """Per-parameter-block relative error of the full training loss gradient.

    Builds one synthetic scene, assembles the complete loss (all decoder
    layers, matching and denoising terms), and compares reverse-mode
    gradients with float64 central differences on a random subsample of each
    parameter block.

    The default step of 1e-6 balances two failure modes on this piecewise
    smooth surface (bilinear sampling and top-k selection introduce
    derivative kinks): a larger step makes probes straddle kinks, while a
    much smaller one loses the float64 difference to roundoff.
    """
    from .scenes import normalized_instances

    rng = np.random.default_rng(seed)
    spec = SceneSpec(img_size=img_size, max_persons=2, num_keypoints=config.num_keypoints, seed=seed)
    image_np, ann = gen_scene(spec, rng)
    gts = normalized_instances(ann)
    params = KsParams.uniform(config.num_keypoints, config.kappa)
    weights = LossWeights()
    model = PoseModel(config, seed=seed)
    # Nudge every parameter off its init point.  Several heads start at
    # exactly zero, which parks clamped keypoint coordinates and sampling
    # locations precisely on clamp/border kinks where one-sided and
    # two-sided derivatives disagree by construction; the check is only
    # meaningful away from those measure-zero coincidences.
    noise_rng = np.random.default_rng(seed + 0x5EED)
    for p in model.params.values():
        p.data = p.data + noise_rng.uniform(-0.01, 0.01, size=p.data.shape).astype(
            p.data.dtype
        )
    if denoising and gts:
        groups = max(1, min(config.dn_groups, config.num_queries // (2 * len(gts))))
        layout, samples = build_dn_layout(gts, groups, params, np.random.default_rng(seed + 1))
    else:
        layout, samples = DnLayout(groups=0, num_gt=0), []
    image = Tensor(image_np.astype(np.float64), dtype=np.float64)

    # Freeze the discrete/detached quantities (Hungarian assignment and the
    # classification target q) at the base point.  Reverse mode treats both
    # as constants, so the finite-difference probe must hold them fixed to
    # measure the same function; recomputing them under a perturbed
    # parameter would add their (undefined) variation to the FD estimate.
    base_preds = model.forward(image, samples or None, layout)
    frozen = total_loss(base_preds, gts, layout, samples, params, weights).frozen

    def loss_fn(probes: dict) -> Tensor:
        model.params = probes
        preds = model.forward(image, samples or None, layout)
        return total_loss(preds, gts, layout, samples, params, weights, frozen=frozen).total

    original = dict(model.params)
    try:
        return grad_check_blocks(
            loss_fn, original, eps=eps, samples_per_block=samples_per_block, seed=seed
        )
    finally:
        model.params = original
