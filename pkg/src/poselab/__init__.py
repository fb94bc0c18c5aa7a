"""Desk-scale differentiable multi-person pose estimation with
similarity-driven query denoising."""

import os as _os

# single-threaded BLAS: the op mix is many small matmuls where thread
# fan-out costs more than it saves, and it keeps reductions deterministic
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

from .config import LossWeights, ModelConfig, OptimConfig, RunConfig, PRESETS
from .geometry import (
    Keypoint,
    KsParams,
    PersonInstance,
    bbox_from_keypoints,
    instance_oks,
    keypoint_similarity,
    normalize_instance,
)
from .denoising import (
    DnLayout,
    NoisySample,
    Polarity,
    alpha_from_ks,
    build_attention_mask,
    build_dn_layout,
    gen_box_queries,
    gen_pose_queries,
)
from .tensor import AttnMask, Tensor, bilinear_sample, grad_check, masked_softmax, matmul, topk
from .model import PoseModel
from .losses import hungarian_match, ksvf_loss, ksvf_loss_scalar, match_cost, total_loss
from .evaluation import ApReport, eval_ap
from .scenes import Annotation, SceneSpec, gen_dataset, gen_scene
from .serialization import load_checkpoint, read_annotations, save_checkpoint, write_annotations
from .training import AdamW, predict, train_loop

__version__ = "0.1.0"
