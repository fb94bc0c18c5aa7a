"""Model and run configuration with named size presets."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

__all__ = ["ModelConfig", "OptimConfig", "LossWeights", "RunConfig", "PRESETS"]


@dataclass(frozen=True)
class ModelConfig:
    num_queries: int = 8  # N instance slots (tiny scale; full presets use 60)
    num_keypoints: int = 5  # K_kpt
    embed_dim: int = 32  # D; also the pyramid channel count
    num_heads: int = 4
    num_layers: int = 3
    num_levels: int = 3
    num_points: int = 4  # deformable sampling points per head per level
    ffn_dim: int = 64
    strides: tuple[int, ...] = (8, 16, 32)
    num_bins: int = 16  # B, offset-distribution bins per axis
    bin_range: float = 0.25  # first-layer half-range; halves each layer
    pre_pose_range: float = 0.5
    k_lqe: int = 4
    dn_groups: int = 2
    kappa: float = 0.1

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.k_lqe > self.embed_dim:
            raise ValueError("k_lqe cannot exceed the channel count")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    l1: float = 5.0
    oks: float = 2.0
    vf_alpha: float = 0.75
    vf_gamma: float = 2.0


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    img_size: int = 160
    batch_size: int = 4
    iterations: int = 1000


# Size presets: "tiny" is the test scale; the S/M/L-like presets mirror the
# published layer counts and hidden width at full scale.
PRESETS: dict[str, ModelConfig] = {
    "tiny": ModelConfig(),
    "s-like": ModelConfig(
        num_queries=60, num_keypoints=17, embed_dim=256, num_heads=8,
        num_layers=3, ffn_dim=1024,
    ),
    "m-like": ModelConfig(
        num_queries=60, num_keypoints=17, embed_dim=256, num_heads=8,
        num_layers=4, ffn_dim=1024,
    ),
    "l-like": ModelConfig(
        num_queries=60, num_keypoints=17, embed_dim=256, num_heads=8,
        num_layers=6, ffn_dim=1024,
    ),
}
