"""Stub encoder, query selection, and the grouped decoder stack.

The decoder alternates four stages per layer:

1. within-instance self-attention (the K+1 queries of one person mix),
2. across-instance self-attention per joint slot, with partition masking so
   denoising groups and matching queries never interact,
3. deformable cross-attention into the feature pyramid,
4. feed-forward, then the per-layer heads: offset-distribution refinement of
   the keypoints, classification, and the localization-quality head that
   corrects the classification logit from features sampled at the predicted
   keypoints.

The encoder is a deliberately small patch-projection pyramid standing in for
a full backbone; it exists to make the loop closed and differentiable, not to
be strong.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .denoising import DnLayout, NoisySample, build_attention_mask
from .tensor import (
    AttnMask,
    Tensor,
    bilinear_sample,
    concat,
    masked_softmax,
    matmul,
    softmax,
    stack,
    take_along_axis,
    topk,
)

__all__ = ["FeaturePyramid", "QuerySet", "LayerPrediction", "PoseModel", "fdr_refine", "pose_lqe"]


@dataclass
class FeaturePyramid:
    """L feature maps (C, Hl, Wl) plus per-pixel objectness over all levels."""

    levels: list  # list of Tensor (C, Hl, Wl), strides ascending
    scores: Tensor  # (total_pixels,) objectness logits
    pixel_features: Tensor  # (total_pixels, C)
    centers: np.ndarray  # (total_pixels, 2) normalized pixel centers


@dataclass
class QuerySet:
    positional: Tensor  # (N, K+1, 2); slot K is the instance query
    content: Tensor  # (N, D)
    dn_positional: Tensor | None = None  # (dn, K+1, 2)
    dn_content: Tensor | None = None  # (dn, D)


@dataclass
class LayerPrediction:
    keypoints: Tensor  # (T, K, 2) in [0,1]^2
    logits: Tensor  # (T,) pre-LQE classification logits
    refined_logits: Tensor  # (T,) post-LQE
    fdr_logits: Tensor  # (T, K, 2, B)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    m = x.mean(axis=-1, keepdims=True)
    centered = x - m
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * gamma + beta


def multi_head_attention(
    x: Tensor,
    pe: Tensor | None,
    w: dict,
    num_heads: int,
    mask: AttnMask | None = None,
) -> Tensor:
    """Standard MHA over (B, S, D); positional terms go into q and k only."""
    b, s, d = x.shape
    hd = d // num_heads
    qk_in = x + pe if pe is not None else x
    q = (matmul(qk_in, w["wq"]) + w["bq"]).reshape(b, s, num_heads, hd).transpose(0, 2, 1, 3)
    k = (matmul(qk_in, w["wk"]) + w["bk"]).reshape(b, s, num_heads, hd).transpose(0, 2, 1, 3)
    v = (matmul(x, w["wv"]) + w["bv"]).reshape(b, s, num_heads, hd).transpose(0, 2, 1, 3)
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd))
    attn = masked_softmax(scores, mask) if mask is not None else softmax(scores, axis=-1)
    out = matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, s, d)
    return matmul(out, w["wo"]) + w["bo"]


def fdr_refine(bin_logits: Tensor, prev_keypoints: Tensor, bin_range: float) -> Tensor:
    """Expected offset under the bin distribution, added residually.

    ``bin_logits`` is (..., 2, B); bin centers are symmetric and linear in
    [-bin_range, +bin_range], so uniform logits give a zero offset.
    """
    n_bins = bin_logits.shape[-1]
    centers = np.linspace(-1.0, 1.0, n_bins) * bin_range
    probs = softmax(bin_logits, axis=-1)
    offset = (probs * Tensor(centers, dtype=bin_logits.dtype)).sum(axis=-1)
    return (prev_keypoints + offset).clamp(0.0, 1.0)


def pose_lqe(
    pred_keypoints: Tensor,
    highest_map: Tensor,
    base_logits: Tensor,
    k_lqe: int,
    weight: Tensor,
    bias: Tensor,
) -> Tensor:
    """Logit correction from features sampled at the predicted keypoints.

    Per keypoint, the k_lqe largest channel values of the sampled feature
    vector are kept; the flattened values pass through one linear layer and
    add to the base classification logit.  Zero weights make this a no-op.
    """
    t, k, _ = pred_keypoints.shape
    c = highest_map.shape[0]
    if k_lqe > c:
        raise ValueError(f"k_lqe={k_lqe} exceeds channel count {c}")
    feats = bilinear_sample(highest_map, pred_keypoints.reshape(t * k, 2))  # (T*K, C)
    vals, _ = topk(feats, k_lqe, axis=-1)  # (T*K, k_lqe)
    flat = vals.reshape(t, k * k_lqe)
    corr = (matmul(flat, weight) + bias).reshape(t)
    return base_logits + corr


class PoseModel:
    """The full differentiable predictor: encoder, query selection, decoder."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    # ------------------------------------------------------------------
    # parameters

    def _add(self, name: str, array: np.ndarray) -> None:
        self.params[name] = Tensor(array.astype(np.float32), requires_grad=True)

    def _linear_init(self, rng, fan_in: int, fan_out: int) -> np.ndarray:
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.config
        d = cfg.embed_dim
        k = cfg.num_keypoints
        for lvl, stride in enumerate(cfg.strides):
            patch = stride * stride
            self._add(f"enc{lvl}.w1", self._linear_init(rng, patch, d))
            self._add(f"enc{lvl}.b1", np.zeros(d))
            self._add(f"enc{lvl}.w2", self._linear_init(rng, d, d))
            self._add(f"enc{lvl}.b2", np.zeros(d))
        self._add("score.w", self._linear_init(rng, d, 1))
        self._add("score.b", np.zeros(1))
        self._add("kp_head.w", self._linear_init(rng, d, 2 * k))
        self._add("kp_head.b", np.zeros(2 * k))
        self._add("content", rng.normal(0.0, 0.02, size=(cfg.num_queries, d)))
        self._add("dn_content", rng.normal(0.0, 0.02, size=(d,)))
        self._add("pos_proj.w", self._linear_init(rng, 2, d))
        self._add("pos_proj.b", np.zeros(d))
        self._add("pre_pose.w1", self._linear_init(rng, d, d))
        self._add("pre_pose.b1", np.zeros(d))
        self._add("pre_pose.w2", np.zeros((d, 2)))
        self._add("pre_pose.b2", np.zeros(2))
        n_heads, n_lvl, n_pts = cfg.num_heads, cfg.num_levels, cfg.num_points
        for layer in range(cfg.num_layers):
            p = f"dec{layer}."
            for attn in ("within", "across"):
                for wn in ("wq", "wk", "wv", "wo"):
                    self._add(p + attn + "." + wn, self._linear_init(rng, d, d))
                for bn in ("bq", "bk", "bv", "bo"):
                    self._add(p + attn + "." + bn, np.zeros(d))
            # deformable: zero offset weights, small deterministic offset bias
            self._add(p + "deform.w_off", np.zeros((d, n_heads * n_lvl * n_pts * 2)))
            angles = 2 * np.pi * np.arange(n_heads * n_lvl * n_pts) / (n_heads * n_lvl * n_pts)
            radii = 0.02 * (1 + np.arange(n_heads * n_lvl * n_pts) % n_pts)
            b_off = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
            self._add(p + "deform.b_off", b_off.reshape(-1))
            self._add(p + "deform.w_attn", self._linear_init(rng, d, n_heads * n_lvl * n_pts))
            self._add(p + "deform.b_attn", np.zeros(n_heads * n_lvl * n_pts))
            self._add(p + "deform.w_out", self._linear_init(rng, n_heads * d, d))
            self._add(p + "deform.b_out", np.zeros(d))
            self._add(p + "ffn.w1", self._linear_init(rng, d, cfg.ffn_dim))
            self._add(p + "ffn.b1", np.zeros(cfg.ffn_dim))
            self._add(p + "ffn.w2", self._linear_init(rng, cfg.ffn_dim, d))
            self._add(p + "ffn.b2", np.zeros(d))
            for ln in ("ln1", "ln2", "ln3", "ln4"):
                self._add(p + ln + ".g", np.ones(d))
                self._add(p + ln + ".b", np.zeros(d))
            self._add(p + "fdr.w", np.zeros((d, 2 * cfg.num_bins)))
            self._add(p + "fdr.b", np.zeros(2 * cfg.num_bins))
            self._add(p + "cls.w", self._linear_init(rng, d, 1))
            self._add(p + "cls.b", np.zeros(1))
        self._add("lqe.w", np.zeros((k * cfg.k_lqe, 1)))
        self._add("lqe.b", np.zeros(1))

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # ------------------------------------------------------------------
    # encoder

    def encode(self, image: Tensor) -> FeaturePyramid:
        """Patch-projection pyramid at the configured strides."""
        h, w = image.shape
        if h != w:
            raise ValueError(f"image must be square, got {h}x{w}")
        if h % max(self.config.strides) != 0:
            raise ValueError(
                f"side {h} not divisible by coarsest stride {max(self.config.strides)}"
            )
        pp = self.params
        levels = []
        feats = []
        centers = []
        for lvl, s in enumerate(self.config.strides):
            gh, gw = h // s, w // s
            patches = (
                image.reshape(gh, s, gw, s).transpose(0, 2, 1, 3).reshape(gh * gw, s * s)
            )
            hdn = (matmul(patches, pp[f"enc{lvl}.w1"]) + pp[f"enc{lvl}.b1"]).relu()
            f = matmul(hdn, pp[f"enc{lvl}.w2"]) + pp[f"enc{lvl}.b2"]  # (gh*gw, D)
            feats.append(f)
            levels.append(f.reshape(gh, gw, self.config.embed_dim).transpose(2, 0, 1))
            ys, xs = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
            centers.append(
                np.stack([(xs.ravel() + 0.5) / gw, (ys.ravel() + 0.5) / gh], axis=1)
            )
        all_feats = concat(feats, axis=0)
        scores = (matmul(all_feats, pp["score.w"]) + pp["score.b"]).reshape(-1)
        return FeaturePyramid(
            levels=levels,
            scores=scores,
            pixel_features=all_feats,
            centers=np.concatenate(centers, axis=0),
        )

    # ------------------------------------------------------------------
    # query selection

    def select_queries(self, pyramid: FeaturePyramid, dn_samples: list[NoisySample] | None = None) -> QuerySet:
        cfg = self.config
        n, k = cfg.num_queries, cfg.num_keypoints
        if n > pyramid.scores.size:
            raise IndexError(f"cannot select {n} queries from {pyramid.scores.size} pixels")
        _, idx = topk(pyramid.scores, n)
        feats = pyramid.pixel_features[idx]  # (N, D)
        ctr = Tensor(pyramid.centers[idx], dtype=feats.dtype)  # (N, 2)
        raw = matmul(feats, self.params["kp_head.w"]) + self.params["kp_head.b"]
        offsets = raw.reshape(n, k, 2).tanh() * 0.5
        kps = (ctr.reshape(n, 1, 2) + offsets).clamp(0.0, 1.0)
        inst = kps.mean(axis=1, keepdims=True)  # instance query at the keypoint mean
        positional = concat([kps, inst], axis=1)  # (N, K+1, 2)
        qs = QuerySet(positional=positional, content=self.params["content"])
        if dn_samples:
            pts = np.array(
                [[(kp.x, kp.y) for kp in s.instance.keypoints] for s in dn_samples],
                dtype=np.float32,
            )  # (dn, K, 2)
            dn_kp = Tensor(pts)
            dn_inst = dn_kp.mean(axis=1, keepdims=True)
            qs.dn_positional = concat([dn_kp, dn_inst], axis=1)
            dn = len(dn_samples)
            d = cfg.embed_dim
            qs.dn_content = self.params["dn_content"].reshape(1, d) + Tensor(np.zeros((dn, d)))
        return qs

    # ------------------------------------------------------------------
    # decoder

    def _pos_embed(self, positions: Tensor) -> Tensor:
        return matmul(positions, self.params["pos_proj.w"]) + self.params["pos_proj.b"]

    def decode(
        self,
        pyramid: FeaturePyramid,
        queries: QuerySet,
        layout: DnLayout | None = None,
    ) -> list[LayerPrediction]:
        cfg = self.config
        pp = self.params
        k = cfg.num_keypoints
        if queries.dn_positional is not None and queries.dn_positional.shape[0] > 0:
            positions = concat([queries.dn_positional, queries.positional], axis=0)
            content = concat([queries.dn_content, queries.content], axis=0)
        else:
            positions = queries.positional
            content = queries.content
        t = positions.shape[0]
        if layout is None:
            layout = DnLayout(groups=0, num_gt=0)
        mask = build_attention_mask(layout, cfg.num_queries)
        if mask.rows != t:
            raise ValueError(f"layout covers {mask.rows} queries, decoder has {t}")
        x = content.reshape(t, 1, cfg.embed_dim) + Tensor(
            np.zeros((t, k + 1, cfg.embed_dim), dtype=content.dtype)
        )
        preds: list[LayerPrediction] = []
        for layer in range(cfg.num_layers):
            p = f"dec{layer}."
            pe = self._pos_embed(positions)
            within = {kk: pp[p + "within." + kk] for kk in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")}
            x = layer_norm(
                x + multi_head_attention(x, pe, within, cfg.num_heads),
                pp[p + "ln1.g"], pp[p + "ln1.b"],
            )
            across = {kk: pp[p + "across." + kk] for kk in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")}
            xt = x.transpose(1, 0, 2)  # (K+1, T, D): attention across instances per slot
            pet = pe.transpose(1, 0, 2)
            xt = multi_head_attention(xt, pet, across, cfg.num_heads, mask=mask)
            x = layer_norm(x + xt.transpose(1, 0, 2), pp[p + "ln2.g"], pp[p + "ln2.b"])
            cross = self._deformable(x, pe, positions, pyramid, layer)
            x = layer_norm(x + cross, pp[p + "ln3.g"], pp[p + "ln3.b"])
            ffn = matmul((matmul(x, pp[p + "ffn.w1"]) + pp[p + "ffn.b1"]).relu(), pp[p + "ffn.w2"]) + pp[p + "ffn.b2"]
            x = layer_norm(x + ffn, pp[p + "ln4.g"], pp[p + "ln4.b"])

            kp_tokens = x[:, :k, :]
            kps = positions[:, :k, :]
            if layer == 0:
                h1 = (matmul(kp_tokens, pp["pre_pose.w1"]) + pp["pre_pose.b1"]).relu()
                pre = (matmul(h1, pp["pre_pose.w2"]) + pp["pre_pose.b2"]).tanh() * cfg.pre_pose_range
                kps = (kps + pre).clamp(0.0, 1.0)
            fdr = (matmul(kp_tokens, pp[p + "fdr.w"]) + pp[p + "fdr.b"]).reshape(t, k, 2, cfg.num_bins)
            bin_range = cfg.bin_range * (0.5**layer)
            kps = fdr_refine(fdr, kps, bin_range)
            inst_tok = x[:, k, :]
            logits = (matmul(inst_tok, pp[p + "cls.w"]) + pp[p + "cls.b"]).reshape(t)
            refined = pose_lqe(kps, pyramid.levels[0], logits, cfg.k_lqe, pp["lqe.w"], pp["lqe.b"])
            preds.append(LayerPrediction(keypoints=kps, logits=logits, refined_logits=refined, fdr_logits=fdr))
            inst_pos = kps.mean(axis=1, keepdims=True)
            positions = concat([kps, inst_pos], axis=1)
        return preds

    def _deformable(
        self, x: Tensor, pe: Tensor, positions: Tensor, pyramid: FeaturePyramid, layer: int
    ) -> Tensor:
        cfg = self.config
        pp = self.params
        p = f"dec{layer}.deform."
        t, s, d = x.shape
        nt = t * s
        heads, lvls, pts = cfg.num_heads, cfg.num_levels, cfg.num_points
        hd = d // heads
        flat = (x + pe).reshape(nt, d)
        ref = positions.reshape(nt, 2)
        off = (matmul(flat, pp[p + "w_off"]) + pp[p + "b_off"]).reshape(nt, heads, lvls, pts, 2)
        attw = softmax(
            (matmul(flat, pp[p + "w_attn"]) + pp[p + "b_attn"]).reshape(nt, heads, lvls * pts),
            axis=-1,
        ).reshape(nt, heads, lvls, pts, 1)
        locs = ref.reshape(nt, 1, 1, 1, 2) + off
        merged: Tensor | None = None
        for lvl in range(lvls):
            pts_l = locs[:, :, lvl, :, :].reshape(nt * heads * pts, 2)
            sampled = bilinear_sample(pyramid.levels[lvl], pts_l).reshape(nt, heads, pts, d)
            contrib = (sampled * attw[:, :, lvl, :, :]).sum(axis=2)  # (nt, heads, D)
            merged = contrib if merged is None else merged + contrib
        out = matmul(merged.reshape(nt, heads * d), pp[p + "w_out"]) + pp[p + "b_out"]
        return out.reshape(t, s, d)

    # ------------------------------------------------------------------

    def forward(
        self,
        image: Tensor,
        dn_samples: list[NoisySample] | None = None,
        layout: DnLayout | None = None,
    ) -> list[LayerPrediction]:
        pyramid = self.encode(image)
        queries = self.select_queries(pyramid, dn_samples)
        return self.decode(pyramid, queries, layout)
