"""Visual change perception.

A toy 4-stage patch-merging encoder (weights shared across temporal phases)
produces per-phase feature pyramids. Stages 2..4 are compared pairwise through
absolute difference features, an MLP difference embedding, and a two-layer
change-enhanced cross attention that amplifies the regions where adjacent
phases disagree. Attention maps are normalized over the flattened spatial
positions, so each map is a distribution over pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError
from .tensor import Tensor, make_rng, softmax, uniform_init

CEA_STAGES = (2, 3, 4)  # stage 1 is reserved for the change prior


@dataclass
class VCPConfig:
    d_f: int = 32
    n_stages: int = 4
    cea_layers: int = 2
    symmetric_queries: bool = False  # escape hatch: query A2 from the later phase
    use_cea: bool = True


@dataclass
class TemporalFeatureStack:
    """Per-phase, per-stage feature maps; stages[p][l-1] has shape W_l x H_l x d_f."""

    stages: list

    @property
    def phases(self) -> int:
        return len(self.stages)

    def stage(self, phase: int, l: int) -> Tensor:
        """1-based phase and stage indices."""
        return self.stages[phase - 1][l - 1]


@dataclass
class VCPOutput:
    raw: TemporalFeatureStack
    enhanced: TemporalFeatureStack
    f_diff: dict      # (i, j) pair -> {stage: Tensor}, raw |F_i - F_j|
    e_diff: dict      # (i, j) pair -> {stage: Tensor}, post-CEA embeddings


# -- encoder ------------------------------------------------------------------

def init_encoder_params(seed: int, cfg: VCPConfig) -> dict:
    """Frozen toy encoder: per stage a 2x2 patch-merge followed by a linear map."""
    rng = make_rng(seed, "encoder")
    params = {}
    c_in = 3
    for l in range(1, cfg.n_stages + 1):
        fan = 4 * c_in
        params[f"encoder.s{l}.w"] = uniform_init(
            rng, (fan, cfg.d_f), 1.0 / math.sqrt(fan), requires_grad=False)
        params[f"encoder.s{l}.b"] = uniform_init(
            rng, (cfg.d_f,), 0.1, requires_grad=False)
        c_in = cfg.d_f
    return params


def _patch_merge(x: Tensor) -> Tensor:
    """(W, H, C) -> (W/2, H/2, 4C) by folding 2x2 neighborhoods into channels."""
    w, h, c = x.shape
    if w % 2 or h % 2:
        raise InputError(f"stage input {w}x{h} not divisible by 2")
    return (x.reshape(w // 2, 2, h // 2, 2, c)
             .transpose((0, 2, 1, 3, 4))
             .reshape(w // 2, h // 2, 4 * c))


def encode_image(image: Tensor, params: dict, cfg: VCPConfig) -> list:
    feats = []
    x = image
    for l in range(1, cfg.n_stages + 1):
        merged = _patch_merge(x)
        w, h, c = merged.shape
        flat = merged.reshape(w * h, c)
        x = (flat @ params[f"encoder.s{l}.w"] + params[f"encoder.s{l}.b"]
             ).relu().reshape(w, h, cfg.d_f)
        feats.append(x)
    return feats


def encode_images(images: list, params: dict, cfg: VCPConfig) -> TemporalFeatureStack:
    if len(images) < 2:
        raise InputError(f"need at least 2 temporal phases, got {len(images)}")
    shape = images[0].shape
    for im in images[1:]:
        if im.shape != shape:
            raise InputError(f"mismatched image shapes {shape} vs {im.shape}")
    for im in images:
        if im.data.min() < 0.0 or im.data.max() > 1.0:
            raise InputError("pixel values must lie in [0, 1]")
    return TemporalFeatureStack([encode_image(im, params, cfg) for im in images])


# -- difference features and embeddings --------------------------------------

def diff_features(f_i: Tensor, f_j: Tensor) -> Tensor:
    """Elementwise absolute distance between collocated features."""
    if f_i.shape != f_j.shape:
        raise InputError(f"diff_features shape mismatch {f_i.shape} vs {f_j.shape}")
    return (f_i - f_j).abs()


def diff_embedding(f_diff: Tensor, params: dict, prefix: str) -> Tensor:
    """Per-pixel two-layer MLP over channels; output shape equals input shape."""
    w, h, d = f_diff.shape
    flat = f_diff.reshape(w * h, d)
    hidden = (flat @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"]).relu()
    return (hidden @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]).reshape(w, h, d)


# -- change-enhanced attention ------------------------------------------------

def init_cea_params(seed: int, cfg: VCPConfig, prefix: str = "cea") -> dict:
    """Projections ~U(-1,1)/sqrt(d_f); edge projections start at zero so the
    first forward pass has unbiased attention."""
    rng = make_rng(seed, prefix)
    d = cfg.d_f
    scale = 1.0 / math.sqrt(d)
    params = {}
    for l in CEA_STAGES:
        mlp = f"{prefix}.s{l}.mlp"
        params[f"{mlp}.w1"] = uniform_init(rng, (d, d), scale)
        params[f"{mlp}.b1"] = Tensor(np.zeros(d), requires_grad=True)
        params[f"{mlp}.w2"] = uniform_init(rng, (d, d), scale)
        params[f"{mlp}.b2"] = Tensor(np.zeros(d), requires_grad=True)
        for layer in range(1, cfg.cea_layers + 1):
            p = f"{prefix}.s{l}.l{layer}"
            for name in ("wq1", "wq2", "wk1", "wk2", "wv1", "wv2"):
                params[f"{p}.{name}"] = uniform_init(rng, (d, d), scale)
            params[f"{p}.wein"] = Tensor(np.zeros((d, 1)), requires_grad=True)
            params[f"{p}.weout"] = Tensor(np.zeros((1, d)), requires_grad=True)
    return params


def cea_layer(f_i: Tensor, f_j: Tensor, e_diff: Tensor, params: dict, prefix: str,
              symmetric_queries: bool = False):
    """One change-enhanced cross-attention layer.

    Two spatial attention maps are computed from pixel-wise channel inner
    products biased by the difference embedding, then used to residually mix
    each phase with the value-projected other phase. The difference embedding
    accumulates the averaged attention, projected back to feature width.
    """
    w, h, d = f_i.shape
    if params[f"{prefix}.wq1"].shape[0] != d:
        raise ConfigError(
            f"feature width {d} does not match weights "
            f"{params[f'{prefix}.wq1'].shape}")
    if e_diff.shape != (w, h, d):
        raise InputError(f"e_diff shape {e_diff.shape} != feature shape {(w, h, d)}")
    n = w * h
    scale = 1.0 / math.sqrt(d)
    fi = f_i.reshape(n, d)
    fj = f_j.reshape(n, d)
    ebias = (e_diff.reshape(n, d) @ params[f"{prefix}.wein"]).reshape(n)

    s1 = ((fi @ params[f"{prefix}.wq1"]) * (fj @ params[f"{prefix}.wk2"])
          ).sum(axis=1) * scale
    a1 = softmax(s1 + ebias, axis=0)
    if symmetric_queries:
        q2_src, k1_src = fj, fi
    else:
        # as printed: the earlier phase queries both maps
        q2_src, k1_src = fi, fj
    s2 = ((q2_src @ params[f"{prefix}.wq2"]) * (k1_src @ params[f"{prefix}.wk1"])
          ).sum(axis=1) * scale
    a2 = softmax(s2 + ebias, axis=0)

    f_i_out = f_i + (a1.reshape(n, 1) * (fj @ params[f"{prefix}.wv2"])).reshape(w, h, d)
    f_j_out = f_j + (a2.reshape(n, 1) * (fi @ params[f"{prefix}.wv1"])).reshape(w, h, d)
    e_out = e_diff + (((a1 + a2) * 0.5).reshape(n, 1)
                      @ params[f"{prefix}.weout"]).reshape(w, h, d)
    return f_i_out, f_j_out, e_out


def vcp_forward(images: list, params: dict, cfg: VCPConfig,
                prefix: str = "cea") -> VCPOutput:
    """Encode all phases, difference adjacent pairs, and (optionally) run the
    stacked change-enhanced attention on stages 2..4.

    For K=3 the two adjacent pairs are processed independently with shared
    weights; the middle phase accumulates the residual updates of both pairs.
    """
    raw = encode_images(images, params, cfg)
    k = raw.phases
    pairs = [(i, i + 1) for i in range(1, k)]

    f_diff = {pair: {l: diff_features(raw.stage(pair[0], l), raw.stage(pair[1], l))
                     for l in CEA_STAGES}
              for pair in pairs}

    if not cfg.use_cea:
        return VCPOutput(raw=raw, enhanced=raw, f_diff=f_diff, e_diff={})

    updates = [[None] * cfg.n_stages for _ in range(k)]  # residuals per phase/stage
    e_diff = {}
    for pair in pairs:
        i, j = pair
        e_diff[pair] = {}
        for l in CEA_STAGES:
            e = diff_embedding(f_diff[pair][l], params, f"{prefix}.s{l}.mlp")
            fi, fj = raw.stage(i, l), raw.stage(j, l)
            for layer in range(1, cfg.cea_layers + 1):
                fi, fj, e = cea_layer(fi, fj, e, params, f"{prefix}.s{l}.l{layer}",
                                      symmetric_queries=cfg.symmetric_queries)
            e_diff[pair][l] = e
            for phase, enhanced in ((i, fi), (j, fj)):
                delta = enhanced - raw.stage(phase, l)
                cell = updates[phase - 1][l - 1]
                updates[phase - 1][l - 1] = delta if cell is None else cell + delta

    enhanced = TemporalFeatureStack([
        [raw.stages[p][s] if updates[p][s] is None
         else raw.stages[p][s] + updates[p][s]
         for s in range(cfg.n_stages)]
        for p in range(k)
    ])
    return VCPOutput(raw=raw, enhanced=enhanced, f_diff=f_diff, e_diff=e_diff)
