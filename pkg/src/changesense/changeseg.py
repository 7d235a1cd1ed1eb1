"""Difference-centric token extraction and mask decoding.

Multi-scale features from the perception stage are fused onto the coarsest
grid and width-concatenated across temporal phases. Learnable change queries
attend over the fused grid (optionally steered by a point/box prompt), predict
a change prior (per-query foreground mask logits, a scalar fusion score, and
category logits), and modulate the fused features. A frozen twin of the query
branch provides a gradient-free reference token stream. Two-layer MLP
projectors move tokens into and out of the language-model width, and a [SEG]
hidden state is decoded into a pixel mask against per-phase features.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GeometryError, InputError
from .tensor import NEG_INF, Tensor, make_rng, softmax, uniform_init
from .vcp import CEA_STAGES, VCPOutput, diff_features

FROZEN_PREFIX = "changeseg.frozen"
TRAIN_PREFIX = "changeseg.train"


@dataclass
class SegConfig:
    c: int = 32             # query/feature width; equals the encoder's d_f
    c_llm: int = 64
    n_queries: int = 16
    decoder_layers: int = 3
    n_classes: int = 7      # category head size; class 0 doubles as no-object
    use_cpe: bool = True


@dataclass
class PromptGeometry:
    """A point (row, col) or box (r1, c1, r2, c2) in first-phase pixel units."""

    kind: str = "none"      # point | box | none
    coords: tuple = ()

    def validate(self, image_shape):
        w0, h0 = image_shape[0], image_shape[1]
        if self.kind == "none":
            return
        if self.kind == "point":
            r, c = self.coords
            if not (0 <= r < w0 and 0 <= c < h0):
                raise GeometryError(f"point {self.coords} outside {w0}x{h0}")
        elif self.kind == "box":
            r1, c1, r2, c2 = self.coords
            if not (0 <= r1 < r2 <= w0 and 0 <= c1 < c2 <= h0):
                raise GeometryError(f"box {self.coords} invalid for {w0}x{h0}")
        else:
            raise GeometryError(f"unknown prompt kind {self.kind!r}")


@dataclass
class FusedFeatures:
    f: Tensor                    # (W, K*H, C)
    phase_of_column: np.ndarray  # (K*H,) values 1..K
    per_phase: list              # K tensors (W, H, C)
    grid: tuple                  # (W, H, K)
    image_shape: tuple           # (W0, H0)


@dataclass
class ChangePrior:
    m: Tensor    # (W, K*H, N_d) foreground mask logits on the fused grid
    s: Tensor    # (1, N_d) scalar fusion scores
    cls: Tensor  # (N_d, n_classes) category logits
    m_fine: Tensor | None = None  # (W1, K*H1, N_d) logits, finest grid


@dataclass
class TokenBundle:
    visual: Tensor               # (n_vis, C_llm) in interleaved flatten order
    visual_phase: np.ndarray     # (n_vis,)
    change: Tensor               # (N_d, C_llm)
    prompt: Tensor | None        # (1, C_llm)


# -- parameters ---------------------------------------------------------------

def init_fusion_params(seed: int, d_f: int, cfg: SegConfig) -> dict:
    rng = make_rng(seed, "fusion")
    scale = 1.0 / math.sqrt(d_f)
    return {f"fuse.s{l}.w": uniform_init(rng, (d_f, cfg.c), scale)
            for l in CEA_STAGES}


def init_branch_params(seed: int, cfg: SegConfig, prefix: str,
                       trainable: bool) -> dict:
    """Query-branch parameters. Frozen and trainable branches must be built
    from the same seed so they start identical."""
    rng = make_rng(seed, "branch")  # same seed -> identical draws for both
    c = cfg.c
    scale = 1.0 / math.sqrt(c)
    params = {f"{prefix}.queries": uniform_init(rng, (cfg.n_queries, c), scale)}
    for i in range(1, cfg.decoder_layers + 1):
        p = f"{prefix}.dec{i}"
        for name in ("wq", "wk", "wv", "wo", "ff.w1", "ff.w2"):
            params[f"{p}.{name}"] = uniform_init(rng, (c, c), scale)
        params[f"{p}.ff.b1"] = Tensor(np.zeros(c), requires_grad=True)
        params[f"{p}.ff.b2"] = Tensor(np.zeros(c), requires_grad=True)
    params[f"{prefix}.score.w"] = uniform_init(rng, (c, 1), scale)
    params[f"{prefix}.score.b"] = Tensor(np.zeros((1, 1)), requires_grad=True)
    params[f"{prefix}.cls.w"] = uniform_init(rng, (c, cfg.n_classes), scale)
    params[f"{prefix}.cls.b"] = Tensor(np.zeros((1, cfg.n_classes)),
                                       requires_grad=True)
    # decoder-side gain on the prior term; zero so it starts inert
    params[f"{prefix}.prior_gain"] = Tensor(np.zeros((1, 1)),
                                            requires_grad=True)
    # per-query offset for the fine mask readout
    params[f"{prefix}.fine.b"] = Tensor(np.zeros((1, 1, cfg.n_queries)),
                                        requires_grad=True)
    if not trainable:
        for t in params.values():
            t.requires_grad = False
    return params


def init_projector_params(seed: int, cfg: SegConfig) -> dict:
    rng = make_rng(seed, "projector")
    c, cl = cfg.c, cfg.c_llm
    return {
        "projector.pv.w1": uniform_init(rng, (c, cl), 1.0 / math.sqrt(c)),
        "projector.pv.b1": Tensor(np.zeros(cl), requires_grad=True),
        "projector.pv.w2": uniform_init(rng, (cl, cl), 1.0 / math.sqrt(cl)),
        "projector.pv.b2": Tensor(np.zeros(cl), requires_grad=True),
        "projector.pt.w1": uniform_init(rng, (cl, cl), 1.0 / math.sqrt(cl)),
        "projector.pt.b1": Tensor(np.zeros(cl), requires_grad=True),
        "projector.pt.w2": uniform_init(rng, (cl, c), 1.0 / math.sqrt(cl)),
        "projector.pt.b2": Tensor(np.zeros(c), requires_grad=True),
        # language-contextualized visual tokens back into decoder width; the
        # output layer starts small so it ramps in through training
        "projector.px.w1": uniform_init(rng, (cl, cl), 1.0 / math.sqrt(cl)),
        "projector.px.b1": Tensor(np.zeros(cl), requires_grad=True),
        "projector.px.w2": uniform_init(rng, (cl, c), 0.1 / math.sqrt(cl)),
        "projector.px.b2": Tensor(np.zeros(c), requires_grad=True),
    }


# -- fusion -------------------------------------------------------------------

def nearest_resample(t: Tensor, out_w: int, out_h: int) -> Tensor:
    w, h = t.shape[0], t.shape[1]
    iw = (np.arange(out_w) * w) // out_w
    ih = (np.arange(out_h) * h) // out_h
    return t[(iw[:, None], ih[None, :])]


def fuse_multiscale(vcp_out: VCPOutput, params: dict, cfg: SegConfig,
                    image_shape: tuple) -> FusedFeatures:
    """Resample stages 2..4 to the stage-4 grid, project, sum, then
    width-concatenate phases."""
    stack = vcp_out.enhanced
    k = stack.phases
    w4, h4 = stack.stage(1, 4).shape[:2]
    per_phase = []
    for p in range(1, k + 1):
        acc = None
        for l in CEA_STAGES:
            feat = stack.stage(p, l)
            if feat is None:
                raise InputError(f"missing stage {l} for phase {p}")
            res = nearest_resample(feat, w4, h4)
            proj = (res.reshape(w4 * h4, res.shape[2])
                    @ params[f"fuse.s{l}.w"]).reshape(w4, h4, cfg.c)
            acc = proj if acc is None else acc + proj
        per_phase.append(acc)
    fused = Tensor.concat(per_phase, axis=1)
    phase_of_column = np.repeat(np.arange(1, k + 1), h4)
    return FusedFeatures(f=fused, phase_of_column=phase_of_column,
                         per_phase=per_phase, grid=(w4, h4, k),
                         image_shape=tuple(image_shape[:2]))


# -- prompts ------------------------------------------------------------------

def _positional_encoding(r: float, c: float, dim: int) -> np.ndarray:
    """Sinusoidal encoding of a normalized (row, col) location."""
    half = dim // 2
    out = np.zeros(dim)
    freqs = 2.0 ** np.arange((half + 1) // 2) * math.pi
    for base, coord in ((0, r), (half, c)):
        n = half if base == 0 else dim - half
        enc = np.empty(n)
        enc[0::2] = np.sin(freqs[: (n + 1) // 2] * coord)
        enc[1::2] = np.cos(freqs[: n // 2] * coord)
        out[base:base + n] = enc
    return out


def encode_prompt(prompt: PromptGeometry, fused: FusedFeatures, cfg: SegConfig):
    """Prompt -> (query vector (1, C), boolean support over the fused grid).

    The spatial support is replicated into every phase block so all phases of
    the prompted location stay visible.
    """
    prompt.validate(fused.image_shape)
    w0, h0 = fused.image_shape
    w4, h4, k = fused.grid

    def cell(r, c):
        return (int(r) * w4) // w0, (int(c) * h4) // h0

    support = np.zeros((w4, h4), dtype=bool)
    if prompt.kind == "point":
        r, c = prompt.coords
        cr, cc = cell(r, c)
        support[cr, cc] = True
        vec = _positional_encoding(r / w0, c / h0, cfg.c)
    else:  # box
        r1, c1, r2, c2 = prompt.coords
        a, b = cell(r1, c1)
        a2, b2 = cell(r2 - 1, c2 - 1)
        support[a:a2 + 1, b:b2 + 1] = True
        corners = [(r1, c1), (r1, c2), (r2, c1), (r2, c2)]
        vec = np.mean([_positional_encoding(r / w0, c / h0, cfg.c)
                       for r, c in corners], axis=0)
    full = np.concatenate([support] * k, axis=1)  # (w4, k*h4)
    return Tensor(vec.reshape(1, cfg.c)), full


# -- query decoding -----------------------------------------------------------

def decode_queries(q: Tensor, fused: FusedFeatures, params: dict, prefix: str,
                   cfg: SegConfig, prompt: PromptGeometry | None = None):
    """Multi-layer single-head cross attention updating the change queries.

    Returns (updated queries (N_d, C), prompt query (1, C) or None). With a
    prompt, one extra query is appended and an additive -inf mask confines
    every query's attention to the prompt support.
    """
    if q.shape[1] != fused.f.shape[2]:
        raise ConfigError(f"query width {q.shape[1]} != feature width "
                          f"{fused.f.shape[2]}")
    n_d = q.shape[0]
    w, kh, c = fused.f.shape
    kv = fused.f.reshape(w * kh, c)
    mask = None
    if prompt is not None and prompt.kind != "none":
        pvec, support = encode_prompt(prompt, fused, cfg)
        q = Tensor.concat([q, pvec], axis=0)
        mask = np.where(support.reshape(-1), 0.0, NEG_INF)[None, :]
    scale = 1.0 / math.sqrt(c)
    for i in range(1, cfg.decoder_layers + 1):
        p = f"{prefix}.dec{i}"
        scores = ((q @ params[f"{p}.wq"])
                  @ (kv @ params[f"{p}.wk"]).transpose()) * scale
        att = softmax(scores, axis=1, additive_mask=mask)
        q = q + (att @ (kv @ params[f"{p}.wv"])) @ params[f"{p}.wo"]
        ff = ((q @ params[f"{p}.ff.w1"] + params[f"{p}.ff.b1"]).relu()
              @ params[f"{p}.ff.w2"] + params[f"{p}.ff.b2"])
        q = q + ff
    if mask is None:
        return q, None
    return q[:n_d], q[n_d:]


def attention_support(prompt: PromptGeometry, fused: FusedFeatures,
                      cfg: SegConfig) -> np.ndarray:
    """Boolean flattened-grid support a prompt admits (test/introspection aid)."""
    _, support = encode_prompt(prompt, fused, cfg)
    return support.reshape(-1)


# -- change prior and modulation ----------------------------------------------

def change_prior(q: Tensor, stage1_feats: list, params: dict, prefix: str,
                 fused: FusedFeatures) -> ChangePrior:
    """Queries against stage-1 features: mask logits via inner product on
    the fused grid (for modulation), and against adjacent-phase feature
    differences on the finest grid (for masks) so queries can localize
    change, plus scalar fusion scores and category logits."""
    w4, h4, k = fused.grid
    blocks = [nearest_resample(f, w4, h4) for f in stage1_feats]
    s1 = Tensor.concat(blocks, axis=1)  # (w4, k*h4, C)
    flat = s1.reshape(w4 * k * h4, s1.shape[2])
    m = (flat @ q.transpose()).reshape(w4, k * h4, q.shape[0])
    # phase block p carries the change into p; the first block has none
    fine = [stage1_feats[0] * 0.0]
    fine += [diff_features(stage1_feats[p - 1], stage1_feats[p])
             for p in range(1, len(stage1_feats))]
    s1f = Tensor.concat(fine, axis=1)  # (w1, k*h1, C)
    # scene-level RMS keeps the readout O(1) without amplifying noise-only
    # regions the way a per-position norm would
    s1f = s1f / (s1f.pow(2).mean() + 1e-12).pow(0.5)
    w1, kh1, c = s1f.shape
    m_fine = (s1f.reshape(w1 * kh1, c) @ q.transpose()).reshape(
        w1, kh1, q.shape[0]) * (1.0 / math.sqrt(c)) \
        + params[f"{prefix}.fine.b"]
    s = (q @ params[f"{prefix}.score.w"] + params[f"{prefix}.score.b"]).transpose()
    cls = q @ params[f"{prefix}.cls.w"] + params[f"{prefix}.cls.b"]
    return ChangePrior(m=m, m_fine=m_fine, s=s, cls=cls)


def cpe_modulate(prior: ChangePrior, q: Tensor, fused: FusedFeatures) -> Tensor:
    """Softmax over queries of score-scaled mask logits, contracted against the
    query bank, residually added to the fused features."""
    w, kh, n_d = prior.m.shape
    if q.shape[0] != n_d:
        raise ConfigError(f"query count {q.shape[0]} != prior width {n_d}")
    weights = softmax(prior.m * prior.s.reshape(1, 1, n_d), axis=2)
    mix = (weights.reshape(w * kh, n_d) @ q).reshape(w, kh, q.shape[1])
    return mix + fused.f


# -- dual branch --------------------------------------------------------------

@dataclass
class BranchOutput:
    t_ov: Tensor          # frozen branch tokens, gradient-free (N_d, C)
    t_v: Tensor           # trainable modulated features (W, K*H, C)
    t_p: Tensor           # trainable updated queries (N_d, C)
    prior: ChangePrior    # trainable branch prior (for cls supervision)
    prompt_q: Tensor | None


def dual_branch_forward(fused: FusedFeatures, stage1_feats: list, params: dict,
                        cfg: SegConfig, prompt: PromptGeometry | None = None,
                        timings: dict | None = None) -> BranchOutput:
    fq = params[f"{FROZEN_PREFIX}.queries"]
    tq = params[f"{TRAIN_PREFIX}.queries"]
    if fq.shape != tq.shape:
        raise ConfigError(f"branch shape divergence {fq.shape} vs {tq.shape}")

    # frozen branch: sever gradient flow entirely
    t0 = time.perf_counter()
    fused_frozen = FusedFeatures(f=fused.f.detach(),
                                 phase_of_column=fused.phase_of_column,
                                 per_phase=[t.detach() for t in fused.per_phase],
                                 grid=fused.grid, image_shape=fused.image_shape)
    s1_frozen = [t.detach() for t in stage1_feats]
    q_oz, _ = decode_queries(fq, fused_frozen, params, FROZEN_PREFIX, cfg, prompt)
    if cfg.use_cpe:
        prior_f = change_prior(q_oz, s1_frozen, params, FROZEN_PREFIX, fused_frozen)
        _ = cpe_modulate(prior_f, q_oz, fused_frozen)
    t1 = time.perf_counter()

    q_tr, prompt_q = decode_queries(tq, fused, params, TRAIN_PREFIX, cfg, prompt)
    prior = change_prior(q_tr, stage1_feats, params, TRAIN_PREFIX, fused)
    t_v = cpe_modulate(prior, q_tr, fused) if cfg.use_cpe else fused.f
    if timings is not None:
        timings["changeseg_frozen"] = timings.get("changeseg_frozen", 0.0) \
            + (t1 - t0)
        timings["changeseg_train"] = timings.get("changeseg_train", 0.0) \
            + (time.perf_counter() - t1)
    return BranchOutput(t_ov=q_oz, t_v=t_v, t_p=q_tr, prior=prior,
                        prompt_q=prompt_q)


# -- projectors ---------------------------------------------------------------

def apply_pv(x: Tensor, params: dict) -> Tensor:
    h = (x @ params["projector.pv.w1"] + params["projector.pv.b1"]).relu()
    return h @ params["projector.pv.w2"] + params["projector.pv.b2"]


def apply_pt(x: Tensor, params: dict) -> Tensor:
    h = (x @ params["projector.pt.w1"] + params["projector.pt.b1"]).relu()
    return h @ params["projector.pt.w2"] + params["projector.pt.b2"]


def apply_px(x: Tensor, params: dict) -> Tensor:
    h = (x @ params["projector.px.w1"] + params["projector.px.b1"]).relu()
    return h @ params["projector.px.w2"] + params["projector.px.b2"]


def project_tokens(t_v: Tensor, t_p: Tensor, prompt_q: Tensor | None,
                   params: dict, fused: FusedFeatures) -> TokenBundle:
    """Row-major flatten of the modulated grid (interleaved phase order), then
    the shared two-layer MLP into language-model width."""
    w, kh, c = t_v.shape
    visual = apply_pv(t_v.reshape(w * kh, c), params)
    visual_phase = np.tile(fused.phase_of_column, w)
    change = apply_pv(t_p, params)
    prompt_tok = apply_pv(prompt_q, params) if prompt_q is not None else None
    return TokenBundle(visual=visual, visual_phase=visual_phase,
                       change=change, prompt=prompt_tok)


# -- mask decoding ------------------------------------------------------------

def seg_pixel_features(vcp_out: VCPOutput, fused: FusedFeatures, pair: tuple,
                       params: dict, cfg: SegConfig,
                       lm_visual: Tensor | None = None) -> Tensor:
    """Per-pixel decoding features for a phase pair on the finest (stage-1)
    grid: the later phase's fused map, the projected attention-refined
    difference embeddings (absent entirely when the attention stage is off),
    the language-contextualized visual-token differences when supplied, all
    upsampled, plus the raw stage-1 differences of the pair."""
    if pair not in vcp_out.f_diff:
        raise InputError(f"unknown phase pair {pair}")
    s1_i = vcp_out.raw.stage(pair[0], 1)
    s1_j = vcp_out.raw.stage(pair[1], 1)
    w1, h1 = s1_i.shape[0], s1_i.shape[1]
    acc = nearest_resample(fused.per_phase[pair[1] - 1], w1, h1)
    diffs = vcp_out.e_diff.get(pair)
    if diffs is not None:
        for l in CEA_STAGES:
            fd = nearest_resample(diffs[l], w1, h1)
            acc = acc + (fd.reshape(w1 * h1, fd.shape[2])
                         @ params[f"fuse.s{l}.w"]).reshape(w1, h1, cfg.c)
    if lm_visual is not None:
        wv, hv, cl = lm_visual.shape
        proj = apply_px(lm_visual.reshape(wv * hv, cl),
                        params).reshape(wv, hv, cfg.c)
        acc = acc + nearest_resample(proj, w1, h1)
    return acc + diff_features(s1_i, s1_j)


def decode_seg_mask(seg_hidden: Tensor, params: dict, pixel_feats: Tensor,
                    image_shape: tuple, prior: Tensor | None = None):
    """[SEG] hidden state -> (binary mask at image resolution, logit grid).

    Logits are inner products of the text-projected hidden state with the
    per-pixel features, plus an optional change-prior logit grid; ties at
    exactly 0 are background.
    """
    w4, h4, c = pixel_feats.shape
    v = apply_pt(seg_hidden.reshape(1, -1), params)
    logits = (pixel_feats.reshape(w4 * h4, c) @ v.transpose()).reshape(w4, h4)
    w0, h0 = image_shape[:2]
    full = nearest_resample(logits.reshape(w4, h4, 1), w0, h0).reshape(w0, h0)
    if prior is not None:
        wp, hp = prior.shape
        pg = nearest_resample(prior.reshape(wp, hp, 1), w0, h0)
        full = full + pg.reshape(w0, h0)
    return full.data > 0.0, full
