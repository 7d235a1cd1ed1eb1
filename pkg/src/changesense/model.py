"""End-to-end assembly: perception, token extraction, language model, losses.

A Model owns one flat parameter dictionary (plus low-rank adapters), derives
the per-module configs from a single ModelConfig, and exposes the training
loss closures for both stages, greedy inference with per-component timing,
and checkpoint round-trips. Token sequences are laid out as
[visual | prompt | change | question | answer].
"""

from __future__ import annotations

import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image

from . import vocab as V
from .changeseg import (
    FROZEN_PREFIX, TRAIN_PREFIX, PromptGeometry, SegConfig, decode_seg_mask,
    dual_branch_forward, fuse_multiscale, init_branch_params,
    init_fusion_params, init_projector_params, nearest_resample,
    project_tokens, seg_pixel_features,
)
from .datagen import (
    QASample, TemporalScene, extract_transitions, load_scene, vocab_lexicon,
)
from .errors import ConfigError, InputError
from .lm import (
    LMConfig, TokenRun, generate, init_lm_params, init_lora_adapters,
    lm_forward, text_run, track_seg_events,
)
from .losses import (
    LossWeights, cls_loss, mask_loss,
    reg_loss, text_loss,
)
from .tensor import Tensor, backward
from .tensor import softmax as T_softmax
from .trainer import (
    Adam, StagePlan, load_checkpoint, save_checkpoint, zero_grads,
)
from .vcp import (
    VCPConfig, encode_images, init_cea_params, init_encoder_params, vcp_forward,
)

VISUAL_GROUPS = ("cea", "fuse", TRAIN_PREFIX, "projector")
FROZEN_GROUPS = ("encoder", FROZEN_PREFIX, "lm")


@dataclass
class ModelConfig:
    image_size: int = 64
    k: int = 2
    d_f: int = 16                 # encoder width; also the query width
    c_llm: int = 32
    n_queries: int = 8
    decoder_layers: int = 2
    n_classes: int = 7
    lm_blocks: int = 2
    max_len: int = 512
    lora_rank: int = 4
    lora_scale: float = 1.0
    use_cea: bool = True
    use_cpe: bool = True
    use_lca: bool = True
    symmetric_queries: bool = False
    seed: int = 0
    alpha: float = 1.0
    beta: float = 1.0
    gamma_focal: float = 2.0
    max_answer_tokens: int = 64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def vcp(self) -> VCPConfig:
        return VCPConfig(d_f=self.d_f, use_cea=self.use_cea,
                         symmetric_queries=self.symmetric_queries)

    def seg(self) -> SegConfig:
        return SegConfig(c=self.d_f, c_llm=self.c_llm,
                         n_queries=self.n_queries,
                         decoder_layers=self.decoder_layers,
                         n_classes=self.n_classes, use_cpe=self.use_cpe)

    def lm(self, vocab_size: int) -> LMConfig:
        return LMConfig(c_llm=self.c_llm, blocks=self.lm_blocks,
                        max_len=self.max_len, vocab_size=vocab_size,
                        use_lca=self.use_lca)

    def weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha, beta=self.beta,
                           gamma_focal=self.gamma_focal)


def build_vocab() -> V.Vocab:
    return V.Vocab.build(vocab_lexicon())


@dataclass
class VisualState:
    vcp_out: object
    fused: object
    stage1: list
    branch: object
    bundle: object


@dataclass
class PreparedSample:
    """One QA sample with everything resolved against the stored dataset."""

    qa: QASample
    question_ids: list
    answer_ids: list              # includes the end-of-answer token
    prompt: PromptGeometry | None
    gt_masks: list = field(default_factory=list)   # aligned with [SEG] order
    instances: list = field(default_factory=list)  # (mask, to_class) for cls


def prepare_sample(dataset_dir: str, scene: TemporalScene, qa: QASample,
                   voc: V.Vocab) -> PreparedSample:
    question_ids = voc.encode(qa.question)
    answer_ids = voc.encode(qa.answer) + [V.EOA]
    prompt = None
    if qa.prompt is not None:
        prompt = PromptGeometry(qa.prompt["kind"], tuple(qa.prompt["coords"]))
    gt_masks = []
    for ref in qa.mask_refs:
        path = os.path.join(dataset_dir, "masks", qa.scene_id, f"{ref}.png")
        gt_masks.append(np.asarray(Image.open(path)) > 0)
    pair = qa.stage_pair if qa.stage_pair in ((1, 2), (2, 3)) else (1, 2)
    recs, _ = extract_transitions(scene.grids[pair[0] - 1],
                                  scene.grids[pair[1] - 1])
    # one target per transition record: all pixels of that class change
    instances = [(rec.mask.astype(bool), rec.to_class) for rec in recs]
    instances.sort(key=lambda t: -t[0].sum())
    return PreparedSample(qa=qa, question_ids=question_ids,
                          answer_ids=answer_ids, prompt=prompt,
                          gt_masks=gt_masks, instances=instances)


class Model:
    def __init__(self, cfg: ModelConfig, voc: V.Vocab,
                 params: dict | None = None, lora: dict | None = None):
        if cfg.image_size % 16:
            raise ConfigError("image size must be divisible by 16")
        self.cfg = cfg
        self.voc = voc
        self.vcp_cfg = cfg.vcp()
        self.seg_cfg = cfg.seg()
        self.lm_cfg = cfg.lm(len(voc))
        self.params = params if params is not None else self._init_params()
        self.lora = lora if lora is not None else init_lora_adapters(
            cfg.seed, self.lm_cfg, cfg.lora_rank)

    def _init_params(self) -> dict:
        cfg = self.cfg
        params = {}
        params.update(init_encoder_params(cfg.seed, self.vcp_cfg))
        params.update(init_cea_params(cfg.seed, self.vcp_cfg))
        params.update(init_fusion_params(cfg.seed, cfg.d_f, self.seg_cfg))
        params.update(init_branch_params(cfg.seed, self.seg_cfg,
                                         FROZEN_PREFIX, trainable=False))
        params.update(init_branch_params(cfg.seed, self.seg_cfg,
                                         TRAIN_PREFIX, trainable=True))
        params.update(init_projector_params(cfg.seed, self.seg_cfg))
        params.update(init_lm_params(cfg.seed, self.lm_cfg))
        return params

    # -- forward pieces -------------------------------------------------------

    def visual_forward(self, images: list, prompt: PromptGeometry | None = None,
                       timings: dict | None = None) -> VisualState:
        vcp_out = vcp_forward(images, self.params, self.vcp_cfg)
        fused = fuse_multiscale(vcp_out, self.params, self.seg_cfg,
                                images[0].shape)
        stage1 = [vcp_out.enhanced.stage(p, 1)
                  for p in range(1, vcp_out.enhanced.phases + 1)]
        branch = dual_branch_forward(fused, stage1, self.params, self.seg_cfg,
                                     prompt, timings=timings)
        bundle = project_tokens(branch.t_v, branch.t_p, branch.prompt_q,
                                self.params, fused)
        return VisualState(vcp_out=vcp_out, fused=fused, stage1=stage1,
                           branch=branch, bundle=bundle)

    def build_prefix(self, state: VisualState, question_ids: list) -> list:
        bundle = state.bundle
        seq = [TokenRun("visual", embedding=bundle.visual,
                        phases=bundle.visual_phase)]
        if bundle.prompt is not None:
            seq.append(TokenRun("prompt", embedding=bundle.prompt))
        seq.append(TokenRun("change", embedding=bundle.change))
        seq.append(text_run(question_ids))
        return seq

    def teacher_forced(self, state: VisualState, sample: PreparedSample,
                       use_lora: bool):
        """Full-sequence forward with the answer appended; returns
        (hidden, logits, next-token targets with −1 ignores, answer start)."""
        seq = self.build_prefix(state, sample.question_ids)
        prefix_len = sum(len(r) for r in seq)
        seq.append(text_run(sample.answer_ids))
        n = prefix_len + len(sample.answer_ids)
        hidden, logits = lm_forward(
            seq, self.params, self.lm_cfg,
            lora=self.lora if use_lora else None,
            lora_scale=self.cfg.lora_scale if use_lora else 0.0)
        targets = np.full(n, -1, dtype=np.int64)
        targets[prefix_len - 1: n - 1] = sample.answer_ids
        return hidden, logits, targets, prefix_len

    # -- training losses ------------------------------------------------------

    def stage1_losses(self, images: list, sample: PreparedSample):
        state = self.visual_forward(images, sample.prompt)
        _, logits, targets, _ = self.teacher_forced(state, sample,
                                                    use_lora=False)
        l_text = text_loss(logits, targets)
        l_reg = reg_loss(state.branch.t_ov.detach(), state.branch.t_p,
                         self.params)
        total = l_text + l_reg
        return total, {"l_text": float(l_text.data),
                       "l_reg": float(l_reg.data)}

    def stage2_losses(self, images: list, sample: PreparedSample):
        state = self.visual_forward(images, sample.prompt)
        hidden, logits, targets, prefix_len = self.teacher_forced(
            state, sample, use_lora=True)
        l_text = text_loss(logits, targets)
        total = l_text
        terms = {"l_text": float(l_text.data)}

        events = track_seg_events(sample.answer_ids, prefix_len)
        w = self.cfg.weights()
        l_mask_total = 0.0
        for (pos, pair), gt in zip(events, sample.gt_masks):
            if pair not in state.vcp_out.f_diff:
                raise InputError(f"sample references unavailable pair {pair}")
            pix = seg_pixel_features(
                state.vcp_out, state.fused, pair, self.params, self.seg_cfg,
                lm_visual=self.lm_visual_block(state, hidden, pair))
            _, logit_grid = decode_seg_mask(hidden[pos], self.params, pix,
                                            gt.shape,
                                            prior=self.prior_gate(state, pair))
            lm_term = mask_loss(logit_grid, gt.astype(float), w)
            total = total + lm_term
            l_mask_total += float(lm_term.data)
        terms["l_mask"] = l_mask_total

        # queries are class-bound: query c owns "change into class c",
        # with an all-zero mask target when that class never appears
        n_bound = min(self.cfg.n_classes, self.cfg.n_queries)
        shape = sample.instances[0][0].shape if sample.instances \
            else state.fused.image_shape
        by_class = {c: np.zeros(shape, dtype=bool) for c in range(1, n_bound)}
        for gmask, c in sample.instances:
            by_class[c % self.cfg.n_queries] |= gmask
        labels = np.zeros(self.cfg.n_queries, dtype=np.int64)
        labels[1:n_bound] = np.arange(1, n_bound)
        l_cls = cls_loss(state.branch.prior.cls, labels)
        total = total + l_cls
        terms["l_cls"] = float(l_cls.data)

        if self.cfg.use_cpe and by_class:
            # each bound query's prior logits learn its class-change mask,
            # so the prior becomes a standalone change localizer
            prior = state.branch.prior
            w1, kh1, _ = prior.m_fine.shape
            k = state.fused.grid[2]
            h1 = kh1 // k
            p = sample.qa.stage_pair[1] if sample.qa.stage_pair[1] <= k else k
            block = prior.m_fine[:, (p - 1) * h1: p * h1]
            l_prior = 0.0
            for q, gmask in sorted(by_class.items()):
                w0, h0 = gmask.shape
                grid = nearest_resample(block[:, :, q].reshape(w1, h1, 1),
                                        w0, h0).reshape(w0, h0)
                lp = mask_loss(grid, gmask.astype(float), w)
                total = total + lp
                l_prior += float(lp.data)
            terms["l_prior"] = l_prior
        return total, terms

    def lm_visual_block(self, state: VisualState, hidden: Tensor,
                        pair: tuple) -> Tensor:
        """Difference of a pair's language-contextualized visual-token blocks,
        reshaped back onto the fused grid. Phase-pure token states make this
        an explicit change map; cross-phase mixing dilutes it."""
        w4, h4, k = state.fused.grid
        n_vis = w4 * k * h4
        block = hidden[0:n_vis].reshape(w4, k * h4, hidden.shape[1])
        i, j = pair
        return (block[:, (j - 1) * h4: j * h4]
                - block[:, (i - 1) * h4: i * h4])

    def prior_gate(self, state: VisualState, pair: tuple) -> Tensor | None:
        """Score-weighted mixture of the prior's per-query mask logits on the
        later phase of a pair: a per-pixel change-prior term for the decoder.
        Absent when the prior embedding is disabled."""
        if not self.cfg.use_cpe:
            return None
        prior = state.branch.prior
        w1, kh1, n_d = prior.m_fine.shape
        weights = T_softmax(prior.m_fine * prior.s.reshape(1, 1, n_d), axis=2)
        g = (prior.m_fine * weights).sum(axis=2)
        h1 = kh1 // state.fused.grid[2]
        p = pair[1]
        gain = self.params[f"{TRAIN_PREFIX}.prior_gain"]
        return g[:, (p - 1) * h1: p * h1] * gain

    def prior_masks(self, state: VisualState, phase: int | None = None) -> np.ndarray:
        """Per-query boolean masks at image resolution from the trainable
        prior, read off one phase block of the finest grid (default: last)."""
        m = state.branch.prior.m_fine.data      # (w1, K*h1, N_d)
        w1, kh1, n_d = m.shape
        k = state.fused.grid[2]
        h1 = kh1 // k
        p = k if phase is None else phase
        block = m[:, (p - 1) * h1: p * h1, :]
        w0, h0 = state.fused.image_shape
        out = np.zeros((n_d, w0, h0), dtype=bool)
        iw = (np.arange(w0) * w1) // w0
        ih = (np.arange(h0) * h1) // h0
        for q in range(n_d):
            out[q] = (block[:, :, q] > 0.0)[iw][:, ih]
        return out

    def text_warmup(self, token_seqs: list, steps: int, lr: float) -> list:
        """Next-token pretraining of the language-model base on text alone,
        run before the base is frozen for the two-stage schedule."""
        names = [n for n in self.params if n.startswith("lm.")]
        opt = Adam(lr=lr)
        losses = []
        for step in range(steps):
            ids = token_seqs[step % len(token_seqs)]
            _, logits = lm_forward([text_run(ids)], self.params, self.lm_cfg)
            targets = np.full(len(ids), -1, dtype=np.int64)
            targets[:-1] = ids[1:]
            loss = text_loss(logits, targets)
            zero_grads(self.params)
            backward(loss)
            opt.step(self.params, names)
            zero_grads(self.params)
            losses.append(float(loss.data))
        return losses

    # -- stage plans ----------------------------------------------------------

    def stage_plan(self, stage: str, steps: int, lr: float,
                   seed: int = 0) -> StagePlan:
        if stage == "pretrain":
            trainable = list(VISUAL_GROUPS)
            frozen = list(FROZEN_GROUPS) + ["lora"]
        else:
            trainable = list(VISUAL_GROUPS) + ["lora"]
            frozen = list(FROZEN_GROUPS)
        return StagePlan(stage, trainable=trainable, frozen=frozen,
                         steps=steps, lr=lr, seed=seed)

    def trainable_view(self) -> dict:
        """Parameters plus adapters in one dict, for plan bookkeeping."""
        return {**self.params, **self.lora}

    # -- inference ------------------------------------------------------------

    def infer(self, images: list, question: str,
              prompt: PromptGeometry | None = None) -> dict:
        """Greedy answer plus per-[SEG] masks and a component time breakdown."""
        timings: dict = {}
        t0 = time.perf_counter()
        encode_images(images, self.params, self.vcp_cfg)
        timings["encoder"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        state = self.visual_forward(images, prompt, timings=timings)
        vis_total = time.perf_counter() - t0
        # the visual pass re-runs the encoder; attribute the remainder minus
        # the separately timed query branches to the attention stage
        timings["cea"] = max(0.0, vis_total - timings["encoder"]
                             - timings.get("changeseg_frozen", 0.0)
                             - timings.get("changeseg_train", 0.0))

        t0 = time.perf_counter()
        prefix = self.build_prefix(state, self.voc.encode(question))
        result = generate(prefix, self.params, self.voc, self.lm_cfg,
                          max_new=self.cfg.max_answer_tokens,
                          lora=self.lora, lora_scale=self.cfg.lora_scale)
        timings["lm_generate"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        masks = []
        if result.seg_events:
            prefix_hidden, _ = lm_forward(prefix, self.params, self.lm_cfg,
                                          lora=self.lora,
                                          lora_scale=self.cfg.lora_scale)
        for (pos, pair), hid in zip(result.seg_events, result.seg_hidden):
            if pair not in state.vcp_out.f_diff:
                pair = (1, 2)
            pix = seg_pixel_features(
                state.vcp_out, state.fused, pair, self.params, self.seg_cfg,
                lm_visual=self.lm_visual_block(state, prefix_hidden, pair))
            mask, _ = decode_seg_mask(hid, self.params, pix,
                                      state.fused.image_shape,
                                      prior=self.prior_gate(state, pair))
            masks.append({"pair": pair, "mask": mask})
        timings["mask_decode"] = time.perf_counter() - t0
        timings["total"] = sum(v for k, v in timings.items() if k != "total")
        return {"answer": result.text, "token_ids": result.token_ids,
                "masks": masks, "truncated": result.truncated,
                "timings": timings, "state": state}

    # -- label-grid prediction for pixel metrics ------------------------------

    def probe_change_mask(self, state: VisualState, pair=(1, 2)) -> np.ndarray:
        """Binary change prediction for a phase pair via a teacher-forced
        [SEG] probe: ask the canonical delineation question, force its answer
        up to [SEG], and decode the mask from the [SEG] hidden state."""
        marker = "<T1T2>" if pair == (1, 2) else "<T2T3>"
        question = f"which pixels changed between t{pair[0]} and t{pair[1]} ?"
        ids = self.voc.encode(question) + self.voc.encode(
            f"all changed pixels are shown {marker} [SEG]")
        seq = self.build_prefix(state, ids)
        hidden, _ = lm_forward(seq, self.params, self.lm_cfg, lora=self.lora,
                               lora_scale=self.cfg.lora_scale)
        pix = seg_pixel_features(
            state.vcp_out, state.fused, pair, self.params, self.seg_cfg,
            lm_visual=self.lm_visual_block(state, hidden, pair))
        mask, _ = decode_seg_mask(hidden[hidden.shape[0] - 1], self.params,
                                  pix, state.fused.image_shape,
                                  prior=self.prior_gate(state, pair))
        return mask

    def predict_label_grid(self, images: list, pair=(1, 2)) -> np.ndarray:
        """Per-pixel to-class prediction: the [SEG] probe gates which pixels
        count as changed; prior queries with a non-background class both
        extend the gate with their proposal masks and assign classes inside
        it (higher fusion score first); remaining changed pixels take the
        best query's class."""
        state = self.visual_forward(images)
        changed = self.probe_change_mask(state, pair)
        masks = self.prior_masks(state, phase=pair[1])
        cls = state.branch.prior.cls.data
        scores = state.branch.prior.s.data.reshape(-1)
        w0, h0 = state.fused.image_shape
        out = np.zeros((w0, h0), dtype=np.int64)
        taken = np.zeros((w0, h0), dtype=bool)
        order = np.argsort(-scores)
        for q in order:
            label = int(np.argmax(cls[q]))
            if label == 0:
                continue
            sel = masks[q] & changed & ~taken
            out[sel] = label
            taken |= sel
        rest = changed & ~taken
        if rest.any():
            fallback = 1
            for q in order:
                label = int(np.argmax(cls[q]))
                if label != 0:
                    fallback = label
                    break
            out[rest] = fallback
        return out

    # -- persistence ----------------------------------------------------------

    def save(self, root: str):
        extra = {"config": self.cfg.to_dict()}
        save_checkpoint(root, self.params, self.lora, extra=extra)
        self.voc.save(os.path.join(root, "vocab.txt"))

    @classmethod
    def load(cls, root: str) -> "Model":
        params, lora, extra = load_checkpoint(root)
        voc = V.Vocab.load(os.path.join(root, "vocab.txt"))
        cfg = ModelConfig.from_dict(extra["config"])
        return cls(cfg, voc, params=params, lora=lora)


def images_as_tensors(scene: TemporalScene) -> list:
    return [Tensor(img) for img in scene.images]


def scene_for_sample(dataset_dir: str, qa: QASample, k: int) -> TemporalScene:
    return load_scene(dataset_dir, qa.scene_id, k)
