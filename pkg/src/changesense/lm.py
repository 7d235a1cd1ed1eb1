"""Toy decoder-only language model with phase-local causal attention.

Token sequences are lists of runs (text ids, or pre-embedded visual/change/
prompt tokens). The attention mask starts causal; with the phase constraint
enabled, visual tokens from different temporal phases additionally mask each
other, while every non-visual token keeps plain causal attention. Greedy
generation tracks transition-marker tokens so each emitted [SEG] knows which
phase pair it refers to.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import vocab as V
from .errors import CapacityError, ConfigError
from .tensor import NEG_INF, Tensor, make_rng, softmax, uniform_init


@dataclass
class LMConfig:
    c_llm: int = 64
    blocks: int = 2
    max_len: int = 512
    vocab_size: int = 0
    mlp_mult: int = 2
    use_lca: bool = True


@dataclass
class TokenRun:
    """A run of consecutive same-kind tokens."""

    kind: str                       # text | visual | change | prompt
    token_ids: np.ndarray | None = None
    embedding: Tensor | None = None  # (m, c_llm) for non-text runs
    phases: np.ndarray | None = None  # per-token phase ids for visual runs

    def __len__(self):
        if self.token_ids is not None:
            return len(self.token_ids)
        return self.embedding.shape[0]


def text_run(ids) -> TokenRun:
    return TokenRun("text", token_ids=np.asarray(ids, dtype=np.int64))


def flatten_meta(seq: list):
    """(kinds, phases) arrays for a run sequence; phase 0 means 'no phase'."""
    kinds, phases = [], []
    for run in seq:
        m = len(run)
        kinds.extend([run.kind] * m)
        if run.kind == "visual":
            if run.phases is None or len(run.phases) != m:
                raise ConfigError("visual run without per-token phase ids")
            phases.extend(int(p) for p in run.phases)
        else:
            phases.extend([0] * m)
    return np.array(kinds), np.array(phases, dtype=np.int64)


def build_lca_mask(seq: list, use_lca: bool = True) -> np.ndarray:
    """Additive n x n mask: causal everywhere; with the phase constraint on,
    visual tokens of different phases cannot see each other."""
    kinds, phases = flatten_meta(seq)
    n = len(kinds)
    if n == 0:
        raise ConfigError("empty token sequence")
    idx = np.arange(n)
    mask = np.where(idx[None, :] <= idx[:, None], 0.0, NEG_INF)
    if use_lca:
        vis = kinds == "visual"
        cross = (vis[:, None] & vis[None, :] &
                 (phases[:, None] != phases[None, :]))
        mask[cross] = NEG_INF
    return mask


# -- parameters ---------------------------------------------------------------

def init_lm_params(seed: int, cfg: LMConfig) -> dict:
    rng = make_rng(seed, "lm")
    c = cfg.c_llm
    scale = 1.0 / np.sqrt(c)
    params = {
        "lm.emb": uniform_init(rng, (cfg.vocab_size, c), scale),
        "lm.pos": uniform_init(rng, (cfg.max_len, c), scale),
        "lm.lnf.g": Tensor(np.ones(c), requires_grad=True),
        "lm.lnf.b": Tensor(np.zeros(c), requires_grad=True),
        "lm.out": uniform_init(rng, (c, cfg.vocab_size), scale),
    }
    for b in range(1, cfg.blocks + 1):
        p = f"lm.b{b}"
        for ln in ("ln1", "ln2"):
            params[f"{p}.{ln}.g"] = Tensor(np.ones(c), requires_grad=True)
            params[f"{p}.{ln}.b"] = Tensor(np.zeros(c), requires_grad=True)
        for name in ("wq", "wk", "wv", "wo"):
            params[f"{p}.attn.{name}"] = uniform_init(rng, (c, c), scale)
        h = cfg.mlp_mult * c
        params[f"{p}.mlp.w1"] = uniform_init(rng, (c, h), scale)
        params[f"{p}.mlp.b1"] = Tensor(np.zeros(h), requires_grad=True)
        params[f"{p}.mlp.w2"] = uniform_init(rng, (h, c), 1.0 / np.sqrt(h))
        params[f"{p}.mlp.b2"] = Tensor(np.zeros(c), requires_grad=True)
    return params


LORA_TARGETS = ("wq", "wk", "wv", "wo")


def init_lora_adapters(seed: int, cfg: LMConfig, rank: int) -> dict:
    """A random, B zero: the adapted model starts exactly at the base model."""
    rng = make_rng(seed, "lora")
    c = cfg.c_llm
    adapters = {}
    for b in range(1, cfg.blocks + 1):
        for name in LORA_TARGETS:
            key = f"lora.b{b}.attn.{name}"
            adapters[f"{key}.A"] = uniform_init(rng, (c, rank), 1.0 / np.sqrt(c))
            adapters[f"{key}.B"] = Tensor(np.zeros((rank, c)), requires_grad=True)
    return adapters


def _layer_norm(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    return xc * (var + 1e-5).pow(-0.5) * g + b


def _attn_weight(params: dict, key: str, lora: dict | None,
                 lora_scale: float) -> Tensor:
    w = params[key]
    if lora is None:
        return w
    akey = key.replace("lm.", "lora.")
    if f"{akey}.A" not in lora:
        return w
    return w + lora[f"{akey}.A"] @ lora[f"{akey}.B"] * lora_scale


def embed_sequence(seq: list, params: dict) -> Tensor:
    pieces = []
    for run in seq:
        if run.kind == "text":
            pieces.append(params["lm.emb"][run.token_ids])
        else:
            pieces.append(run.embedding)
    x = pieces[0] if len(pieces) == 1 else Tensor.concat(pieces, axis=0)
    n = x.shape[0]
    return x + params["lm.pos"][np.arange(n)]


def lm_forward(seq: list, params: dict, cfg: LMConfig,
               mask: np.ndarray | None = None, lora: dict | None = None,
               lora_scale: float = 1.0, collect_attention: list | None = None):
    """Pre-norm transformer forward. Returns (hidden (n, C), logits (n, V))."""
    n = sum(len(r) for r in seq)
    if n > cfg.max_len:
        raise CapacityError(f"sequence length {n} exceeds max {cfg.max_len}")
    if mask is None:
        mask = build_lca_mask(seq, use_lca=cfg.use_lca)
    x = embed_sequence(seq, params)
    c = cfg.c_llm
    scale = 1.0 / np.sqrt(c)
    for b in range(1, cfg.blocks + 1):
        p = f"lm.b{b}"
        h = _layer_norm(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        wq = _attn_weight(params, f"{p}.attn.wq", lora, lora_scale)
        wk = _attn_weight(params, f"{p}.attn.wk", lora, lora_scale)
        wv = _attn_weight(params, f"{p}.attn.wv", lora, lora_scale)
        wo = _attn_weight(params, f"{p}.attn.wo", lora, lora_scale)
        scores = (h @ wq) @ (h @ wk).transpose() * scale
        att = softmax(scores, axis=1, additive_mask=mask)
        if collect_attention is not None:
            collect_attention.append(att.data)
        x = x + (att @ (h @ wv)) @ wo
        h2 = _layer_norm(x, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        x = x + (h2 @ params[f"{p}.mlp.w1"] + params[f"{p}.mlp.b1"]).relu() \
            @ params[f"{p}.mlp.w2"] + params[f"{p}.mlp.b2"]
    hidden = _layer_norm(x, params["lm.lnf.g"], params["lm.lnf.b"])
    logits = hidden @ params["lm.out"]
    return hidden, logits


def interleave_flatten(phase_of_column: np.ndarray, n_rows: int) -> np.ndarray:
    """Phase order of a row-major flatten of a width-concatenated grid."""
    return np.tile(np.asarray(phase_of_column), n_rows)


def track_seg_events(token_ids, prefix_len: int = 0) -> list:
    """Map [SEG] occurrences to phase pairs via the latest transition marker;
    an unmarked [SEG] defaults to (1, 2)."""
    events = []
    pair = (1, 2)
    for off, tok in enumerate(token_ids):
        if tok == V.T1T2:
            pair = (1, 2)
        elif tok == V.T2T3:
            pair = (2, 3)
        elif tok == V.SEG:
            events.append((prefix_len + off, pair))
    return events


@dataclass
class GenResult:
    token_ids: list
    text: str
    seg_events: list          # (position in full sequence, (phase_i, phase_j))
    seg_hidden: list          # Tensor (c_llm,) per seg event
    truncated: bool = False


def generate(prefix: list, params: dict, voc: V.Vocab, cfg: LMConfig,
             max_new: int, lora: dict | None = None,
             lora_scale: float = 1.0) -> GenResult:
    """Greedy decoding. Each [SEG] is tagged with the phase pair named by the
    most recent transition marker (default T1->T2)."""
    seq = list(prefix)
    generated: list = []
    prefix_len = sum(len(r) for r in seq)
    truncated = True
    for _ in range(max_new):
        _, logits = lm_forward(seq, params, cfg, lora=lora, lora_scale=lora_scale)
        nxt = int(np.argmax(logits.data[-1]))
        generated.append(nxt)
        seq.append(text_run([nxt]))
        if nxt == V.EOA:
            truncated = False
            break
    events = track_seg_events(generated, prefix_len)
    hidden, _ = lm_forward(seq, params, cfg, lora=lora, lora_scale=lora_scale)
    seg_hidden = [hidden[pos] for pos, _ in events]
    return GenResult(token_ids=generated,
                     text=voc.decode(generated, skip_special=True),
                     seg_events=events, seg_hidden=seg_hidden,
                     truncated=truncated)
