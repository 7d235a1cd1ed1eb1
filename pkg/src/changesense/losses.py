"""Loss kernels for the two training stages.

Text generation uses mean cross-entropy over supervised next-token positions;
projection alignment pulls the trainable token stream toward the frozen
branch's reference tokens through the round-trip projectors; mask supervision
combines focal and soft-dice terms; query classification is cross-entropy
after a greedy IoU assignment of predicted prior masks to ground-truth change
instances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .changeseg import apply_pt, apply_pv
from .errors import ConfigError, InputError
from .tensor import ContractError, DimensionError, Tensor


@dataclass
class LossWeights:
    alpha: float = 1.0        # focal weight
    beta: float = 1.0         # dice weight
    gamma_focal: float = 2.0  # focusing exponent

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma_focal < 0:
            raise ConfigError("loss weights must be non-negative")


def _log_softmax(logits: Tensor) -> Tensor:
    # shifting by the rowwise max as a constant keeps exp in range without
    # touching gradients (log-sum-exp is shift invariant)
    shift = logits.data.max(axis=1, keepdims=True)
    z = logits - shift
    return z - z.exp().sum(axis=1, keepdims=True).log()


def text_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy over positions with target >= 0 (−1 = ignore)."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape[0] != logits.shape[0]:
        raise DimensionError(
            f"{targets.shape[0]} targets for {logits.shape[0]} logit rows")
    rows = np.nonzero(targets >= 0)[0]
    if len(rows) == 0:
        raise ContractError("no supervised positions in text loss")
    lp = _log_softmax(logits)
    picked = lp[rows, targets[rows]]
    return -picked.mean()


def reg_loss(t_ov: Tensor, t_p: Tensor, params: dict) -> Tensor:
    """Squared L2 of (T_ov − P_t(P_v(T_p))), averaged over token rows."""
    proj = apply_pt(apply_pv(t_p, params), params)
    if proj.shape != t_ov.shape:
        raise DimensionError(
            f"projection shape {proj.shape} != reference {t_ov.shape}")
    resid = t_ov - proj
    return (resid * resid).sum() * (1.0 / t_ov.shape[0])


def focal_loss(logits: Tensor, mask_gt: np.ndarray, gamma: float = 2.0) -> Tensor:
    """Mean of −(1−p_t)^γ log p_t with p_t the probability of the true label."""
    gt = np.asarray(mask_gt, dtype=np.float64)
    if gt.shape != logits.shape:
        raise DimensionError(f"mask {gt.shape} vs logits {logits.shape}")
    p = logits.sigmoid()
    p_t = p * gt + (-p + 1.0) * (1.0 - gt)
    term = (p_t + 1e-12).log() * -1.0
    if gamma != 0.0:
        term = ((-p_t + 1.0) + 1e-12).pow(gamma) * term
    return term.mean()


def dice_loss(probs: Tensor, mask_gt: np.ndarray, eps: float = 1.0) -> Tensor:
    """1 − (2|P∩G| + ε) / (|P| + |G| + ε) with soft intersection."""
    gt = np.asarray(mask_gt, dtype=np.float64)
    if gt.shape != probs.shape:
        raise DimensionError(f"mask {gt.shape} vs probs {probs.shape}")
    inter = (probs * gt).sum()
    denom = probs.sum() + float(gt.sum()) + eps
    return -((inter * 2.0 + eps) * denom.pow(-1.0)) + 1.0


def mask_loss(logits: Tensor, mask_gt: np.ndarray, w: LossWeights) -> Tensor:
    return focal_loss(logits, mask_gt, w.gamma_focal) * w.alpha \
        + dice_loss(logits.sigmoid(), mask_gt) * w.beta


def greedy_iou_match(prior_masks: np.ndarray, instances: list) -> np.ndarray:
    """Assign each ground-truth instance to its best unused query.

    prior_masks: (N_d, w, h) boolean predicted foreground per query.
    instances: list of (mask (w, h) bool, class_id). Returns per-query labels
    with 0 (no-object) for unmatched queries. Matches are taken in descending
    IoU order; ties break on lower instance then lower query index.
    """
    labels = np.zeros(prior_masks.shape[0], dtype=np.int64)
    for q, i in greedy_iou_pairs(prior_masks, instances):
        labels[q] = instances[i][1]
    return labels


def greedy_iou_pairs(prior_masks: np.ndarray, instances: list) -> list:
    """The (query, instance) assignments behind greedy_iou_match."""
    n_q = prior_masks.shape[0]
    pairs = []
    for i, (gmask, _) in enumerate(instances):
        for q in range(n_q):
            inter = (prior_masks[q] & gmask).sum()
            union = (prior_masks[q] | gmask).sum()
            iou = inter / union if union else 0.0
            pairs.append((-iou, i, q))
    used_q: set = set()
    used_i: set = set()
    matched = []
    for neg_iou, i, q in sorted(pairs):
        if i in used_i or q in used_q:
            continue
        used_i.add(i)
        used_q.add(q)
        matched.append((q, i))
    return matched


def cls_loss(scores: Tensor, labels: np.ndarray) -> Tensor:
    """Cross-entropy of query category heads against assigned labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= scores.shape[1]:
        raise InputError(f"label outside [0, {scores.shape[1]})")
    lp = _log_softmax(scores)
    return -lp[np.arange(len(labels)), labels].mean()
