"""Evaluation metrics for semantic change detection and change QA.

The pixel metrics operate on per-pixel "to-class" label grids where 0 means
unchanged and 1..C-1 name the class a changed pixel turned into. Captioning
quality uses a plain n-gram consensus score (average cosine similarity of
IDF-weighted 1..4-gram count vectors, scaled by 10) with corpus statistics
taken from the evaluation references themselves.
"""

from __future__ import annotations

from collections import Counter

import numpy as np

from .errors import InputError


# -- semantic change detection ------------------------------------------------

def scd_confusion(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> np.ndarray:
    """Row = ground truth class, column = predicted class."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise InputError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.min() < 0 or pred.max() >= n_classes or gt.min() < 0 \
            or gt.max() >= n_classes:
        raise InputError("labels outside [0, n_classes)")
    idx = gt.ravel() * n_classes + pred.ravel()
    return np.bincount(idx, minlength=n_classes * n_classes) \
        .reshape(n_classes, n_classes).astype(np.float64)


def _safe_div(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def scd_scores(conf: np.ndarray) -> dict:
    """oa, miou, sek, f_scd from a to-class confusion matrix (0 = unchanged).

    miou averages the binary change/no-change IoUs. sek is the separated-kappa
    score: cohen's kappa on the matrix with the (unchanged, unchanged) cell
    zeroed, damped by e^(IoU_change - 1). f_scd is the harmonic mean of
    semantic precision/recall, where a changed pixel counts as semantically
    correct only when predicted changed with the right class. Degenerate
    denominators score 0.
    """
    conf = np.asarray(conf, dtype=np.float64)
    total = conf.sum()
    if total == 0:
        return {"oa": 0.0, "miou": 0.0, "sek": 0.0, "f_scd": 0.0}
    oa = np.trace(conf) / total

    # binary change / no-change IoUs
    tn = conf[0, 0]
    fn = conf[1:, 0].sum()          # changed pixels predicted unchanged
    fp = conf[0, 1:].sum()          # unchanged pixels predicted changed
    tp = conf[1:, 1:].sum()         # changed predicted changed (any class)
    iou_nc = _safe_div(tn, tn + fn + fp)
    iou_c = _safe_div(tp, tp + fn + fp)
    miou = (iou_nc + iou_c) / 2

    # separated kappa on the matrix without the unchanged agreement mass
    q = conf.copy()
    q[0, 0] = 0.0
    qt = q.sum()
    if qt > 0:
        po = np.trace(q) / qt
        pe = (q.sum(axis=0) * q.sum(axis=1)).sum() / (qt * qt)
        kappa = _safe_div(po - pe, 1.0 - pe) if pe < 1.0 else 0.0
    else:
        kappa = 0.0
    sek = np.exp(iou_c - 1.0) * kappa

    # semantic change F-score: right class among changed pixels
    correct_sem = np.trace(conf[1:, 1:])
    prec = _safe_div(correct_sem, conf[:, 1:].sum())
    rec = _safe_div(correct_sem, conf[1:, :].sum())
    f_scd = _safe_div(2 * prec * rec, prec + rec)

    per_class_iou = []
    for c in range(conf.shape[0]):
        inter = conf[c, c]
        union = conf[c, :].sum() + conf[:, c].sum() - inter
        per_class_iou.append(_safe_div(inter, union))
    return {"oa": float(oa), "miou": float(miou), "sek": float(sek),
            "f_scd": float(f_scd), "per_class_iou": per_class_iou}


# -- answer accuracy ----------------------------------------------------------

def parse_choice(answer: str, letters) -> list | None:
    """Extract option letters from a generated answer; None if unparseable."""
    picked = [t for t in answer.split() if t in set(letters)]
    seen = sorted(set(picked))
    return seen if seen else None


def choice_accuracy(samples: list) -> dict:
    """samples: (format, predicted_text, gold_text, option_letters) tuples.

    Single choice needs the exact letter; multi choice the exact letter set.
    Unparseable predictions count as incorrect and are tallied separately.
    Returns per-format accuracies plus the pooled one.
    """
    counts = {"single-choice": [0, 0], "multi-choice": [0, 0]}
    unparseable = 0
    for fmt, pred, gold, letters in samples:
        counts[fmt][1] += 1
        p = parse_choice(pred, letters)
        g = parse_choice(gold, letters)
        if p is None:
            unparseable += 1
            continue
        if fmt == "single-choice":
            if len(p) == 1 and p == g:
                counts[fmt][0] += 1
        elif p == g:
            counts[fmt][0] += 1
    n = len(samples)
    correct = counts["single-choice"][0] + counts["multi-choice"][0]
    return {"n": n, "accuracy": _safe_div(correct, n),
            "single": _safe_div(*counts["single-choice"]),
            "multi": _safe_div(*counts["multi-choice"]),
            "unparseable": unparseable}


# -- captioning consensus -----------------------------------------------------

def _ngrams(tokens: list, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def cider(candidates: list, references: list, max_n: int = 4) -> float:
    """Plain consensus score: 10 * mean over n of the average cosine between
    IDF-weighted n-gram vectors of candidate and references. IDF comes from
    the reference corpus passed in (one or more references per candidate).
    """
    if len(candidates) != len(references):
        raise InputError("candidate/reference count mismatch")
    if not candidates:
        return 0.0
    cand_toks = [c.split() for c in candidates]
    ref_toks = [[r.split() for r in refs] for refs in references]

    n_docs = len(references)
    scores = np.zeros(max_n)
    for n in range(1, max_n + 1):
        df: Counter = Counter()
        for refs in ref_toks:
            grams = set()
            for r in refs:
                grams.update(_ngrams(r, n))
            df.update(grams)
        idf = {g: np.log(n_docs / df[g]) for g in df}

        def vec(toks):
            counts = _ngrams(toks, n)
            return {g: c * idf.get(g, np.log(n_docs)) for g, c in counts.items()}

        sims = []
        for cand, refs in zip(cand_toks, ref_toks):
            v = vec(cand)
            nv = np.sqrt(sum(x * x for x in v.values()))
            per_ref = []
            for r in refs:
                w = vec(r)
                nw = np.sqrt(sum(x * x for x in w.values()))
                dot = sum(v[g] * w[g] for g in v if g in w)
                per_ref.append(_safe_div(dot, nv * nw))
            sims.append(np.mean(per_ref) if per_ref else 0.0)
        scores[n - 1] = np.mean(sims)
    return float(10.0 * scores.mean())
