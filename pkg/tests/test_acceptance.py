"""Release acceptance gate: ten numbered checks, one PASS/FAIL line each.

Each test prints a single `[PRIMARY n] <label>: PASS|FAIL` line (visible with
`pytest -s`, or in the captured output of a failing test) and then asserts the
same condition, so the suite's pass/fail state and the printed report agree.

The checks cover, in order: (1) the stated scale limits of this toy stack,
(2) the ablation-direction benchmark, (3) gradient correctness, (4) exactness
of the phase-local attention mask, (5) identity invariants, (6) metric oracle
equivalence, (7) dataset integrity, (8) determinism of the CLI pipelines,
(9) parameter-freezing contracts, and (10) component overhead sanity.
"""

import json
import math
import os
import time
from collections import Counter

import numpy as np
import pytest
from PIL import Image

from changesense import datagen as dg
from changesense.changeseg import (
    FROZEN_PREFIX, TRAIN_PREFIX, SegConfig, change_prior, cpe_modulate,
    decode_queries, dual_branch_forward, fuse_multiscale, init_branch_params,
    init_fusion_params, init_projector_params,
)
from changesense.cli import main
from changesense.lm import (
    LMConfig, NEG_INF, TokenRun, build_lca_mask, init_lm_params,
    init_lora_adapters, lm_forward, text_run,
)
from changesense.losses import (
    LossWeights, cls_loss, dice_loss, focal_loss, mask_loss, reg_loss,
    text_loss,
)
from changesense.metrics import scd_confusion, scd_scores
from changesense.model import Model
from changesense.tensor import Tensor, grad_check, make_rng
from changesense.vcp import (
    VCPConfig, cea_layer, diff_features, init_cea_params, init_encoder_params,
    vcp_forward,
)


def report(num: int, label: str, ok: bool, detail: str = ""):
    tail = f" ({detail})" if detail else ""
    print(f"\n[PRIMARY {num}] {label}: {'PASS' if ok else 'FAIL'}{tail}")
    assert ok, f"[PRIMARY {num}] {label}{tail}"


def read_tree(root):
    out = {}
    for base, _, files in os.walk(root):
        for f in sorted(files):
            path = os.path.join(base, f)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = fh.read()
    return out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Small dataset + trained run shared by the fast end-to-end checks."""
    root = tmp_path_factory.mktemp("accept")
    ds = str(root / "ds")
    assert main(["gen", "--out", ds, "--scenes", "3", "--seed", "11",
                 "--size", "32"]) == 0
    run = str(root / "run")
    assert main(["train", "--data", ds, "--out", run, "--seed", "2",
                 "--stage1-steps", "4", "--stage2-steps", "4"]) == 0
    return {"root": root, "ds": ds, "run": run,
            "ckpt": os.path.join(run, "checkpoint")}


# -- 1: scale limits ----------------------------------------------------------

def test_01_published_scale_results_out_of_scope():
    """The README must state that published large-model benchmark numbers are
    out of reach at this scale and name the substitute checks; the default
    model must actually be desk-sized."""
    readme = os.path.join(os.path.dirname(__file__), "..", "README.md")
    with open(readme, encoding="utf-8") as fh:
        text = " ".join(fh.read().lower().split())
    stated = "not reproduce" in text and "desk" in text
    from changesense.model import ModelConfig
    cfg = ModelConfig()
    toy = cfg.image_size <= 128 and cfg.c_llm <= 64 and cfg.lm_blocks <= 4
    report(1, "published-scale results declared out of scope, "
              "substitute suites in place", stated and toy)


# -- 2: ablation direction benchmark ------------------------------------------

def test_02_ablation_direction_benchmark(tmp_path_factory):
    """Seeded 200-scene benchmark: the full model's change-segmentation mIoU
    should beat each single-component ablation by >= 2 points under identical
    two-stage budgets. The relative ordering of the ablations is reported but
    not asserted."""
    t0 = time.monotonic()
    root = tmp_path_factory.mktemp("bench")
    gen_cfg = str(root / "gen.json")
    with open(gen_cfg, "w") as fh:
        json.dump({"noise": 0.25}, fh)
    train_cfg = str(root / "train.json")
    with open(train_cfg, "w") as fh:
        json.dump({"text_warmup_steps": 1000}, fh)
    ds = str(root / "ds")
    assert main(["gen", "--out", ds, "--scenes", "200", "--seed", "0",
                 "--config", gen_cfg]) == 0
    with open(os.path.join(ds, "manifest.json")) as fh:
        scene_cfg = json.load(fh)["config"]["scene"]
    assert scene_cfg["size"] == 64
    assert scene_cfg["n_classes"] == 7          # 6 change classes + background
    assert abs(scene_cfg["change_budget"] - 0.15) < 1e-12

    miou = {}
    for name, flags in [("full", []), ("no-cpe", ["--no-cpe"]),
                        ("no-cea", ["--no-cea"]), ("no-lca", ["--no-lca"])]:
        run = str(root / name)
        assert main(["train", "--data", ds, "--out", run, "--seed", "0",
                     "--stage1-steps", "200", "--stage2-steps", "1600",
                     "--config", train_cfg] + flags) == 0
        ev = str(root / f"{name}-eval")
        assert main(["eval", "--checkpoint", os.path.join(run, "checkpoint"),
                     "--data", ds, "--out", ev, "--tasks", "scd"]) == 0
        with open(os.path.join(ev, "report.json")) as fh:
            miou[name] = json.load(fh)["scd"]["miou"] * 100.0

    elapsed = time.monotonic() - t0
    gaps = {n: miou["full"] - miou[n] for n in ("no-cpe", "no-cea", "no-lca")}
    order = sorted(gaps, key=lambda n: -gaps[n])
    detail = (f"full={miou['full']:.2f}; "
              + ", ".join(f"{n} gap {gaps[n]:+.2f}" for n in gaps)
              + f"; observed impact order {' > '.join(order)}"
              + f"; {elapsed / 60:.1f} min")
    report(2, "full model beats every single-component ablation by >= 2 mIoU",
           all(g >= 2.0 for g in gaps.values()) and elapsed <= 3600.0, detail)


# -- 3: gradient correctness --------------------------------------------------

def _probe(rng, t):
    return (t * Tensor(rng.normal(size=t.shape))).sum()


def test_03_gradient_checks():
    """Central-difference gradient agreement <= 1e-4 relative on every loss
    kernel and on scalarized outputs of the attention, modulation, query
    decoding, and language-model forward passes."""
    t0 = time.monotonic()
    rng = make_rng(77, "accept")
    worst = 0.0

    # loss kernels
    logits = Tensor(rng.normal(size=(5, 7)), requires_grad=True)
    targets = np.array([1, -1, 3, 0, 6])
    worst = max(worst, grad_check(lambda ps: text_loss(ps[0], targets),
                                  [logits.copy()]))
    mlog = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    gt = (rng.uniform(size=(4, 4)) > 0.5).astype(float)
    worst = max(worst, grad_check(lambda ps: focal_loss(ps[0], gt),
                                  [mlog.copy()]))
    worst = max(worst, grad_check(lambda ps: dice_loss(ps[0].sigmoid(), gt),
                                  [mlog.copy()]))
    worst = max(worst, grad_check(
        lambda ps: mask_loss(ps[0], gt, LossWeights()), [mlog.copy()]))
    scores = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    worst = max(worst, grad_check(
        lambda ps: cls_loss(ps[0], np.array([0, 2, 4])), [scores.copy()]))
    scfg = SegConfig(c=4, c_llm=6, n_queries=2, n_classes=3)
    proj = init_projector_params(5, scfg)
    t_ov = Tensor(rng.normal(size=(3, 4)))
    t_p = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    pv_w = proj["projector.pv.w1"]
    worst = max(worst, grad_check(
        lambda ps: reg_loss(t_ov, ps[0],
                            {**proj, "projector.pv.w1": ps[1]}),
        [t_p.copy(), pv_w.copy(requires_grad=True)]))

    # scalarized module outputs
    d = 4
    cea = init_cea_params(3, VCPConfig(d_f=d))
    pre = "cea.s2.l1"
    fi = Tensor(rng.normal(size=(2, 2, d)), requires_grad=True)
    fj = Tensor(rng.normal(size=(2, 2, d)), requires_grad=True)
    e = Tensor(rng.normal(size=(2, 2, d)), requires_grad=True)
    pw = {k: rng.normal(size=(2, 2, d)) for k in ("a", "b", "c")}

    def f_cea(ps):
        out = cea_layer(ps[0], ps[1], ps[2], cea, pre)
        return sum((o * Tensor(w)).sum() for o, w in zip(out, pw.values()))

    worst = max(worst, grad_check(f_cea, [fi, fj, e]))

    vcfg = VCPConfig(d_f=d)
    scfg = SegConfig(c=d, c_llm=6, n_queries=2, n_classes=3)
    params = {**init_encoder_params(1, vcfg), **init_cea_params(1, vcfg),
              **init_fusion_params(1, d, scfg),
              **init_branch_params(1, scfg, FROZEN_PREFIX, trainable=False),
              **init_branch_params(1, scfg, TRAIN_PREFIX, trainable=True),
              **init_projector_params(1, scfg)}
    imgs = [Tensor(rng.uniform(0, 1, size=(16, 16, 3))) for _ in range(2)]
    vout = vcp_forward(imgs, params, vcfg)
    fused = fuse_multiscale(vout, params, scfg, (16, 16))
    stage1 = [vout.enhanced.stage(p, 1) for p in range(1, 3)]
    qname = f"{TRAIN_PREFIX}.queries"
    mod_w = rng.normal(size=fused.f.shape)

    def f_cpe(ps):
        p = {**params, qname: ps[0]}
        prior = change_prior(ps[0], stage1, p, TRAIN_PREFIX, fused)
        return (cpe_modulate(prior, ps[0], fused) * Tensor(mod_w)).sum()

    worst = max(worst, grad_check(f_cpe, [params[qname].copy(requires_grad=True)]))

    dec_w = {}

    def f_dec(ps):
        p = {**params, qname: ps[0], f"{TRAIN_PREFIX}.dec1.wq": ps[1]}
        q, _ = decode_queries(ps[0], fused, p, TRAIN_PREFIX, scfg, None)
        if "w" not in dec_w:
            dec_w["w"] = rng.normal(size=q.shape)
        return (q * Tensor(dec_w["w"])).sum()

    worst = max(worst, grad_check(f_dec, [
        params[qname].copy(requires_grad=True),
        params[f"{TRAIN_PREFIX}.dec1.wq"].copy(requires_grad=True)]))

    lcfg = LMConfig(vocab_size=12, c_llm=8, blocks=2, max_len=64)
    lp = init_lm_params(9, lcfg)
    vis = TokenRun("visual", embedding=Tensor(rng.normal(size=(4, 8))),
                   phases=np.array([1, 1, 2, 2]))
    seq = [vis, text_run([1, 4, 2])]
    lm_w = {}

    def f_lm(ps):
        p = {**lp, "lm.b1.attn.wq": ps[0], "lm.b1.mlp.w1": ps[1],
             "lm.lnf.g": ps[2]}
        _, logits = lm_forward(seq, p, lcfg)
        if "w" not in lm_w:
            lm_w["w"] = rng.normal(size=logits.shape)
        return (logits * Tensor(lm_w["w"])).sum()

    worst = max(worst, grad_check(f_lm, [
        lp["lm.b1.attn.wq"].copy(requires_grad=True),
        lp["lm.b1.mlp.w1"].copy(requires_grad=True),
        lp["lm.lnf.g"].copy(requires_grad=True)]))

    elapsed = time.monotonic() - t0
    report(3, "gradient checks <= 1e-4 on losses and module outputs",
           worst <= 1e-4 and elapsed <= 300.0,
           f"worst {worst:.2e}, {elapsed:.0f}s")


# -- 4: phase-local attention exactness ---------------------------------------

def _brute_force_mask(kinds, phases, use_lca=True):
    n = len(kinds)
    mask = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if j > i:
                mask[i, j] = NEG_INF
            elif use_lca and kinds[i] == "visual" and kinds[j] == "visual" \
                    and phases[i] != phases[j]:
                mask[i, j] = NEG_INF
    return mask


def _random_sequence(rng, c=8):
    n = int(rng.integers(1, 65))
    k = int(rng.integers(2, 4))
    kinds, phases, seq = [], [], []
    for _ in range(n):
        kind = ["text", "visual", "change", "prompt"][int(rng.integers(0, 4))]
        p = 0
        if kind == "visual":
            p = int(rng.integers(1, k + 1))
            seq.append(TokenRun("visual",
                                embedding=Tensor(rng.normal(size=(1, c))),
                                phases=np.array([p])))
        elif kind == "text":
            seq.append(text_run([0]))
        else:
            seq.append(TokenRun(kind, embedding=Tensor(np.zeros((1, c)))))
        kinds.append(kind)
        phases.append(p)
    return seq, kinds, phases


def test_04_phase_local_attention_exact():
    rng = make_rng(4, "lca")
    mask_ok = True
    for _ in range(1000):
        seq, kinds, phases = _random_sequence(rng)
        got = build_lca_mask(seq)
        want = _brute_force_mask(kinds, phases)
        if not np.array_equal(got, want):
            mask_ok = False
            break

    cfg = LMConfig(vocab_size=12, c_llm=8, blocks=2, max_len=64)
    params = init_lm_params(4, cfg)
    zero_ok = True
    for _ in range(20):
        seq, kinds, phases = _random_sequence(rng)
        atts = []
        lm_forward(seq, params, cfg, collect_attention=atts)
        for att in atts:
            for i, (ki, pi) in enumerate(zip(kinds, phases)):
                for j, (kj, pj) in enumerate(zip(kinds, phases)):
                    if j <= i and ki == kj == "visual" and pi != pj:
                        if att[i, j] != 0.0:
                            zero_ok = False
    report(4, "phase-local mask matches brute force on 1000 sequences and "
              "cross-phase attention mass is exactly zero", mask_ok and zero_ok)


# -- 5: identity invariants ---------------------------------------------------

def test_05_identity_invariants():
    rng = make_rng(5, "ident")

    im = Tensor(rng.uniform(0, 1, size=(8, 8, 3)))
    zero_diff = bool((diff_features(im, im.copy()).data == 0.0).all())

    d = 3
    fi = Tensor(rng.normal(size=(2, 2, d)))
    fj = Tensor(rng.normal(size=(2, 2, d)))
    e = Tensor(rng.normal(size=(2, 2, d)))
    w = {f"p.{n}": Tensor(rng.normal(size=(d, d)))
         for n in ("wq1", "wq2", "wk1", "wk2")}
    w["p.wv1"] = Tensor(np.zeros((d, d)))
    w["p.wv2"] = Tensor(np.zeros((d, d)))
    w["p.wein"] = Tensor(rng.normal(size=(d, 1)))
    w["p.weout"] = Tensor(rng.normal(size=(1, d)))
    fi2, fj2, _ = cea_layer(fi, fj, e, w, "p")
    cea_identity = np.array_equal(fi2.data, fi.data) and \
        np.array_equal(fj2.data, fj.data)

    vcfg = VCPConfig(d_f=4)
    scfg = SegConfig(c=4, c_llm=6, n_queries=2, n_classes=3)
    params = {**init_encoder_params(2, vcfg), **init_cea_params(2, vcfg),
              **init_fusion_params(2, 4, scfg),
              **init_branch_params(2, scfg, TRAIN_PREFIX, trainable=True)}
    imgs = [Tensor(rng.uniform(0, 1, size=(16, 16, 3))) for _ in range(2)]
    vout = vcp_forward(imgs, params, vcfg)
    fused = fuse_multiscale(vout, params, scfg, (16, 16))
    stage1 = [vout.enhanced.stage(p, 1) for p in range(1, 3)]
    zq = Tensor(np.zeros((scfg.n_queries, scfg.c)))
    prior = change_prior(zq, stage1, params, TRAIN_PREFIX, fused)
    cpe_identity = np.array_equal(cpe_modulate(prior, zq, fused).data,
                                  fused.f.data)

    lcfg = LMConfig(vocab_size=10, c_llm=8, blocks=2, max_len=32)
    lp = init_lm_params(6, lcfg)
    adapters = init_lora_adapters(6, lcfg, rank=2)
    seq = [text_run([1, 2, 3])]
    _, base = lm_forward(seq, lp, lcfg)
    _, adapted = lm_forward(seq, lp, lcfg, lora=adapters)
    lora_identity = np.array_equal(base.data, adapted.data)

    report(5, "identity invariants (zero diff, zero-value attention, "
              "zero-query modulation, zero-B adapters)",
           zero_diff and cea_identity and cpe_identity and lora_identity)


# -- 6: metric oracle equivalence ---------------------------------------------

def _pixel_set_oracle(pred, gt, n_classes):
    """Independent recomputation of every score from raw pixel lists."""
    pred, gt = list(pred), list(gt)
    n = len(gt)
    oa = sum(p == g for p, g in zip(pred, gt)) / n

    def iou(sel_p, sel_g):
        inter = sum(a and b for a, b in zip(sel_p, sel_g))
        union = sum(a or b for a, b in zip(sel_p, sel_g))
        return inter / union if union else 0.0

    ch_p = [p != 0 for p in pred]
    ch_g = [g != 0 for g in gt]
    iou_c = iou(ch_p, ch_g)
    miou = (iou_c + iou([not x for x in ch_p], [not x for x in ch_g])) / 2

    keep = [(p, g) for p, g in zip(pred, gt) if not (p == 0 and g == 0)]
    if keep:
        m = len(keep)
        po = sum(p == g for p, g in keep) / m
        cp = Counter(p for p, _ in keep)
        cg = Counter(g for _, g in keep)
        pe = sum(cp[c] * cg[c] for c in range(n_classes)) / (m * m)
        kappa = (po - pe) / (1 - pe) if pe < 1.0 else 0.0
    else:
        kappa = 0.0
    sek = math.exp(iou_c - 1.0) * kappa

    correct = sum(p == g and g != 0 for p, g in zip(pred, gt))
    prec = correct / sum(ch_p) if sum(ch_p) else 0.0
    rec = correct / sum(ch_g) if sum(ch_g) else 0.0
    f_scd = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    per_class = [iou([p == c for p in pred], [g == c for g in gt])
                 for c in range(n_classes)]
    return {"oa": oa, "miou": miou, "sek": sek, "f_scd": f_scd,
            "per_class_iou": per_class}


def test_06_metric_oracle_equivalence():
    rng = make_rng(6, "metrics")
    ok = True
    worst = 0.0
    cases = []
    for _ in range(998):
        nc = int(rng.integers(2, 8))
        conf = rng.integers(0, 20, size=(nc, nc))
        if conf.sum() == 0:
            conf[0, 0] = 1
        cases.append(conf)
    all_unchanged = np.zeros((4, 4), dtype=np.int64)
    all_unchanged[0, 0] = 13
    empty_change = np.zeros((3, 3), dtype=np.int64)
    empty_change[0, 0] = 5
    empty_change[0, 1] = 2          # predicts change that never happened
    cases += [all_unchanged, empty_change]

    for conf in cases:
        nc = conf.shape[0]
        pred, gt = [], []
        for g in range(nc):
            for p in range(nc):
                pred += [p] * int(conf[g, p])
                gt += [g] * int(conf[g, p])
        got = scd_scores(conf)
        want = _pixel_set_oracle(pred, gt, nc)
        rebuilt = scd_confusion(np.array(pred), np.array(gt), nc)
        if not np.array_equal(rebuilt, np.asarray(conf)):
            ok = False
        for key in ("oa", "miou", "sek", "f_scd"):
            if math.isnan(got[key]):
                ok = False
            worst = max(worst, abs(got[key] - want[key]))
        worst = max(worst, max(abs(a - b) for a, b in
                               zip(got["per_class_iou"],
                                   want["per_class_iou"])))
    report(6, "metrics match the pixel-set oracle on 1000 confusions",
           ok and worst <= 1e-9, f"worst |diff| {worst:.2e}")


# -- 7: dataset integrity -----------------------------------------------------

def test_07_dataset_integrity(workspace, tmp_path):
    ds = workspace["ds"]
    clean = dg.verify_alignment(ds)
    aligned = clean["ok"] and clean["n_samples"] > 0

    partition = True
    with open(os.path.join(ds, "manifest.json")) as fh:
        man = json.load(fh)
    k = man["config"]["scene"]["k"]
    for entry in man["scenes"]:
        scene = dg.load_scene(ds, entry["id"], k)
        for a, b in [(0, 1)] + ([(1, 2)] if k == 3 else []):
            recs, unchanged = dg.extract_transitions(scene.grids[a],
                                                     scene.grids[b])
            share = sum(r.area_proportion for r in recs) \
                + (unchanged.sum() / unchanged.size)
            if abs(share - 1.0) > 1e-9:
                partition = False

    # fault injection: a deleted mask and a corrupted quantification number
    # must each be reported as exactly one new violation of the right kind
    bad = str(tmp_path / "bad")
    dg.generate_dataset(bad, dg.DatasetConfig(
        n_scenes=1, seed=3, scene=dg.SceneConfig(size=32, k=2)))
    mdir = os.path.join(bad, "masks", "s0000")
    os.remove(os.path.join(mdir, sorted(os.listdir(mdir))[0]))
    rep = dg.verify_alignment(bad)
    mask_caught = (not rep["ok"]) and \
        sum("missing mask" in v["violation"] for v in rep["violations"]) == 1

    tam = str(tmp_path / "tamper")
    dg.generate_dataset(tam, dg.DatasetConfig(
        n_scenes=1, seed=5, scene=dg.SceneConfig(size=32, k=2)))
    qa_path = os.path.join(tam, "qa.jsonl")
    lines = open(qa_path).read().splitlines()
    edited, hit = [], False
    for line in lines:
        d = json.loads(line)
        if not hit and d["task"] == "CQS" and "%" in d["answer"]:
            toks = d["answer"].split()
            toks[toks.index("%") - 1] = "99.99"
            d["answer"] = " ".join(toks)
            hit = True
        edited.append(json.dumps(d, sort_keys=True))
    with open(qa_path, "w") as fh:
        fh.write("\n".join(edited) + "\n")
    rep = dg.verify_alignment(tam)
    num_caught = hit and (not rep["ok"]) and \
        sum("not recomputable" in v["violation"]
            for v in rep["violations"]) == 1

    report(7, "alignment verification, transition partition, and fault "
              "injection detection", aligned and partition and mask_caught
           and num_caught)


# -- 8: determinism -----------------------------------------------------------

def test_08_rerun_determinism(tmp_path):
    trees = []
    for name in ("g1", "g2"):
        out = str(tmp_path / name)
        assert main(["gen", "--out", out, "--scenes", "4", "--seed", "5",
                     "--size", "32"]) == 0
        trees.append(read_tree(out))
    gen_same = trees[0] == trees[1]

    runs = []
    for name in ("t1", "t2"):
        out = str(tmp_path / name)
        assert main(["train", "--data", str(tmp_path / "g1"), "--out", out,
                     "--seed", "3", "--stage1-steps", "3",
                     "--stage2-steps", "3"]) == 0
        runs.append({
            "log": open(os.path.join(out, "train_log.jsonl"), "rb").read(),
            "ckpt": read_tree(os.path.join(out, "checkpoint"))})
    train_same = runs[0] == runs[1]

    reports = []
    for name in ("e1", "e2"):
        out = str(tmp_path / name)
        assert main(["eval", "--checkpoint",
                     os.path.join(str(tmp_path / "t1"), "checkpoint"),
                     "--data", str(tmp_path / "g1"), "--out", out]) == 0
        reports.append(open(os.path.join(out, "report.json"), "rb").read())
    eval_same = reports[0] == reports[1]

    report(8, "gen/train/eval reruns byte-identical",
           gen_same and train_same and eval_same)


# -- 9: freezing contracts ----------------------------------------------------

def test_09_freezing_contracts(workspace, tmp_path, monkeypatch):
    model = Model.load(workspace["ckpt"])
    fresh_lm = init_lm_params(model.cfg.seed, model.lm_cfg)
    lm_frozen = all(np.array_equal(model.params[n].data, t.data)
                    for n, t in fresh_lm.items())
    twin = Model(model.cfg, model.voc)
    branch_frozen = all(
        np.array_equal(model.params[n].data, twin.params[n].data)
        for n in model.params
        if n.startswith(("changeseg.frozen.", "encoder.")))

    # a breached plan that leaves frozen parameters in the autodiff graph
    # must be detected (their gradients accumulate) and abort nonzero
    from changesense.trainer import StagePlan

    def leaky_apply(self, params):
        train, frozen = self.split(params)
        for name in train + frozen:
            params[name].requires_grad = True
        return train, frozen

    monkeypatch.setattr(StagePlan, "apply", leaky_apply)
    code = main(["train", "--data", workspace["ds"],
                 "--out", str(tmp_path / "viol"), "--seed", "2",
                 "--stage1-steps", "2", "--stage2-steps", "2"])
    monkeypatch.undo()

    report(9, "frozen parameters bitwise unchanged; violation aborts nonzero",
           lm_frozen and branch_frozen and code != 0,
           f"violation exit code {code}")


# -- 10: component overhead ---------------------------------------------------

def test_10_component_overhead(workspace, tmp_path):
    out = str(tmp_path / "inf")
    imgs = [os.path.join(workspace["ds"], "scenes", "s0000", f"t{i}.png")
            for i in (1, 2)]
    assert main(["infer", "--checkpoint", workspace["ckpt"],
                 "--images", *imgs,
                 "--question", "which pixels changed between t1 and t2 ?",
                 "--out", out]) == 0
    with open(os.path.join(out, "inference.json")) as fh:
        t = json.load(fh)["timings"]
    share = (t["cea"] + t["changeseg_train"]) / t["total"]
    report(10, "difference attention + trainable decoding branch < 25% of "
               "inference wall-clock", share < 0.25, f"share {share:.1%}")
