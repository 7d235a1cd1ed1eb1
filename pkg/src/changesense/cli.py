"""Command-line driver: gen / train / infer / eval / inspect.

Every command resolves its configuration from defaults, an optional JSON
config file, and explicit flags (highest precedence), then writes a
`run_manifest.json` next to its outputs echoing the resolved config, the
seed, a version string, and sha256 hashes of every artifact. Outputs carry
no timestamps, so a rerun with the same manifest is byte-identical.

Exit codes: 0 success, 1 contract/verification failure, 2 I/O or usage
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np
from PIL import Image

from . import __version__
from . import datagen as dg
from .changeseg import PromptGeometry
from .errors import ChangeSenseError
from .metrics import choice_accuracy, cider, scd_confusion, scd_scores
from .model import (
    Model, ModelConfig, build_vocab, images_as_tensors, prepare_sample,
)
from .tensor import Tensor, TensorError
from .trainer import LossLog, StagePlan, run_stage

VERSION = f"changesense-{__version__}"


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: str, command: str, config: dict, seed: int):
    hashes = {}
    for root, _, files in os.walk(out_dir):
        for f in sorted(files):
            if f == "run_manifest.json":
                continue
            path = os.path.join(root, f)
            hashes[os.path.relpath(path, out_dir)] = sha256_file(path)
    manifest = {"command": command, "config": config, "seed": seed,
                "version": VERSION, "artifacts": hashes}
    with open(os.path.join(out_dir, "run_manifest.json"), "w",
              encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def resolve(defaults: dict, config: dict, overrides: dict) -> dict:
    out = dict(defaults)
    for src in (config, overrides):
        for k, v in src.items():
            if v is not None:
                out[k] = v
    return out


def model_config_from(run: dict) -> ModelConfig:
    keys = ModelConfig().to_dict().keys()
    return ModelConfig(**{k: run[k] for k in keys if k in run})


# -- gen ----------------------------------------------------------------------

def cmd_gen(args) -> int:
    defaults = {"scenes": 8, "k": 2, "size": 64, "change_budget": 0.15,
                "noise": 0.05, "illum": 0.0, "blob_scale": 1.0,
                "test_fraction": 0.25, "seed": 0}
    run = resolve(defaults, load_config_file(args.config),
                  {"scenes": args.scenes, "k": args.k, "seed": args.seed,
                   "size": args.size})
    cfg = dg.DatasetConfig(
        n_scenes=run["scenes"], seed=run["seed"],
        test_fraction=run["test_fraction"],
        scene=dg.SceneConfig(size=run["size"], k=run["k"],
                             change_budget=run["change_budget"],
                             noise=run["noise"], illum=run["illum"],
                             blob_scale=run["blob_scale"]))
    dg.generate_dataset(args.out, cfg)
    report = dg.verify_alignment(args.out)
    with open(os.path.join(args.out, "verification.json"), "w",
              encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
        fh.write("\n")
    write_manifest(args.out, "gen", run, run["seed"])
    if not report["ok"]:
        print(f"verification failed: {len(report['violations'])} violations",
              file=sys.stderr)
        return 1
    print(f"wrote {report['n_samples']} samples to {args.out}")
    return 0


# -- train --------------------------------------------------------------------

def load_split(data_dir: str, split: str, k: int):
    samples = [s for s in dg.load_qa(data_dir) if s.split == split]
    samples.sort(key=lambda s: s.id)
    scenes = {}
    for s in samples:
        if s.scene_id not in scenes:
            scenes[s.scene_id] = dg.load_scene(data_dir, s.scene_id, k)
    return samples, scenes


def ablation_overrides(args) -> dict:
    out = {}
    if getattr(args, "no_cea", False):
        out["use_cea"] = False
    if getattr(args, "no_cpe", False):
        out["use_cpe"] = False
    if getattr(args, "no_lca", False):
        out["use_lca"] = False
    if getattr(args, "symmetric_queries", False):
        out["symmetric_queries"] = True
    return out


def cmd_train(args) -> int:
    defaults = {"stage1_steps": 60, "stage2_steps": 120,
                "text_warmup_steps": 0, "lr1": 1e-3, "lr2": 3e-4, "seed": 0}
    defaults.update(ModelConfig().to_dict())
    run = resolve(defaults, load_config_file(args.config),
                  {"seed": args.seed, "k": args.k,
                   "stage1_steps": args.stage1_steps,
                   "stage2_steps": args.stage2_steps, **ablation_overrides(args)})
    data_manifest = dg.load_manifest(args.data)
    run["k"] = data_manifest["config"]["scene"]["k"]
    run["image_size"] = data_manifest["config"]["scene"]["size"]
    mcfg = model_config_from(run)
    mcfg.seed = run["seed"]

    voc = build_vocab()
    model = Model(mcfg, voc)
    samples, scenes = load_split(args.data, "train", mcfg.k)
    if not samples:
        print("dataset has no training split", file=sys.stderr)
        return 1
    prepared = [prepare_sample(args.data, scenes[s.scene_id], s, voc)
                for s in samples]
    tensors = {sid: images_as_tensors(sc) for sid, sc in scenes.items()}

    if run["text_warmup_steps"]:
        seqs = [p.question_ids + p.answer_ids for p in prepared]
        model.text_warmup(seqs, run["text_warmup_steps"], run["lr1"])

    os.makedirs(args.out, exist_ok=True)
    log = LossLog(os.path.join(args.out, "train_log.jsonl"))
    view = model.trainable_view()

    def stage_closure(stage_losses):
        def factory(step):
            s = prepared[step % len(prepared)]
            imgs = tensors[s.qa.scene_id]
            return lambda: stage_losses(imgs, s)
        return factory

    plan1 = model.stage_plan("pretrain", run["stage1_steps"], run["lr1"],
                             seed=run["seed"])
    run_stage(stage_closure(model.stage1_losses), view, plan1, log)
    plan2 = model.stage_plan("instruction", run["stage2_steps"], run["lr2"],
                             seed=run["seed"])
    run_stage(stage_closure(model.stage2_losses), view, plan2, log)
    log.close()

    model.save(os.path.join(args.out, "checkpoint"))
    write_manifest(args.out, "train", run, run["seed"])
    print(f"trained {run['stage1_steps']}+{run['stage2_steps']} steps "
          f"-> {args.out}")
    return 0


# -- infer --------------------------------------------------------------------

def parse_prompt(text: str | None) -> PromptGeometry | None:
    if not text:
        return None
    kind, _, rest = text.partition(":")
    coords = tuple(int(x) for x in rest.split(","))
    return PromptGeometry(kind, coords)


def cmd_infer(args) -> int:
    model = Model.load(args.checkpoint)
    if len(args.images) != model.cfg.k:
        print(f"checkpoint expects {model.cfg.k} images, got "
              f"{len(args.images)}", file=sys.stderr)
        return 1
    images = []
    for path in args.images:
        arr = np.asarray(Image.open(path).convert("RGB")).astype(np.float64)
        images.append(Tensor(arr / 255.0))
    prompt = parse_prompt(args.prompt)
    result = model.infer(images, args.question, prompt)

    os.makedirs(args.out, exist_ok=True)
    mask_files = []
    for i, entry in enumerate(result["masks"]):
        name = f"mask_{i}_t{entry['pair'][0]}t{entry['pair'][1]}.png"
        Image.fromarray((entry["mask"] * 255).astype(np.uint8), mode="L") \
            .save(os.path.join(args.out, name), format="PNG")
        mask_files.append({"pair": list(entry["pair"]), "file": name})
    record = {"answer": result["answer"], "masks": mask_files,
              "truncated": result["truncated"],
              "timings": result["timings"], "question": args.question}
    with open(os.path.join(args.out, "inference.json"), "w",
              encoding="utf-8") as fh:
        json.dump(record, fh, sort_keys=True, indent=1)
        fh.write("\n")
    write_manifest(args.out, "infer",
                   {"question": args.question, "prompt": args.prompt,
                    "images": [os.path.basename(p) for p in args.images]},
                   model.cfg.seed)
    print(result["answer"])
    return 0


# -- eval ---------------------------------------------------------------------

def gt_label_grid(scene, pair) -> np.ndarray:
    """Per-pixel to-class ground truth: 0 where unchanged."""
    return np.where(scene.grids[pair[0] - 1] != scene.grids[pair[1] - 1],
                    scene.grids[pair[1] - 1], 0).astype(np.int64)


def evaluate(model: Model, data_dir: str, split: str = "test",
             tasks: str = "scd,qa") -> dict:
    samples, scenes = load_split(data_dir, split, model.cfg.k)
    if not samples:
        raise ChangeSenseError(f"dataset has no {split!r} split")
    voc = model.voc
    wanted = set(tasks.split(","))

    report = {"split": split, "n_samples": len(samples)}
    if "scd" in wanted:
        conf = np.zeros((model.cfg.n_classes, model.cfg.n_classes))
        for sid in sorted(scenes):
            scene = scenes[sid]
            imgs = images_as_tensors(scene)
            for pair in [(i, i + 1) for i in range(1, scene.k)]:
                pred = model.predict_label_grid(imgs, pair)
                conf += scd_confusion(pred, gt_label_grid(scene, pair),
                                      model.cfg.n_classes)
        report["scd"] = scd_scores(conf)
        report["confusion"] = conf.astype(int).tolist()
    if "qa" not in wanted:
        return report

    choice_records = []
    open_pred, open_ref = [], []
    img_cache = {sid: images_as_tensors(sc) for sid, sc in scenes.items()}
    for qa in samples:
        prep = prepare_sample(data_dir, scenes[qa.scene_id], qa, voc)
        out = model.infer(img_cache[qa.scene_id], qa.question, prep.prompt)
        if qa.format in ("single-choice", "multi-choice"):
            letters = [o.split(" : ")[0] for o in qa.options]
            choice_records.append((qa.format, out["answer"], qa.answer,
                                   letters))
        else:
            open_pred.append(out["answer"])
            open_ref.append([qa.answer.replace("[SEG]", "")
                             .replace("<T1T2>", "").replace("<T2T3>", "")
                             .strip()])
    if choice_records:
        report["choice"] = choice_accuracy(choice_records)
    if open_pred:
        report["cider"] = cider(open_pred, open_ref)
    return report


def cmd_eval(args) -> int:
    model = Model.load(args.checkpoint)
    for key, value in ablation_overrides(args).items():
        setattr(model.cfg, key, value)
        if key == "use_lca":
            model.lm_cfg.use_lca = value
        elif key == "use_cpe":
            model.seg_cfg.use_cpe = value
        elif key == "use_cea":
            model.vcp_cfg.use_cea = value
        else:
            model.vcp_cfg.symmetric_queries = value
    report = evaluate(model, args.data, split=args.split, tasks=args.tasks)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.json"), "w",
              encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
        fh.write("\n")
    write_manifest(args.out, "eval",
                   {"split": args.split, "config": model.cfg.to_dict()},
                   model.cfg.seed)
    summary = {}
    if "scd" in report:
        summary = {"miou": report["scd"]["miou"], "oa": report["scd"]["oa"]}
    print(json.dumps(summary, sort_keys=True))
    return 0


# -- inspect ------------------------------------------------------------------

def cmd_inspect(args) -> int:
    target = args.target
    if os.path.isfile(target):
        with open(target, encoding="utf-8") as fh:
            print(fh.read().rstrip())
        return 0
    for name in ("run_manifest.json", "manifest.json", "checkpoint.json",
                 "report.json"):
        path = os.path.join(target, name)
        if os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
            print(json.dumps(data, sort_keys=True, indent=1))
            return 0
    print(f"nothing to inspect at {target}", file=sys.stderr)
    return 2


# -- argument parsing ---------------------------------------------------------

def add_ablation_flags(p):
    p.add_argument("--no-cea", action="store_true", dest="no_cea")
    p.add_argument("--no-cpe", action="store_true", dest="no_cpe")
    p.add_argument("--no-lca", action="store_true", dest="no_lca")
    p.add_argument("--symmetric-queries", action="store_true",
                   dest="symmetric_queries")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="changesense",
                                description="multi-temporal change perception "
                                            "toolkit")
    p.add_argument("--version", action="version", version=VERSION)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--scenes", type=int)
    g.add_argument("--k", type=int, choices=(2, 3))
    g.add_argument("--size", type=int)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="two-stage training")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--k", type=int)
    t.add_argument("--stage1-steps", type=int, dest="stage1_steps")
    t.add_argument("--stage2-steps", type=int, dest="stage2_steps")
    add_ablation_flags(t)
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="answer a question about 2-3 images")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--images", nargs="+", required=True)
    i.add_argument("--question", required=True)
    i.add_argument("--prompt", help="point:r,c or box:r1,c1,r2,c2")
    i.add_argument("--out", required=True)
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--tasks", default="scd,qa",
                   help="comma list from {scd, qa}")
    add_ablation_flags(e)
    e.set_defaults(fn=cmd_eval)

    n = sub.add_parser("inspect", help="print a manifest, report, or config")
    n.add_argument("target")
    n.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ChangeSenseError, TensorError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
