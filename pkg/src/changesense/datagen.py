"""Synthetic multi-temporal scenes and the change-QA curation pipeline.

Scenes are Voronoi-filled land-cover grids whose later phases mutate seeded
elliptical regions until a target changed-area budget is met. From the label
grids the pipeline extracts ordered class transitions, 4-connected change
instances with bounding boxes and sample points, and higher-level trends, then
templates four QA task families (identification, quantification, trend,
spatial) in holistic and prompt-restricted scopes. Every emitted sample keeps
a hard mapping to stored pixel masks, and `verify_alignment` recomputes the
numeric claims from the masks.

All text is deterministic. An optional HTTP rewriting client can restyle the
templated sentences, but every number, option, and mask reference always comes
from the rule engine.
"""

from __future__ import annotations

import json
import os
from collections import deque
from dataclasses import dataclass, field, asdict

import numpy as np
from PIL import Image

from .changeseg import PromptGeometry
from .errors import GenerationError, InputError
from .tensor import derive_seed, make_rng

CLASS_NAMES = ["background", "low vegetation", "ground", "tree", "water",
               "building", "playground"]
PALETTE = np.array([
    [30, 30, 30],      # background
    [110, 190, 90],    # low vegetation
    [160, 130, 90],    # ground
    [20, 110, 40],     # tree
    [40, 90, 200],     # water
    [200, 60, 60],     # building
    [230, 180, 60],    # playground
], dtype=np.float64)

TREND_VEG = "vegetation succession"
TREND_ART = "conversion to artificial surfaces"
TREND_ECO = "ecological restoration"
TREND_NAMES = [TREND_VEG, TREND_ART, TREND_ECO]

SECTOR_NAMES = [["north-west", "north", "north-east"],
                ["west", "center", "east"],
                ["south-west", "south", "south-east"]]

TASKS = ("CIC", "CQS", "CTI", "CSA", "CMD")
OPTION_LETTERS = "abcdef"


def default_trend_table(n_classes: int = 7) -> dict:
    """Total map over ordered class pairs, grouped by the target class."""
    table = {}
    for a in range(n_classes):
        for b in range(n_classes):
            if a == b:
                continue
            if b in (1, 3):
                table[(a, b)] = TREND_VEG
            elif b in (5, 6):
                table[(a, b)] = TREND_ART
            else:
                table[(a, b)] = TREND_ECO
    return table


# -- scenes -------------------------------------------------------------------

@dataclass
class SceneConfig:
    size: int = 64
    k: int = 2
    n_classes: int = 7
    change_budget: float = 0.15
    noise: float = 0.05
    illum: float = 0.0      # per-phase global color shift amplitude
    blob_scale: float = 1.0  # change-event size multiplier
    voronoi_sites: int = 12


@dataclass
class TemporalScene:
    id: str
    k: int
    grids: list       # K arrays (size, size) of class ids
    images: list      # K arrays (size, size, 3) in [0, 1]
    seed: int


def _voronoi_grid(rng, cfg: SceneConfig) -> np.ndarray:
    size = cfg.size
    sites = rng.integers(0, size, size=(cfg.voronoi_sites, 2))
    classes = rng.integers(1, cfg.n_classes, size=cfg.voronoi_sites)
    rr, cc = np.mgrid[0:size, 0:size]
    d2 = (rr[..., None] - sites[:, 0]) ** 2 + (cc[..., None] - sites[:, 1]) ** 2
    return classes[np.argmin(d2, axis=2)].astype(np.uint8)


def _mutate(rng, prev: np.ndarray, cfg: SceneConfig) -> np.ndarray:
    """Paint elliptical patches of new classes until the changed fraction
    reaches the budget."""
    size = cfg.size
    target = cfg.change_budget * size * size
    grid = prev.copy()
    rr, cc = np.mgrid[0:size, 0:size]
    for _ in range(1000):
        changed = (grid != prev).sum()
        if changed >= target:
            return grid
        r0, c0 = rng.integers(0, size, size=2)
        hi = max(3, int(size // 10 * cfg.blob_scale))
        a, b = rng.integers(2, hi, size=2)
        cur = int(grid[r0, c0])
        choices = [c for c in range(1, cfg.n_classes) if c != cur]
        new_class = choices[int(rng.integers(0, len(choices)))]
        blob = ((rr - r0) / a) ** 2 + ((cc - c0) / b) ** 2 <= 1.0
        grid[blob] = new_class
    raise GenerationError(
        f"could not reach change budget {cfg.change_budget} on {size}x{size}")


def render(grid: np.ndarray, rng, cfg: SceneConfig) -> np.ndarray:
    """Palette colors plus pixel noise and (optionally) a global per-channel
    color shift, mimicking acquisition-condition differences between phases."""
    img = PALETTE[grid] / 255.0
    if cfg.illum > 0.0:
        img = img + rng.uniform(-cfg.illum, cfg.illum, size=3)
    img = img + rng.normal(0.0, cfg.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_scene(seed: int, cfg: SceneConfig, scene_id: str = "") -> TemporalScene:
    if cfg.size > 128:
        raise InputError(f"scene size {cfg.size} exceeds 128")
    if not (0.0 < cfg.change_budget <= 0.5):
        raise InputError(f"change budget {cfg.change_budget} outside (0, 0.5]")
    grids = [_voronoi_grid(make_rng(seed, "phase", 1), cfg)]
    for k in range(2, cfg.k + 1):
        grids.append(_mutate(make_rng(seed, "phase", k), grids[-1], cfg))
    images = [render(g, make_rng(seed, "render", i), cfg)
              for i, g in enumerate(grids, start=1)]
    return TemporalScene(id=scene_id or f"scene{seed:08x}", k=cfg.k,
                         grids=grids, images=images, seed=seed)


# -- transition extraction ----------------------------------------------------

@dataclass
class Instance:
    id: int
    pixels: np.ndarray   # (n, 2) row/col coordinates, raster order
    mbr: tuple           # (r1, c1, r2, c2) inclusive
    point: tuple         # (r, c) inside the instance


@dataclass
class TransitionRecord:
    from_class: int
    to_class: int
    pixel_count: int
    area_proportion: float
    mask: np.ndarray
    instances: list = field(default_factory=list)


def connected_components(mask: np.ndarray) -> list:
    """4-connected components, labeled in raster order of first pixel."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    for r0 in range(h):
        for c0 in range(w):
            if not mask[r0, c0] or seen[r0, c0]:
                continue
            q = deque([(r0, c0)])
            seen[r0, c0] = True
            pix = []
            while q:
                r, c = q.popleft()
                pix.append((r, c))
                for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    nr, nc = r + dr, c + dc
                    if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] \
                            and not seen[nr, nc]:
                        seen[nr, nc] = True
                        q.append((nr, nc))
            comps.append(np.array(sorted(pix)))
    return comps


def instance_geometry(pixels: np.ndarray, rng) -> tuple:
    if len(pixels) == 0:
        raise InputError("empty instance has no geometry")
    r1, c1 = pixels.min(axis=0)
    r2, c2 = pixels.max(axis=0)
    pt = tuple(int(v) for v in pixels[int(rng.integers(0, len(pixels)))])
    return (int(r1), int(c1), int(r2), int(c2)), pt


def extract_transitions(g_i: np.ndarray, g_j: np.ndarray, seed: int = 0):
    """Ordered (from, to) transition records plus the unchanged mask."""
    if g_i.shape != g_j.shape:
        raise InputError(f"grid shapes differ: {g_i.shape} vs {g_j.shape}")
    total = g_i.size
    records = []
    changed = g_i != g_j
    pairs = sorted({(int(a), int(b))
                    for a, b in zip(g_i[changed].ravel(), g_j[changed].ravel())})
    for a, b in pairs:
        mask = (g_i == a) & (g_j == b)
        count = int(mask.sum())
        rec = TransitionRecord(from_class=a, to_class=b, pixel_count=count,
                               area_proportion=count / total, mask=mask)
        rng = make_rng(seed, "inst", a, b)
        for idx, pix in enumerate(connected_components(mask)):
            mbr, pt = instance_geometry(pix, rng)
            rec.instances.append(Instance(id=idx, pixels=pix, mbr=mbr, point=pt))
        records.append(rec)
    return records, ~changed


def abstract_trend(records: list, table: dict) -> list:
    """Aggregate changed pixels per trend; returns (trend, pixels, proportion)
    sorted by proportion descending then name."""
    totals: dict = {}
    for rec in records:
        key = (rec.from_class, rec.to_class)
        if key not in table:
            raise InputError(f"trend table does not cover pair {key}")
        totals[table[key]] = totals.get(table[key], 0) + rec.pixel_count
    grand = sum(totals.values())
    out = [(name, n, n / grand if grand else 0.0) for name, n in totals.items()]
    return sorted(out, key=lambda x: (-x[2], x[0]))


def sector_name(r: float, c: float, size: int) -> str:
    return SECTOR_NAMES[min(2, int(3 * r / size))][min(2, int(3 * c / size))]


# -- QA generation ------------------------------------------------------------

@dataclass
class QASample:
    id: str
    scene_id: str
    stage_pair: tuple
    task: str
    scope: str            # H | P
    format: str           # single-choice | multi-choice | open
    question: str
    answer: str
    options: list = field(default_factory=list)
    prompt: dict | None = None      # {"kind", "coords"}
    mask_refs: list = field(default_factory=list)
    trend_labels: list = field(default_factory=list)
    split: str = "train"

    def to_json(self) -> str:
        d = asdict(self)
        d["stage_pair"] = list(self.stage_pair)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "QASample":
        d = json.loads(line)
        d["stage_pair"] = tuple(d["stage_pair"])
        return cls(**d)


def mask_ref(a: int, b: int, pair: tuple) -> str:
    return f"{a}_{b}_{pair[0]}{pair[1]}"


def union_mask_ref(pair: tuple) -> str:
    """Reference for the union of every transition mask of a stage pair."""
    return f"all_{pair[0]}{pair[1]}"


def _class_pair_text(a: int, b: int) -> str:
    return f"{CLASS_NAMES[a]} to {CLASS_NAMES[b]}"


def _seg_tail(pair: tuple, n: int = 1) -> str:
    marker = "<T1T2>" if pair == (1, 2) else "<T2T3>"
    return " ".join([f"{marker} [SEG]"] * n)


def _fmt_pct(p: float) -> str:
    return f"{round(p * 100, 2):.2f}"


def _distractor_pairs(observed: set, rng, n: int, n_classes: int) -> list:
    pool = [(a, b) for a in range(1, n_classes) for b in range(1, n_classes)
            if a != b and (a, b) not in observed]
    idx = rng.permutation(len(pool))[:n]
    return [pool[i] for i in sorted(idx)]


def _region_records(g_i, g_j, region: np.ndarray, seed: int):
    """Transitions restricted to a boolean region (prompt scope)."""
    gi = g_i.copy()
    gj = g_j.copy()
    gj[~region] = gi[~region]  # outside the region nothing counts as change
    recs, _ = extract_transitions(gi, gj, seed)
    return recs


def _prompt_region(prompt: PromptGeometry, records: list, size: int) -> np.ndarray:
    region = np.zeros((size, size), dtype=bool)
    if prompt.kind == "box":
        r1, c1, r2, c2 = prompt.coords
        region[r1:r2, c1:c2] = True
    else:
        r, c = prompt.coords
        for rec in records:
            for inst in rec.instances:
                if rec.mask[r, c] and any((r, c) == tuple(p) for p in inst.pixels):
                    region[tuple(inst.pixels.T)] = True
                    return region
        region[r, c] = True
    return region


def gen_qa(scene: TemporalScene, pair: tuple, scope: str, task: str,
           seed: int, table: dict | None = None) -> list:
    """Deterministic template QA for one (scene, stage pair, scope, task)."""
    table = table or default_trend_table()
    g_i, g_j = scene.grids[pair[0] - 1], scene.grids[pair[1] - 1]
    size = g_i.shape[0]
    records, _ = extract_transitions(g_i, g_j, seed=derive_seed(scene.seed, pair))
    rng = make_rng(seed, "qa", scene.id, pair, scope, task)
    samples: list = []

    def sid(n):
        return f"{scene.id}-{pair[0]}{pair[1]}-{scope}-{task}-{n}"

    stage_txt = f"t{pair[0]} and t{pair[1]}"

    if scope == "H":
        if not records:
            return []
        dominant = max(records, key=lambda r: r.pixel_count)
        dom_ref = mask_ref(dominant.from_class, dominant.to_class, pair)
        if task == "CIC":
            observed = {(r.from_class, r.to_class) for r in records}
            # single choice on the dominant transition
            distract = _distractor_pairs(observed, rng, 3, len(CLASS_NAMES))
            opts = distract + [(dominant.from_class, dominant.to_class)]
            order = rng.permutation(len(opts))
            opts = [opts[i] for i in order]
            letters = list(OPTION_LETTERS[:len(opts)])
            correct = letters[opts.index((dominant.from_class, dominant.to_class))]
            samples.append(QASample(
                id=sid(0), scene_id=scene.id, stage_pair=pair, task=task,
                scope=scope, format="single-choice",
                question=(f"which land cover transition is dominant between "
                          f"{stage_txt} ? " +
                          " ".join(f"{l} : {_class_pair_text(a, b)}"
                                   for l, (a, b) in zip(letters, opts))),
                answer=f"{correct} {_seg_tail(pair)}",
                options=[f"{l} : {_class_pair_text(a, b)}"
                         for l, (a, b) in zip(letters, opts)],
                mask_refs=[dom_ref]))
            # multi choice over all observed transitions
            corr = sorted(observed)[:3]
            distract = _distractor_pairs(observed, rng, max(1, 5 - len(corr)),
                                         len(CLASS_NAMES))
            opts = corr + distract
            order = rng.permutation(len(opts))
            opts = [opts[i] for i in order]
            letters = list(OPTION_LETTERS[:len(opts)])
            correct_set = sorted(letters[opts.index(p)] for p in corr)
            samples.append(QASample(
                id=sid(1), scene_id=scene.id, stage_pair=pair, task=task,
                scope=scope, format="multi-choice",
                question=(f"which land cover transitions occurred between "
                          f"{stage_txt} ? " +
                          " ".join(f"{l} : {_class_pair_text(a, b)}"
                                   for l, (a, b) in zip(letters, opts))),
                answer=f"{' '.join(correct_set)} {_seg_tail(pair, n=len(corr))}",
                options=[f"{l} : {_class_pair_text(a, b)}"
                         for l, (a, b) in zip(letters, opts)],
                mask_refs=[mask_ref(a, b, pair) for a, b in corr]))
        elif task == "CQS":
            samples.append(QASample(
                id=sid(0), scene_id=scene.id, stage_pair=pair, task=task,
                scope=scope, format="open",
                question=(f"how large is the dominant change between "
                          f"{stage_txt} ?"),
                answer=(f"the {_class_pair_text(dominant.from_class, dominant.to_class)} "
                        f"change has {len(dominant.instances)} instances covering "
                        f"{_fmt_pct(dominant.area_proportion)} % of the image "
                        f"{_seg_tail(pair)}"),
                mask_refs=[dom_ref]))
        elif task == "CTI":
            trends = abstract_trend(records, table)
            listing = " and ".join(f"{name} ( {_fmt_pct(prop)} % )"
                                   for name, _, prop in trends[:2])
            samples.append(QASample(
                id=sid(0), scene_id=scene.id, stage_pair=pair, task=task,
                scope=scope, format="open",
                question=(f"what evolution trends dominate between "
                          f"{stage_txt} ?"),
                answer=f"the dominant trends are {listing}",
                trend_labels=[name for name, _, _ in trends]))
        elif task == "CSA":
            sectors = []
            for inst in dominant.instances:
                r = (inst.mbr[0] + inst.mbr[2]) / 2
                c = (inst.mbr[1] + inst.mbr[3]) / 2
                s = sector_name(r, c, size)
                if s not in sectors:
                    sectors.append(s)
            samples.append(QASample(
                id=sid(0), scene_id=scene.id, stage_pair=pair, task=task,
                scope=scope, format="open",
                question=(f"where are the dominant changes located between "
                          f"{stage_txt} ?"),
                answer=(f"the {_class_pair_text(dominant.from_class, dominant.to_class)} "
                        f"changes lie in the {' and '.join(sectors[:3])} "
                        f"sector {_seg_tail(pair)}"),
                mask_refs=[dom_ref]))
        elif task == "CMD":
            samples.append(QASample(
                id=sid(0), scene_id=scene.id, stage_pair=pair, task=task,
                scope=scope, format="open",
                question=f"which pixels changed between {stage_txt} ?",
                answer=f"all changed pixels are shown {_seg_tail(pair)}",
                mask_refs=[union_mask_ref(pair)]))
        return samples

    # prompt scope: one sample per selected instance
    insts = []
    for rec in records:
        for inst in rec.instances:
            insts.append((rec, inst))
    insts.sort(key=lambda ri: -len(ri[1].pixels))
    for n, (rec, inst) in enumerate(insts[:2]):
        use_box = (n % 2 == 0)
        if use_box:
            r1, c1, r2, c2 = inst.mbr
            prompt = PromptGeometry("box", (r1, c1, r2 + 1, c2 + 1))
        else:
            prompt = PromptGeometry("point", inst.point)
        region = _prompt_region(prompt, records, size)
        rrecs = _region_records(g_i, g_j, region, derive_seed(seed, "region", n))
        prompt_d = {"kind": prompt.kind, "coords": list(prompt.coords)}
        base = dict(scene_id=scene.id, stage_pair=pair, task=task, scope=scope,
                    prompt=prompt_d)
        if not rrecs:
            samples.append(QASample(id=sid(n), format="open",
                                    question="what changed in the marked region ?",
                                    answer="no change occurred in the marked region",
                                    **base))
            continue
        dom = max(rrecs, key=lambda r: r.pixel_count)
        dref = mask_ref(dom.from_class, dom.to_class, pair)
        if task == "CIC":
            observed = {(r.from_class, r.to_class) for r in rrecs}
            distract = _distractor_pairs(observed, rng, 3, len(CLASS_NAMES))
            opts = distract + [(dom.from_class, dom.to_class)]
            order = rng.permutation(len(opts))
            opts = [opts[i] for i in order]
            letters = list(OPTION_LETTERS[:len(opts)])
            correct = letters[opts.index((dom.from_class, dom.to_class))]
            samples.append(QASample(
                id=sid(n), format="single-choice",
                question=("which transition dominates the marked region ? " +
                          " ".join(f"{l} : {_class_pair_text(a, b)}"
                                   for l, (a, b) in zip(letters, opts))),
                answer=f"{correct} {_seg_tail(pair)}",
                options=[f"{l} : {_class_pair_text(a, b)}"
                         for l, (a, b) in zip(letters, opts)],
                mask_refs=[dref], **base))
        elif task == "CQS":
            region_prop = dom.pixel_count / max(1, int(region.sum()))
            samples.append(QASample(
                id=sid(n), format="open",
                question="how much of the marked region changed ?",
                answer=(f"the {_class_pair_text(dom.from_class, dom.to_class)} change "
                        f"covers {_fmt_pct(region_prop)} % of the marked region "
                        f"{_seg_tail(pair)}"),
                mask_refs=[dref], **base))
        elif task == "CTI":
            trends = abstract_trend(rrecs, table)
            samples.append(QASample(
                id=sid(n), format="open",
                question="what trend does the marked region follow ?",
                answer=f"the marked region follows {trends[0][0]}",
                trend_labels=[trends[0][0]], **base))
        elif task == "CSA":
            r = (inst.mbr[0] + inst.mbr[2]) / 2
            c = (inst.mbr[1] + inst.mbr[3]) / 2
            samples.append(QASample(
                id=sid(n), format="open",
                question="where does the marked change lie ?",
                answer=(f"the marked change lies in the "
                        f"{sector_name(r, c, size)} sector {_seg_tail(pair)}"),
                mask_refs=[dref], **base))
        elif task == "CMD":
            samples.append(QASample(
                id=sid(n), format="open",
                question="which pixels changed in the marked region ?",
                answer=f"the changed pixels are shown {_seg_tail(pair)}",
                mask_refs=[dref], **base))
    return samples


def compose_tritemporal(scene: TemporalScene, seed: int) -> list:
    """Chained A -> B -> C events from cells changed in both adjacent stages."""
    if scene.k != 3:
        raise InputError(f"composite events need K=3, got K={scene.k}")
    rec12, _ = extract_transitions(scene.grids[0], scene.grids[1],
                                   derive_seed(scene.seed, (1, 2)))
    rec23, _ = extract_transitions(scene.grids[1], scene.grids[2],
                                   derive_seed(scene.seed, (2, 3)))
    samples = []
    n = 0
    for r12 in rec12:
        for r23 in rec23:
            if r12.to_class != r23.from_class:
                continue
            inter = r12.mask & r23.mask
            if not inter.any():
                continue
            a, b, c = r12.from_class, r12.to_class, r23.to_class
            samples.append(QASample(
                id=f"{scene.id}-composite-{n}", scene_id=scene.id,
                stage_pair=(1, 3), task="CTI", scope="H", format="open",
                question="which composite evolution event occurred across the "
                         "three phases ?",
                answer=(f"the area changed from {CLASS_NAMES[a]} to "
                        f"{CLASS_NAMES[b]} and then to {CLASS_NAMES[c]} "
                        f"{_seg_tail((1, 2))} {_seg_tail((2, 3))}"),
                mask_refs=[mask_ref(a, b, (1, 2)), mask_ref(b, c, (2, 3))]))
            n += 1
    return samples


# -- dataset I/O --------------------------------------------------------------

@dataclass
class DatasetConfig:
    n_scenes: int = 8
    scene: SceneConfig = field(default_factory=SceneConfig)
    seed: int = 0
    test_fraction: float = 0.25

    def to_dict(self):
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["scene"] = SceneConfig(**d.get("scene", {}))
        return cls(**d)


def _save_png(path, arr: np.ndarray, mode: str):
    Image.fromarray(arr, mode=mode).save(path, format="PNG")


def save_scene(scene: TemporalScene, out_dir: str):
    sdir = os.path.join(out_dir, "scenes", scene.id)
    os.makedirs(sdir, exist_ok=True)
    for i, (img, grid) in enumerate(zip(scene.images, scene.grids), start=1):
        _save_png(os.path.join(sdir, f"t{i}.png"),
                  (img * 255).round().astype(np.uint8), "RGB")
        _save_png(os.path.join(sdir, f"labels_t{i}.png"),
                  grid.astype(np.uint8), "L")


def load_scene(out_dir: str, scene_id: str, k: int, seed: int = 0) -> TemporalScene:
    sdir = os.path.join(out_dir, "scenes", scene_id)
    grids, images = [], []
    for i in range(1, k + 1):
        grids.append(np.asarray(Image.open(os.path.join(sdir, f"labels_t{i}.png"))))
        images.append(np.asarray(Image.open(
            os.path.join(sdir, f"t{i}.png"))).astype(np.float64) / 255.0)
    return TemporalScene(id=scene_id, k=k, grids=grids, images=images, seed=seed)


def save_masks(scene: TemporalScene, out_dir: str):
    mdir = os.path.join(out_dir, "masks", scene.id)
    os.makedirs(mdir, exist_ok=True)
    for pair in [(i, i + 1) for i in range(1, scene.k)]:
        recs, _ = extract_transitions(scene.grids[pair[0] - 1],
                                      scene.grids[pair[1] - 1],
                                      derive_seed(scene.seed, pair))
        for rec in recs:
            name = mask_ref(rec.from_class, rec.to_class, pair)
            _save_png(os.path.join(mdir, f"{name}.png"),
                      (rec.mask * 255).astype(np.uint8), "L")
        if recs:
            union = np.zeros_like(recs[0].mask)
            for rec in recs:
                union |= rec.mask
            _save_png(os.path.join(mdir, f"{union_mask_ref(pair)}.png"),
                      (union * 255).astype(np.uint8), "L")


def generate_dataset(out_dir: str, cfg: DatasetConfig) -> dict:
    """Write the full dataset tree; returns the manifest dict."""
    os.makedirs(out_dir, exist_ok=True)
    scene_ids = []
    qa_lines = []
    n_train = int(round(cfg.n_scenes * (1 - cfg.test_fraction)))
    for i in range(cfg.n_scenes):
        scene_seed = derive_seed(cfg.seed, "scene", i)
        scene = synth_scene(scene_seed, cfg.scene, scene_id=f"s{i:04d}")
        split = "train" if i < n_train else "test"
        save_scene(scene, out_dir)
        save_masks(scene, out_dir)
        scene_ids.append({"id": scene.id, "seed": scene_seed, "split": split})
        samples = []
        for pair in [(j, j + 1) for j in range(1, cfg.scene.k)]:
            for scope in ("H", "P"):
                for task in TASKS:
                    samples.extend(gen_qa(scene, pair, scope, task,
                                          seed=derive_seed(cfg.seed, "qa", i)))
        if cfg.scene.k == 3:
            samples.extend(compose_tritemporal(scene, derive_seed(cfg.seed, i)))
        for s in samples:
            s.split = split
            qa_lines.append(s.to_json())
    with open(os.path.join(out_dir, "qa.jsonl"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(qa_lines) + ("\n" if qa_lines else ""))
    manifest = {"config": cfg.to_dict(), "seed": cfg.seed,
                "scenes": scene_ids, "n_samples": len(qa_lines),
                "class_names": CLASS_NAMES}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return manifest


def load_qa(out_dir: str) -> list:
    with open(os.path.join(out_dir, "qa.jsonl"), encoding="utf-8") as fh:
        return [QASample.from_json(line) for line in fh if line.strip()]


def load_manifest(out_dir: str) -> dict:
    with open(os.path.join(out_dir, "manifest.json"), encoding="utf-8") as fh:
        return json.load(fh)


# -- verification -------------------------------------------------------------

def verify_alignment(out_dir: str) -> dict:
    """Recheck every sample invariant against the stored artifacts."""
    try:
        manifest = load_manifest(out_dir)
        samples = load_qa(out_dir)
    except OSError as exc:
        raise IOError(f"unreadable dataset at {out_dir}: {exc}")
    k = manifest["config"]["scene"]["k"]
    size = manifest["config"]["scene"]["size"]
    violations = []

    def flag(sample, why):
        violations.append({"sample": sample.id, "violation": why})

    for s in samples:
        for ref in s.mask_refs:
            path = os.path.join(out_dir, "masks", s.scene_id, f"{ref}.png")
            if not os.path.exists(path):
                flag(s, f"missing mask {ref}")
        if s.scope == "P":
            if s.prompt is None:
                flag(s, "prompt-scope sample without prompt")
            else:
                try:
                    PromptGeometry(s.prompt["kind"],
                                   tuple(s.prompt["coords"])).validate((size, size))
                except Exception as exc:
                    flag(s, f"invalid prompt: {exc}")
        if s.format in ("single-choice", "multi-choice"):
            letters = {o.split(" : ")[0] for o in s.options}
            answered = [tok for tok in s.answer.split()
                        if tok in set(OPTION_LETTERS)]
            if not answered or not set(answered) <= letters:
                flag(s, "choice answer not among options")
        if s.task == "CQS" and "%" in s.answer:
            ok = _recheck_cqs(out_dir, s, size)
            if not ok:
                flag(s, "quantification not recomputable from masks")
    report = {"n_samples": len(samples), "violations": violations,
              "ok": not violations}
    return report


def _recheck_cqs(out_dir: str, s: QASample, size: int) -> bool:
    """Recompute the stated percentage from the referenced mask."""
    if not s.mask_refs:
        return False
    path = os.path.join(out_dir, "masks", s.scene_id, f"{s.mask_refs[0]}.png")
    if not os.path.exists(path):
        return False
    mask = np.asarray(Image.open(path)) > 0
    toks = s.answer.split()
    try:
        pct = float(toks[toks.index("%") - 1])
    except (ValueError, IndexError):
        return False
    if s.scope == "H":
        expect = mask.sum() / mask.size * 100
    else:
        kind = s.prompt["kind"]
        if kind == "box":
            r1, c1, r2, c2 = s.prompt["coords"]
            region = np.zeros_like(mask)
            region[r1:r2, c1:c2] = True
        else:
            # point prompts restrict to the containing instance
            region = np.zeros_like(mask)
            r, c = s.prompt["coords"]
            if mask[r, c]:
                for pix in connected_components(mask):
                    if any((r, c) == tuple(p) for p in pix):
                        region[tuple(pix.T)] = True
                        break
            else:
                region[r, c] = True
        denom = max(1, int(region.sum()))
        expect = (mask & region).sum() / denom * 100
    return abs(round(expect, 2) - pct) <= 0.011


def vocab_lexicon() -> list:
    """Every word the deterministic templates can emit."""
    words = set()
    for name in CLASS_NAMES + TREND_NAMES:
        words.update(name.split())
    for row in SECTOR_NAMES:
        words.update(row)
    words.update("""
        which land cover transition transitions is are dominant dominates
        occurred between t1 t2 t3 and the to change changes has have instances
        covering of image how large much what evolution trend trends dominate
        where located lie lies in sector marked region no follows follow
        composite event across three phases area from then
        pixels changed all shown
        """.split())
    words.update(OPTION_LETTERS)
    words.update(["%", ":", "?", "(", ")"])
    return sorted(words)
