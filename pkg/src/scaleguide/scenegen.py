"""Synthetic supermarket shelf scenes.

Geometry is 2.5D: products are rectangles in the plane of the shelf front
with an integer depth rank (0 is the row nearest the camera).  World units
are slot widths; pixel coordinates have y pointing down.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import IoFailure
from .geometry import intersect, rect_area, rect_to_box, union_area

log = logging.getLogger(__name__)

MU_GRID = (0.9, 0.8, 0.7, 0.6, 0.5)
NU_GRID = (1.0, 1 / 1.5, 1 / 2, 1 / 2.5, 1 / 3)
GROUP_SIZE_RANGE = (2, 8)
# fraction of images assigned to the training split (3307 of 5000)
TRAIN_FRACTION = 3307 / 5000
CATEGORY = {"id": 1, "name": "product", "supercategory": "product"}


@dataclass(frozen=True)
class ProductModel:
    id: str
    width: float
    height: float
    depth_rank: int = 0

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"product {self.id!r} needs positive size")


@dataclass(frozen=True)
class SceneConfig:
    proximity: float = 0.5
    mu: float = 0.9
    nu: float = 1.0
    shelf_count: int = 5
    slots_per_shelf: int = 12
    rng_seed: int = 0
    max_rejection_attempts: int = 100
    depth_levels: int = 2
    placement_mode: str = "slots"
    slot_width: float = 1.0
    shelf_height: float = 1.8
    viewport: tuple = (640, 480)
    fill_range: tuple = (0.75, 1.0)
    min_in_view: float = 0.85

    def __post_init__(self):
        if not 0.0 <= self.proximity <= 1.0:
            raise ValueError(f"proximity must lie in [0, 1], got {self.proximity}")
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError(f"mu must lie in [0, 1], got {self.mu}")
        if not self.nu > 0:
            raise ValueError(f"nu must be positive, got {self.nu}")
        if self.shelf_count < 1 or self.slots_per_shelf < 1 or self.depth_levels < 1:
            raise ValueError("shelf_count, slots_per_shelf and depth_levels must be positive")
        if not 0.0 <= self.min_in_view <= 1.0:
            raise ValueError(f"min_in_view must lie in [0, 1], got {self.min_in_view}")
        if self.max_rejection_attempts < 1:
            raise ValueError("max_rejection_attempts must be positive")
        if self.placement_mode not in ("slots", "rejection"):
            raise ValueError(f"unknown placement mode {self.placement_mode!r}")
        object.__setattr__(self, "viewport", tuple(self.viewport))
        object.__setattr__(self, "fill_range", tuple(self.fill_range))

    @property
    def shelf_width(self) -> float:
        return self.slots_per_shelf * self.slot_width

    @property
    def pixels_per_unit(self) -> float:
        # nu = 1 frames exactly one shelf width
        return self.viewport[0] / (self.shelf_width * self.nu)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["viewport"] = list(self.viewport)
        d["fill_range"] = list(self.fill_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**d)


@dataclass(frozen=True)
class Placement:
    product: ProductModel
    x: float
    y: float
    depth_rank: int
    shelf: int = 0
    slot: int | None = None
    jitter: float = 0.0

    @property
    def rect(self):
        return (self.x, self.y, self.x + self.product.width, self.y + self.product.height)

    def to_dict(self) -> dict:
        return {"product": asdict(self.product), "x": self.x, "y": self.y,
                "depth_rank": self.depth_rank, "shelf": self.shelf, "slot": self.slot,
                "jitter": self.jitter}

    @classmethod
    def from_dict(cls, d: dict) -> "Placement":
        return cls(ProductModel(**d["product"]), d["x"], d["y"], d["depth_rank"],
                   d.get("shelf", 0), d.get("slot"), d.get("jitter", 0.0))


@dataclass(frozen=True)
class Annotation:
    bbox: tuple
    area: float
    object_id: str
    image_id: str
    visible_fraction: float = 1.0
    full_bbox: tuple | None = None

    def __post_init__(self):
        if self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise ValueError(f"annotation {self.object_id} has a degenerate box {self.bbox}")

    @property
    def size(self) -> float:
        return max(self.bbox[2], self.bbox[3])


@dataclass
class Scene:
    viewport: tuple
    placements: list = field(default_factory=list)
    annotations: list = field(default_factory=list)
    occluded_out: list = field(default_factory=list)
    image_id: str = "0"
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "viewport": list(self.viewport),
            "placements": [p.to_dict() for p in self.placements],
            "annotations": [_annotation_dict(a) for a in self.annotations],
            "occluded_out": [_annotation_dict(a) for a in self.occluded_out],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(
            viewport=tuple(d["viewport"]),
            placements=[Placement.from_dict(p) for p in d.get("placements", [])],
            annotations=[_annotation_from(a) for a in d.get("annotations", [])],
            occluded_out=[_annotation_from(a) for a in d.get("occluded_out", [])],
            image_id=str(d.get("image_id", "0")),
            meta=d.get("meta", {}),
        )


def _annotation_dict(a: Annotation) -> dict:
    return {"bbox": list(a.bbox), "area": a.area, "object_id": a.object_id,
            "image_id": a.image_id, "visible_fraction": a.visible_fraction,
            "full_bbox": list(a.full_bbox) if a.full_bbox is not None else None}


def _annotation_from(d: dict) -> Annotation:
    fb = d.get("full_bbox")
    return Annotation(tuple(d["bbox"]), d["area"], str(d["object_id"]), str(d["image_id"]),
                      d.get("visible_fraction", 1.0), tuple(fb) if fb is not None else None)


@dataclass
class ShelfArrangement:
    placements: list
    skipped: int = 0


def make_catalog(n: int, rng: np.random.Generator) -> list:
    """Synthetic product catalog; products are somewhat taller than wide."""
    widths = rng.uniform(0.6, 0.95, size=n)
    heights = rng.uniform(1.0, 1.4, size=n)
    return [ProductModel(f"p{i:04d}", round(float(w), 4), round(float(h), 4))
            for i, (w, h) in enumerate(zip(widths, heights))]


def _groups(products):
    """Split a product sequence into runs of consecutive identical ids."""
    groups = []
    for p in products:
        if groups and groups[-1][0].id == p.id:
            groups[-1].append(p)
        else:
            groups.append([p])
    return groups


def _free_run_lengths(free: np.ndarray) -> np.ndarray:
    """Length of the run of free slots containing each slot (0 if occupied)."""
    n = len(free)
    out = np.zeros(n, dtype=int)
    i = 0
    while i < n:
        if not free[i]:
            i += 1
            continue
        j = i
        while j < n and free[j]:
            j += 1
        out[i:j] = j - i
        i = j
    return out


def arrange_shelf(products, cfg: SceneConfig, rng: np.random.Generator,
                  depth_rank: int = 0) -> ShelfArrangement:
    """Fill one shelf level with products, group by group.

    Each group (a run of identical product ids) gets an anchor slot; every
    later member goes next to the group's cluster with probability
    ``cfg.proximity`` and to a uniformly random free slot otherwise.
    Products that find no free slot are skipped and counted.
    """
    if cfg.placement_mode == "rejection":
        return _arrange_rejection(products, cfg, rng, depth_rank)
    n_slots = cfg.slots_per_shelf
    free = np.ones(n_slots, dtype=bool)
    out, skipped = [], 0
    for group in _groups(products):
        if not free.any():
            skipped += len(group)
            continue
        runs = _free_run_lengths(free)
        roomy = np.flatnonzero(runs >= len(group))
        candidates = roomy if len(roomy) else np.flatnonzero(free)
        if rng.random() < cfg.proximity:
            # anchoring at the end of a free run keeps the free space in one piece
            edges = [s for s in candidates
                     if s == 0 or not free[s - 1] or s == n_slots - 1 or not free[s + 1]]
            candidates = np.array(edges)
        anchor = int(rng.choice(candidates))
        free[anchor] = False
        lo = hi = anchor
        out.append((group[0], anchor))
        for prod in group[1:]:
            if not free.any():
                skipped += 1
                continue
            adjacent = [s for s in (lo - 1, hi + 1) if 0 <= s < n_slots and free[s]]
            if adjacent and rng.random() < cfg.proximity:
                slot = int(adjacent[int(rng.integers(len(adjacent)))])
            else:
                slot = int(rng.choice(np.flatnonzero(free)))
            free[slot] = False
            if slot == lo - 1:
                lo = slot
            elif slot == hi + 1:
                hi = slot
            out.append((prod, slot))
    placements = []
    for prod, slot in out:
        x = slot * cfg.slot_width + (cfg.slot_width - prod.width) / 2
        placements.append(Placement(prod, x, 0.0, depth_rank, slot=slot))
    return ShelfArrangement(placements, skipped)


def _arrange_rejection(products, cfg: SceneConfig, rng, depth_rank: int) -> ShelfArrangement:
    # continuous positions; proposals that overlap an earlier product are rejected
    width = cfg.shelf_width
    placed, skipped = [], 0

    def overlaps(x0, w):
        return any(x0 < q.x + q.product.width and q.x < x0 + w for q in placed)

    for group in _groups(products):
        cluster = None
        for prod in group:
            w = prod.width
            if w > width:
                skipped += 1
                continue
            for _ in range(cfg.max_rejection_attempts):
                if cluster is not None and rng.random() < cfg.proximity:
                    lo, hi = cluster
                    x0 = hi if rng.random() < 0.5 else lo - w
                else:
                    x0 = float(rng.uniform(0.0, width - w))
                if 0.0 <= x0 <= width - w and not overlaps(x0, w):
                    break
            else:
                skipped += 1
                continue
            placed.append(Placement(prod, float(x0), 0.0, depth_rank))
            cluster = (x0, x0 + w) if cluster is None else (min(cluster[0], x0), max(cluster[1], x0 + w))
    return ShelfArrangement(placed, skipped)


def occlusion_ratio(target: Placement, occluders) -> float:
    """Fraction of ``target`` covered by the union of strictly nearer occluders."""
    area = rect_area(target.rect)
    clipped = []
    for occ in occluders:
        if occ is target or occ.depth_rank >= target.depth_rank:
            continue
        inter = intersect(target.rect, occ.rect)
        if inter is not None:
            clipped.append(inter)
    if not clipped:
        return 0.0
    return min(1.0, union_area(clipped) / area)


def _shelf_products(catalog, n_target: int, rng) -> list:
    out = []
    while len(out) < n_target:
        model = catalog[int(rng.integers(len(catalog)))]
        size = int(rng.integers(GROUP_SIZE_RANGE[0], GROUP_SIZE_RANGE[1] + 1))
        out.extend([model] * size)
    return out


def project(rect, cfg: SceneConfig, stack_height: float):
    """World rectangle to pixel rectangle for a camera centered on the shelf unit."""
    k = cfg.pixels_per_unit
    cx, cy = cfg.shelf_width / 2, stack_height / 2
    vw, vh = cfg.viewport
    x0, y0, x1, y1 = rect
    return ((x0 - cx) * k + vw / 2, (y0 - cy) * k + vh / 2,
            (x1 - cx) * k + vw / 2, (y1 - cy) * k + vh / 2)


def render_scene(cfg: SceneConfig, catalog, rng: np.random.Generator,
                 image_id: str = "0") -> Scene:
    """Arrange all shelves, project to pixels and filter annotations by visibility."""
    if not catalog:
        raise ValueError("catalog is empty")
    placements, skipped = [], 0
    for shelf in range(cfg.shelf_count):
        base = (shelf + 1) * cfg.shelf_height
        for depth in range(cfg.depth_levels):
            fill = rng.uniform(*cfg.fill_range)
            n_target = max(1, int(round(fill * cfg.slots_per_shelf)))
            products = _shelf_products(catalog, n_target, rng)
            arrangement = arrange_shelf(products, cfg, rng, depth_rank=depth)
            skipped += arrangement.skipped
            offset = 0.0 if depth == 0 else float(rng.uniform(-0.5, 0.5)) * cfg.slot_width
            for p in arrangement.placements:
                placements.append(replace(
                    p, x=p.x + offset, y=base - p.product.height, shelf=shelf,
                    jitter=round(float(rng.uniform(0.0, 1.0)), 6)))

    stack_height = cfg.shelf_count * cfg.shelf_height
    view = (0.0, 0.0, float(cfg.viewport[0]), float(cfg.viewport[1]))
    kept, dropped = [], []
    for idx, p in enumerate(placements):
        visible = 1.0 - occlusion_ratio(p, placements)
        full = project(p.rect, cfg, stack_height)
        clipped = intersect(full, view)
        if clipped is None:
            continue
        box = tuple(round(v, 6) for v in rect_to_box(clipped))
        if box[2] <= 0 or box[3] <= 0:
            continue
        ann = Annotation(box, round(box[2] * box[3], 6), f"{image_id}:{idx}", str(image_id),
                         round(visible, 9), tuple(round(v, 6) for v in rect_to_box(full)))
        keep = visible >= cfg.mu
        # boxes cut by the image border are treated as not visible
        keep = keep and rect_area(clipped) / rect_area(full) >= cfg.min_in_view
        (kept if keep else dropped).append(ann)
    meta = {"mu": cfg.mu, "nu": cfg.nu, "proximity": cfg.proximity, "skipped": skipped}
    return Scene(tuple(cfg.viewport), placements, kept, dropped, str(image_id), meta)


def default_grid(proximity: float = 0.5, mu_grid=MU_GRID, nu_grid=NU_GRID, **kw) -> list:
    return [SceneConfig(proximity=proximity, mu=mu, nu=nu, **kw)
            for mu in mu_grid for nu in nu_grid]


def derive_seed(master_seed: int, *keys: int) -> int:
    """Deterministic 63-bit child seed of ``master_seed`` for the given keys."""
    ss = np.random.SeedSequence([int(master_seed) & (2**64 - 1), *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & (2**64 - 1), int(index)])


def _render_job(args):
    cfg, catalog, index, image_id = args
    return render_scene(cfg, catalog, scene_rng(cfg.rng_seed, index), image_id=str(image_id))


def generate_scenes(grid, images_per_config: int, seed: int = 0, catalog=None,
                    catalog_size: int = 60, jobs: int = 1):
    """Render every configuration of ``grid``; returns (configs, catalog, scenes).

    Config seeds are derived from ``seed`` and the config index, scene RNG
    streams from (config seed, scene index), so output does not depend on
    ``jobs``.
    """
    if not grid:
        raise ValueError("configuration grid is empty")
    if catalog is None:
        catalog = make_catalog(catalog_size, np.random.default_rng(derive_seed(seed, 0xCA7)))
    configs = [replace(c, rng_seed=derive_seed(seed, ci)) for ci, c in enumerate(grid)]
    tasks, image_id = [], 1
    for cfg in configs:
        for i in range(images_per_config):
            tasks.append((cfg, catalog, i, image_id))
            image_id += 1
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            scenes = list(pool.map(_render_job, tasks, chunksize=8))
    else:
        scenes = [_render_job(t) for t in tasks]
    for ci, cfg in enumerate(configs):
        for s in scenes[ci * images_per_config:(ci + 1) * images_per_config]:
            s.meta["config_index"] = ci
    return configs, catalog, scenes


def split_ids(image_ids, seed: int, train_fraction: float = TRAIN_FRACTION):
    ids = list(image_ids)
    rng = np.random.default_rng(derive_seed(seed, 0x5917))
    order = rng.permutation(len(ids))
    n_train = int(round(len(ids) * train_fraction))
    train = sorted(ids[i] for i in order[:n_train])
    val = sorted(ids[i] for i in order[n_train:])
    return train, val


def to_coco(scenes, splits=None) -> dict:
    split_of = {}
    for name, ids in (splits or {}).items():
        for i in ids:
            split_of[int(i)] = name
    images, annotations, occluded = [], [], []
    ann_id = 1
    for s in scenes:
        iid = int(s.image_id)
        img = {"id": iid, "width": s.viewport[0], "height": s.viewport[1],
               "file_name": f"scene_{iid:05d}.png", "scene": s.meta,
               "placements": [p.to_dict() for p in s.placements]}
        if iid in split_of:
            img["split"] = split_of[iid]
        images.append(img)
        for a in s.annotations:
            annotations.append({
                "id": ann_id, "image_id": iid, "category_id": CATEGORY["id"],
                "bbox": list(a.bbox), "area": a.area, "iscrowd": 0,
                "object_id": a.object_id, "visible_fraction": a.visible_fraction,
                "full_bbox": list(a.full_bbox) if a.full_bbox is not None else None})
            ann_id += 1
        for a in s.occluded_out:
            d = _annotation_dict(a)
            d["image_id"] = iid
            occluded.append(d)
    return {"info": {"description": "synthetic shelf scenes"}, "images": images,
            "annotations": annotations, "categories": [CATEGORY], "occluded_out": occluded}


def scenes_from_coco(coco: dict) -> list:
    """Rebuild :class:`Scene` objects from a dataset written by :func:`to_coco`."""
    by_image = {}
    for a in coco.get("annotations", []):
        by_image.setdefault(int(a["image_id"]), []).append(a)
    dropped = {}
    for a in coco.get("occluded_out", []):
        dropped.setdefault(int(a["image_id"]), []).append(a)
    scenes = []
    for img in coco["images"]:
        iid = int(img["id"])
        anns = []
        for a in by_image.get(iid, []):
            fb = a.get("full_bbox")
            anns.append(Annotation(tuple(a["bbox"]), a["area"], str(a.get("object_id", a["id"])),
                                   str(iid), a.get("visible_fraction", 1.0),
                                   tuple(fb) if fb is not None else None))
        meta = dict(img.get("scene", {}))
        if "split" in img:
            meta["split"] = img["split"]
        scenes.append(Scene((img["width"], img["height"]),
                            [Placement.from_dict(p) for p in img.get("placements", [])],
                            anns, [_annotation_from(a) for a in dropped.get(iid, [])],
                            str(iid), meta))
    return scenes


def write_json_atomic(path, obj, indent=None):
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "w") as fh:
            json.dump(obj, fh, indent=indent, sort_keys=False)
            fh.write("\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"could not write {path}: {exc}") from exc


def generate_dataset(grid, images_per_config: int, out_path, seed: int = 0,
                     catalog_size: int = 60, jobs: int = 1) -> dict:
    """Render the grid and write ``dataset.json`` (COCO style) plus ``manifest.json``."""
    configs, catalog, scenes = generate_scenes(grid, images_per_config, seed,
                                               catalog_size=catalog_size, jobs=jobs)
    train, val = split_ids([int(s.image_id) for s in scenes], seed)
    coco = to_coco(scenes, {"train": train, "val": val})
    try:
        os.makedirs(out_path, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out_path}: {exc}") from exc
    write_json_atomic(os.path.join(out_path, "dataset.json"), coco)
    manifest = {
        "master_seed": int(seed),
        "images_per_config": int(images_per_config),
        "n_images": len(scenes),
        "n_annotations": len(coco["annotations"]),
        "n_occluded_out": len(coco["occluded_out"]),
        "shelf_full_skipped": int(sum(s.meta.get("skipped", 0) for s in scenes)),
        "catalog_size": len(catalog),
        "configs": [dict(index=i, images=images_per_config, **c.to_dict())
                    for i, c in enumerate(configs)],
        "splits": {"train": train, "val": val},
        "files": ["dataset.json"],
    }
    write_json_atomic(os.path.join(out_path, "manifest.json"), manifest, indent=1)
    log.info("wrote %d images, %d annotations to %s", len(scenes),
             manifest["n_annotations"], out_path)
    return manifest


def load_dataset(path) -> list:
    if os.path.isdir(path):
        path = os.path.join(path, "dataset.json")
    try:
        with open(path) as fh:
            return scenes_from_coco(json.load(fh))
    except OSError as exc:
        raise IoFailure(f"could not read {path}: {exc}") from exc
