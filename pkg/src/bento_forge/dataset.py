"""Bento scene records, the procedural scene generator and annotation I/O.

A scene is built the same way the composition pipeline builds one: each
item cut-out is warped into its ground-truth box with the spatial
transformer and alpha-composited bottom to top over the background. Masks
therefore agree with the rendered image by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np
from PIL import Image

from . import captions as cap
from .boxes import LayoutBox
from .stn import bbox_to_affine, warp

CATEGORIES = ["rice", "fried_chicken", "salmon", "tamagoyaki", "croquette", "fried_shrimp"]
CATEGORY_ID = {c: i for i, c in enumerate(CATEGORIES)}

# presentation type -> categories, listed bottom-up in their usual placement
TYPE_CATEGORIES = {
    1: ("rice", "fried_chicken"),
    2: ("rice", "salmon", "tamagoyaki"),
    3: ("rice", "croquette", "fried_shrimp"),
}

# (cx, cy, w, h) means and uniform half-ranges of the ground-truth boxes
BOX_PRIORS = {
    "rice": ((0.50, 0.55, 0.80, 0.62), (0.04, 0.04, 0.04, 0.04)),
    "fried_chicken": ((0.50, 0.52, 0.42, 0.36), (0.08, 0.08, 0.05, 0.05)),
    "salmon": ((0.36, 0.52, 0.34, 0.30), (0.05, 0.06, 0.04, 0.04)),
    "tamagoyaki": ((0.64, 0.52, 0.32, 0.26), (0.05, 0.06, 0.04, 0.04)),
    "croquette": ((0.42, 0.56, 0.36, 0.34), (0.05, 0.05, 0.04, 0.04)),
    "fried_shrimp": ((0.58, 0.44, 0.42, 0.20), (0.05, 0.05, 0.04, 0.03)),
}

COLORS = {
    "rice": (0.94, 0.93, 0.87),
    "fried_chicken": (0.70, 0.42, 0.16),
    "salmon": (0.95, 0.52, 0.40),
    "tamagoyaki": (0.98, 0.84, 0.28),
    "croquette": (0.78, 0.56, 0.24),
    "fried_shrimp": (0.93, 0.62, 0.30),
}
BACKGROUND_COLOR = (0.16, 0.10, 0.08)


class AnnotationError(ValueError):
    pass


@dataclass(eq=False)
class FoodItem:
    item_id: int
    category: str
    visible_mask: np.ndarray  # bool, H x W
    amodal_mask: np.ndarray  # bool, H x W
    cutout: np.ndarray  # float RGBA, 4 x h x w, values k / 255
    bbox: LayoutBox
    z: int

    def __eq__(self, other) -> bool:
        if not isinstance(other, FoodItem):
            return NotImplemented
        return (
            self.item_id == other.item_id
            and self.category == other.category
            and self.bbox == other.bbox
            and self.z == other.z
            and np.array_equal(self.visible_mask, other.visible_mask)
            and np.array_equal(self.amodal_mask, other.amodal_mask)
            and np.array_equal(self.cutout, other.cutout)
        )


@dataclass(eq=False)
class Scene:
    scene_id: str
    canvas: tuple[int, int]
    background: np.ndarray  # float RGB, 3 x H x W
    items: list[FoodItem]
    captions: list[str]
    type_id: int
    _image: np.ndarray | None = field(default=None, repr=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and tuple(self.canvas) == tuple(other.canvas)
            and self.captions == other.captions
            and self.type_id == other.type_id
            and np.array_equal(self.background, other.background)
            and self.items == other.items
        )

    def item(self, item_id: int) -> FoodItem:
        for it in self.items:
            if it.item_id == item_id:
                return it
        raise KeyError(item_id)

    def placement_order(self) -> list[int]:
        """Item ids bottom to top according to the z annotation."""
        return [it.item_id for it in sorted(self.items, key=lambda it: it.z)]

    def transposed_targets(self) -> dict[int, np.ndarray]:
        """Each cut-out warped into its ground-truth box on the scene canvas."""
        h, w = self.canvas
        return {it.item_id: warp(it.cutout, bbox_to_affine(it.bbox), h, w).data for it in self.items}

    def image(self) -> np.ndarray:
        """Rendered RGB composite, 3 x H x W in [0, 1]."""
        if self._image is None:
            from .layout import composite_scene

            layers = self.transposed_targets()
            self._image = composite_scene(layers, self.placement_order(), self.background).data
        return self._image

    def validate(self, source: str = "<memory>") -> "Scene":
        h, w = self.canvas
        if not self.captions:
            raise AnnotationError(f"{source}: scene has no captions")
        zs = [it.z for it in self.items]
        if len(set(zs)) != len(zs):
            raise AnnotationError(f"{source}: duplicate z indices {sorted(zs)}")
        ids = [it.item_id for it in self.items]
        if len(set(ids)) != len(ids):
            raise AnnotationError(f"{source}: duplicate item ids {ids}")
        if self.type_id not in TYPE_CATEGORIES:
            raise AnnotationError(f"{source}: presentation type {self.type_id} not in 1..3")
        cats = sorted(it.category for it in self.items)
        if cats != sorted(TYPE_CATEGORIES[self.type_id]):
            raise AnnotationError(f"{source}: categories {cats} inconsistent with presentation type {self.type_id}")
        if self.background.shape != (3, h, w):
            raise AnnotationError(f"{source}: background shape {self.background.shape} != canvas {(3, h, w)}")
        for it in self.items:
            where = f"{source}: item {it.item_id}"
            if it.visible_mask.shape != (h, w) or it.amodal_mask.shape != (h, w):
                raise AnnotationError(f"{where}: mask shape differs from canvas {(h, w)}")
            if not it.amodal_mask.any():
                raise AnnotationError(f"{where}: amodal mask is empty")
            if np.any(it.visible_mask & ~it.amodal_mask):
                raise AnnotationError(f"{where}: visible mask is not a subset of the amodal mask")
            if it.cutout.ndim != 3 or it.cutout.shape[0] != 4:
                raise AnnotationError(f"{where}: cut-out must be RGBA, got shape {it.cutout.shape}")
            if it.category not in CATEGORY_ID:
                raise AnnotationError(f"{where}: unknown category {it.category!r}")
            try:
                it.bbox.validate()
            except ValueError as exc:
                raise AnnotationError(f"{where}: {exc}") from None
        return self


@dataclass
class SceneConfig:
    canvas: int = 64
    item_canvas: int = 64
    paraphrase_pool: int = 25
    paraphrases_per_scene: int = 8
    min_overlap_px: int = 6
    max_tries: int = 200


# ---------------------------------------------------------------------------
# procedural generation


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0


def _value_noise(rng: np.random.Generator, size: int, cells: int = 8) -> np.ndarray:
    coarse = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1))
    t = np.linspace(0.0, cells, size, endpoint=False) + 0.5 * cells / size
    i0 = np.floor(t).astype(int)
    f = t - i0
    i1 = np.minimum(i0 + 1, cells)
    top = coarse[i0][:, i0] * (1 - f)[None, :] + coarse[i0][:, i1] * f[None, :]
    bot = coarse[i1][:, i0] * (1 - f)[None, :] + coarse[i1][:, i1] * f[None, :]
    return top * (1 - f)[:, None] + bot * f[:, None]


def _shape_alpha(category: str, size: int, rng: np.random.Generator) -> np.ndarray:
    c = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    x, y = np.meshgrid(c, c)
    r = np.hypot(x, y)
    if category in ("rice", "croquette"):
        mask = r <= 1.0
    elif category == "fried_chicken":
        ang = np.arctan2(y, x)
        phase = rng.uniform(0, 2 * np.pi)
        mask = r <= 0.86 + 0.14 * np.cos(5 * ang + phase)
    elif category == "salmon":
        mask = (np.abs(x) ** 4 + np.abs(y) ** 4) <= 1.0
    elif category == "tamagoyaki":
        mask = (np.abs(x) ** 8 + np.abs(y) ** 8) <= 1.0
    else:  # fried_shrimp: body ellipse with a tapering tail to the right
        mask = (x / 0.8 + 0.2) ** 2 + y**2 <= 1.0
        mask |= (x > 0.5) & (np.abs(y) <= 0.9 * (1.0 - x) / 0.5)
    return mask.astype(np.float64)


def make_cutout(category: str, size: int, rng: np.random.Generator) -> np.ndarray:
    alpha = _shape_alpha(category, size, rng)
    base = np.array(COLORS[category])[:, None, None]
    noise = _value_noise(rng, size)
    rgb = base * (1.0 + 0.12 * noise[None])
    if category == "fried_shrimp":
        c = (np.arange(size) + 0.5) / size * 2.0 - 1.0
        tail = np.broadcast_to(c[None, :] > 0.55, (size, size))
        rgb = np.where(tail[None], np.array([0.85, 0.2, 0.15])[:, None, None], rgb)
    return _quantize(np.concatenate([rgb, alpha[None]], axis=0))


def make_background(size: int, rng: np.random.Generator) -> np.ndarray:
    base = np.array(BACKGROUND_COLOR)[:, None, None]
    bg = base * (1.0 + 0.25 * _value_noise(rng, size, cells=4)[None])
    rim = np.zeros((size, size), dtype=bool)
    rim[:2, :] = rim[-2:, :] = rim[:, :2] = rim[:, -2:] = True
    bg = np.where(rim[None], np.array([0.55, 0.12, 0.10])[:, None, None], bg)
    return _quantize(bg)


def _sample_box(category: str, rng: np.random.Generator) -> LayoutBox:
    mean, half = BOX_PRIORS[category]
    vals = [m + rng.uniform(-d, d) for m, d in zip(mean, half)]
    return LayoutBox(*(round(v, 6) for v in vals))


def _masks(layers: dict[int, np.ndarray], order: Sequence[int]) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
    amodal = {i: layers[i][3] > 0.5 for i in order}
    visible = {}
    covered = np.zeros_like(next(iter(amodal.values())))
    for i in reversed(order):
        visible[i] = amodal[i] & ~covered
        covered = covered | amodal[i]
    return visible, amodal


def adjacent_pairs_overlap(visible, amodal, order, min_px: int = 1) -> bool:
    for lo, hi in zip(order, order[1:]):
        overlap = amodal[lo] & amodal[hi]
        if overlap.sum() < min_px or not (overlap & visible[hi]).any():
            return False
    return True


def generate_synthetic_scene(type_id: int, seed: int, config: SceneConfig | None = None, scene_id: str | None = None) -> Scene:
    """Procedural bento scene of presentation type 1, 2 or 3."""
    if type_id not in TYPE_CATEGORIES:
        raise ValueError(f"presentation type must be 1, 2 or 3, got {type_id!r}")
    cfg = config or SceneConfig()
    rng = np.random.default_rng(seed)
    categories = TYPE_CATEGORIES[type_id]
    background = make_background(cfg.canvas, rng)
    cutouts = [make_cutout(c, cfg.item_canvas, rng) for c in categories]
    # type 2 toppings may go down in either order
    zs = list(range(len(categories)))
    if type_id == 2 and rng.random() < 0.5:
        zs = [0, 2, 1]
    order = sorted(range(len(categories)), key=lambda i: zs[i])
    for _ in range(cfg.max_tries):
        boxes = [_sample_box(c, rng) for c in categories]
        layers = {i: warp(cutouts[i], bbox_to_affine(boxes[i]), cfg.canvas, cfg.canvas).data for i in order}
        visible, amodal = _masks(layers, order)
        if adjacent_pairs_overlap(visible, amodal, order, cfg.min_overlap_px):
            break
    else:  # pragma: no cover - priors make this practically unreachable
        raise RuntimeError(f"could not place a type {type_id} scene with overlapping neighbours")
    items = [
        FoodItem(i, categories[i], visible[i], amodal[i], cutouts[i], boxes[i], zs[i]) for i in range(len(categories))
    ]
    base = cap.BASE_CAPTIONS[type_id]
    pool = cap.expand_captions(base, cfg.paraphrase_pool, int(rng.integers(2**31)))
    chosen = cap.select_captions(pool, cfg.paraphrases_per_scene, int(rng.integers(2**31)))
    scene = Scene(
        scene_id=scene_id or f"t{type_id}_s{seed}",
        canvas=(cfg.canvas, cfg.canvas),
        background=background,
        items=items,
        captions=[base] + chosen,
        type_id=type_id,
    )
    return scene.validate()


def scene_seed(root_seed: int, index: int) -> int:
    """Per-scene seed derived from the run seed and the scene index."""
    return int(np.random.SeedSequence([root_seed, index]).generate_state(1)[0])


def generate_dataset(count: int, types: Sequence[int], seed: int, config: SceneConfig | None = None) -> list[Scene]:
    """``count`` scenes cycling through ``types`` (exact per-type counts)."""
    out = []
    for k in range(count):
        t = types[k % len(types)]
        out.append(generate_synthetic_scene(t, scene_seed(seed, k), config, scene_id=f"scene_{k:05d}"))
    return out


# ---------------------------------------------------------------------------
# annotation files

ANNOTATION_SCHEMA = {
    "type": "object",
    "required": ["scene_id", "canvas", "type", "captions", "items"],
    "properties": {
        "scene_id": {"type": "string"},
        "canvas": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2},
        "type": {"enum": [1, 2, 3]},
        "captions": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "background": {"type": "string"},
        "image": {"type": "string"},
        "items": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "category", "visible_mask", "amodal_mask", "cutout", "bbox", "z"],
                "properties": {
                    "id": {"type": "integer"},
                    "category": {"type": "string"},
                    "visible_mask": {"type": "string"},
                    "amodal_mask": {"type": "string"},
                    "cutout": {"type": "string"},
                    "bbox": {
                        "type": "array",
                        "items": {"type": "number", "minimum": 0, "maximum": 1},
                        "minItems": 4,
                        "maxItems": 4,
                    },
                    "z": {"type": "integer"},
                },
            },
        },
    },
}


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path: Path, chw: np.ndarray) -> None:
    """Write a float image (C x H x W in [0, 1], or a bool mask) as PNG."""
    path.parent.mkdir(parents=True, exist_ok=True)
    if chw.dtype == bool:
        Image.fromarray(chw.astype(np.uint8) * 255, mode="L").save(path, format="PNG")
        return
    arr = _to_u8(chw)
    mode = {1: "L", 3: "RGB", 4: "RGBA"}[arr.shape[0]]
    data = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    Image.fromarray(data, mode=mode).save(path, format="PNG")


def _load_png(path: Path, mode: str) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != mode:
            raise AnnotationError(f"{path}: expected {mode} PNG, got {im.mode}")
        return np.asarray(im)


def write_annotation(scene: Scene, directory: str | Path, write_image: bool = True) -> Path:
    """Write ``<scene_id>.json`` plus its PNG assets under ``directory``."""
    root = Path(directory)
    assets = Path(scene.scene_id)
    items = []
    for it in scene.items:
        stem = assets / f"item{it.item_id}"
        paths = {k: f"{stem}_{k}.png" for k in ("visible", "amodal", "cutout")}
        save_png(root / paths["visible"], it.visible_mask)
        save_png(root / paths["amodal"], it.amodal_mask)
        save_png(root / paths["cutout"], it.cutout)
        items.append(
            {
                "id": it.item_id,
                "category": it.category,
                "visible_mask": paths["visible"],
                "amodal_mask": paths["amodal"],
                "cutout": paths["cutout"],
                "bbox": list(it.bbox.as_tuple()),
                "z": it.z,
            }
        )
    doc = {
        "scene_id": scene.scene_id,
        "canvas": list(scene.canvas),
        "type": scene.type_id,
        "captions": list(scene.captions),
        "background": f"{assets / 'background.png'}",
        "items": items,
    }
    save_png(root / doc["background"], scene.background)
    if write_image:
        doc["image"] = f"{assets / 'image.png'}"
        save_png(root / doc["image"], scene.image())
    path = root / f"{scene.scene_id}.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _mask(path: Path, where: str) -> np.ndarray:
    arr = _load_png(path, "L")
    if not np.all((arr == 0) | (arr == 255)):
        raise AnnotationError(f"{where}: mask {path.name} is not binary 0/255")
    return arr == 255


def load_annotation(path: str | Path) -> Scene:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise AnnotationError(f"{path}: cannot read annotation: {exc}") from None
    try:
        jsonschema.validate(doc, ANNOTATION_SCHEMA)
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise AnnotationError(f"{path}: schema violation at {loc}: {exc.message}") from None
    root = path.parent
    h, w = doc["canvas"]
    items = []
    for entry in doc["items"]:
        where = f"{path}: item {entry['id']}"
        try:
            cutout = _load_png(root / entry["cutout"], "RGBA").transpose(2, 0, 1) / 255.0
            vis = _mask(root / entry["visible_mask"], where)
            amo = _mask(root / entry["amodal_mask"], where)
        except FileNotFoundError as exc:
            raise AnnotationError(f"{where}: missing asset {exc.filename}") from None
        items.append(FoodItem(entry["id"], entry["category"], vis, amo, cutout, LayoutBox(*entry["bbox"]), entry["z"]))
    if "background" in doc:
        background = _load_png(root / doc["background"], "RGB").transpose(2, 0, 1) / 255.0
    else:
        background = np.zeros((3, h, w))
    scene = Scene(doc["scene_id"], (h, w), background, items, list(doc["captions"]), doc["type"])
    return scene.validate(str(path))


def load_dataset(directory: str | Path) -> list[Scene]:
    files = sorted(Path(directory).glob("*.json"))
    return [load_annotation(f) for f in files]
