"""Synthetic scenes: colored shapes on a noise background.

Twelve foreground classes (4 colors x 3 shapes). Scenes are reproducible
bit-for-bit from (seed, scene index) and are written as 8-bit PNGs plus a
COCO-style annotation file, so the rest of the pipeline never needs this
module at attack time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw

from .geometry import Box, Image, iou

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")

_COLOR_RGB = {
    "red": (200, 40, 40),
    "green": (40, 170, 60),
    "blue": (50, 70, 200),
    "yellow": (225, 205, 50),
}

_PLACEMENT_TRIES = 80


def class_names() -> list[str]:
    """The 12 foreground class names, fixed order, hyphenated color-shape."""
    return [f"{c}-{s}" for c in COLORS for s in SHAPES]


@dataclass
class DatasetConfig:
    n_scenes: int = 100
    canvas: tuple[int, int] = (160, 224)  # (H, W)
    min_objects: int = 2
    max_objects: int = 6
    min_side: int = 30
    max_side: int = 62
    noise_base: int = 112
    noise_amplitude: int = 40
    color_jitter: int = 30  # per-object fill variation around the class color
    fill_texture: int = 12  # per-pixel variation inside an object
    max_overlap_iou: float = 0.2
    repeat_fraction: float = 0.3  # floor on scenes with a repeated class
    seed: int = 0

    def __post_init__(self):
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValueError("bad object count range")
        if self.min_side * self.min_side < 100:
            raise ValueError("objects must cover at least 100 px")
        if not 0 <= self.fill_texture <= 20:
            raise ValueError("fill_texture must stay within the color clamp")


@dataclass
class SceneObject:
    box: Box
    category_id: int  # 1-based COCO id

    @property
    def class_index(self) -> int:
        return self.category_id - 1


@dataclass
class SceneAnnotation:
    image_id: str
    width: int
    height: int
    objects: list[SceneObject] = field(default_factory=list)


@dataclass
class Scene:
    image: Image
    annotation: SceneAnnotation


def _scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _place_boxes(rng: np.random.Generator, cfg: DatasetConfig, n: int) -> list[Box]:
    h, w = cfg.canvas
    boxes: list[Box] = []
    for _ in range(n):
        for attempt in range(_PLACEMENT_TRIES):
            side = int(rng.integers(cfg.min_side, cfg.max_side + 1))
            x = int(rng.integers(0, w - side + 1))
            y = int(rng.integers(0, h - side + 1))
            cand = Box(x, y, x + side, y + side)
            if all(iou(cand, b) <= cfg.max_overlap_iou for b in boxes):
                boxes.append(cand)
                break
        else:
            raise RuntimeError("could not place object inside the canvas")
    return boxes


def _shape_raster(shape: str, w: int, h: int) -> np.ndarray:
    m = PILImage.new("L", (w, h), 0)
    d = ImageDraw.Draw(m)
    if shape == "circle":
        d.ellipse([0, 0, w - 1, h - 1], fill=255)
    elif shape == "square":
        d.rectangle([0, 0, w - 1, h - 1], fill=255)
    else:
        d.polygon([(0, h - 1), (w - 1, h - 1), (w // 2, 0)], fill=255)
    return np.asarray(m) > 0


def _draw_object(canvas: np.ndarray, box: Box, class_index: int,
                 rng: np.random.Generator, cfg: DatasetConfig) -> None:
    color_name = COLORS[class_index // len(SHAPES)]
    shape = SHAPES[class_index % len(SHAPES)]
    base = np.array(_COLOR_RGB[color_name], dtype=np.int64)
    jitter = rng.integers(-cfg.color_jitter, cfg.color_jitter + 1, size=3)
    fill = np.clip(base + jitter, 20, 235)
    x1, y1, x2, y2 = (int(v) for v in box.as_tuple())
    inside = _shape_raster(shape, x2 - x1, y2 - y1)
    # per-pixel texture keeps local contrast nonzero inside the object, like
    # any real surface; the window mean stays at the class color
    texture = rng.integers(-cfg.fill_texture, cfg.fill_texture + 1,
                           size=(y2 - y1, x2 - x1, 3))
    patch = canvas[y1:y2, x1:x2]
    patch[inside] = np.clip(fill + texture, 0, 255)[inside]


def generate_scene(cfg: DatasetConfig, index: int) -> Scene:
    """Render scene `index`; bit-for-bit reproducible from (cfg.seed, index)."""
    rng = _scene_rng(cfg.seed, index)
    h, w = cfg.canvas
    lo = max(cfg.noise_base - cfg.noise_amplitude, 0)
    hi = min(cfg.noise_base + cfg.noise_amplitude, 255)
    canvas = rng.integers(lo, hi + 1, size=(h, w, 3))

    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    classes = rng.integers(0, len(class_names()), size=n)
    # every k-th scene pins a duplicate class so the floor is met by construction
    if n >= 2 and (index % 10) < int(np.ceil(cfg.repeat_fraction * 10)):
        classes[1] = classes[0]
    boxes = _place_boxes(rng, cfg, n)

    objects = []
    for box, cls in zip(boxes, classes):
        _draw_object(canvas, box, int(cls), rng, cfg)
        objects.append(SceneObject(box=box, category_id=int(cls) + 1))

    image = Image(canvas.astype(np.float64))
    ann = SceneAnnotation(image_id=f"scene_{index:05d}", width=w, height=h,
                          objects=objects)
    return Scene(image=image, annotation=ann)


def generate_dataset(cfg: DatasetConfig) -> list[Scene]:
    return [generate_scene(cfg, i) for i in range(cfg.n_scenes)]


def write_dataset(cfg: DatasetConfig, out_dir: str | Path) -> list[Scene]:
    """Render all scenes, write PNGs and annotations.json; returns the scenes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenes = generate_dataset(cfg)
    for scene in scenes:
        scene.image.save(out / f"{scene.annotation.image_id}.png")
    write_annotations([s.annotation for s in scenes], out / "annotations.json")
    return scenes


def write_annotations(annotations: list[SceneAnnotation], path: str | Path) -> None:
    images, annos = [], []
    next_id = 1
    for idx, ann in enumerate(annotations):
        images.append({
            "id": idx,
            "file_name": f"{ann.image_id}.png",
            "width": ann.width,
            "height": ann.height,
        })
        for obj in ann.objects:
            b = obj.box
            annos.append({
                "id": next_id,
                "image_id": idx,
                "category_id": obj.category_id,
                "bbox": [b.x1, b.y1, b.width, b.height],
                "area": b.area,
                "iscrowd": 0,
            })
            next_id += 1
    payload = {
        "images": images,
        "annotations": annos,
        "categories": [
            {"id": i + 1, "name": name} for i, name in enumerate(class_names())
        ],
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=1)


def read_annotations(path: str | Path) -> list[SceneAnnotation]:
    with open(path) as f:
        payload = json.load(f)
    by_image: dict[int, SceneAnnotation] = {}
    order = []
    for im in payload["images"]:
        ann = SceneAnnotation(
            image_id=Path(im["file_name"]).stem,
            width=im["width"], height=im["height"],
        )
        by_image[im["id"]] = ann
        order.append(im["id"])
    for a in payload["annotations"]:
        x, y, w, h = a["bbox"]
        by_image[a["image_id"]].objects.append(
            SceneObject(box=Box(x, y, x + w, y + h), category_id=a["category_id"])
        )
    return [by_image[i] for i in order]


def load_images(data_dir: str | Path) -> list[tuple[str, Image]]:
    """(image_id, Image) pairs for every scene PNG in a dataset directory."""
    d = Path(data_dir)
    return [(p.stem, Image.load(p)) for p in sorted(d.glob("scene_*.png"))]
