"""Image, box and mask primitives shared by every other module.

Conventions, fixed once here so nobody re-derives them:

* images are (H, W, 3) float64 arrays in [0, 255]; quantization to 8 bit
  happens only when a PNG is written
* boxes are (x1, y1, x2, y2) in continuous pixel coordinates, x along width
* IoU uses continuous areas, no +1 fudge
* a box rasterizes to the half-open integer window
  [floor(x1), ceil(x2)) x [floor(y1), ceil(y2)), clipped to the image
* every resample (images and gradients alike) is bilinear interpolation
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, corners in pixel coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def scaled(self, sx: float, sy: float) -> "Box":
        return Box(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)

    def clipped(self, width: int, height: int) -> "Box":
        """Clip to image bounds; raises if nothing is left."""
        return Box(
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
            min(max(self.x2, 0.0), width),
            min(max(self.y2, 0.0), height),
        )


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes (continuous areas)."""
    ix1 = max(a.x1, b.x1)
    iy1 = max(a.y1, b.y1)
    ix2 = min(a.x2, b.x2)
    iy2 = min(a.y2, b.y2)
    iw = max(0.0, ix2 - ix1)
    ih = max(0.0, iy2 - iy1)
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union


@dataclass
class Image:
    """Real-valued RGB image; stays float through every optimization step."""

    pixels: np.ndarray  # (H, W, 3) float64 in [0, 255]

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim != 3 or p.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3), got {p.shape}")
        self.pixels = p

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def copy(self) -> "Image":
        return Image(self.pixels.copy())

    @classmethod
    def load(cls, path: str | Path) -> "Image":
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
        return cls(arr)

    def save(self, path: str | Path) -> None:
        """Write as 8-bit RGB PNG (round, then clip); the only quantization point."""
        q = np.clip(np.rint(self.pixels), 0, 255).astype(np.uint8)
        PILImage.fromarray(q, mode="RGB").save(path, format="PNG")


@dataclass
class BinaryMask:
    """Boolean pixel mask over an image plane."""

    bits: np.ndarray  # (H, W) bool

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2:
            raise ValueError(f"expected (H, W), got {b.shape}")
        self.bits = b.astype(bool)

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    @property
    def pixel_count(self) -> int:
        return int(self.bits.sum())

    @classmethod
    def empty(cls, shape: tuple[int, int]) -> "BinaryMask":
        return cls(np.zeros(shape, dtype=bool))

    def save(self, path: str | Path) -> None:
        PILImage.fromarray(self.bits).convert("1").save(path, format="PNG")

    @classmethod
    def load(cls, path: str | Path) -> "BinaryMask":
        with PILImage.open(path) as im:
            return cls(np.asarray(im.convert("1"), dtype=bool))


@dataclass
class GradientPlan:
    """Loss gradient at detector input resolution plus what is needed to map
    it back onto the original image."""

    rescaled_gradient: np.ndarray  # (H_in, W_in, 3) float64, d loss / d detector input
    original_shape: tuple[int, int]  # (H, W) of the image the attack edits
    learning_rate: float = 1.0

    def __post_init__(self):
        g = np.asarray(self.rescaled_gradient, dtype=np.float64)
        if g.ndim != 3 or g.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) gradient, got {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient")
        self.rescaled_gradient = g


def _resize_bilinear(arr: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an (H, W) or (H, W, C) float array."""
    a = np.asarray(arr, dtype=np.float64)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[:, :, None]
    t = torch.from_numpy(np.ascontiguousarray(a)).permute(2, 0, 1).unsqueeze(0)
    r = F.interpolate(t, size=out_hw, mode="bilinear", align_corners=False)
    out = r.squeeze(0).permute(1, 2, 0).numpy()
    return out[:, :, 0] if squeeze else out


def scaled_shape(shape: tuple[int, int], short_side: int) -> tuple[int, int]:
    """Output (H, W) after resizing so the short side equals short_side."""
    h, w = shape
    if h <= w:
        return (short_side, int(round(w * short_side / h)))
    return (int(round(h * short_side / w)), short_side)


def rescale_image(img: Image, short_side: int) -> Image:
    """Resize so min(H, W) == short_side, aspect ratio preserved (rounded)."""
    out_hw = scaled_shape(img.shape, short_side)
    if out_hw == img.shape:
        return img.copy()
    return Image(_resize_bilinear(img.pixels, out_hw))


def rescale_to_shape(arr: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an arbitrary float array to an explicit (H, W)."""
    if tuple(arr.shape[:2]) == tuple(out_hw):
        return np.array(arr, dtype=np.float64)
    return _resize_bilinear(arr, out_hw)


def rasterize_mask(boxes: Iterable[Box], shape: tuple[int, int]) -> BinaryMask:
    """Union of boxes as a pixel mask, half-open floor/ceil rule per box."""
    h, w = shape
    bits = np.zeros((h, w), dtype=bool)
    for b in boxes:
        x1 = max(int(np.floor(b.x1)), 0)
        y1 = max(int(np.floor(b.y1)), 0)
        x2 = min(int(np.ceil(b.x2)), w)
        y2 = min(int(np.ceil(b.y2)), h)
        if x2 > x1 and y2 > y1:
            bits[y1:y2, x1:x2] = True
    return BinaryMask(bits)


def mask_gradient(plan: GradientPlan, mask: BinaryMask) -> np.ndarray:
    """Scale by the learning rate, resize to the original image shape, then
    zero everything outside the mask.

    Outside-mask entries are exact 0.0 (finite * 0.0), which is what keeps
    repeated additive updates bit-exact off the mask.
    """
    if mask.shape != plan.original_shape:
        raise ValueError(f"mask {mask.shape} != image {plan.original_shape}")
    g = plan.learning_rate * plan.rescaled_gradient
    g = rescale_to_shape(g, plan.original_shape)
    return g * mask.bits[:, :, None]


def clamp_image(img: Image) -> Image:
    """Clamp pixel values to [0, 255]; in-range values pass through unchanged."""
    return Image(np.clip(img.pixels, 0.0, 255.0))


def permute_perturbation(pert: np.ndarray, seed: int) -> np.ndarray:
    """Spatially shuffle a perturbation map with a seeded permutation.

    All three channels of a pixel move together, so per-pixel energy and the
    global l2 norm are preserved exactly.
    """
    p = np.asarray(pert, dtype=np.float64)
    if p.ndim != 3 or p.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3), got {p.shape}")
    h, w, _ = p.shape
    rng = np.random.default_rng(seed)
    perm = rng.permutation(h * w)
    flat = p.reshape(h * w, 3)
    return flat[perm].reshape(h, w, 3)


def boxes_intersecting_mask(boxes: Sequence[Box], mask: BinaryMask) -> list[int]:
    """Indices of boxes whose raster window overlaps at least one mask pixel."""
    out = []
    h, w = mask.shape
    for i, b in enumerate(boxes):
        x1 = max(int(np.floor(b.x1)), 0)
        y1 = max(int(np.floor(b.y1)), 0)
        x2 = min(int(np.ceil(b.x2)), w)
        y2 = min(int(np.ceil(b.y2)), h)
        if x2 > x1 and y2 > y1 and mask.bits[y1:y2, x1:x2].any():
            out.append(i)
    return out
