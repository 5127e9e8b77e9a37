"""Attack evaluation metrics and their aggregation.

Everything here is a pure function of images, masks and detection sets; the
runner decides what to feed in and stores the per-record numbers. SSIM is
self-contained (separable 11x11 Gaussian window, sigma 1.5, valid region
only) and the detection AP is PASCAL-style 11-point interpolation at IoU 0.5.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .attack import VARIANTS
from .detector.model import DetectionSet
from .geometry import (
    BinaryMask,
    Box,
    Image,
    boxes_intersecting_mask,
    clamp_image,
    iou,
    permute_perturbation,
    rescale_to_shape,
)

SSIM_C1 = (0.01 * 255.0) ** 2
SSIM_C2 = (0.03 * 255.0) ** 2
_SSIM_WIN = 11
_SSIM_SIGMA = 1.5


# -- pixel-space metrics -------------------------------------------------


def perturbation_delta(original: Image, adversarial: Image,
                       mask: BinaryMask) -> float:
    """l2 norm of the pixel difference divided by the mask pixel count."""
    if mask.pixel_count == 0:
        raise ValueError("delta needs a non-empty mask")
    diff = adversarial.pixels - original.pixels
    return float(np.linalg.norm(diff) / mask.pixel_count)


def l2_image_norm(original: Image, adversarial: Image) -> float:
    """l2 norm of the pixel difference divided by H*W."""
    diff = adversarial.pixels - original.pixels
    h, w = original.shape
    return float(np.linalg.norm(diff) / (h * w))


def _gaussian_kernel_1d(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _window_means(planes: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-region separable filtering of (N, H, W) planes."""
    t = torch.from_numpy(planes).unsqueeze(1)  # (N, 1, H, W)
    kx = torch.from_numpy(kernel).reshape(1, 1, 1, -1)
    ky = torch.from_numpy(kernel).reshape(1, 1, -1, 1)
    out = F.conv2d(F.conv2d(t, kx), ky)
    return out.squeeze(1).numpy()


def ssim(a: Image, b: Image) -> float:
    """Mean structural similarity over the three channels.

    Gaussian window (11 taps, sigma 1.5), population covariances, constants
    fixed to the 8-bit range. Only the valid interior contributes, so border
    handling never enters the result.
    """
    if a.shape != b.shape:
        raise ValueError("images must share a shape")
    radius = (_SSIM_WIN - 1) // 2
    if min(a.shape) < _SSIM_WIN:
        raise ValueError("image smaller than the SSIM window")
    kernel = _gaussian_kernel_1d(_SSIM_SIGMA, radius)
    x = a.pixels.transpose(2, 0, 1)  # (3, H, W)
    y = b.pixels.transpose(2, 0, 1)
    stacked = np.concatenate([x, y, x * x, y * y, x * y], axis=0)
    m = _window_means(stacked, kernel)
    ux, uy, uxx, uyy, uxy = np.split(m, 5, axis=0)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    vxy = uxy - ux * uy
    s = ((2 * ux * uy + SSIM_C1) * (2 * vxy + SSIM_C2)) / (
        (ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2)
    )
    return float(s.mean())


# -- detection-space metrics ---------------------------------------------


def actc(dets: DetectionSet, mask: BinaryMask, o_pick: int) -> float:
    """Mean probability of o_pick over boxes whose raster overlaps the mask,
    as a percentage; 0.0 when no box overlaps."""
    idx = boxes_intersecting_mask(dets.boxes(), mask)
    if not idx:
        return 0.0
    return float(100.0 * np.mean([dets[i].class_probs[o_pick] for i in idx]))


def acac(dets: DetectionSet, k: int) -> float | None:
    """Mean probability of k over boxes predicted as k, as a percentage;
    None when no box is."""
    probs = [d.class_probs[k] for d in dets if d.predicted_class == k]
    if not probs:
        return None
    return float(100.0 * np.mean(probs))


def average_precision(gt_boxes: list[Box],
                      detections: list[tuple[Box, float]],
                      iou_threshold: float = 0.5) -> float:
    """11-point interpolated AP for one class.

    Detections are (box, confidence); each ground truth matches at most once,
    greedily in confidence order.
    """
    if not gt_boxes:
        raise ValueError("AP needs at least one ground-truth box")
    order = np.lexsort((
        np.arange(len(detections)),
        -np.array([c for _, c in detections], dtype=np.float64),
    )) if detections else []
    matched: set[int] = set()
    tp = np.zeros(len(detections))
    fp = np.zeros(len(detections))
    for rank, di in enumerate(order):
        box = detections[int(di)][0]
        best_iou, best_gt = 0.0, -1
        for gi, g in enumerate(gt_boxes):
            if gi in matched:
                continue
            v = iou(box, g)
            if v > best_iou:
                best_iou, best_gt = v, gi
        if best_iou >= iou_threshold:
            matched.add(best_gt)
            tp[rank] = 1
        else:
            fp[rank] = 1
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / len(gt_boxes)
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 11):
        above = precision[recall >= r]
        ap += float(above.max()) if above.size else 0.0
    return ap / 11.0


def pascal_map(samples: list[tuple[list[tuple[Box, int]],
                                   list[tuple[Box, int, float]]]],
               iou_threshold: float = 0.5) -> float:
    """Mean AP over the classes present in the ground truth.

    samples: per image, (ground truth [(box, class)], detections
    [(box, class, confidence)]). Detections are pooled per class across
    images with per-image matching, the usual PASCAL accounting.
    """
    classes = sorted({c for gt, _ in samples for _, c in gt})
    if not classes:
        raise ValueError("no ground-truth boxes in any sample")
    aps = []
    for cls in classes:
        # one synthetic AP problem per class: offset boxes per image so
        # cross-image matches are impossible
        gt_all: list[Box] = []
        det_all: list[tuple[Box, float]] = []
        offset = 0.0
        for gt, dets in samples:
            span = 1e6
            for box, c in gt:
                if c == cls:
                    gt_all.append(Box(box.x1 + offset, box.y1, box.x2 + offset,
                                      box.y2))
            for box, c, conf in dets:
                if c == cls:
                    det_all.append((Box(box.x1 + offset, box.y1,
                                        box.x2 + offset, box.y2), conf))
            offset += span
        if gt_all:
            aps.append(average_precision(gt_all, det_all, iou_threshold))
    return float(np.mean(aps))


def map_outside_mask(dets_original: DetectionSet, dets_adversarial: DetectionSet,
                     mask: BinaryMask) -> float | None:
    """mAP (percent) of adversarial detections against the original detections
    that do not touch the mask. None when every original detection touches it."""
    org_in = set(boxes_intersecting_mask(dets_original.boxes(), mask))
    gt = [(d.box, d.predicted_class)
          for i, d in enumerate(dets_original) if i not in org_in]
    if not gt:
        return None
    adv_in = set(boxes_intersecting_mask(dets_adversarial.boxes(), mask))
    dets = [(d.box, d.predicted_class, d.confidence)
            for i, d in enumerate(dets_adversarial) if i not in adv_in]
    return 100.0 * pascal_map([(gt, dets)])


def heldout_map(detector, scenes) -> float:
    """Detector quality against ground-truth annotations, PASCAL mAP@0.5."""
    samples = []
    for scene in scenes:
        gt = [(o.box, o.class_index) for o in scene.annotation.objects]
        dets = [(d.box, d.predicted_class, d.confidence)
                for d in detector.detect(scene.image)]
        samples.append((gt, dets))
    return pascal_map(samples)


# -- controls -------------------------------------------------------------


def permuted_attack_succeeds(original: Image, perturbation: np.ndarray,
                             seed: int, detector, success_fn) -> bool:
    """Re-test success with the perturbation spatially shuffled in place."""
    shuffled = permute_perturbation(perturbation, seed)
    img = clamp_image(Image(original.pixels + shuffled))
    return bool(success_fn(detector.detect(img), original.shape))


def resized_attack_succeeds(adversarial: Image, scale: float, detector,
                            success_fn) -> bool:
    """Re-test success after bilinear resizing the adversarial image."""
    h, w = adversarial.shape
    out_hw = (max(int(round(h * scale)), 1), max(int(round(w * scale)), 1))
    img = clamp_image(Image(rescale_to_shape(adversarial.pixels, out_hw)))
    return bool(success_fn(detector.detect(img), out_hw))


def rescale_mask(mask: BinaryMask, out_hw: tuple[int, int]) -> BinaryMask:
    """Mask at another resolution: bilinear on the indicator, 0.5 threshold."""
    if mask.shape == tuple(out_hw):
        return BinaryMask(mask.bits.copy())
    soft = rescale_to_shape(mask.bits.astype(np.float64), out_hw)
    return BinaryMask(soft >= 0.5)


# -- aggregation ----------------------------------------------------------


@dataclass
class VariantMetrics:
    """Per-variant aggregates; everything is a percentage in [0, 100] except
    delta_* and l2_* which keep their raw pixel units."""

    variant: str
    n_attacks: int = 0
    success_rate: float = 0.0
    conditional_success_rate: float | None = None  # targeted: overlap cases only
    actc_mean: float | None = None
    acac_mean: float | None = None
    map_outside_mean: float | None = None
    delta_mean: float | None = None
    delta_std: float | None = None
    l2_mean: float | None = None
    l2_std: float | None = None
    ssim_mean: float | None = None
    permutation_sr: float | None = None
    resize_sr: dict[str, float] = field(default_factory=dict)


@dataclass
class MetricsReport:
    variants: list[VariantMetrics]

    def by_variant(self, name: str) -> VariantMetrics:
        for v in self.variants:
            if v.variant == name:
                return v
        raise KeyError(name)

    def to_json(self) -> str:
        from dataclasses import asdict

        return json.dumps({"variants": [asdict(v) for v in self.variants]},
                          indent=1, sort_keys=True)

    def to_csv(self) -> str:
        scales = sorted({s for v in self.variants for s in v.resize_sr},
                        key=float)
        cols = ["variant", "n_attacks", "success_rate",
                "conditional_success_rate", "acac_mean", "actc_mean",
                "map_outside_mean", "delta_mean", "delta_std", "l2_mean",
                "l2_std", "ssim_mean", "permutation_sr"]
        cols += [f"resize_sr_{s}" for s in scales]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for v in self.variants:
            row = [v.variant, v.n_attacks, _fmt(v.success_rate),
                   _fmt(v.conditional_success_rate), _fmt(v.acac_mean),
                   _fmt(v.actc_mean), _fmt(v.map_outside_mean),
                   _fmt(v.delta_mean), _fmt(v.delta_std), _fmt(v.l2_mean),
                   _fmt(v.l2_std), _fmt(v.ssim_mean), _fmt(v.permutation_sr)]
            row += [_fmt(v.resize_sr.get(s)) for s in scales]
            writer.writerow(row)
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    return f"{v:.10g}"


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def aggregate_records(records: list[dict]) -> MetricsReport:
    """Fold per-attack record dicts (the JSONL rows) into a MetricsReport."""
    out = []
    for variant in VARIANTS:
        rows = sorted(
            (r for r in records if r["variant"] == variant),
            key=lambda r: (r["image_id"],
                           r.get("target_class") if r.get("target_class")
                           is not None else -1),
        )
        if not rows:
            continue
        vm = VariantMetrics(variant=variant, n_attacks=len(rows))
        vm.success_rate = 100.0 * sum(r["success"] for r in rows) / len(rows)
        overlap_rows = [r for r in rows
                        if r.get("failure_cause") != "no_mask_overlap"]
        if variant.startswith("tar_") and overlap_rows:
            vm.conditional_success_rate = (
                100.0 * sum(r["success"] for r in overlap_rows)
                / len(overlap_rows))
        succ = [r for r in rows if r["success"]]

        def _collect(key, source):
            return [r[key] for r in source
                    if r.get(key) is not None]

        # per-example means describe the adversarial examples the attack
        # actually produced, so failed attacks are excluded throughout
        vm.delta_mean, vm.delta_std = _mean_std(_collect("delta", succ))
        vm.l2_mean, vm.l2_std = _mean_std(_collect("l2_image_norm", succ))
        ssim_mean, _ = _mean_std(_collect("ssim", succ))
        if ssim_mean is not None:
            vm.ssim_mean = 100.0 * ssim_mean  # records hold raw [-1, 1] ssim
        actc_vals = _collect("actc", succ)
        if actc_vals:
            vm.actc_mean = float(np.mean(actc_vals))
        acac_vals = _collect("acac", succ)
        if acac_vals:
            vm.acac_mean = float(np.mean(acac_vals))
        map_vals = _collect("map_outside", succ)
        if map_vals:
            vm.map_outside_mean = float(np.mean(map_vals))
        perm = [r["permutation_success"] for r in rows
                if r.get("permutation_success") is not None]
        if perm:
            vm.permutation_sr = 100.0 * sum(perm) / len(perm)
        scales: dict[str, list[bool]] = {}
        for r in rows:
            for s, ok in (r.get("resize_success") or {}).items():
                scales.setdefault(s, []).append(ok)
        vm.resize_sr = {s: 100.0 * sum(v) / len(v)
                        for s, v in sorted(scales.items())}
        out.append(vm)
    return MetricsReport(out)


def write_report(report: MetricsReport, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.to_csv())
    (out / "metrics.json").write_text(report.to_json())
