"""Masked iterative attacks against a differentiable detector.

Shared skeleton: re-detect on the current image, test the variant's success
condition, and if not done take one gradient step on a log-probability loss.
The two pick-object variants modify pixels only inside a mask built once from
the clean image (union of boxes predicted as the picked class); the
all-objects variant is unmasked. Pixels are clamped to [0, 255] after every
step.

The success check runs before each update and never after the last one
(max_iter updates get at most max_iter checks; max_iter=0 means no checks and
no changes). Successful results therefore reproduce under a fresh detect():
the image was not touched after the check that declared success.

The same success predicates drive the attack loops and the permutation and
resize controls; there is no second implementation to drift.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .detector.adapter import DifferentiableDetector
from .detector.model import DetectionSet, LossSpec
from .geometry import (
    BinaryMask,
    Image,
    boxes_intersecting_mask,
    clamp_image,
    mask_gradient,
    rasterize_mask,
    rescale_to_shape,
)

VARIANTS = (
    "non_tar_frequent",
    "non_tar_confident",
    "tar_frequent",
    "tar_confident",
    "non_tar_all",
)

PICK_STRATEGIES = ("frequent", "confident")

# calibrated against the shipped mini detector so the median per-step max
# pixel change lands between 0.5 and 2 intensity levels; an external
# Faster R-CNN typically needs a rate around 1e4 instead
DEFAULT_LEARNING_RATE = 9.5e4


@dataclass
class AttackConfig:
    learning_rate: float = DEFAULT_LEARNING_RATE
    max_iter: int = 60

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")


@dataclass
class AttackResult:
    adversarial: Image
    perturbation: np.ndarray  # adversarial minus original
    success: bool
    iterations_used: int
    trace: list[tuple[float, int]]  # (loss, active box count) per update
    final_detections: DetectionSet
    mask: BinaryMask | None = None
    o_pick: int | None = None
    target_class: int | None = None
    substitute_class: int | None = None
    original_classes: list[int] = field(default_factory=list)
    failure_cause: str | None = None


# -- picking and masking --------------------------------------------------


def select_pick_object(dets: DetectionSet, strategy: str) -> int:
    """Class to attack: 'frequent' takes the class with the most boxes (ties:
    larger summed confidence, then lower class index), 'confident' takes the
    class of the single most confidently classified box (ties: earlier box).
    """
    if len(dets) == 0:
        raise ValueError("cannot pick a class from zero detections")
    if strategy == "frequent":
        counts: dict[int, int] = {}
        conf_sum: dict[int, float] = {}
        for d in dets:
            c = d.predicted_class
            counts[c] = counts.get(c, 0) + 1
            conf_sum[c] = conf_sum.get(c, 0.0) + d.confidence
        return min(counts, key=lambda c: (-counts[c], -conf_sum[c], c))
    if strategy == "confident":
        best = max(range(len(dets)),
                   key=lambda i: (float(dets[i].class_probs.max()), -i))
        return dets[best].predicted_class
    raise ValueError(f"unknown strategy {strategy!r}")


def pick_object_mask(dets: DetectionSet, o_pick: int) -> BinaryMask:
    """Union of boxes predicted as o_pick, rasterized on the image plane."""
    boxes = [d.box for d in dets if d.predicted_class == o_pick]
    if not boxes:
        raise ValueError(f"no detection carries class {o_pick}")
    return rasterize_mask(boxes, dets.image_shape)


def box_set_a(dets: DetectionSet, o_pick: int) -> list[int]:
    """Indices of boxes currently predicted as o_pick."""
    return [i for i, d in enumerate(dets) if d.predicted_class == o_pick]


def targeted_fallback_box(dets: DetectionSet, mask: BinaryMask,
                          k: int) -> int | None:
    """Among boxes overlapping the mask, the one with the highest probability
    of the target class; None when nothing overlaps."""
    overlap = boxes_intersecting_mask(dets.boxes(), mask)
    if not overlap:
        return None
    return max(overlap, key=lambda i: (float(dets[i].class_probs[k]), -i))


# -- success predicates (shared with the controls) ------------------------


def nontargeted_success(dets: DetectionSet, o_pick: int) -> bool:
    """No box is predicted as o_pick any more."""
    return not box_set_a(dets, o_pick)


def targeted_success(dets: DetectionSet, mask: BinaryMask, o_pick: int,
                     k: int) -> bool:
    """o_pick is gone everywhere and the best mask-overlapping candidate for
    the target class is actually predicted as it."""
    if box_set_a(dets, o_pick):
        return False
    fb = targeted_fallback_box(dets, mask, k)
    return fb is not None and dets[fb].predicted_class == k


def all_objects_success(dets: DetectionSet, original_classes: list[int]) -> bool:
    """No surviving box carries any class the clean image contained."""
    banned = set(original_classes)
    return all(d.predicted_class not in banned for d in dets)


def sample_substitute_class(original_classes: list[int], n_foreground: int,
                            rng: np.random.Generator) -> int:
    """Random foreground class absent from the clean image."""
    options = [c for c in range(n_foreground) if c not in set(original_classes)]
    if not options:
        raise ValueError("every foreground class already appears in the image")
    return int(options[rng.integers(len(options))])


# -- attack loops ----------------------------------------------------------


def _evaluate(detector: DifferentiableDetector, img: Image):
    """One detector pass: detections plus a spec -> (loss, plan) closure.

    Detectors exposing a fused forward_pass (the mini detector) pay for one
    forward; anything implementing only the abstract interface still works.
    """
    fused = getattr(detector, "forward_pass", None)
    if fused is not None:
        fp = fused(img, want_grad=True)
        return fp.detections, fp.loss_and_gradient
    dets = detector.detect(img)
    return dets, lambda spec: detector.loss_and_gradient(img, spec)


def _apply_update(img: Image, plan, cfg: AttackConfig,
                  mask: BinaryMask | None, sign: float) -> Image:
    plan.learning_rate = cfg.learning_rate
    if mask is not None:
        update = mask_gradient(plan, mask)
    else:
        update = rescale_to_shape(
            cfg.learning_rate * plan.rescaled_gradient, plan.original_shape)
    return clamp_image(Image(img.pixels + sign * update))


def run_non_targeted(image: Image, detector: DifferentiableDetector,
                     o_pick: int, mask: BinaryMask,
                     cfg: AttackConfig) -> AttackResult:
    """Gradient ascent on the summed log probability of o_pick over its own
    boxes, confined to the mask, until no box is predicted as o_pick."""
    img = image.copy()
    trace: list[tuple[float, int]] = []
    for step in range(cfg.max_iter):
        dets, loss_fn = _evaluate(detector, img)
        if nontargeted_success(dets, o_pick):
            return AttackResult(img, img.pixels - image.pixels, True, step,
                                trace, dets, mask=mask, o_pick=o_pick)
        a = box_set_a(dets, o_pick)
        spec = LossSpec([(i, o_pick, -1.0) for i in a])
        loss, plan = loss_fn(spec)
        img = _apply_update(img, plan, cfg, mask, sign=+1.0)
        trace.append((loss, len(a)))
    return AttackResult(img, img.pixels - image.pixels, False, len(trace),
                        trace, detector.detect(img), mask=mask, o_pick=o_pick,
                        failure_cause="max_iter")


def run_targeted(image: Image, detector: DifferentiableDetector, o_pick: int,
                 target_class: int, mask: BinaryMask,
                 cfg: AttackConfig) -> AttackResult:
    """Gradient descent pulling o_pick boxes toward the target class; once
    o_pick is gone, keeps pushing the best mask-overlapping candidate until
    it flips to the target."""
    if target_class == o_pick:
        raise ValueError("target class must differ from the picked class")
    img = image.copy()
    trace: list[tuple[float, int]] = []
    cause = "max_iter"
    for step in range(cfg.max_iter):
        dets, loss_fn = _evaluate(detector, img)
        if targeted_success(dets, mask, o_pick, target_class):
            return AttackResult(img, img.pixels - image.pixels, True, step,
                                trace, dets, mask=mask, o_pick=o_pick,
                                target_class=target_class)
        a = box_set_a(dets, o_pick)
        if not a:
            fb = targeted_fallback_box(dets, mask, target_class)
            if fb is None:
                # masked updates cannot reach any box; the image is frozen
                cause = "no_mask_overlap"
                break
            a = [fb]
        spec = LossSpec([(i, target_class, -1.0) for i in a])
        loss, plan = loss_fn(spec)
        img = _apply_update(img, plan, cfg, mask, sign=-1.0)
        trace.append((loss, len(a)))
    return AttackResult(img, img.pixels - image.pixels, False, len(trace),
                        trace, detector.detect(img), mask=mask, o_pick=o_pick,
                        target_class=target_class, failure_cause=cause)


def run_all_objects(image: Image, detector: DifferentiableDetector,
                    substitute_class: int, cfg: AttackConfig) -> AttackResult:
    """Unmasked gradient descent pushing every box toward a class the clean
    image does not contain, until no box carries any original class."""
    original = detector.detect(image)
    original_classes = sorted({d.predicted_class for d in original})
    if substitute_class in original_classes:
        raise ValueError("substitute class must be absent from the image")
    img = image.copy()
    trace: list[tuple[float, int]] = []
    for step in range(cfg.max_iter):
        dets, loss_fn = _evaluate(detector, img)
        if all_objects_success(dets, original_classes):
            return AttackResult(img, img.pixels - image.pixels, True, step,
                                trace, dets, substitute_class=substitute_class,
                                original_classes=original_classes)
        spec = LossSpec([(i, substitute_class, -1.0)
                         for i in range(len(dets))])
        loss, plan = loss_fn(spec)
        img = _apply_update(img, plan, cfg, mask=None, sign=-1.0)
        trace.append((loss, len(dets)))
    return AttackResult(img, img.pixels - image.pixels, False, len(trace),
                        trace, detector.detect(img),
                        substitute_class=substitute_class,
                        original_classes=original_classes,
                        failure_cause="max_iter")


def median_max_step(detector: DifferentiableDetector, images: list[Image],
                    learning_rate: float) -> float:
    """Median over images of the largest pixel change a single non-targeted
    step would apply; the calibration target is 0.5 to 2 intensity levels."""
    steps = []
    for image in images:
        dets = detector.detect(image)
        if len(dets) == 0:
            continue
        o_pick = select_pick_object(dets, "frequent")
        mask = pick_object_mask(dets, o_pick)
        spec = LossSpec([(i, o_pick, -1.0)
                         for i in box_set_a(dets, o_pick)])
        _, plan = detector.loss_and_gradient(image, spec)
        plan.learning_rate = learning_rate
        steps.append(float(np.abs(mask_gradient(plan, mask)).max()))
    if not steps:
        raise ValueError("no image produced detections")
    return float(np.median(steps))
