"""Small two-stage detector.

Pipeline: rescale the image so its short side hits the configured size, run a
4-layer conv backbone (stride 8), predict one objectness score and one box per
grid cell, threshold + NMS + top-N, then classify a fixed-size bilinear crop
of the feature map per surviving box. Confidence is objectness times the max
class probability and detections come back sorted by it, in original image
coordinates.

Differentiation contract: proposal boxes are constants (detached); the loss
gradient flows through the class probabilities and backbone only. That makes
the loss a smooth function of the pixels for a fixed box set, which is what
the attack iterates on and what the finite-difference checks probe.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..geometry import Box, GradientPlan, Image, scaled_shape
from .adapter import DifferentiableDetector

logger = logging.getLogger("maskstrike.detector")

PROB_EPS = 1e-12
WEIGHTS_FORMAT_VERSION = 1
_BACKBONE_CHANNELS = (16, 32, 48, 64, 64)


@dataclass
class DetectorConfig:
    short_side: int = 128
    n_max: int = 64
    nms_iou: float = 0.5
    objectness_threshold: float = 0.5
    num_classes: int = 13  # 12 foreground + background (last index)
    anchor_size: float = 34.0
    stride: int = 8
    roi_size: int = 6

    def __post_init__(self):
        if self.short_side < 32:
            raise ValueError("short_side must be >= 32")
        if not (0.0 < self.nms_iou < 1.0):
            raise ValueError("nms_iou must be in (0, 1)")
        if not (0.0 < self.objectness_threshold < 1.0):
            raise ValueError("objectness_threshold must be in (0, 1)")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if self.num_classes < 2:
            raise ValueError("need at least one foreground class plus background")


@dataclass
class Detection:
    box: Box  # original image coordinates
    objectness: float
    class_probs: np.ndarray  # (num_classes,)

    @property
    def predicted_class(self) -> int:
        return int(np.argmax(self.class_probs))

    @property
    def confidence(self) -> float:
        return self.objectness * float(np.max(self.class_probs))


@dataclass
class DetectionSet:
    detections: list[Detection]
    class_vocab: list[str]
    image_shape: tuple[int, int]  # (H, W) of the image that was detected on
    input_shape: tuple[int, int]  # (H, W) the detector actually saw

    def __len__(self) -> int:
        return len(self.detections)

    def __iter__(self):
        return iter(self.detections)

    def __getitem__(self, i: int) -> Detection:
        return self.detections[i]

    @property
    def background_index(self) -> int:
        return len(self.class_vocab) - 1

    def boxes(self) -> list[Box]:
        return [d.box for d in self.detections]

    def labels(self) -> list[int]:
        return [d.predicted_class for d in self.detections]


@dataclass
class LossSpec:
    """Weighted sum of log class probabilities over (box index, class index)."""

    terms: list[tuple[int, int, float]] = field(default_factory=list)

    def __post_init__(self):
        for b, c, w in self.terms:
            if b < 0 or c < 0:
                raise ValueError(f"negative index in term ({b}, {c}, {w})")


def nms(boxes: list[Box], scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy NMS; returns kept indices in descending score order.

    Ties break toward the lower original index so the result is deterministic.
    """
    from ..geometry import iou as _iou

    order = np.lexsort((np.arange(len(boxes)), -np.asarray(scores, dtype=np.float64)))
    kept: list[int] = []
    for idx in order:
        if all(_iou(boxes[idx], boxes[k]) <= iou_threshold for k in kept):
            kept.append(int(idx))
    return kept


class _Net(nn.Module):
    def __init__(self, num_classes: int, roi_size: int):
        super().__init__()
        c1, c2, c3, c4, c5 = _BACKBONE_CHANNELS
        self.conv1 = nn.Conv2d(3, c1, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        # dilated tail: receptive field must cover an object plus margin,
        # otherwise cells cannot tell centered from offset boxes
        self.conv4 = nn.Conv2d(c3, c4, 3, stride=1, padding=2, dilation=2)
        self.conv5 = nn.Conv2d(c4, c5, 3, stride=1, padding=2, dilation=2)
        self.obj_head = nn.Conv2d(c5, 1, 1)
        self.box_head = nn.Conv2d(c5, 4, 1)
        self.cls_head = nn.Sequential(
            nn.Linear(c5 * roi_size * roi_size, 96),
            nn.ReLU(),
            nn.Linear(96, num_classes),
        )
        self.roi_size = roi_size

    def features(self, x: torch.Tensor) -> torch.Tensor:
        x = x / 127.5 - 1.0
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        x = F.relu(self.conv3(x))
        x = F.relu(self.conv4(x))
        return F.relu(self.conv5(x))

    def rpn(self, feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.obj_head(feats), self.box_head(feats)

    def classify_rois(self, feats: torch.Tensor, boxes: torch.Tensor,
                      stride: int) -> torch.Tensor:
        """Class logits for boxes given in detector-input pixel coordinates.

        feats is (1, C, hf, wf); boxes (N, 4) must already be detached.
        Each box is sampled at roi_size x roi_size cell centers.
        """
        n = boxes.shape[0]
        _, _, hf, wf = feats.shape
        r = self.roi_size
        steps = (torch.arange(r, dtype=feats.dtype) + 0.5) / r  # (r,)
        x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
        xs = x1[:, None] + steps[None, :] * (x2 - x1)[:, None]  # (N, r)
        ys = y1[:, None] + steps[None, :] * (y2 - y1)[:, None]
        # normalized grid over the padded feature extent (align_corners=False)
        gx = 2.0 * xs / (stride * wf) - 1.0
        gy = 2.0 * ys / (stride * hf) - 1.0
        grid = torch.stack(
            [gx[:, None, :].expand(n, r, r), gy[:, :, None].expand(n, r, r)], dim=-1
        )
        crops = F.grid_sample(
            feats.expand(n, -1, -1, -1), grid, mode="bilinear",
            padding_mode="zeros", align_corners=False,
        )
        return self.cls_head(crops.flatten(1))


def _decode_boxes(deltas: torch.Tensor, anchor_size: float,
                  stride: int) -> torch.Tensor:
    """Anchor deltas (1, 4, hf, wf) to corner boxes (hf*wf, 4), input pixels."""
    _, _, hf, wf = deltas.shape
    dt = deltas[0].permute(1, 2, 0).reshape(-1, 4)
    jj, ii = torch.meshgrid(
        torch.arange(wf, dtype=deltas.dtype),
        torch.arange(hf, dtype=deltas.dtype),
        indexing="xy",
    )
    ax = ((jj + 0.5) * stride).reshape(-1)
    ay = ((ii + 0.5) * stride).reshape(-1)
    a = anchor_size
    cx = ax + dt[:, 0] * a
    cy = ay + dt[:, 1] * a
    w = a * torch.exp(torch.clamp(dt[:, 2], min=-4.0, max=4.0))
    h = a * torch.exp(torch.clamp(dt[:, 3], min=-4.0, max=4.0))
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=1)


class _ForwardPass:
    """One differentiable run of the pipeline on one image.

    Holds the detections plus the live tensors needed to turn a LossSpec into
    gradients without a second forward.
    """

    def __init__(self, detections: DetectionSet, probs: torch.Tensor | None,
                 row_of_detection: list[int], image_tensor: torch.Tensor | None,
                 input_tensor: torch.Tensor | None):
        self.detections = detections
        self._probs = probs
        self._row_of_detection = row_of_detection
        self._image_tensor = image_tensor
        self._input_tensor = input_tensor

    def loss_tensor(self, spec: LossSpec) -> torch.Tensor:
        n = len(self.detections)
        k = len(self.detections.class_vocab)
        if not spec.terms:
            return torch.zeros((), dtype=torch.float64)
        for b, c, _ in spec.terms:
            if not (0 <= b < n):
                raise IndexError(f"box index {b} out of range (n={n})")
            if not (0 <= c < k):
                raise IndexError(f"class index {c} out of range (K={k})")
        if self._probs is None:
            raise RuntimeError("forward pass was run without gradients")
        total = None
        clamped = 0
        for b, c, w in spec.terms:
            p = self._probs[self._row_of_detection[b], c]
            if float(p.detach()) < PROB_EPS:
                clamped += 1
            term = w * torch.log(torch.clamp(p, min=PROB_EPS))
            total = term if total is None else total + term
        if clamped:
            logger.warning("clamped %d zero probabilities before log", clamped)
        return total

    def loss_and_gradient(self, spec: LossSpec) -> tuple[float, GradientPlan]:
        loss = self.loss_tensor(spec)
        h_in, w_in = self.detections.input_shape
        if loss.grad_fn is None:
            grad = np.zeros((h_in, w_in, 3), dtype=np.float64)
        else:
            (g,) = torch.autograd.grad(loss, [self._input_tensor],
                                       allow_unused=True)
            if g is None:
                grad = np.zeros((h_in, w_in, 3), dtype=np.float64)
            else:
                grad = g[0].permute(1, 2, 0).numpy().astype(np.float64)
        plan = GradientPlan(
            rescaled_gradient=grad,
            original_shape=self.detections.image_shape,
        )
        return float(loss.detach()), plan


class MiniDetector(DifferentiableDetector):
    """Trainable toy detector; see the module docstring for pipeline details."""

    def __init__(self, config: DetectorConfig, class_vocab: list[str],
                 net: _Net | None = None, dtype: torch.dtype = torch.float32):
        if len(class_vocab) != config.num_classes:
            raise ValueError("class_vocab length must equal num_classes")
        if class_vocab[-1] != "background":
            raise ValueError("last vocab entry must be 'background'")
        self._config = config
        self._class_vocab = list(class_vocab)
        self.net = net if net is not None else _Net(config.num_classes, config.roi_size)
        self.net = self.net.to(dtype)
        self.dtype = dtype
        self.net.eval()

    @property
    def config(self) -> DetectorConfig:
        return self._config

    @property
    def class_vocab(self) -> list[str]:
        return self._class_vocab

    def astype(self, dtype: torch.dtype) -> "MiniDetector":
        """Copy with weights cast to dtype (float64 for gradient checks)."""
        return MiniDetector(self._config, self._class_vocab,
                            net=copy.deepcopy(self.net), dtype=dtype)

    # internal single-image pipeline -------------------------------------

    def _image_to_tensors(self, image: Image, want_grad: bool):
        cfg = self._config
        pixels = np.ascontiguousarray(image.pixels)
        img_t = torch.from_numpy(pixels).to(self.dtype).permute(2, 0, 1).unsqueeze(0)
        img_t.requires_grad_(want_grad)
        in_hw = scaled_shape(image.shape, cfg.short_side)
        x_in = F.interpolate(img_t, size=in_hw, mode="bilinear",
                             align_corners=False)
        return img_t, x_in

    def forward_pass(self, image: Image, want_grad: bool = False) -> _ForwardPass:
        cfg = self._config
        grad_ctx = torch.enable_grad() if want_grad else torch.no_grad()
        with grad_ctx:
            img_t, x_in = self._image_to_tensors(image, want_grad)
            h_in, w_in = x_in.shape[2], x_in.shape[3]
            feats = self.net.features(x_in)
            obj_logits, deltas = self.net.rpn(feats)
            obj = torch.sigmoid(obj_logits)[0, 0].detach().numpy().reshape(-1)
            raw_boxes = _decode_boxes(deltas.detach(), cfg.anchor_size, cfg.stride)
            raw = raw_boxes.numpy().astype(np.float64)

            keep = np.nonzero(obj > cfg.objectness_threshold)[0]
            cand_boxes: list[Box] = []
            cand_scores: list[float] = []
            for idx in keep:
                x1 = min(max(raw[idx, 0], 0.0), float(w_in))
                y1 = min(max(raw[idx, 1], 0.0), float(h_in))
                x2 = min(max(raw[idx, 2], 0.0), float(w_in))
                y2 = min(max(raw[idx, 3], 0.0), float(h_in))
                if x2 - x1 >= 0.5 and y2 - y1 >= 0.5:
                    cand_boxes.append(Box(x1, y1, x2, y2))
                    cand_scores.append(float(obj[idx]))
            if not cand_boxes:
                empty = DetectionSet([], self._class_vocab, image.shape, (h_in, w_in))
                return _ForwardPass(empty, None, [],
                                    img_t if want_grad else None,
                                    x_in if want_grad else None)

            kept = nms(cand_boxes, np.array(cand_scores), cfg.nms_iou)[: cfg.n_max]
            roi_boxes = [cand_boxes[i] for i in kept]
            roi_scores = [cand_scores[i] for i in kept]
            boxes_t = torch.tensor([b.as_tuple() for b in roi_boxes],
                                   dtype=self.dtype)
            logits = self.net.classify_rois(feats, boxes_t, cfg.stride)
            probs = F.softmax(logits, dim=1)
            probs_np = probs.detach().numpy().astype(np.float64)

        bg = cfg.num_classes - 1
        fg_rows = [i for i in range(len(roi_boxes))
                   if int(np.argmax(probs_np[i])) != bg]
        conf = np.array([roi_scores[i] * probs_np[i].max() for i in fg_rows])
        order = np.lexsort((np.arange(len(fg_rows)), -conf))

        h, w = image.shape
        sx, sy = w / w_in, h / h_in
        detections: list[Detection] = []
        row_of_detection: list[int] = []
        for pos in order:
            row = fg_rows[int(pos)]
            detections.append(Detection(
                box=roi_boxes[row].scaled(sx, sy).clipped(w, h),
                objectness=roi_scores[row],
                class_probs=probs_np[row].copy(),
            ))
            row_of_detection.append(row)
        dset = DetectionSet(detections, self._class_vocab, image.shape,
                            (h_in, w_in))
        return _ForwardPass(dset, probs if want_grad else None,
                            row_of_detection,
                            img_t if want_grad else None,
                            x_in if want_grad else None)

    # public interface ----------------------------------------------------

    def detect(self, image: Image) -> DetectionSet:
        return self.forward_pass(image, want_grad=False).detections

    def loss_and_gradient(self, image: Image,
                          spec: LossSpec) -> tuple[float, GradientPlan]:
        return self.forward_pass(image, want_grad=True).loss_and_gradient(spec)

    def classification_loss(self, image: Image, boxes_input: np.ndarray,
                            terms: list[tuple[int, int, float]]) -> float:
        """Loss at explicitly given input-resolution boxes; no proposal stage.

        This is the fixed-box function the attack gradient differentiates;
        finite-difference checks perturb exactly this.
        """
        loss, _ = self._fixed_box_loss(image, boxes_input, terms,
                                       want_grad=False)
        return loss

    def classification_loss_and_image_gradient(
            self, image: Image, boxes_input: np.ndarray,
            terms: list[tuple[int, int, float]]) -> tuple[float, np.ndarray]:
        """Like classification_loss but also d loss / d original image."""
        return self._fixed_box_loss(image, boxes_input, terms, want_grad=True)

    def _fixed_box_loss(self, image: Image, boxes_input: np.ndarray, terms,
                        want_grad: bool):
        grad_ctx = torch.enable_grad() if want_grad else torch.no_grad()
        with grad_ctx:
            img_t, x_in = self._image_to_tensors(image, want_grad)
            feats = self.net.features(x_in)
            boxes_t = torch.as_tensor(np.asarray(boxes_input, dtype=np.float64),
                                      dtype=self.dtype)
            logits = self.net.classify_rois(feats, boxes_t, self._config.stride)
            probs = F.softmax(logits, dim=1)
            total = torch.zeros((), dtype=self.dtype)
            for b, c, w in terms:
                total = total + w * torch.log(torch.clamp(probs[b, c],
                                                          min=PROB_EPS))
            if not want_grad:
                return float(total), None
            (g,) = torch.autograd.grad(total, [img_t])
            return (float(total.detach()),
                    g[0].permute(1, 2, 0).numpy().astype(np.float64))


def save_mini_detector(det: MiniDetector, path: str | Path,
                       metadata: dict | None = None) -> None:
    from dataclasses import asdict

    payload = {
        "format_version": WEIGHTS_FORMAT_VERSION,
        "config": asdict(det.config),
        "class_vocab": det.class_vocab,
        "state_dict": {k: v.to(torch.float32)
                       for k, v in det.net.state_dict().items()},
        "metadata": dict(metadata or {}),
    }
    torch.save(payload, path)


def load_mini_detector(path: str | Path) -> MiniDetector:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != WEIGHTS_FORMAT_VERSION:
        raise ValueError(
            f"weights format {version!r} not supported "
            f"(expected {WEIGHTS_FORMAT_VERSION})"
        )
    cfg = DetectorConfig(**payload["config"])
    det = MiniDetector(cfg, payload["class_vocab"])
    det.net.load_state_dict(payload["state_dict"])
    det.net.eval()
    det.metadata = payload["metadata"]
    return det
