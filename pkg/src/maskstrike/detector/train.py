"""Training for the mini detector.

Anchor matching follows the usual recipe: positives are anchors with IoU >=
pos_iou against some ground-truth box plus the best anchor per ground truth,
negatives fall below neg_iou, the rest are ignored. The ROI head trains on a
static per-scene set of ground-truth boxes, jittered copies and random
background crops, sampled once up front so a fixed seed reproduces the run
exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..geometry import iou, scaled_shape
from ..scenedata import Scene
from .model import DetectorConfig, MiniDetector, _Net

_JITTERS_PER_OBJECT = 2
_BACKGROUND_ROIS = 4


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 2e-3
    lr_decay: float = 0.3  # applied after 3/4 of the epochs
    pos_iou: float = 0.45  # single-scale anchor cannot hit 0.5 on all sizes
    neg_iou: float = 0.45  # no ignore band: off-center anchors train to zero
    negatives_per_positive: int = 5
    # keeps class probabilities off exact 1.0, where float32 log-prob
    # gradients vanish and iterative attacks stall
    label_smoothing: float = 0.05
    seed: int = 0


@dataclass
class _Prepared:
    pixels: np.ndarray  # (H_in, W_in, 3) uint8-valued float32
    pos_anchor_idx: np.ndarray
    neg_anchor_idx: np.ndarray
    box_targets: np.ndarray  # (n_pos, 4) delta targets
    roi_boxes: np.ndarray  # (n_roi, 4) input-res pixels
    roi_labels: np.ndarray  # (n_roi,)


def _anchor_grid(h_in: int, w_in: int, cfg: DetectorConfig) -> np.ndarray:
    hf = -(-h_in // cfg.stride)  # ceil, matches three stride-2 convs
    wf = -(-w_in // cfg.stride)
    jj, ii = np.meshgrid(np.arange(wf), np.arange(hf))
    ax = (jj.reshape(-1) + 0.5) * cfg.stride
    ay = (ii.reshape(-1) + 0.5) * cfg.stride
    half = cfg.anchor_size / 2
    return np.stack([ax - half, ay - half, ax + half, ay + half], axis=1)


def _iou_matrix(anchors: np.ndarray, gt: np.ndarray) -> np.ndarray:
    ix1 = np.maximum(anchors[:, None, 0], gt[None, :, 0])
    iy1 = np.maximum(anchors[:, None, 1], gt[None, :, 1])
    ix2 = np.minimum(anchors[:, None, 2], gt[None, :, 2])
    iy2 = np.minimum(anchors[:, None, 3], gt[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (anchors[:, 2] - anchors[:, 0]) * (anchors[:, 3] - anchors[:, 1])
    area_g = (gt[:, 2] - gt[:, 0]) * (gt[:, 3] - gt[:, 1])
    return inter / (area_a[:, None] + area_g[None, :] - inter)


def _delta_targets(anchors: np.ndarray, gt: np.ndarray,
                   anchor_size: float) -> np.ndarray:
    acx = (anchors[:, 0] + anchors[:, 2]) / 2
    acy = (anchors[:, 1] + anchors[:, 3]) / 2
    gcx = (gt[:, 0] + gt[:, 2]) / 2
    gcy = (gt[:, 1] + gt[:, 3]) / 2
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    return np.stack([
        (gcx - acx) / anchor_size,
        (gcy - acy) / anchor_size,
        np.log(gw / anchor_size),
        np.log(gh / anchor_size),
    ], axis=1)


def _jittered(box: np.ndarray, rng: np.random.Generator,
              w_in: int, h_in: int) -> np.ndarray:
    w = box[2] - box[0]
    h = box[3] - box[1]
    dx, dy = rng.uniform(-0.15, 0.15, 2) * (w, h)
    sw, sh = rng.uniform(0.85, 1.15, 2)
    cx = (box[0] + box[2]) / 2 + dx
    cy = (box[1] + box[3]) / 2 + dy
    x1 = np.clip(cx - w * sw / 2, 0, w_in - 2)
    y1 = np.clip(cy - h * sh / 2, 0, h_in - 2)
    x2 = np.clip(cx + w * sw / 2, x1 + 2, w_in)
    y2 = np.clip(cy + h * sh / 2, y1 + 2, h_in)
    return np.array([x1, y1, x2, y2])


def _prepare_scene(scene: Scene, cfg: DetectorConfig, train: TrainConfig,
                   rng: np.random.Generator) -> _Prepared:
    img = scene.image
    h_in, w_in = scaled_shape(img.shape, cfg.short_side)
    from ..geometry import rescale_image

    pixels = rescale_image(img, cfg.short_side).pixels.astype(np.float32)

    sx, sy = w_in / img.width, h_in / img.height
    gt = np.array([
        [o.box.x1 * sx, o.box.y1 * sy, o.box.x2 * sx, o.box.y2 * sy]
        for o in scene.annotation.objects
    ])
    labels = np.array([o.class_index for o in scene.annotation.objects])

    anchors = _anchor_grid(h_in, w_in, cfg)
    m = _iou_matrix(anchors, gt)
    best_per_anchor = m.argmax(axis=1)
    max_per_anchor = m.max(axis=1)
    pos = max_per_anchor >= train.pos_iou
    pos[m.argmax(axis=0)] = True  # best anchor per ground truth
    neg = (max_per_anchor < train.neg_iou) & ~pos
    pos_idx = np.nonzero(pos)[0]
    neg_idx = np.nonzero(neg)[0]
    targets = _delta_targets(anchors[pos_idx],
                             gt[best_per_anchor[pos_idx]], cfg.anchor_size)

    roi_boxes = [gt[i] for i in range(len(gt))]
    roi_labels = list(labels)
    for i in range(len(gt)):
        for _ in range(_JITTERS_PER_OBJECT):
            jb = _jittered(gt[i], rng, w_in, h_in)
            m_j = _iou_matrix(jb[None, :], gt)[0]
            if m_j.max() >= train.pos_iou:
                roi_boxes.append(jb)
                roi_labels.append(labels[m_j.argmax()])
    background = cfg.num_classes - 1
    for _ in range(_BACKGROUND_ROIS):
        for _try in range(20):
            side = rng.uniform(16, 60)
            x1 = rng.uniform(0, max(w_in - side, 1))
            y1 = rng.uniform(0, max(h_in - side, 1))
            cand = np.array([x1, y1, x1 + side, y1 + side])
            if _iou_matrix(cand[None, :], gt)[0].max() < train.neg_iou:
                roi_boxes.append(cand)
                roi_labels.append(background)
                break

    return _Prepared(
        pixels=pixels,
        pos_anchor_idx=pos_idx,
        neg_anchor_idx=neg_idx,
        box_targets=targets,
        roi_boxes=np.array(roi_boxes),
        roi_labels=np.array(roi_labels),
    )


def train_mini_detector(scenes: list[Scene], class_vocab: list[str],
                        config: DetectorConfig | None = None,
                        train: TrainConfig | None = None,
                        log_every: int = 0) -> MiniDetector:
    """Train from scratch on rendered scenes; deterministic for a fixed seed."""
    cfg = config or DetectorConfig()
    tcfg = train or TrainConfig()
    if len(class_vocab) != cfg.num_classes:
        raise ValueError("class_vocab length must equal num_classes")
    shapes = {s.image.shape for s in scenes}
    if len(shapes) != 1:
        raise ValueError("training expects a uniform canvas size")

    rng = np.random.default_rng(tcfg.seed)
    torch.manual_seed(tcfg.seed)
    prepared = [_prepare_scene(s, cfg, tcfg, rng) for s in scenes]

    net = _Net(cfg.num_classes, cfg.roi_size)
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=tcfg.learning_rate)
    gen = torch.Generator().manual_seed(tcfg.seed)

    n = len(prepared)
    decay_at = (3 * tcfg.epochs) // 4
    for epoch in range(tcfg.epochs):
        if epoch == decay_at:
            for group in opt.param_groups:
                group["lr"] *= tcfg.lr_decay
        order = torch.randperm(n, generator=gen).tolist()
        epoch_loss = 0.0
        for start in range(0, n, tcfg.batch_size):
            batch = [prepared[i] for i in order[start:start + tcfg.batch_size]]
            x = torch.from_numpy(np.stack([p.pixels for p in batch]))
            x = x.permute(0, 3, 1, 2)
            feats = net.features(x)
            obj_logits, deltas = net.rpn(feats)
            obj_flat = obj_logits[:, 0].reshape(len(batch), -1)
            deltas_flat = deltas.permute(0, 2, 3, 1).reshape(len(batch), -1, 4)

            obj_terms, box_terms, cls_logits, cls_labels = [], [], [], []
            for bi, p in enumerate(batch):
                pos = torch.from_numpy(p.pos_anchor_idx)
                neg = torch.from_numpy(p.neg_anchor_idx)
                pos_logits = obj_flat[bi, pos]
                neg_logits = obj_flat[bi, neg]
                # balanced terms: positives, all negatives, and the hardest
                # negatives again so duplicate-prone cells get suppressed
                n_hard = min(len(neg),
                             tcfg.negatives_per_positive * max(len(pos), 1))
                hard = neg_logits.topk(n_hard).values
                obj_terms.append(
                    F.binary_cross_entropy_with_logits(
                        pos_logits, torch.ones(len(pos)))
                    + F.binary_cross_entropy_with_logits(
                        neg_logits, torch.zeros(len(neg)))
                    + F.binary_cross_entropy_with_logits(
                        hard, torch.zeros(n_hard)))
                box_terms.append(F.smooth_l1_loss(
                    deltas_flat[bi, pos], torch.from_numpy(p.box_targets).float()))
                boxes_t = torch.from_numpy(p.roi_boxes).float()
                cls_logits.append(net.classify_rois(
                    feats[bi:bi + 1], boxes_t, cfg.stride))
                cls_labels.append(torch.from_numpy(p.roi_labels))

            loss = (torch.stack(obj_terms).mean()
                    + torch.stack(box_terms).mean()
                    + F.cross_entropy(torch.cat(cls_logits),
                                      torch.cat(cls_labels),
                                      label_smoothing=tcfg.label_smoothing))
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
        if log_every and (epoch + 1) % log_every == 0:
            import logging

            logging.getLogger("maskstrike.detector").info(
                "epoch %d/%d loss %.4f", epoch + 1, tcfg.epochs, epoch_loss)

    net.eval()
    return MiniDetector(cfg, class_vocab, net=net)
