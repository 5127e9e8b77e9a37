"""Hand-sized detector for attack and metrics tests.

Classifies fixed proposal boxes by their mean color through a softmax, so the
whole pipeline is differentiable and a flip is a pure color question. It
implements only the abstract detector interface (detect + loss_and_gradient),
which keeps the fallback path in the attack loops under test.
"""

import numpy as np
import torch

from maskstrike.detector.adapter import DifferentiableDetector
from maskstrike.detector.model import (
    Detection,
    DetectionSet,
    DetectorConfig,
    LossSpec,
)
from maskstrike.geometry import Box, GradientPlan, Image

VOCAB = ["red", "green", "blue", "background"]

RED = (235.0, 20.0, 20.0)
GREEN = (20.0, 235.0, 20.0)
BLUE = (20.0, 20.0, 235.0)


class ToyColorDetector(DifferentiableDetector):
    def __init__(self, boxes: list[Box]):
        self._boxes = boxes
        self._cfg = DetectorConfig(short_side=32, num_classes=4)

    @property
    def config(self):
        return self._cfg

    @property
    def class_vocab(self):
        return VOCAB

    def _forward(self, image: Image):
        x = torch.from_numpy(image.pixels / 255.0)
        x.requires_grad_(True)
        rows = []
        for b in self._boxes:
            patch = x[int(b.y1):int(b.y2), int(b.x1):int(b.x2)]
            logits = 8.0 * patch.mean(dim=(0, 1))
            logits = torch.cat([logits, logits.new_zeros(1)])
            rows.append(torch.softmax(logits, dim=0))
        probs = torch.stack(rows) if rows else x.new_zeros((0, 4))
        return x, probs

    def detect(self, image: Image) -> DetectionSet:
        _, probs = self._forward(image)
        dets = [Detection(b, 1.0, p.detach().numpy())
                for b, p in zip(self._boxes, probs)]
        return DetectionSet(dets, VOCAB, image.shape, image.shape)

    def loss_and_gradient(self, image: Image, spec: LossSpec):
        x, probs = self._forward(image)
        total = x.new_zeros(())
        for b, c, w in spec.terms:
            total = total + w * torch.log(probs[b, c])
        if total.grad_fn is None:
            grad = np.zeros(image.pixels.shape)
        else:
            (g,) = torch.autograd.grad(total, [x])
            grad = g.numpy() / 255.0
        return float(total.detach()), GradientPlan(grad, image.shape)


def toy_scene(placements, shape=(32, 48)):
    """placements: (box, rgb) pairs painted over a mid-gray canvas."""
    px = np.full((*shape, 3), 128.0)
    for b, rgb in placements:
        px[int(b.y1):int(b.y2), int(b.x1):int(b.x2)] = rgb
    return Image(px)
