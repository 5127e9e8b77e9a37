"""Detector interface the attack loop is written against, plus the slot for
plugging in a full-size external Faster R-CNN."""

from __future__ import annotations

import abc
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from ..geometry import GradientPlan, Image
    from .model import DetectionSet, DetectorConfig, LossSpec


class DifferentiableDetector(abc.ABC):
    """Anything that can detect and hand back loss gradients w.r.t. pixels.

    Implementations must return boxes in original image coordinates and a
    GradientPlan whose rescaled_gradient lives at the detector's own input
    resolution, with boxes treated as constants during differentiation.
    """

    @property
    @abc.abstractmethod
    def config(self) -> "DetectorConfig": ...

    @property
    @abc.abstractmethod
    def class_vocab(self) -> list[str]: ...

    @abc.abstractmethod
    def detect(self, image: "Image") -> "DetectionSet": ...

    @abc.abstractmethod
    def loss_and_gradient(self, image: "Image",
                          spec: "LossSpec") -> tuple[float, "GradientPlan"]: ...

    @property
    def background_index(self) -> int:
        return len(self.class_vocab) - 1

    @property
    def foreground_classes(self) -> list[int]:
        return list(range(len(self.class_vocab) - 1))


class FasterRCNNAdapter(DifferentiableDetector):
    """Wiring point for an external Faster R-CNN; no weights ship with this
    package, so both operations raise until a subclass supplies them.

    A subclass must implement detect/loss_and_gradient with the documented
    semantics: short side rescaled to config.short_side (600 by default),
    boxes mapped back to original coordinates, class_probs over the external
    model's vocabulary with background last.
    """

    def __init__(self, config: "DetectorConfig | None" = None,
                 class_vocab: list[str] | None = None):
        from .model import DetectorConfig as _Cfg

        if config is None:
            config = _Cfg(short_side=600, num_classes=(
                len(class_vocab) if class_vocab else 13))
        self._config = config
        self._class_vocab = class_vocab or [
            f"class_{i}" for i in range(config.num_classes - 1)
        ] + ["background"]
        if len(self._class_vocab) != config.num_classes:
            raise ValueError("class_vocab length must equal num_classes")

    @property
    def config(self):
        return self._config

    @property
    def class_vocab(self) -> list[str]:
        return self._class_vocab

    def detect(self, image):
        raise NotImplementedError(
            "FasterRCNNAdapter is an integration point; subclass it with a "
            "model-backed detect()"
        )

    def loss_and_gradient(self, image, spec):
        raise NotImplementedError(
            "FasterRCNNAdapter is an integration point; subclass it with a "
            "model-backed loss_and_gradient()"
        )
