"""Pluggable object detection used by the detection-guided loss.

The loss only needs ``detect(frame) -> DetectionResult``; anything
satisfying that contract can be registered by name. Two implementations
ship here: a deterministic luminance-blob detector used throughout the
tests (no foreign weights), and a thin adapter wrapping an external
callable, e.g. a pretrained person detector.
"""

from __future__ import annotations

import importlib
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
import torch
from scipy import ndimage

from .video import BoundingBox


class DetectorError(RuntimeError):
    """A detector failed; never silently treated as an empty detection."""


@dataclass
class DetectionResult:
    boxes: list[BoundingBox] = field(default_factory=list)
    source: str = "unknown"


class Detector(Protocol):
    def detect(self, frame: torch.Tensor) -> DetectionResult: ...


class BlobDetector:
    """Finds bright connected blobs and boxes them, labelled "person".

    Luminance is thresholded and 8-connected components above a minimum
    area become boxes. The confidence is the mean luminance inside the box
    (clamped to [0, 1]) computed on the live tensor, so it carries
    gradients back into the frame when the frame requires them.
    """

    def __init__(self, threshold: float = 0.5, min_area: int = 4):
        self.threshold = threshold
        self.min_area = min_area

    def detect(self, frame: torch.Tensor) -> DetectionResult:
        if frame.ndim != 3 or frame.shape[0] != 3:
            raise DetectorError(f"expected a (3, H, W) frame, got {tuple(frame.shape)}")
        weights = torch.tensor([0.299, 0.587, 0.114], dtype=frame.dtype, device=frame.device)
        luminance = (frame * weights.view(3, 1, 1)).sum(dim=0)

        mask = (luminance.detach().cpu().numpy() > self.threshold).astype(np.uint8)
        labels, count = ndimage.label(mask, structure=np.ones((3, 3)))
        boxes: list[BoundingBox] = []
        for sl in ndimage.find_objects(labels):
            if sl is None:
                continue
            ys, xs = sl
            area = (ys.stop - ys.start) * (xs.stop - xs.start)
            if area < self.min_area:
                continue
            confidence = luminance[ys, xs].mean().clamp(0.0, 1.0)
            boxes.append(
                BoundingBox(
                    x_min=float(xs.start),
                    y_min=float(ys.start),
                    x_max=float(xs.stop),
                    y_max=float(ys.stop),
                    class_label="person",
                    confidence=confidence,
                )
            )
        return DetectionResult(boxes=boxes, source="blob")


class CallableDetector:
    """Adapter for an external detector exposed as a plain callable."""

    def __init__(self, fn: Callable[[torch.Tensor], DetectionResult], source: str = "external"):
        self._fn = fn
        self.source = source

    def detect(self, frame: torch.Tensor) -> DetectionResult:
        try:
            result = self._fn(frame)
        except Exception as exc:
            raise DetectorError(f"external detector {self.source!r} failed: {exc}") from exc
        if not isinstance(result, DetectionResult):
            raise DetectorError(
                f"external detector {self.source!r} returned {type(result).__name__}, "
                "expected DetectionResult"
            )
        return result


_REGISTRY: dict[str, Callable[[], Detector]] = {
    "blob": BlobDetector,
}


def register_detector(name: str, factory: Callable[[], Detector]) -> None:
    _REGISTRY[name] = factory


def create_detector(name: str) -> Detector:
    """Instantiate a detector by registry name or ``module:attribute`` path."""
    if name in _REGISTRY:
        return _REGISTRY[name]()
    if ":" in name:
        module_name, attr = name.split(":", 1)
        try:
            obj = getattr(importlib.import_module(module_name), attr)
        except (ImportError, AttributeError) as exc:
            raise DetectorError(f"cannot load detector {name!r}: {exc}") from exc
        instance = obj() if isinstance(obj, type) else obj
        if callable(getattr(instance, "detect", None)):
            return instance
        if callable(instance):
            return CallableDetector(instance, source=name)
        raise DetectorError(f"loaded object {name!r} is not a detector")
    raise DetectorError(
        f"unknown detector {name!r}; registered: {sorted(_REGISTRY)} "
        "(or use a module:attribute path)"
    )
