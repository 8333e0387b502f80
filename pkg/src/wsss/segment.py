"""Pixel-level class maps from heatmaps and image-level predictions."""

from dataclasses import dataclass

import numpy as np

from . import explain as X
from . import tensor as T

DEFAULT_TAU = 0.5


@dataclass
class SegmentationMap:
    labels: np.ndarray
    classes: tuple
    fallback: bool = False


def predict_classes(probs, tau=DEFAULT_TAU):
    """Indices whose image-level probability is at least ``tau``."""
    if not 0 < tau < 1:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    return tuple(int(s) for s in np.flatnonzero(np.asarray(probs) >= tau))


def assemble(heatmaps, classes, probs, height, width):
    """Upsample the selected channels to ``height x width`` and take the argmax.

    With no predicted class every pixel gets the top image-level class.
    """
    maps = heatmaps.maps if isinstance(heatmaps, X.HeatmapSet) else np.asarray(heatmaps)
    classes = tuple(sorted(int(c) for c in classes))
    if not classes:
        top = int(np.argmax(probs))
        return SegmentationMap(np.full((height, width), top, dtype=np.int64), (top,), True)
    if len(classes) == 1:
        return SegmentationMap(np.full((height, width), classes[0], dtype=np.int64), classes)
    up = T.bilinear_upsample(maps[list(classes)], height, width)
    idx = T.argmax_channel(up)
    return SegmentationMap(np.asarray(classes, dtype=np.int64)[idx], classes)


def segment_image(method, model, image, tau=DEFAULT_TAU, E=X.DEFAULT_SEEDS):
    """Full single-image path: forward, predicted classes, heatmaps, assembly."""
    out = model.forward(image)
    classes = predict_classes(out["probs"], tau)
    heat = X.explain(method, model, image, classes, E, out=out)
    h, w = np.shape(image)[-2:]
    return assemble(heat, classes, out["probs"], h, w), heat
