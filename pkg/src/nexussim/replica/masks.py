"""Foreground masks: plane-based coarse mask and morphological refinement."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..errors import EmptyMask
from ..geometry import SimTransform
from .capture import Intrinsics
from .depth import unproject
from .plane import PlaneModel

MIN_MASK_PIXELS = 100


def coarse_mask(depth_mm: np.ndarray, intr: Intrinsics, camera_pose: SimTransform, plane: PlaneModel,
                threshold: float | None = None) -> tuple[np.ndarray, tuple[float, float]]:
    """Valid pixels more than `threshold` above the plane on the camera's side.

    Returns the mask and the prompt point (u, v), the mask centroid.
    """
    thr = plane.inlier_threshold if threshold is None else threshold
    pix = np.argwhere(depth_mm > 0)
    world = camera_pose.apply(unproject(depth_mm, intr, pix))
    side = 1.0 if plane.signed_distance(camera_pose.position) >= 0 else -1.0
    above = side * plane.signed_distance(world) > thr
    mask = np.zeros(depth_mm.shape, dtype=bool)
    mask[pix[above, 0], pix[above, 1]] = True
    n = int(np.count_nonzero(mask))
    if n < MIN_MASK_PIXELS:
        raise EmptyMask(f"{n} foreground pixels (< {MIN_MASK_PIXELS})")
    vs, us = np.nonzero(mask)
    return mask, (float(us.mean()), float(vs.mean()))


def _disk(radius: int) -> np.ndarray:
    y, x = np.ogrid[-radius:radius + 1, -radius:radius + 1]
    return x * x + y * y <= radius * radius


def refine_mask_morph(mask: np.ndarray, prompt: tuple[float, float], radius: int = 2) -> np.ndarray:
    """Close with a disk, then keep the 4-connected component under the prompt.

    Falls back to the largest component when the prompt pixel is background.
    """
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, radius)
    closed = ndimage.binary_closing(padded, structure=_disk(radius))[radius:-radius, radius:-radius]
    labels, count = ndimage.label(closed)  # default structure is 4-connectivity
    if count == 0:
        return closed
    u = int(np.clip(round(prompt[0]), 0, m.shape[1] - 1))
    v = int(np.clip(round(prompt[1]), 0, m.shape[0] - 1))
    keep = labels[v, u]
    if keep == 0:
        sizes = np.bincount(labels.ravel())[1:]
        keep = int(np.argmax(sizes)) + 1
    return labels == keep


def refine_mask_identity(mask: np.ndarray, prompt: tuple[float, float]) -> np.ndarray:
    return np.asarray(mask, dtype=bool)
