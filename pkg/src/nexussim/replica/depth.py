"""Depth-to-colour registration."""

from __future__ import annotations

import numpy as np

from .capture import Intrinsics, RgbdFrame


def reproject_depth(frame: RgbdFrame) -> np.ndarray:
    """Depth (uint16 mm) as seen from the colour camera, z-buffered.

    Pixels that receive no depth sample, or only samples behind the colour
    camera, are 0.
    """
    d = frame.depth
    h, w = frame.color.shape[:2]
    vs, us = np.nonzero(d)
    z = d[vs, us].astype(float) / 1000.0
    di, ci = frame.depth_intrinsics, frame.color_intrinsics
    pts = np.stack([(us - di.cx) / di.fx * z, (vs - di.cy) / di.fy * z, z], axis=1)
    pts = frame.depth_to_color.apply(pts)
    zc = pts[:, 2]
    front = zc > 1e-6
    pts, zc = pts[front], zc[front]
    u = np.rint(ci.fx * pts[:, 0] / zc + ci.cx).astype(np.int64)
    v = np.rint(ci.fy * pts[:, 1] / zc + ci.cy).astype(np.int64)
    inside = (u >= 0) & (u < w) & (v >= 0) & (v < h)
    u, v, zc = u[inside], v[inside], zc[inside]

    buf = np.full(h * w, np.inf)
    np.minimum.at(buf, v * w + u, zc)
    out = np.where(np.isfinite(buf), np.rint(buf * 1000.0), 0.0)
    return np.clip(out, 0, 65535).astype(np.uint16).reshape(h, w)


def unproject(depth_mm: np.ndarray, intr: Intrinsics, pixels: np.ndarray | None = None) -> np.ndarray:
    """Camera-space points for the given (v, u) pixels, or all valid pixels."""
    if pixels is None:
        pixels = np.argwhere(depth_mm > 0)
    v, u = pixels[:, 0], pixels[:, 1]
    z = depth_mm[v, u].astype(float) / 1000.0
    return np.stack([(u - intr.cx) / intr.fx * z, (v - intr.cy) / intr.fy * z, z], axis=1)
