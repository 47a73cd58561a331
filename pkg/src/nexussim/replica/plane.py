"""Seeded RANSAC plane fitting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InsufficientPoints

DEFAULT_THRESHOLD = 0.008


@dataclass(frozen=True, eq=False)
class PlaneModel:
    """Points p with n.p = d; inliers lie within `inlier_threshold`."""

    normal: np.ndarray
    d: float
    inlier_threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float).reshape(3)
        norm = np.linalg.norm(n)
        if not norm > 0:
            raise ValueError("plane normal must be nonzero")
        object.__setattr__(self, "normal", n / norm)
        object.__setattr__(self, "d", float(self.d) / norm)

    def signed_distance(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.normal - self.d

    def inliers(self, points) -> np.ndarray:
        return np.abs(self.signed_distance(points)) <= self.inlier_threshold


def _plane_through(a, b, c) -> tuple[np.ndarray, float] | None:
    n = np.cross(b - a, c - a)
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        return None
    n = n / norm
    return n, float(n @ a)


def _least_squares(points: np.ndarray, reference: np.ndarray) -> tuple[np.ndarray, float]:
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    n = vt[-1]
    if n @ reference < 0:
        n = -n
    return n, float(n @ centroid)


def fit_plane_ransac(points, seed: PlaneModel | None = None, iterations: int = 200,
                     threshold: float = DEFAULT_THRESHOLD, rng: int | np.random.Generator = 0
                     ) -> tuple[PlaneModel, np.ndarray]:
    """Best-consensus plane over the seed and random 3-point hypotheses, then a
    least-squares refit on its inliers."""
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(p) < 3:
        raise InsufficientPoints(f"{len(p)} points; a plane needs 3")
    sv = np.linalg.svd(p - p.mean(axis=0), compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise InsufficientPoints("points are collinear")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)

    hypotheses = []
    if seed is not None:
        hypotheses.append((seed.normal, seed.d))
    triples = gen.integers(0, len(p), size=(iterations, 3))
    for i, j, k in triples:
        h = _plane_through(p[i], p[j], p[k])
        if h is not None:
            hypotheses.append(h)

    best, best_count = None, -1
    for n, d in hypotheses:
        count = int(np.count_nonzero(np.abs(p @ n - d) <= threshold))
        if count > best_count:
            best, best_count = (n, d), count
    n0, d0 = best
    inliers = np.abs(p @ n0 - d0) <= threshold
    if np.count_nonzero(inliers) >= 3:
        n, d = _least_squares(p[inliers], n0)
    else:
        n, d = n0, d0
    model = PlaneModel(n, d, threshold)
    return model, model.inliers(p)
