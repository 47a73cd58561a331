"""
Triangle-mesh chunks, ray casting, and 4-point selection frusta.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import DegenerateSelection, EmptySelection

MIN_TRIANGLE_AREA = 1e-12


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Indexed triangle mesh; optional per-vertex RGB in [0, 1].

    Triangles with area <= 1e-12 m^2 are dropped on construction, so
    triangle indices always refer to the filtered list.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    colors: np.ndarray | None = None
    chunk_id: int = 0

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        if self.colors is not None:
            c = np.asarray(self.colors, dtype=float).reshape(-1, 3)
            if len(c) != len(v):
                raise ValueError("one colour per vertex required")
            object.__setattr__(self, "colors", c)
        if t.size:
            t = t[_triangle_areas(v, t) > MIN_TRIANGLE_AREA]
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "chunk_id", int(self.chunk_id))

    def __len__(self) -> int:
        return len(self.triangles)

    @property
    def corners(self) -> np.ndarray:
        """(m, 3, 3) triangle corner positions."""
        return self.vertices[self.triangles]

    def areas(self) -> np.ndarray:
        return _triangle_areas(self.vertices, self.triangles)

    @cached_property
    def bounding_sphere(self) -> tuple[np.ndarray, float]:
        if not len(self.triangles):
            return np.zeros(3), 0.0
        used = self.vertices[np.unique(self.triangles)]
        center = 0.5 * (used.min(axis=0) + used.max(axis=0))
        return center, float(np.max(np.linalg.norm(used - center, axis=1)))

    def transformed(self, transform) -> TriangleMesh:
        return TriangleMesh(transform.apply(self.vertices), self.triangles, self.colors, self.chunk_id)

    def with_chunk_id(self, chunk_id: int) -> TriangleMesh:
        return TriangleMesh(self.vertices, self.triangles, self.colors, chunk_id)


def _triangle_areas(v: np.ndarray, t: np.ndarray) -> np.ndarray:
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def grid_mesh(center, u_axis, v_axis, size_u: float, size_v: float, nu: int, nv: int,
              chunk_id: int = 0, color=None) -> TriangleMesh:
    """Flat rectangle split into nu x nv quads (two triangles each)."""
    center = np.asarray(center, dtype=float)
    u_axis = np.asarray(u_axis, dtype=float)
    v_axis = np.asarray(v_axis, dtype=float)
    u_axis = u_axis / np.linalg.norm(u_axis)
    v_axis = v_axis / np.linalg.norm(v_axis)
    su = np.linspace(-size_u / 2, size_u / 2, nu + 1)
    sv = np.linspace(-size_v / 2, size_v / 2, nv + 1)
    gu, gv = np.meshgrid(su, sv, indexing="ij")
    verts = center + gu.reshape(-1, 1) * u_axis + gv.reshape(-1, 1) * v_axis
    idx = np.arange((nu + 1) * (nv + 1)).reshape(nu + 1, nv + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[1:, :-1].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[:-1, 1:].ravel()
    tris = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    colors = None if color is None else np.tile(np.asarray(color, dtype=float), (len(verts), 1))
    return TriangleMesh(verts, tris, colors, chunk_id)


# ---------------------------------------------------------------------------
# Ray casting


@dataclass(frozen=True)
class RayHit:
    chunk_id: int
    triangle: int
    point: tuple[float, float, float]
    distance: float


def _ray_triangles(origin: np.ndarray, direction: np.ndarray, corners: np.ndarray) -> np.ndarray:
    """Watertight ray/triangle test (Woop, Benthin & Wald) over many triangles.

    Returns the hit distance per triangle, +inf where there is no hit.
    Both faces count.
    """
    kz = int(np.argmax(np.abs(direction)))
    kx = (kz + 1) % 3
    ky = (kx + 1) % 3
    if direction[kz] < 0:
        kx, ky = ky, kx
    sx = direction[kx] / direction[kz]
    sy = direction[ky] / direction[kz]
    sz = 1.0 / direction[kz]

    rel = corners - origin
    a, b, c = rel[:, 0], rel[:, 1], rel[:, 2]
    ax = a[:, kx] - sx * a[:, kz]
    ay = a[:, ky] - sy * a[:, kz]
    bx = b[:, kx] - sx * b[:, kz]
    by = b[:, ky] - sy * b[:, kz]
    cx = c[:, kx] - sx * c[:, kz]
    cy = c[:, ky] - sy * c[:, kz]

    u = cx * by - cy * bx
    v = ax * cy - ay * cx
    w = bx * ay - by * ax
    inside = ((u >= 0) & (v >= 0) & (w >= 0)) | ((u <= 0) & (v <= 0) & (w <= 0))
    det = u + v + w
    inside &= det != 0

    t_scaled = u * (sz * a[:, kz]) + v * (sz * b[:, kz]) + w * (sz * c[:, kz])
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(inside, t_scaled / np.where(det == 0, 1.0, det), np.inf)
    t[~(t > 0)] = np.inf
    return t


def raycast(meshes: Iterable[TriangleMesh], origin, direction) -> RayHit | None:
    """Nearest hit with positive distance, or None."""
    o = np.asarray(origin, dtype=float)
    d = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValueError("direction must be a unit vector")
    best: RayHit | None = None
    for mesh in meshes:
        if not len(mesh.triangles):
            continue
        center, radius = mesh.bounding_sphere
        oc = center - o
        along = float(oc @ d)
        if along < -radius:
            continue
        if float(oc @ oc) - along * along > radius * radius * (1 + 1e-9) + 1e-12:
            continue
        t = _ray_triangles(o, d, mesh.corners)
        i = int(np.argmin(t))
        if not np.isfinite(t[i]):
            continue
        if best is None or t[i] < best.distance:
            p = o + t[i] * d
            best = RayHit(mesh.chunk_id, i, (float(p[0]), float(p[1]), float(p[2])), float(t[i]))
    return best


# ---------------------------------------------------------------------------
# Selection frusta


@dataclass(frozen=True, eq=False)
class SelectionFrustum:
    """Infinite pyramid from `apex` through four boundary points.

    `boundary_points` are stored counter-clockwise as seen from the apex;
    `normals[i]` is the inward normal of the side plane through the apex
    and points i, i+1.
    """

    apex: np.ndarray
    boundary_points: np.ndarray
    normals: np.ndarray

    def signed_distances(self, points) -> np.ndarray:
        """(n, 4) distances to each side plane, positive inside."""
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        return (p - self.apex) @ self.normals.T

    def contains(self, points) -> np.ndarray:
        return np.all(self.signed_distances(points) >= 0.0, axis=1)


def build_frustum(apex, points: Sequence) -> SelectionFrustum:
    apex = np.asarray(apex, dtype=float)
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) != 4:
        raise DegenerateSelection("a selection needs exactly four points")
    if np.any(np.linalg.norm(pts - apex, axis=1) <= 1e-6):
        raise DegenerateSelection("a selection point coincides with the apex")
    for i in range(4):
        for j in range(i + 1, 4):
            if np.linalg.norm(pts[i] - pts[j]) <= 1e-6:
                raise DegenerateSelection("selection points must be distinct")

    rays = pts - apex
    view = rays.mean(axis=0)
    nxt = np.roll(rays, -1, axis=0)
    crosses = np.cross(rays, nxt)
    winding = float(np.sum(crosses @ view))
    scale = float(np.linalg.norm(view) * np.sum(np.linalg.norm(rays, axis=1) * np.linalg.norm(nxt, axis=1)))
    if scale == 0 or abs(winding) <= 1e-9 * scale:
        raise DegenerateSelection("apex lies in the plane of the selection")
    if winding > 0:
        # clockwise from the apex: keep the first point, reverse the rest
        pts = pts[[0, 3, 2, 1]]
        rays = pts - apex

    nxt = np.roll(rays, -1, axis=0)
    normals = np.cross(nxt, rays)
    lengths = np.linalg.norm(normals, axis=1)
    pair_scale = np.linalg.norm(rays, axis=1) * np.linalg.norm(nxt, axis=1)
    if np.any(lengths <= 1e-12 * pair_scale):
        raise DegenerateSelection("two selection points are collinear with the apex")
    normals = normals / lengths[:, None]

    dists = rays @ normals.T
    tol = 1e-9 * float(np.max(np.linalg.norm(rays, axis=1)))
    if np.any(dists < -tol) or np.any(view @ normals.T <= 0):
        raise DegenerateSelection("selection quad is not convex as seen from the apex")
    return SelectionFrustum(apex, pts, normals)


@dataclass(frozen=True, eq=False)
class Selection:
    mesh: TriangleMesh
    sources: list[tuple[int, int]] = field(default_factory=list)  # (chunk_id, triangle)


def select_triangles(meshes: Iterable[TriangleMesh], frustum: SelectionFrustum, chunk_id: int = 0) -> Selection:
    """Triangles whose three corners are all inside the frustum."""
    blocks_v, blocks_t, blocks_c, sources = [], [], [], []
    all_colored = True
    offset = 0
    for mesh in meshes:
        if not len(mesh.triangles):
            continue
        inside_v = frustum.contains(mesh.vertices)
        keep = np.flatnonzero(np.all(inside_v[mesh.triangles], axis=1))
        if not len(keep):
            continue
        tris = mesh.triangles[keep]
        used, inverse = np.unique(tris, return_inverse=True)
        blocks_v.append(mesh.vertices[used])
        blocks_t.append(inverse.reshape(-1, 3) + offset)
        if mesh.colors is None:
            all_colored = False
        else:
            blocks_c.append(mesh.colors[used])
        offset += len(used)
        sources.extend((mesh.chunk_id, int(i)) for i in keep)
    if not sources:
        raise EmptySelection("no triangle lies inside the selection frustum")
    colors = np.vstack(blocks_c) if all_colored else None
    out = TriangleMesh(np.vstack(blocks_v), np.vstack(blocks_t), colors, chunk_id)
    return Selection(out, sources)


def is_watertight(mesh: TriangleMesh) -> bool:
    """Every undirected edge is shared by exactly two triangles."""
    if not len(mesh.triangles):
        return False
    _, counts = _edges(mesh.triangles)
    return bool(np.all(counts == 2))


def euler_characteristic(mesh: TriangleMesh) -> int:
    edges, _ = _edges(mesh.triangles)
    n_vertices = len(np.unique(mesh.triangles))
    return int(n_vertices - len(edges) + len(mesh.triangles))


def _edges(triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0, return_counts=True)


def weld_vertices(vertices, triangles, tol: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Merge vertices closer than `tol` and drop triangles that collapse.

    Returns (vertices, triangles, kept) where `kept` indexes the surviving
    input vertices, so per-vertex attributes can be carried along.
    """
    v = np.asarray(vertices, dtype=float).reshape(-1, 3)
    t = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    pairs = cKDTree(v).query_pairs(tol, output_type="ndarray")
    if not len(pairs):
        return v, t, np.arange(len(v))
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(len(v), len(v)))
    _, label = connected_components(graph, directed=False)
    # each cluster is represented by its lowest input index
    rep = np.full(label.max() + 1, len(v))
    np.minimum.at(rep, label, np.arange(len(v)))
    t = rep[label][t]
    t = t[(t[:, 0] != t[:, 1]) & (t[:, 1] != t[:, 2]) & (t[:, 2] != t[:, 0])]
    kept = np.unique(t)
    remap = np.full(len(v), -1)
    remap[kept] = np.arange(len(kept))
    return v[kept], remap[t], kept
