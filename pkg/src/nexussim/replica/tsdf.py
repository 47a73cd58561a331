"""
Truncated signed-distance fusion of masked depth frames, and marching cubes.

Conventions: positive = empty space, negative = inside the object.
Voxels never observed count as inside, so partial coverage still closes
the surface; space seen in front of background pixels is carved, and
voxels on or below the support plane are forced empty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage import measure

from ..errors import EmptyGrid, InsufficientFrames
from ..geometry import SimTransform
from ..mesh import TriangleMesh, weld_vertices
from .capture import MIN_FRAMES, Intrinsics
from .depth import unproject
from .plane import PlaneModel

DEFAULT_VOXEL = 0.005
TRUNCATION_VOXELS = 4.0
BOUNDS_MARGIN = 0.10
WELD_VOXELS = 1e-3


@dataclass(eq=False)
class RegisteredFrame:
    """Colour image with depth already registered to the colour camera."""

    color: np.ndarray  # (h, w, 3) uint8
    depth: np.ndarray  # (h, w) uint16 mm
    intrinsics: Intrinsics
    camera_pose: SimTransform


@dataclass(eq=False)
class TsdfGrid:
    origin: np.ndarray  # centre of voxel (0, 0, 0)
    voxel_size: float
    dims: tuple[int, int, int]
    tsdf_sum: np.ndarray
    weight: np.ndarray
    color_sum: np.ndarray
    color_weight: np.ndarray

    @classmethod
    def empty(cls, origin, voxel_size: float, dims) -> TsdfGrid:
        dims = tuple(int(x) for x in dims)
        return cls(np.asarray(origin, dtype=float), float(voxel_size), dims, np.zeros(dims), np.zeros(dims),
                   np.zeros(dims + (3,)), np.zeros(dims))

    @property
    def truncation(self) -> float:
        return TRUNCATION_VOXELS * self.voxel_size

    @property
    def tsdf(self) -> np.ndarray:
        """Fused values in [-1, 1]; unobserved voxels read -1."""
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = np.where(self.weight > 0, self.tsdf_sum / self.weight, -1.0)
        return mean.astype(np.float32)

    @property
    def colors(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            c = self.color_sum / self.color_weight[..., None]
        return np.where(self.color_weight[..., None] > 0, c, 0.0)

    def centers(self) -> np.ndarray:
        idx = np.indices(self.dims).reshape(3, -1).T
        return self.origin + idx * self.voxel_size


def grid_for_points(points: np.ndarray, voxel_size: float, margin: float = BOUNDS_MARGIN) -> TsdfGrid:
    lo, hi = points.min(axis=0), points.max(axis=0)
    pad = margin * (hi - lo) + voxel_size
    lo, hi = lo - pad, hi + pad
    dims = np.ceil((hi - lo) / voxel_size).astype(int) + 1
    return TsdfGrid.empty(lo, voxel_size, dims)


def masked_world_points(frames, masks) -> np.ndarray:
    out = []
    for f, m in zip(frames, masks):
        pix = np.argwhere(m & (f.depth > 0))
        if len(pix):
            out.append(f.camera_pose.apply(unproject(f.depth, f.intrinsics, pix)))
    return np.vstack(out) if out else np.zeros((0, 3))


def integrate(grid: TsdfGrid, frame: RegisteredFrame, mask: np.ndarray) -> None:
    centers = grid.centers()
    cam = frame.camera_pose.inverse().apply(centers)
    z = cam[:, 2]
    h, w = frame.depth.shape
    intr = frame.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.rint(intr.fx * cam[:, 0] / z + intr.cx)
        v = np.rint(intr.fy * cam[:, 1] / z + intr.cy)
    visible = (z > 1e-6) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
    idx = np.flatnonzero(visible)
    ui, vi = u[idx].astype(np.int64), v[idx].astype(np.int64)
    depth = frame.depth[vi, ui].astype(float) / 1000.0
    in_mask = mask[vi, ui]
    valid = depth > 0
    sdf = depth - z[idx]
    trunc = grid.truncation

    # object pixels: standard truncated update
    obj = in_mask & valid & (sdf >= -trunc)
    # background pixels: space in front of the return is empty; no return at all empties the whole ray
    bg = ~in_mask & ((valid & (sdf > 0)) | ~valid)

    flat_sum = grid.tsdf_sum.reshape(-1)
    flat_w = grid.weight.reshape(-1)
    sel = idx[obj]
    flat_sum[sel] += np.minimum(1.0, sdf[obj] / trunc)
    flat_w[sel] += 1.0
    sel_bg = idx[bg]
    flat_sum[sel_bg] += 1.0
    flat_w[sel_bg] += 1.0

    near = obj & (np.abs(sdf) <= trunc)
    sel_c = idx[near]
    rgb = frame.color[vi[near], ui[near]].astype(float) / 255.0
    grid.color_sum.reshape(-1, 3)[sel_c] += rgb
    grid.color_weight.reshape(-1)[sel_c] += 1.0


def fuse_tsdf(frames, masks, *, voxel_size: float = DEFAULT_VOXEL, plane: PlaneModel | None = None,
              grid: TsdfGrid | None = None) -> TsdfGrid:
    """Fuse registered frames; the grid defaults to the masked-point bounds plus 10 %."""
    frames, masks = list(frames), list(masks)
    if len(frames) < MIN_FRAMES:
        raise InsufficientFrames(f"{len(frames)} frames; fusion needs at least {MIN_FRAMES}")
    if len(masks) != len(frames):
        raise ValueError("one mask per frame")
    up = 1.0
    if plane is not None:
        up = 1.0 if np.mean(plane.signed_distance([f.camera_pose.position for f in frames])) >= 0 else -1.0
    if grid is None:
        pts = masked_world_points(frames, masks)
        if plane is not None:
            # closing can pull background pixels into the mask; they must not size the grid
            pts = pts[up * plane.signed_distance(pts) > plane.inlier_threshold]
        if not len(pts):
            raise EmptyGrid("no masked depth samples")
        grid = grid_for_points(pts, voxel_size)
    for f, m in zip(frames, masks):
        integrate(grid, f, np.asarray(m, dtype=bool))
    if plane is not None:
        floor = (up * plane.signed_distance(grid.centers()) < 0.5 * grid.voxel_size).reshape(grid.dims)
        grid.tsdf_sum[floor] = 1.0
        grid.weight[floor] = 1.0
    return grid


def extract_mesh(grid: TsdfGrid, iso: float = 0.0) -> TriangleMesh:
    """Marching cubes over the zero crossing with trilinear vertex colours."""
    vol = np.pad(grid.tsdf.astype(float), 1, constant_values=1.0)
    if not (vol.min() < iso < vol.max()):
        raise EmptyGrid("no surface crossing in the grid")
    verts, faces, _, _ = measure.marching_cubes(vol, level=iso, method="lewiner")
    # marching cubes can emit slivers whose corners nearly coincide; collapsing them keeps the surface closed
    verts, faces, kept = weld_vertices(verts, faces, WELD_VOXELS)
    ijk = verts - 1.0
    positions = grid.origin + ijk * grid.voxel_size
    colors = _trilinear_colors(grid, ijk)
    return TriangleMesh(positions, faces, colors)


def _trilinear_colors(grid: TsdfGrid, ijk: np.ndarray) -> np.ndarray:
    dims = np.array(grid.dims)
    base = np.clip(np.floor(ijk).astype(int), 0, dims - 2)
    frac = np.clip(ijk - base, 0.0, 1.0)
    csum = np.zeros((len(ijk), 3))
    wsum = np.zeros(len(ijk))
    cw = grid.color_weight
    avg = grid.colors
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                i, j, k = base[:, 0] + dx, base[:, 1] + dy, base[:, 2] + dz
                wt = (np.where(dx, frac[:, 0], 1 - frac[:, 0]) * np.where(dy, frac[:, 1], 1 - frac[:, 1])
                      * np.where(dz, frac[:, 2], 1 - frac[:, 2]))
                wt = wt * (cw[i, j, k] > 0)
                csum += wt[:, None] * avg[i, j, k]
                wsum += wt
    # vertices with no observed corner take the colour of the nearest observed voxel
    missing = wsum <= 0
    if missing.any():
        if cw.any():
            _, nearest = ndimage.distance_transform_edt(cw <= 0, return_indices=True)
            cell = np.clip(np.rint(ijk[missing]).astype(int), 0, dims - 1)
            src = nearest[:, cell[:, 0], cell[:, 1], cell[:, 2]]
            csum[missing] = avg[src[0], src[1], src[2]]
        else:
            csum[missing] = 0.5
        wsum[missing] = 1.0
    return np.clip(csum / wsum[:, None], 0.0, 1.0)
