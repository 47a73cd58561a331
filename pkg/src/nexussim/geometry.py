"""
Rotations, similarity transforms, anchor alignment, the dual-lens
equidistant fisheye model and the monocular eye-rig adjustment.

Quaternions are (w, x, y, z) tuples.  World space is y-up.  Lens and
camera frames look down +z, with +x mapping to image +u and +y to +v.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import DegenerateAnchors, InvalidRig, OutOfLensField

Vec3 = tuple[float, float, float]
Quat = tuple[float, float, float, float]

# f32 wire values carry ~1e-7 of norm error; in-process values stay within 1e-9
QUAT_NORM_TOL = 1e-6
MARKER_HALF_WIDTH = 0.05


def quat_normalize(q) -> Quat:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0:
        raise ValueError("cannot normalise a zero quaternion")
    return tuple(float(c) for c in q / n)


def quat_mul(a, b) -> Quat:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def quat_conj(q) -> Quat:
    return (q[0], -q[1], -q[2], -q[3])


def quat_from_axis_angle(axis, angle: float) -> Quat:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    s = math.sin(angle / 2.0)
    return (math.cos(angle / 2.0), axis[0] * s, axis[1] * s, axis[2] * s)


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_matrix(m) -> Quat:
    """Shepperd's method; returns a unit quaternion with w >= 0."""
    m = np.asarray(m, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = (0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s)
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = ((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s)
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = ((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s)
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = ((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s)
    q = quat_normalize(q)
    return q if q[0] >= 0 else tuple(-c for c in q)


def quat_rotate(q, v) -> np.ndarray:
    return quat_to_matrix(q) @ np.asarray(v, dtype=float)


def random_quat(rng: np.random.Generator) -> Quat:
    """Uniformly distributed rotation."""
    q = rng.normal(size=4)
    return quat_normalize(q)


def angle_between(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return math.atan2(np.linalg.norm(np.cross(a, b)), float(np.dot(a, b)))


def _vec(v) -> Vec3:
    x, y, z = (float(c) for c in v)
    return (x, y, z)


@dataclass(frozen=True)
class SimTransform:
    """x -> scale * R x + translation."""

    rotation: Quat = (1.0, 0.0, 0.0, 0.0)
    translation: Vec3 = (0.0, 0.0, 0.0)
    scale: float = 1.0

    def __post_init__(self):
        q = tuple(float(c) for c in self.rotation)
        if len(q) != 4:
            raise ValueError("rotation must have 4 components")
        norm = math.sqrt(sum(c * c for c in q))
        if not math.isfinite(norm) or abs(norm - 1.0) > QUAT_NORM_TOL:
            raise ValueError(f"rotation is not a unit quaternion (|q|={norm})")
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", _vec(self.translation))
        s = float(self.scale)
        if not (math.isfinite(s) and s > 0):
            raise ValueError(f"scale must be positive, got {s}")
        object.__setattr__(self, "scale", s)

    @classmethod
    def identity(cls) -> SimTransform:
        return cls()

    @classmethod
    def from_matrix(cls, rotation, translation=(0, 0, 0), scale: float = 1.0) -> SimTransform:
        return cls(quat_from_matrix(rotation), translation, scale)

    @property
    def position(self) -> np.ndarray:
        return np.array(self.translation)

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation_matrix()
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Transform a point (3,) or points (n, 3)."""
        p = np.asarray(points, dtype=float)
        return self.scale * (p @ self.rotation_matrix().T) + np.array(self.translation)

    def apply_vector(self, vectors) -> np.ndarray:
        """Rotate and scale, no translation."""
        v = np.asarray(vectors, dtype=float)
        return self.scale * (v @ self.rotation_matrix().T)

    def compose(self, other: SimTransform) -> SimTransform:
        """self ∘ other: apply `other` first."""
        q = quat_normalize(quat_mul(quat_normalize(self.rotation), quat_normalize(other.rotation)))
        t = self.scale * (self.rotation_matrix() @ np.array(other.translation)) + np.array(self.translation)
        return SimTransform(q, t, self.scale * other.scale)

    def __matmul__(self, other: SimTransform) -> SimTransform:
        return self.compose(other)

    def inverse(self) -> SimTransform:
        q = quat_conj(quat_normalize(self.rotation))
        inv_s = 1.0 / self.scale
        t = -inv_s * (quat_to_matrix(q) @ np.array(self.translation))
        return SimTransform(q, t, inv_s)

    def with_scale(self, scale: float) -> SimTransform:
        return replace(self, scale=scale)

    def is_close(self, other: SimTransform, tol: float = 1e-9) -> bool:
        if abs(self.scale - other.scale) > tol:
            return False
        if np.max(np.abs(self.position - other.position)) > tol:
            return False
        return bool(np.max(np.abs(self.rotation_matrix() - other.rotation_matrix())) <= tol)

    def as_list(self) -> list[float]:
        return [*self.rotation, *self.translation, self.scale]


def random_transform(rng: np.random.Generator, *, max_translation: float = 5.0,
                     scale_range: tuple[float, float] = (0.2, 5.0)) -> SimTransform:
    t = rng.uniform(-max_translation, max_translation, size=3)
    s = math.exp(rng.uniform(math.log(scale_range[0]), math.log(scale_range[1])))
    return SimTransform(random_quat(rng), t, s)


# ---------------------------------------------------------------------------
# Anchor alignment


@dataclass(frozen=True)
class AnchorObservation:
    anchor_id: str  # "front" | "back"
    observed: SimTransform  # marker pose in the peer's tracking space
    canonical: SimTransform  # marker pose relative to the camera lenses


def marker_corners(pose: SimTransform, half_width: float = MARKER_HALF_WIDTH) -> np.ndarray:
    h = half_width
    local = np.array([[-h, -h, 0.0], [h, -h, 0.0], [h, h, 0.0], [-h, h, 0.0]])
    return pose.apply(local)


def _check_observations(observations: Sequence[AnchorObservation]) -> None:
    if len(observations) != 2:
        raise ValueError("alignment needs exactly two anchor observations")
    if observations[0].anchor_id == observations[1].anchor_id:
        raise ValueError("anchor ids must be distinct")
    for ob in observations:
        if abs(ob.observed.scale - 1.0) > 1e-9 or abs(ob.canonical.scale - 1.0) > 1e-9:
            raise ValueError("anchor poses must be rigid (scale 1)")


def align_spaces(observations: Sequence[AnchorObservation]) -> SimTransform:
    """Rigid transform taking peer-space points onto camera space.

    Least-squares fit of the eight marker corners (Kabsch / absolute
    orientation via SVD).
    """
    _check_observations(observations)
    a, b = observations
    if np.linalg.norm(a.observed.position - b.observed.position) <= 1e-6:
        raise DegenerateAnchors("both anchors observed at the same position")

    src = np.vstack([marker_corners(o.observed) for o in observations])
    dst = np.vstack([marker_corners(o.canonical) for o in observations])
    src_c = src.mean(axis=0)
    dst_c = dst.mean(axis=0)
    h = (src - src_c).T @ (dst - dst_c)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = dst_c - rot @ src_c
    return SimTransform.from_matrix(rot, t)


def alignment_residual(observations: Sequence[AnchorObservation], transform: SimTransform) -> float:
    """Largest corner mismatch (metres) after applying `transform`."""
    src = np.vstack([marker_corners(o.observed) for o in observations])
    dst = np.vstack([marker_corners(o.canonical) for o in observations])
    return float(np.max(np.linalg.norm(transform.apply(src) - dst, axis=1)))


# ---------------------------------------------------------------------------
# Fisheye


def _back_lens() -> Quat:
    return quat_from_axis_angle((0, 1, 0), math.pi)


@dataclass(frozen=True)
class FisheyeModel:
    """Two back-to-back equidistant lenses sharing one square image size.

    `focal` defaults to image_size / pi so a lens covers exactly a hemisphere.
    """

    image_size: int
    focal: float | None = None
    principal_point: tuple[float, float] | None = None
    lens_rotations: tuple[Quat, Quat] = field(default_factory=lambda: ((1.0, 0.0, 0.0, 0.0), _back_lens()))

    def __post_init__(self):
        if self.image_size <= 0:
            raise ValueError("image_size must be positive")
        if self.focal is None:
            object.__setattr__(self, "focal", self.image_size / math.pi)
        if self.principal_point is None:
            object.__setattr__(self, "principal_point", (self.image_size / 2.0, self.image_size / 2.0))
        if not self.focal > 0:
            raise ValueError("focal must be positive")
        if self.focal * math.pi / 2 > self.image_size / 2 + 1e-9:
            raise ValueError("a hemisphere does not fit in the image at this focal length")
        rots = tuple(quat_normalize(q) for q in self.lens_rotations)
        if len(rots) != 2:
            raise ValueError("exactly two lenses")
        object.__setattr__(self, "lens_rotations", rots)

    @cached_property
    def _matrices(self) -> tuple[np.ndarray, np.ndarray]:
        return tuple(quat_to_matrix(q) for q in self.lens_rotations)

    def forward(self, lens: int) -> np.ndarray:
        return self._matrices[lens][:, 2].copy()


def fisheye_project(model: FisheyeModel, direction) -> tuple[int, float, float]:
    d = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("direction must be a unit vector")
    mats = model._matrices
    dots = [float(mats[i][:, 2] @ d) for i in (0, 1)]
    # ties (theta = pi/2 on both lenses) go to lens 0
    lens = 1 if dots[1] > dots[0] + 1e-12 else 0
    local = mats[lens].T @ d
    planar = math.hypot(local[0], local[1])
    cu, cv = model.principal_point
    if planar == 0.0:
        return lens, cu, cv
    theta = math.atan2(planar, local[2])
    r = model.focal * theta
    return lens, cu + r * local[0] / planar, cv + r * local[1] / planar


def fisheye_unproject(model: FisheyeModel, lens: int, u: float, v: float) -> np.ndarray:
    cu, cv = model.principal_point
    du, dv = u - cu, v - cv
    r = math.hypot(du, dv)
    if r > model.focal * math.pi / 2 + 1.0:
        raise OutOfLensField(f"pixel radius {r:.3f} beyond the lens field")
    if r == 0.0:
        local = np.array([0.0, 0.0, 1.0])
    else:
        theta = r / model.focal
        s = math.sin(theta)
        local = np.array([s * du / r, s * dv / r, math.cos(theta)])
    out = model._matrices[lens] @ local
    return out / np.linalg.norm(out)


# ---------------------------------------------------------------------------
# Stereo rig


@dataclass(frozen=True)
class StereoRig:
    left_eye: SimTransform
    right_eye: SimTransform
    ipd: float
    monocular: bool = False


def apply_monocular(rig: StereoRig) -> StereoRig:
    """Slide the right eye onto the left one so both render the same view."""
    if not rig.ipd > 0:
        raise InvalidRig(f"ipd must be positive, got {rig.ipd}")
    if rig.monocular:
        return rig
    right_axis = rig.right_eye.rotation_matrix()[:, 0]
    moved = replace(rig.right_eye, translation=tuple(rig.right_eye.position - rig.ipd * right_axis))
    return replace(rig, right_eye=moved, monocular=True)
