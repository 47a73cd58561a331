"""
Capture directories, PPM/PGM image IO, and a synthetic RGBD generator.

Layout::

    manifest.json
    color_000.ppm   (P6, 8-bit RGB)
    depth_000.pgm   (P5, 16-bit big-endian, millimetres; 0 = invalid)

Poses in the manifest are 7-tuples ``[x, y, z, qw, qx, qy, qz]`` giving
the colour camera in world space. Cameras look down +z with +x to the
right of the image and +y down.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ManifestError
from ..geometry import SimTransform
from .plane import PlaneModel

DEFAULT_FPS = 5.0
DEFAULT_DURATION_S = 15.0
MIN_FRAMES = 8


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def as_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    def pixel_rays(self, width: int, height: int) -> np.ndarray:
        """(h, w, 3) camera-space rays with z = 1 through pixel centres."""
        u, v = np.meshgrid(np.arange(width, dtype=float), np.arange(height, dtype=float))
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)


@dataclass(eq=False)
class RgbdFrame:
    color: np.ndarray  # (h, w, 3) uint8
    depth: np.ndarray  # (hd, wd) uint16 millimetres
    color_intrinsics: Intrinsics
    depth_intrinsics: Intrinsics
    depth_to_color: SimTransform
    camera_pose: SimTransform  # colour camera -> world

    def __post_init__(self):
        if self.color.ndim != 3 or self.color.shape[2] != 3 or 0 in self.color.shape:
            raise ValueError("colour image must be (h, w, 3) and nonempty")
        if self.depth.ndim != 2 or 0 in self.depth.shape:
            raise ValueError("depth image must be (h, w) and nonempty")


def pose_to_list(t: SimTransform) -> list[float]:
    return [*t.translation, *t.rotation]


def pose_from_list(v) -> SimTransform:
    if len(v) != 7:
        raise ValueError("pose needs 7 numbers: x y z qw qx qy qz")
    q = np.asarray(v[3:], dtype=float)
    return SimTransform(tuple(q / np.linalg.norm(q)), tuple(v[:3]))


@dataclass
class CaptureManifest:
    frames: list[dict]  # {"color": str, "depth": str, "pose": SimTransform}
    color_intrinsics: Intrinsics
    depth_intrinsics: Intrinsics
    depth_to_color: SimTransform
    plane_seed: PlaneModel | None = None
    fps: float = DEFAULT_FPS
    duration_s: float = DEFAULT_DURATION_S
    seed: int = 0
    root: Path = field(default_factory=Path)

    def to_json(self) -> dict:
        return {
            "fps": self.fps,
            "duration_s": self.duration_s,
            "seed": self.seed,
            "color_intrinsics": self.color_intrinsics.as_dict(),
            "depth_intrinsics": self.depth_intrinsics.as_dict(),
            "depth_to_color": pose_to_list(self.depth_to_color),
            "plane_seed": None if self.plane_seed is None else {
                "normal": list(map(float, self.plane_seed.normal)), "d": float(self.plane_seed.d)},
            "frames": [{"color": f["color"], "depth": f["depth"], "pose": pose_to_list(f["pose"])}
                       for f in self.frames],
        }

    @classmethod
    def from_json(cls, data: dict, root: Path) -> CaptureManifest:
        try:
            seed_plane = data.get("plane_seed")
            plane = None if seed_plane is None else PlaneModel(np.asarray(seed_plane["normal"], dtype=float),
                                                               float(seed_plane["d"]))
            frames = [{"color": f["color"], "depth": f["depth"], "pose": pose_from_list(f["pose"])}
                      for f in data["frames"]]
            return cls(frames, Intrinsics(**data["color_intrinsics"]), Intrinsics(**data["depth_intrinsics"]),
                       pose_from_list(data.get("depth_to_color", [0, 0, 0, 1, 0, 0, 0])), plane,
                       float(data.get("fps", DEFAULT_FPS)), float(data.get("duration_s", DEFAULT_DURATION_S)),
                       int(data.get("seed", 0)), Path(root))
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"bad manifest: {exc!r}") from None

    def load_frame(self, i: int) -> RgbdFrame:
        f = self.frames[i]
        try:
            color = read_ppm(self.root / f["color"])
            depth = read_pgm16(self.root / f["depth"])
        except (OSError, ValueError) as exc:
            raise ManifestError(f"frame {i}: {exc}") from None
        return RgbdFrame(color, depth, self.color_intrinsics, self.depth_intrinsics, self.depth_to_color, f["pose"])


def load_capture(directory) -> CaptureManifest:
    root = Path(directory)
    try:
        data = json.loads((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest: {exc}") from None
    if not isinstance(data, dict):
        raise ManifestError("manifest must be a JSON object")
    return CaptureManifest.from_json(data, root)


# ---------------------------------------------------------------------------
# Netpbm


def _read_header(data: bytes, magic: bytes) -> tuple[list[int], int]:
    if not data.startswith(magic):
        raise ValueError(f"not a {magic.decode()} file")
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated header")
        tokens.append(int(data[start:pos]))
    return tokens, pos + 1  # one whitespace byte ends the header


def write_ppm(path, image: np.ndarray) -> None:
    img = np.ascontiguousarray(image, dtype=np.uint8)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (w, h, maxval), pos = _read_header(data, b"P6")
    if maxval != 255:
        raise ValueError("only 8-bit PPM is supported")
    body = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return body.reshape(h, w, 3).copy()


def write_pgm16(path, image: np.ndarray) -> None:
    img = np.ascontiguousarray(image, dtype=">u2")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + img.tobytes())


def read_pgm16(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (w, h, maxval), pos = _read_header(data, b"P5")
    if maxval < 256:
        body = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    else:
        body = np.frombuffer(data, dtype=">u2", count=w * h, offset=pos)
    return body.reshape(h, w).astype(np.uint16)


# ---------------------------------------------------------------------------
# Synthetic scenes


def look_at(position, target) -> SimTransform:
    """Camera pose at `position` looking at `target`, world +y up."""
    c = np.asarray(position, dtype=float)
    f = np.asarray(target, dtype=float) - c
    f /= np.linalg.norm(f)
    right = np.cross(f, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    return SimTransform.from_matrix(np.column_stack([right, down, f]), c)


@dataclass(frozen=True)
class SyntheticScene:
    """Object resting on the y = 0 table plane."""

    shape: str = "sphere"  # "sphere" | "box"
    radius: float = 0.08
    half_extents: tuple[float, float, float] = (0.05, 0.06, 0.04)

    @property
    def center(self) -> np.ndarray:
        if self.shape == "sphere":
            return np.array([0.0, self.radius, 0.0])
        return np.array([0.0, self.half_extents[1], 0.0])

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Ray parameter of the first hit (inf on miss) and whether it is the object."""
        t_obj = self._intersect_object(origins, dirs)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_plane = np.where(dirs[..., 1] < 0, -origins[..., 1] / dirs[..., 1], np.inf)
        t_plane = np.where(t_plane > 0, t_plane, np.inf)
        is_obj = t_obj <= t_plane
        return np.minimum(t_obj, t_plane), is_obj & np.isfinite(t_obj)

    def _intersect_object(self, o, d):
        rel = o - self.center
        if self.shape == "sphere":
            a = np.einsum("...i,...i", d, d)
            b = np.einsum("...i,...i", rel, d)
            c = np.einsum("...i,...i", rel, rel) - self.radius ** 2
            disc = b * b - a * c
            with np.errstate(invalid="ignore"):
                t = (-b - np.sqrt(disc)) / a
            return np.where((disc >= 0) & (t > 0), t, np.inf)
        h = np.asarray(self.half_extents)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-h - rel) / d
            t2 = (h - rel) / d
        tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
        return np.where((tmax >= tmin) & (tmin > 0), tmin, np.inf)

    def shade(self, points: np.ndarray, is_obj: np.ndarray) -> np.ndarray:
        """Object: colour varies with height. Table: grey checkerboard."""
        y = points[..., 1]
        obj = np.stack([0.75 + 0.2 * np.clip(y / 0.16, 0, 1), 0.25 + 0.3 * np.clip(y / 0.16, 0, 1),
                        0.2 * np.ones_like(y)], axis=-1)
        checker = ((np.floor(points[..., 0] / 0.05) + np.floor(points[..., 2] / 0.05)) % 2)[..., None]
        table = 0.45 + 0.15 * checker * np.ones(3)
        rgb = np.where(is_obj[..., None], obj, table)
        return np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8)


def render_depth(scene: SyntheticScene, intr: Intrinsics, pose: SimTransform, width: int, height: int,
                 rng: np.random.Generator | None = None, noise_sigma: float = 0.0,
                 max_range: float = 4.0) -> tuple[np.ndarray, np.ndarray]:
    """Z-depth image in metres (0 where nothing is hit) and object-hit mask."""
    rays = intr.pixel_rays(width, height)
    dirs = pose.apply_vector(rays)
    origins = np.broadcast_to(np.asarray(pose.translation), dirs.shape)
    t, is_obj = scene.intersect(origins, dirs)
    z = np.where(np.isfinite(t), t, 0.0)  # ray z-component is 1 in camera space
    if rng is not None and noise_sigma > 0:
        z = np.where(z > 0, z + rng.normal(0.0, noise_sigma, z.shape), 0.0)
    z = np.where((z > 0) & (z < max_range), z, 0.0)
    return z, is_obj & (z > 0)


def render_color(scene: SyntheticScene, intr: Intrinsics, pose: SimTransform, width: int, height: int) -> np.ndarray:
    rays = intr.pixel_rays(width, height)
    dirs = pose.apply_vector(rays)
    origins = np.broadcast_to(np.asarray(pose.translation), dirs.shape)
    t, is_obj = scene.intersect(origins, dirs)
    t = np.where(np.isfinite(t), t, 0.0)
    img = scene.shade(origins + t[..., None] * dirs, is_obj)
    img[t == 0] = 0
    return img


def helix_poses(n: int, target, distance: float = 0.45, elev_deg=(15.0, 50.0), turns: float = 1.0) -> list[SimTransform]:
    target = np.asarray(target, dtype=float)
    poses = []
    for i in range(n):
        s = i / max(n - 1, 1)
        az = 2 * math.pi * turns * i / n
        el = math.radians(elev_deg[0] + (elev_deg[1] - elev_deg[0]) * s)
        offset = distance * np.array([math.cos(el) * math.cos(az), math.sin(el), math.cos(el) * math.sin(az)])
        poses.append(look_at(target + offset, target))
    return poses


COLOR_SIZE = (320, 240)
DEPTH_SIZE = (400, 300)
COLOR_INTRINSICS = Intrinsics(300.0, 300.0, 159.5, 119.5)
DEPTH_INTRINSICS = Intrinsics(375.0, 375.0, 199.5, 149.5)
DEPTH_BASELINE = 0.02


def synth_capture(directory, shape: str = "sphere", *, n_frames: int | None = None, seed: int = 0,
                  noise_sigma: float = 0.002, fps: float = DEFAULT_FPS,
                  duration_s: float = DEFAULT_DURATION_S) -> CaptureManifest:
    """Write a synthetic capture of a sphere or box on a table."""
    if shape not in ("sphere", "box"):
        raise ValueError(f"unknown shape {shape!r}")
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    scene = SyntheticScene(shape)
    n = n_frames if n_frames is not None else int(round(fps * duration_s))
    # depth camera sits 2 cm to the right of the colour camera
    depth_to_color = SimTransform(translation=(DEPTH_BASELINE, 0.0, 0.0))

    frames = []
    for i, pose in enumerate(helix_poses(n, scene.center)):
        color = render_color(scene, COLOR_INTRINSICS, pose, *COLOR_SIZE)
        depth_pose = pose.compose(depth_to_color)
        z, _ = render_depth(scene, DEPTH_INTRINSICS, depth_pose, *DEPTH_SIZE, rng=rng, noise_sigma=noise_sigma)
        depth_mm = np.clip(np.rint(z * 1000.0), 0, 65535).astype(np.uint16)
        cname, dname = f"color_{i:03d}.ppm", f"depth_{i:03d}.pgm"
        write_ppm(root / cname, color)
        write_pgm16(root / dname, depth_mm)
        frames.append({"color": cname, "depth": dname, "pose": pose})

    # stand-in for the headset's plane detector: a slightly tilted, offset floor
    tilt = np.radians(2.0)
    seed_normal = np.array([math.sin(tilt), math.cos(tilt), 0.0])
    manifest = CaptureManifest(frames, COLOR_INTRINSICS, DEPTH_INTRINSICS, depth_to_color,
                               PlaneModel(seed_normal, 0.005), fps, duration_s, seed, root)
    (root / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=1, sort_keys=True) + "\n")
    return manifest
