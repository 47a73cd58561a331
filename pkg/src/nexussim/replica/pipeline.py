"""
Replica pipeline: capture directory -> coloured OBJ.

Stages run in order (reproject, plane, coarse, refine, pose, reconstruct,
extract, postprocess, obj). The refine, pose and reconstruct stages are
swappable through `StageConfig`; an ``external:CMD`` reconstructor runs
``CMD <capture_dir> <out.obj>`` as a subprocess and reads the OBJ back.
"""

from __future__ import annotations

import hashlib
import json
import shlex
import subprocess
import tempfile
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..errors import InsufficientFrames, ManifestError, StageError
from ..objfile import ColoredObjDocument, parse_obj, write_obj
from .capture import MIN_FRAMES, CaptureManifest, load_capture
from .depth import reproject_depth, unproject
from .masks import coarse_mask, refine_mask_identity, refine_mask_morph
from .plane import DEFAULT_THRESHOLD, fit_plane_ransac
from .postprocess import postprocess
from .tsdf import DEFAULT_VOXEL, RegisteredFrame, extract_mesh, fuse_tsdf

STAGES = ("load", "reproject", "plane", "coarse", "refine", "pose", "reconstruct", "extract", "postprocess", "obj")
PLANE_SAMPLE_STRIDE = 4
CACHE_DIR = ".replica_cache"


@dataclass(frozen=True)
class StageConfig:
    refine: str = "morph"  # morph | identity
    pose: str = "passthrough"
    reconstruct: str = "tsdf"  # tsdf | external:CMD
    voxel_size: float = DEFAULT_VOXEL
    plane_threshold: float = DEFAULT_THRESHOLD
    ransac_iterations: int = 200
    smooth_iters: int = 10
    smooth_lambda: float = 0.5
    workers: int = 1

    @classmethod
    def from_overrides(cls, overrides: dict[str, str], **kwargs) -> StageConfig:
        cfg = cls(**kwargs)
        values = {}
        for key, value in overrides.items():
            if key not in cls.__dataclass_fields__:
                raise ValueError(f"unknown stage option {key!r}")
            kind = type(getattr(cfg, key))
            values[key] = kind(value)
        return cls(**{**cfg.__dict__, **values})

    def key(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


@dataclass
class PipelineResult:
    document: ColoredObjDocument
    obj_bytes: bytes
    timings: dict
    frames_used: int = 0
    plane: object = None
    cached: bool = False
    masks: list = field(default_factory=list, repr=False)


def _map(fn: Callable, items, workers: int) -> list:
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _register(manifest: CaptureManifest, i: int) -> RegisteredFrame:
    frame = manifest.load_frame(i)
    return RegisteredFrame(frame.color, reproject_depth(frame), frame.color_intrinsics, frame.camera_pose)


def _reconstruct_external(command: str, manifest: CaptureManifest):
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp) / "external.obj"
        argv = shlex.split(command) + [str(manifest.root), str(out)]
        proc = subprocess.run(argv, capture_output=True, text=True, check=False)
        if proc.returncode != 0:
            raise RuntimeError(f"{argv[0]} exited {proc.returncode}: {proc.stderr.strip()[:200]}")
        return parse_obj(out.read_bytes()).to_mesh()


def run_pipeline(capture: str | Path | CaptureManifest, config: StageConfig | None = None) -> PipelineResult:
    """Run every stage; the first failure raises StageError naming the stage."""
    cfg = config or StageConfig()
    timings: dict[str, float] = {}
    state: dict = {}
    t_start = time.perf_counter()

    def stage(name: str, fn: Callable[[], object]):
        t0 = time.perf_counter()
        try:
            value = fn()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        timings[name] = time.perf_counter() - t0
        return value

    def load():
        manifest = capture if isinstance(capture, CaptureManifest) else load_capture(capture)
        if not manifest.frames:
            raise ManifestError("manifest lists no frames")
        return manifest

    manifest = stage("load", load)
    frames = stage("reproject", lambda: _map(lambda i: _register(manifest, i), range(len(manifest.frames)),
                                              cfg.workers))

    def plane():
        pts = []
        for f in frames:
            sub = np.argwhere(f.depth[::PLANE_SAMPLE_STRIDE, ::PLANE_SAMPLE_STRIDE] > 0) * PLANE_SAMPLE_STRIDE
            pts.append(f.camera_pose.apply(unproject(f.depth, f.intrinsics, sub)))
        points = np.vstack(pts) if pts else np.zeros((0, 3))
        model, _ = fit_plane_ransac(points, manifest.plane_seed, cfg.ransac_iterations, cfg.plane_threshold,
                                    rng=manifest.seed)
        return model

    plane_model = stage("plane", plane)
    coarse = stage("coarse", lambda: _map(
        lambda f: coarse_mask(f.depth, f.intrinsics, f.camera_pose, plane_model), frames, cfg.workers))

    refiners = {"morph": refine_mask_morph, "identity": refine_mask_identity}

    def refine():
        if cfg.refine not in refiners:
            raise ValueError(f"unknown refine stage {cfg.refine!r}")
        return _map(lambda mp: refiners[cfg.refine](*mp), coarse, cfg.workers)

    masks = stage("refine", refine)

    def pose():
        if cfg.pose != "passthrough":
            raise ValueError(f"unknown pose stage {cfg.pose!r}")
        return frames

    frames = stage("pose", pose)

    def reconstruct():
        if cfg.reconstruct == "tsdf":
            return fuse_tsdf(frames, masks, voxel_size=cfg.voxel_size, plane=plane_model)
        if cfg.reconstruct.startswith("external:"):
            if len(frames) < MIN_FRAMES:
                raise InsufficientFrames(f"{len(frames)} frames; reconstruction needs at least {MIN_FRAMES}")
            return _reconstruct_external(cfg.reconstruct.split(":", 1)[1], manifest)
        raise ValueError(f"unknown reconstruct stage {cfg.reconstruct!r}")

    recon = stage("reconstruct", reconstruct)
    raw = stage("extract", lambda: recon if not hasattr(recon, "tsdf") else extract_mesh(recon))
    final = stage("postprocess", lambda: postprocess(raw, cfg.voxel_size, cfg.smooth_iters, cfg.smooth_lambda))
    doc = ColoredObjDocument.from_mesh(final)
    data = stage("obj", lambda: write_obj(doc))

    total = time.perf_counter() - t_start
    report = {"stages": {k: round(v, 6) for k, v in timings.items()}, "total": round(total, 6),
              "frames": len(frames), "vertices": len(doc.vertices), "faces": len(doc.faces)}
    return PipelineResult(doc, data, report, len(frames), plane_model, False, masks)


def capture_digest(directory: Path, config: StageConfig) -> str:
    """Content hash over every capture file plus the stage configuration."""
    h = hashlib.sha256(config.key().encode())
    for path in sorted(p for p in Path(directory).iterdir() if p.is_file()):
        h.update(path.name.encode() + b"\0")
        h.update(hashlib.sha256(path.read_bytes()).digest())
    return h.hexdigest()


def run_cached(directory: str | Path, config: StageConfig | None = None) -> PipelineResult:
    """Like run_pipeline on a directory, reusing a previous result for identical inputs."""
    cfg = config or StageConfig()
    root = Path(directory)
    if not (root / "manifest.json").is_file():
        raise StageError("load", ManifestError(f"no manifest.json in {root}"))
    digest = capture_digest(root, cfg)
    cache = root / CACHE_DIR / digest
    if (cache / "replica.obj").is_file() and (cache / "timings.json").is_file():
        data = (cache / "replica.obj").read_bytes()
        timings = json.loads((cache / "timings.json").read_text())
        return PipelineResult(parse_obj(data), data, timings, timings.get("frames", 0), None, True)
    result = run_pipeline(root, cfg)
    cache.mkdir(parents=True, exist_ok=True)
    (cache / "replica.obj").write_bytes(result.obj_bytes)
    (cache / "timings.json").write_text(json.dumps(result.timings, indent=1, sort_keys=True) + "\n")
    return result


def run_pipeline_async(capture, config: StageConfig | None = None,
                       executor: ThreadPoolExecutor | None = None) -> Future:
    """Run the pipeline off the caller's thread; the future yields a PipelineResult."""
    if executor is None:
        executor = ThreadPoolExecutor(max_workers=1)
        future = executor.submit(run_pipeline, capture, config)
        executor.shutdown(wait=False)
        return future
    return executor.submit(run_pipeline, capture, config)
