"""RGBD capture to coloured replica mesh."""

from .capture import CaptureManifest, Intrinsics, RgbdFrame, load_capture, synth_capture
from .pipeline import StageConfig, run_pipeline

__all__ = ["CaptureManifest", "Intrinsics", "RgbdFrame", "StageConfig", "load_capture", "run_pipeline",
           "synth_capture"]
