"""Headless collaboration core for 360-degree AR/VR telepresence: space alignment,
mesh streaming, pointer/annotation/object/cutout replication and a
desk-scale replica reconstruction pipeline."""

__version__ = "0.1.0"
