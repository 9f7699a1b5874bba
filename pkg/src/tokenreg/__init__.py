"""Deformable 3D registration with a frozen LLaMA-style transformer bottleneck."""

from tokenreg.volume import (
    DisplacementField,
    LabelVolume,
    ScalarVolume,
    VolumeGeometry,
    read_volume,
    resample_volume,
    write_volume,
)

__all__ = [
    "DisplacementField",
    "LabelVolume",
    "ScalarVolume",
    "VolumeGeometry",
    "read_volume",
    "resample_volume",
    "write_volume",
]

__version__ = "0.1.0"
