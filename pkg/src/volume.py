# src/volume.py
"""
Dense labeled voxel volumes.

Storage is a JSON header next to a raw little-endian u8 blob:

    <name>.json  {dims:[x,y,z], spacing:[sx,sy,sz], num_classes:int, blob:"<name>.u8"}
    <name>.u8    x-fastest bytes, index = x + y*dx + z*dx*dy

In memory the data array is shaped (z, y, x) so C-order flattening is exactly
the blob order. Public coordinates are always (x, y, z).
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from src.utils.config import NUM_CLASSES, VOLUME_FORMAT_VERSION
from src.utils.errors import VolumeFormatError
from src.utils.logger import logger

PathLike = Union[str, Path]


@dataclass(frozen=True)
class LabelVolume:
    dims: Tuple[int, int, int]                  # voxels per axis (x, y, z)
    spacing: Tuple[float, float, float]         # mm per voxel
    data: np.ndarray                            # (z, y, x) uint8
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or min(dims) <= 0:
            raise VolumeFormatError(f"dims must be 3 positive integers, got {self.dims}")
        if len(spacing) != 3 or min(spacing) <= 0:
            raise VolumeFormatError(f"spacing must be 3 positive reals, got {self.spacing}")

        data = np.ascontiguousarray(self.data, dtype=np.uint8)
        expected = (dims[2], dims[1], dims[0])
        if data.shape != expected:
            if data.size != dims[0] * dims[1] * dims[2]:
                raise VolumeFormatError(
                    f"data has {data.size} values, dims {dims} need {dims[0] * dims[1] * dims[2]}"
                )
            data = data.reshape(expected)
        if data.size and int(data.max()) > self.num_classes:
            raise VolumeFormatError(
                f"label {int(data.max())} exceeds num_classes={self.num_classes}"
            )

        # Immutable after construction; safe to share across workers.
        data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, array_zyx: np.ndarray, spacing=(1.0, 1.0, 1.0),
                   num_classes: int = NUM_CLASSES) -> "LabelVolume":
        z, y, x = array_zyx.shape
        return cls(dims=(x, y, z), spacing=spacing, data=array_zyx, num_classes=num_classes)

    def label_at(self, voxel) -> int:
        x, y, z = voxel
        return int(self.data[z, y, x])

    def binary(self) -> "LabelVolume":
        return LabelVolume(self.dims, self.spacing, (self.data > 0).astype(np.uint8), self.num_classes)

    def with_data(self, data_zyx: np.ndarray) -> "LabelVolume":
        return LabelVolume(self.dims, self.spacing, data_zyx, self.num_classes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None


@dataclass(frozen=True)
class CoordTransform:
    """
    normalized = (voxel * spacing - offset) * scale

    offset is in physical units (mm); one isotropic scale keeps ball radii
    meaningful along every axis.
    """
    offset: Tuple[float, float, float]
    scale: float
    spacing: Tuple[float, float, float] = field(default=(1.0, 1.0, 1.0))

    def __post_init__(self):
        if not self.scale > 0:
            raise VolumeFormatError(f"transform scale must be > 0, got {self.scale}")

    def to_normalized(self, voxels) -> np.ndarray:
        v = np.asarray(voxels, dtype=np.float64)
        return (v * np.asarray(self.spacing) - np.asarray(self.offset)) * self.scale

    def to_voxel(self, coords) -> np.ndarray:
        c = np.asarray(coords, dtype=np.float64)
        return (c / self.scale + np.asarray(self.offset)) / np.asarray(self.spacing)

    def to_voxel_index(self, coords) -> np.ndarray:
        return np.rint(self.to_voxel(coords)).astype(np.int64)

    def to_dict(self) -> dict:
        return {"offset": list(self.offset), "scale": self.scale, "spacing": list(self.spacing)}

    @classmethod
    def from_dict(cls, d: dict) -> "CoordTransform":
        return cls(tuple(d["offset"]), float(d["scale"]), tuple(d["spacing"]))


# ================= FILE FORMAT =================

def _header_and_blob(path: PathLike) -> Tuple[Path, Path]:
    path = Path(path)
    header = path if path.suffix == ".json" else path.with_suffix(".json")
    return header, header.with_suffix(".u8")


def load_volume(path: PathLike) -> LabelVolume:
    header_path, _ = _header_and_blob(path)
    if not header_path.exists():
        raise FileNotFoundError(f"volume header not found: {header_path}")

    try:
        header = json.loads(header_path.read_text())
        dims = [int(d) for d in header["dims"]]
        spacing = [float(s) for s in header["spacing"]]
        num_classes = int(header.get("num_classes", NUM_CLASSES))
        blob_path = header_path.parent / header["blob"]
    except (KeyError, TypeError, ValueError) as e:
        raise VolumeFormatError(f"malformed volume header {header_path}: {e}") from e

    if not blob_path.exists():
        raise FileNotFoundError(f"volume blob not found: {blob_path}")

    raw = np.frombuffer(blob_path.read_bytes(), dtype="<u1")
    expected = dims[0] * dims[1] * dims[2]
    if raw.size != expected:
        raise VolumeFormatError(
            f"blob {blob_path.name} has {raw.size} bytes, header dims {dims} need {expected}"
        )
    if raw.size and int(raw.max()) > num_classes:
        raise VolumeFormatError(
            f"label {int(raw.max())} in {blob_path.name} exceeds declared num_classes={num_classes}"
        )

    vol = LabelVolume(tuple(dims), tuple(spacing), raw.reshape(dims[2], dims[1], dims[0]), num_classes)
    logger.debug(f"Loaded volume {header_path.name} dims={vol.dims} spacing={vol.spacing}")
    return vol


def save_volume(vol: LabelVolume, path: PathLike) -> Path:
    header_path, blob_path = _header_and_blob(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)

    blob_path.write_bytes(vol.data.astype("<u1").tobytes(order="C"))
    header = {
        "dims": list(vol.dims),
        "spacing": list(vol.spacing),
        "num_classes": vol.num_classes,
        "blob": blob_path.name,
        "format_version": VOLUME_FORMAT_VERSION,
    }
    header_path.write_text(json.dumps(header, indent=2))
    logger.debug(f"Saved volume {header_path}")
    return header_path


# ================= INDEXING =================

def foreground_arrays(vol: LabelVolume) -> Tuple[np.ndarray, np.ndarray]:
    """
    (coords, labels) of every non-zero voxel; coords are (x, y, z) int64 rows
    in z-major, then y, then x order.
    """
    z, y, x = np.nonzero(vol.data)
    coords = np.stack([x, y, z], axis=1).astype(np.int64)
    return coords, vol.data[z, y, x].astype(np.int64)


def foreground_voxels(vol: LabelVolume) -> List[Tuple[Tuple[int, int, int], int]]:
    coords, labels = foreground_arrays(vol)
    return [((int(c[0]), int(c[1]), int(c[2])), int(l)) for c, l in zip(coords, labels)]


def make_transform(vol: LabelVolume) -> CoordTransform:
    coords, _ = foreground_arrays(vol)
    if len(coords) == 0:
        raise VolumeFormatError("cannot normalize a volume with empty foreground")

    spacing = np.asarray(vol.spacing)
    physical = coords * spacing
    lo = physical.min(axis=0)
    hi = physical.max(axis=0)
    center = (lo + hi) / 2.0
    extent = float((hi - lo).max())

    if extent == 0.0:
        logger.warning("Single-voxel foreground: using scale=1 centered on the voxel")
        scale = 1.0
    else:
        scale = 2.0 / extent

    return CoordTransform(tuple(float(c) for c in center), scale, tuple(vol.spacing))
