"""Dense 3D scalar grids and the VOL1 on-disk volume format.

VOL1 layout (little-endian throughout, no padding, no footer):

    bytes 0-3    ASCII magic ``VOL1``
    bytes 4-15   nx, ny, nz as unsigned 32-bit integers
    bytes 16-    nx*ny*nz IEEE-754 single-precision values, row-major
                 (x slowest, z fastest)

Grids are kept in double precision in memory; disk storage is single
precision, so a grid whose values are float32-representable round-trips
bit-exactly.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

VOL1_MAGIC = b"VOL1"
VOL1_HEADER_SIZE = 16


class VolumeFormatError(ValueError):
    """Malformed VOL1 data. ``offset`` is the byte position of the defect."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class VoxelGrid:
    """Immutable dense 3D scalar field.

    Values are stored as a read-only float64 array of shape (nx, ny, nz) in
    C order. All values must be finite; NaN/Inf are rejected at construction
    and never propagated.
    """

    __slots__ = ("_values",)

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64, order="C", copy=True)
        if arr.ndim != 3:
            raise ValueError(f"expected a 3D array, got ndim={arr.ndim}")
        if min(arr.shape) < 1:
            raise ValueError(f"dims must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("grid values must be finite")
        arr.setflags(write=False)
        self._values = arr

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def dims(self) -> tuple[int, int, int]:
        return self._values.shape

    @property
    def voxel_count(self) -> int:
        return self._values.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(
            self._values, other._values
        )

    def __repr__(self) -> str:
        return f"VoxelGrid(dims={self.dims})"


class ProbabilityMap:
    """A VoxelGrid whose values all lie in [0, 1]."""

    __slots__ = ("grid",)

    def __init__(self, grid: VoxelGrid):
        v = grid.values
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("probability map values must lie in [0, 1]")
        self.grid = grid

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.grid.dims

    def __eq__(self, other) -> bool:
        if not isinstance(other, ProbabilityMap):
            return NotImplemented
        return self.grid == other.grid


class SegmentationMask:
    """A VoxelGrid whose values are exactly 0 or 1."""

    __slots__ = ("grid",)

    def __init__(self, grid: VoxelGrid):
        v = grid.values
        if not np.isin(v, (0.0, 1.0)).all():
            raise ValueError("mask values must be exactly 0 or 1")
        self.grid = grid

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.grid.dims

    def as_bool(self) -> np.ndarray:
        return self.grid.values != 0.0

    def active_count(self) -> int:
        return int(np.count_nonzero(self.grid.values))

    def __eq__(self, other) -> bool:
        if not isinstance(other, SegmentationMask):
            return NotImplemented
        return self.grid == other.grid


def load_volume(path) -> VoxelGrid:
    """Read a VOL1 file.

    Raises:
        VolumeFormatError: bad magic, non-positive dims, truncated or
            oversized payload, or non-finite values; the error carries the
            byte offset of the defect.
    """
    data = Path(path).read_bytes()
    if len(data) < len(VOL1_MAGIC):
        raise VolumeFormatError("truncated header", len(data))
    if data[:4] != VOL1_MAGIC:
        raise VolumeFormatError(f"bad magic {data[:4]!r}, expected {VOL1_MAGIC!r}", 0)
    if len(data) < VOL1_HEADER_SIZE:
        raise VolumeFormatError("truncated header", len(data))
    dims = struct.unpack_from("<III", data, 4)
    for i, d in enumerate(dims):
        if d == 0:
            raise VolumeFormatError(f"dimension {i} must be positive", 4 + 4 * i)
    count = dims[0] * dims[1] * dims[2]
    expected = VOL1_HEADER_SIZE + 4 * count
    if len(data) < expected:
        raise VolumeFormatError(
            f"truncated payload: expected {expected} bytes, file has {len(data)}",
            len(data),
        )
    if len(data) > expected:
        raise VolumeFormatError("trailing data after payload", expected)
    flat = np.frombuffer(data, dtype="<f4", count=count, offset=VOL1_HEADER_SIZE)
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        raise VolumeFormatError(
            "non-finite value in payload", VOL1_HEADER_SIZE + 4 * int(bad[0])
        )
    return VoxelGrid(flat.reshape(dims))


def save_volume(grid: VoxelGrid, path) -> None:
    """Write a VOL1 file atomically (temp file + rename).

    Values are narrowed to single precision on disk. Two saves of the same
    grid produce byte-identical files.
    """
    v = grid.values
    if not np.isfinite(v).all():
        raise ValueError("refusing to save non-finite grid values")
    nx, ny, nz = grid.dims
    payload = v.astype("<f4").tobytes(order="C")
    blob = VOL1_MAGIC + struct.pack("<III", nx, ny, nz) + payload
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def voxelwise_variance(maps: list[ProbabilityMap]) -> VoxelGrid:
    """Per-voxel population variance (divide by n) across an ensemble of maps.

    All maps must share dims and there must be at least two of them. Output
    values lie in [0, 0.25] since inputs are bounded in [0, 1]. Accumulation
    is done in double precision with a fixed reduction order, so the result
    is bitwise-deterministic for a fixed input.
    """
    if len(maps) < 2:
        raise ValueError(f"need at least 2 maps, got {len(maps)}")
    dims = maps[0].dims
    for i, m in enumerate(maps):
        if m.dims != dims:
            raise ValueError(f"map {i} has dims {m.dims}, expected {dims}")
    stack = np.stack([m.grid.values for m in maps], axis=0)
    # Sorting fixes the per-voxel reduction order, making the result
    # bitwise permutation-invariant; constant voxels are forced to exact 0.
    stack.sort(axis=0)
    var = np.var(stack, axis=0)
    var[stack[-1] == stack[0]] = 0.0
    return VoxelGrid(var)


def binarize(pmap: ProbabilityMap, threshold: float = 0.5) -> SegmentationMask:
    """Threshold a probability map into a hard mask (value >= threshold -> 1)."""
    return SegmentationMask(VoxelGrid((pmap.grid.values >= threshold).astype(np.float64)))
