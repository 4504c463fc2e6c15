"""Grid-based volumetric types shared by the whole pipeline.

A :class:`Volume` is a dense 3-D grid with per-voxel channel groups and
millimetre spacing. Internally the payload is a read-only float64 array of
shape ``(nz, ny, nx, channels)`` (C order), which puts the flat layout in
x-fastest order with one group of ``channels`` values per voxel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np


class VolumeError(ValueError):
    """Base class for volume handling errors."""


class DimensionMismatchError(VolumeError):
    """Operands do not share grid dimensions."""


class Volume:
    """Dense 3-D multi-channel grid with spacing metadata.

    Parameters
    ----------
    data : ndarray
        Array of shape ``(nz, ny, nx)`` or ``(nz, ny, nx, channels)``.
        Converted to float64 and copied; the stored array is read-only.
    spacing : sequence of 3 floats
        Voxel size in mm along (x, y, z). All components must be positive.
    allow_nan : bool
        Permit NaN entries (used by grading maps for the out-of-mask
        sentinel). Off by default: ordinary volumes must be finite.
    """

    __slots__ = ("_data", "_spacing")

    def __init__(self, data, spacing=(1.0, 1.0, 1.0), *, allow_nan: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[..., np.newaxis]
        if arr.ndim != 4:
            raise VolumeError(f"volume data must be 3-D or 4-D, got shape {arr.shape}")
        if any(n < 1 for n in arr.shape):
            raise VolumeError(f"volume dims must be >= 1, got shape {arr.shape}")
        spacing = tuple(float(s) for s in spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise VolumeError(f"spacing must be 3 positive floats, got {spacing}")
        if allow_nan:
            if np.isinf(arr).any():
                raise VolumeError("volume data contains Inf")
        elif not np.isfinite(arr).all():
            raise VolumeError("volume data contains non-finite values")
        arr = arr.copy(order="C")
        arr.flags.writeable = False
        self._data = arr
        self._spacing = spacing

    @property
    def data(self) -> np.ndarray:
        """Read-only payload, shape ``(nz, ny, nx, channels)``."""
        return self._data

    @property
    def dims(self) -> tuple[int, int, int]:
        """Grid extents as (nx, ny, nz)."""
        nz, ny, nx = self._data.shape[:3]
        return (nx, ny, nz)

    @property
    def spacing(self) -> tuple[float, float, float]:
        """Voxel size in mm as (sx, sy, sz)."""
        return self._spacing

    @property
    def channels(self) -> int:
        return self._data.shape[3]

    @property
    def n_voxels(self) -> int:
        nz, ny, nx = self._data.shape[:3]
        return nx * ny * nz

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self._spacing
        return sx * sy * sz

    def at(self, x: int, y: int, z: int) -> np.ndarray:
        """Channel group of one voxel."""
        return self._data[z, y, x]

    def same_grid(self, other: "Volume") -> bool:
        return self.dims == other.dims and self.spacing == other.spacing

    def __repr__(self) -> str:
        return f"Volume(dims={self.dims}, spacing={self.spacing}, channels={self.channels})"


class BoundingBox(NamedTuple):
    """Inclusive axis-aligned voxel box, corners in (x, y, z) order."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    def slices_zyx(self) -> tuple[slice, slice, slice]:
        (x0, y0, z0), (x1, y1, z1) = self.lo, self.hi
        return (slice(z0, z1 + 1), slice(y0, y1 + 1), slice(x0, x1 + 1))

    def within(self, dims: tuple[int, int, int]) -> bool:
        return all(
            0 <= l <= h < n for l, h, n in zip(self.lo, self.hi, dims)
        )


class RoiMask:
    """Binary voxel occupancy with a tight bounding box.

    The bounding box is recomputed from the occupancy, so every face of the
    box touches at least one set voxel by construction.
    """

    __slots__ = ("_mask", "_bbox")

    def __init__(self, mask):
        arr = np.asarray(mask)
        if arr.ndim != 3:
            raise VolumeError(f"mask must be 3-D, got shape {arr.shape}")
        arr = arr.astype(bool).copy()
        arr.flags.writeable = False
        self._mask = arr
        self._bbox = None

    @classmethod
    def from_volume(cls, vol: Volume, threshold: float = 0.5) -> "RoiMask":
        if vol.channels != 1:
            raise VolumeError(f"mask volume must have 1 channel, got {vol.channels}")
        return cls(vol.data[..., 0] > threshold)

    def to_volume(self, spacing=(1.0, 1.0, 1.0)) -> Volume:
        return Volume(self._mask.astype(np.float64), spacing)

    @property
    def mask(self) -> np.ndarray:
        """Boolean array, shape ``(nz, ny, nx)``."""
        return self._mask

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self._mask.shape
        return (nx, ny, nz)

    @property
    def count(self) -> int:
        return int(self._mask.sum())

    @property
    def bbox(self) -> BoundingBox:
        """Tight bounding box of the set voxels."""
        if self._bbox is None:
            if not self._mask.any():
                raise VolumeError("empty mask has no bounding box")
            zs, ys, xs = np.nonzero(self._mask)
            self._bbox = BoundingBox(
                lo=(int(xs.min()), int(ys.min()), int(zs.min())),
                hi=(int(xs.max()), int(ys.max()), int(zs.max())),
            )
        return self._bbox

    def cropped(self, box: BoundingBox) -> "RoiMask":
        if not box.within(self.dims):
            raise VolumeError(f"crop box {box} out of range for dims {self.dims}")
        return RoiMask(self._mask[box.slices_zyx()])

    def voxel_indices(self) -> np.ndarray:
        """In-mask voxel coordinates, shape ``(count, 3)`` in (x, y, z) order.

        Rows follow the C-order scan of the grid (z slowest, x fastest),
        which is the canonical column order of design matrices.
        """
        zs, ys, xs = np.nonzero(self._mask)
        return np.stack([xs, ys, zs], axis=1).astype(np.int64)


@dataclass(frozen=True)
class SubjectMeta:
    """Identity, age and template label of one scan.

    ``label`` uses the template convention: -1 manifest disease, +1 control,
    0 for unlabeled query scans (e.g. pre-manifest subjects).
    """

    subject_id: str
    scan_id: str
    age: float
    label: int

    def __post_init__(self):
        if self.label not in (-1, 0, 1):
            raise VolumeError(f"label must be -1, 0 or +1, got {self.label}")
        if not self.age > 0:
            raise VolumeError(f"age must be positive, got {self.age}")


def crop(vol: Volume, box: BoundingBox) -> Volume:
    """Extract the sub-volume covered by an inclusive voxel box.

    Spacing is preserved; data is copied.
    """
    if not isinstance(box, BoundingBox):
        box = BoundingBox(tuple(box[0]), tuple(box[1]))
    if not box.within(vol.dims):
        raise VolumeError(f"crop box {box} out of range for dims {vol.dims}")
    return Volume(vol.data[box.slices_zyx()], vol.spacing)


def union_bbox(masks: Sequence[RoiMask]) -> RoiMask:
    """Voxelwise OR of the masks; its bbox is the common region of interest."""
    masks = list(masks)
    if not masks:
        raise VolumeError("union of an empty mask list")
    dims = masks[0].dims
    for m in masks[1:]:
        if m.dims != dims:
            raise DimensionMismatchError(f"mask dims {m.dims} != {dims}")
    combined = masks[0].mask.copy()
    for m in masks[1:]:
        combined |= m.mask
    return RoiMask(combined)
