"""Volume file I/O: NIfTI-1 (uncompressed, float32) and a raw float32 format.

Two formats are supported, selected by file suffix:

* ``.nii`` — single-file NIfTI-1, little-endian, datatype float32 (code 16),
  ``dim[0]`` 3 or 4. A 4th dimension is interpreted as per-voxel channels.
  Header fields outside dims/spacing/datatype are zeroed on write.
* ``.f32`` + ``.json`` — little-endian float32 payload with a JSON sidecar
  holding ``dims``, ``spacing`` and ``channels``. Payload length must equal
  ``prod(dims) * channels * 4`` bytes exactly. The flat order is x-fastest
  with one group of ``channels`` values per voxel.

All data is converted to float64 in memory; writes truncate to float32.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .volume import RoiMask, Volume, VolumeError

NIFTI_HEADER_SIZE = 348
NIFTI_DATA_OFFSET = 352
NIFTI_DT_FLOAT32 = 16


class VolumeIOError(VolumeError):
    """Base class for file-level volume errors."""


class UnreadableFileError(VolumeIOError):
    """File missing, truncated or not parseable at all."""


class UnsupportedFormatError(VolumeIOError):
    """Recognizable file with an unsupported field value."""


class SizeMismatchError(VolumeIOError):
    """Header-declared size disagrees with the payload."""


class NonFiniteDataError(VolumeIOError):
    """Payload holds NaN or Inf values."""


def load_volume(path) -> Volume:
    """Read a volume from ``.nii`` or ``.f32``/``.json`` files.

    Raises a distinct error per failure mode, naming the offending field:
    :class:`UnreadableFileError`, :class:`UnsupportedFormatError`,
    :class:`SizeMismatchError` or :class:`NonFiniteDataError`.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".nii":
        return _read_nifti(path)
    if suffix in (".f32", ".json"):
        return _read_raw(path.with_suffix(""))
    raise UnsupportedFormatError(f"unsupported volume format {suffix!r} for {path}")


def save_volume(vol: Volume, path) -> None:
    """Write a volume; format chosen by suffix as in :func:`load_volume`."""
    path = Path(path)
    suffix = path.suffix.lower()
    with np.errstate(over="ignore"):
        payload = vol.data.astype("<f4")
    if np.isfinite(vol.data).all() and not np.isfinite(payload).all():
        raise VolumeIOError(f"data exceeds float32 range, cannot write {path}")
    if suffix == ".nii":
        _write_nifti(vol, payload, path)
    elif suffix in (".f32", ".json"):
        _write_raw(vol, payload, path.with_suffix(""))
    else:
        raise UnsupportedFormatError(f"unsupported volume format {suffix!r} for {path}")


def load_mask(path) -> RoiMask:
    return RoiMask.from_volume(load_volume(path))


def save_mask(mask: RoiMask, path, spacing=(1.0, 1.0, 1.0)) -> None:
    save_volume(mask.to_volume(spacing), path)


# NIfTI-1: fields are packed at fixed offsets into a 348-byte header.

def _read_nifti(path: Path) -> Volume:
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise UnreadableFileError(f"cannot read {path}: {exc}") from exc
    if len(blob) < NIFTI_HEADER_SIZE:
        raise UnreadableFileError(
            f"{path}: truncated header ({len(blob)} bytes < {NIFTI_HEADER_SIZE})"
        )
    (sizeof_hdr,) = struct.unpack_from("<i", blob, 0)
    if sizeof_hdr != NIFTI_HEADER_SIZE:
        raise UnsupportedFormatError(
            f"{path}: sizeof_hdr is {sizeof_hdr}, expected {NIFTI_HEADER_SIZE}"
            " (big-endian and NIfTI-2 files are not supported)"
        )
    magic = struct.unpack_from("<4s", blob, 344)[0]
    if magic != b"n+1\x00":
        raise UnsupportedFormatError(f"{path}: magic is {magic!r}, expected b'n+1\\x00'")
    dim = struct.unpack_from("<8h", blob, 40)
    if dim[0] not in (3, 4):
        raise UnsupportedFormatError(f"{path}: dim[0] is {dim[0]}, expected 3 or 4")
    nx, ny, nz = dim[1], dim[2], dim[3]
    channels = dim[4] if dim[0] == 4 else 1
    if min(nx, ny, nz, channels) < 1:
        raise UnsupportedFormatError(f"{path}: non-positive extent in dim {dim[:5]}")
    (datatype, bitpix) = struct.unpack_from("<hh", blob, 70)
    if datatype != NIFTI_DT_FLOAT32:
        raise UnsupportedFormatError(
            f"{path}: datatype code {datatype} not supported (only float32, code 16)"
        )
    if bitpix != 32:
        raise UnsupportedFormatError(f"{path}: bitpix is {bitpix}, expected 32")
    pixdim = struct.unpack_from("<8f", blob, 76)
    spacing = pixdim[1:4]
    if any(not s > 0 for s in spacing):
        raise UnsupportedFormatError(f"{path}: pixdim[1..3] must be positive, got {spacing}")
    (vox_offset,) = struct.unpack_from("<f", blob, 108)
    offset = int(vox_offset)
    if offset < NIFTI_HEADER_SIZE:
        raise UnsupportedFormatError(f"{path}: vox_offset {vox_offset} is before header end")
    n_values = nx * ny * nz * channels
    actual = len(blob) - offset
    expected = n_values * 4
    if actual != expected:
        raise SizeMismatchError(
            f"{path}: dim declares {n_values} values ({expected} bytes), "
            f"payload holds {actual} bytes"
        )
    flat = np.frombuffer(blob, dtype="<f4", count=n_values, offset=offset)
    (scl_slope, scl_inter) = struct.unpack_from("<ff", blob, 112)
    data = flat.astype(np.float64)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        data = data * scl_slope + scl_inter
    if not np.isfinite(data).all():
        bad = int(np.count_nonzero(~np.isfinite(data)))
        raise NonFiniteDataError(f"{path}: payload holds {bad} non-finite values")
    # On disk: x fastest, channel slowest -> (c, z, y, x) in C order.
    data = data.reshape(channels, nz, ny, nx).transpose(1, 2, 3, 0)
    return Volume(data, spacing)


def _write_nifti(vol: Volume, payload: np.ndarray, path: Path) -> None:
    nx, ny, nz = vol.dims
    channels = vol.channels
    hdr = bytearray(NIFTI_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)
    ndim = 3 if channels == 1 else 4
    struct.pack_into("<8h", hdr, 40, ndim, nx, ny, nz, channels, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, NIFTI_DT_FLOAT32, 32)
    sx, sy, sz = vol.spacing
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 1.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(NIFTI_DATA_OFFSET))
    struct.pack_into("<ff", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<4s", hdr, 344, b"n+1\x00")
    disk = np.ascontiguousarray(payload.transpose(3, 0, 1, 2))
    try:
        with open(path, "wb") as fh:
            fh.write(hdr)
            fh.write(b"\x00\x00\x00\x00")  # no header extensions
            fh.write(disk.tobytes())
    except OSError as exc:
        raise VolumeIOError(f"cannot write {path}: {exc}") from exc


# Raw format: <stem>.f32 payload + <stem>.json sidecar.

def _read_raw(stem: Path) -> Volume:
    payload_path = stem.with_suffix(".f32")
    sidecar_path = stem.with_suffix(".json")
    try:
        sidecar = json.loads(sidecar_path.read_text())
    except OSError as exc:
        raise UnreadableFileError(f"cannot read sidecar {sidecar_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UnreadableFileError(f"sidecar {sidecar_path} is not valid JSON: {exc}") from exc
    for key in ("dims", "spacing", "channels"):
        if key not in sidecar:
            raise UnsupportedFormatError(f"sidecar {sidecar_path} missing field {key!r}")
    dims = sidecar["dims"]
    spacing = sidecar["spacing"]
    channels = sidecar["channels"]
    if (
        not isinstance(dims, list)
        or len(dims) != 3
        or any(not isinstance(n, int) or n < 1 for n in dims)
    ):
        raise UnsupportedFormatError(f"sidecar {sidecar_path}: dims must be 3 positive ints")
    if not isinstance(channels, int) or channels < 1:
        raise UnsupportedFormatError(f"sidecar {sidecar_path}: channels must be a positive int")
    if not isinstance(spacing, list) or len(spacing) != 3:
        raise UnsupportedFormatError(f"sidecar {sidecar_path}: spacing must be 3 floats")
    try:
        blob = payload_path.read_bytes()
    except OSError as exc:
        raise UnreadableFileError(f"cannot read {payload_path}: {exc}") from exc
    nx, ny, nz = dims
    expected = nx * ny * nz * channels * 4
    if len(blob) != expected:
        raise SizeMismatchError(
            f"{payload_path}: sidecar declares {expected} bytes "
            f"({nx}x{ny}x{nz} x {channels} channels), payload holds {len(blob)}"
        )
    flat = np.frombuffer(blob, dtype="<f4").astype(np.float64)
    if not np.isfinite(flat).all():
        bad = int(np.count_nonzero(~np.isfinite(flat)))
        raise NonFiniteDataError(f"{payload_path}: payload holds {bad} non-finite values")
    data = flat.reshape(nz, ny, nx, channels)
    return Volume(data, spacing)


def _write_raw(vol: Volume, payload: np.ndarray, stem: Path) -> None:
    nx, ny, nz = vol.dims
    sidecar = {
        "dims": [nx, ny, nz],
        "spacing": list(vol.spacing),
        "channels": vol.channels,
    }
    try:
        stem.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")
        with open(stem.with_suffix(".f32"), "wb") as fh:
            fh.write(np.ascontiguousarray(payload).tobytes())
    except OSError as exc:
        raise VolumeIOError(f"cannot write {stem}: {exc}") from exc
