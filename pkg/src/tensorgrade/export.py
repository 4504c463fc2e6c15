"""Grayscale slice exports for coefficient and grading maps.

Slices are written as binary PGM (8-bit, min/max normalized over finite
values) plus a CSV of the raw values, so figures stay dependency-free and
diffable. NaN sentinels render as black and export as empty CSV cells.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .volume import Volume, VolumeError

AXES = ("x", "y", "z")


def extract_slice(vol: Volume, axis: str, index: int, channel: int = 0) -> np.ndarray:
    """One 2-D plane of a volume.

    Row/column order per axis: ``z`` gives (y, x), ``y`` gives (z, x),
    ``x`` gives (z, y).
    """
    if axis not in AXES:
        raise VolumeError(f"axis must be one of {AXES}, got {axis!r}")
    if not 0 <= channel < vol.channels:
        raise VolumeError(f"channel {channel} out of range for {vol.channels} channels")
    nx, ny, nz = vol.dims
    limit = {"x": nx, "y": ny, "z": nz}[axis]
    if not 0 <= index < limit:
        raise VolumeError(f"slice index {index} out of range [0, {limit}) on axis {axis}")
    if axis == "z":
        return vol.data[index, :, :, channel]
    if axis == "y":
        return vol.data[:, index, :, channel]
    return vol.data[:, :, index, channel]


def write_pgm(path, img: np.ndarray) -> None:
    """Write a 2-D array as binary 8-bit PGM, min/max normalized."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise VolumeError(f"PGM export needs a 2-D array, got shape {img.shape}")
    finite = np.isfinite(img)
    work = np.where(finite, img, 0.0)
    lo = work[finite].min() if finite.any() else 0.0
    hi = work[finite].max() if finite.any() else 0.0
    if hi > lo:
        scaled = np.round((work - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.zeros_like(work)
    scaled[~finite] = 0.0
    pixels = scaled.astype(np.uint8)
    rows, cols = pixels.shape
    with open(Path(path), "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def write_slice_csv(path, img: np.ndarray) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.asarray(img, dtype=np.float64):
            writer.writerow(["" if not np.isfinite(v) else repr(float(v)) for v in row])


def export_slices(vol: Volume, axis: str, indices, out_dir, stem: str = "slice") -> list[Path]:
    """Write PGM + CSV for each requested slice; returns the PGM paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for index in indices:
        img = extract_slice(vol, axis, int(index))
        base = out_dir / f"{stem}_{axis}{int(index):03d}"
        write_pgm(base.with_suffix(".pgm"), img)
        write_slice_csv(base.with_suffix(".csv"), img)
        written.append(base.with_suffix(".pgm"))
    return written
