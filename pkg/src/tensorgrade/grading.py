"""Age-matched template libraries and patch-based grading of tensor volumes.

A subject's log-tensor volume is compared voxel by voxel against a library
of labeled template volumes. At each voxel the patch distance to every
template drives a similarity-weighted vote of template labels, producing a
grading value in [-1, +1]: positive means the local deformation pattern
resembles the control templates, negative the disease templates.

Patch distances sum per-voxel log-Euclidean norms over a cube of side
``2 * radius + 1`` clipped identically at volume borders for both fields.
Accumulation follows a fixed (dz, dy, dx) offset order everywhere, so the
vectorized map path, the scalar voxel path, and any parallel schedule all
produce bit-identical values.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from ._parallel import map_ordered
from .io import save_mask, save_volume
from .tensors import _frob6
from .volume import RoiMask, SubjectMeta, Volume, VolumeError

H_FLOOR = 1e-12
DISTANCE_MODES = ("per-voxel", "whole-patch")


class GradingError(ValueError):
    """Invalid library composition or grading request."""


@dataclass(frozen=True)
class LibraryEntry:
    """One template: a log-tensor volume on the ROI grid plus its metadata."""

    log: Volume
    meta: SubjectMeta

    @property
    def key(self) -> tuple[str, str]:
        return (self.meta.subject_id, self.meta.scan_id)


class TemplateLibrary:
    """Labeled template volumes sharing one ROI grid.

    Every entry must carry label -1 or +1, scans must be unique, and all
    volumes must live on the ROI grid.
    """

    def __init__(self, entries: Sequence[LibraryEntry], roi: RoiMask):
        entries = list(entries)
        if not entries:
            raise GradingError("template library is empty")
        seen = set()
        for e in entries:
            if e.meta.label not in (-1, 1):
                raise GradingError(
                    f"template {e.meta.subject_id}/{e.meta.scan_id} has label "
                    f"{e.meta.label}; only -1 and +1 are allowed"
                )
            if e.key in seen:
                raise GradingError(f"duplicate template scan {e.key}")
            seen.add(e.key)
            if e.log.channels != 6:
                raise GradingError(f"template {e.key} is not a 6-channel log-tensor volume")
            if e.log.dims != roi.dims:
                raise GradingError(f"template {e.key} dims {e.log.dims} != ROI dims {roi.dims}")
        self.entries = entries
        self.roi = roi

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.meta.label for e in self.entries], dtype=np.float64)

    @property
    def counts(self) -> dict[int, int]:
        out = {-1: 0, 1: 0}
        for e in self.entries:
            out[e.meta.label] += 1
        return out


def build_library(
    pool: Sequence[tuple[Volume, SubjectMeta]],
    query: SubjectMeta,
    n_per_class: int,
    roi: RoiMask,
) -> TemplateLibrary:
    """Select the age-closest templates of each class for one query subject.

    Every scan sharing the query's ``subject_id`` is excluded first, so a
    subject never grades against its own (longitudinal) scans. Within each
    class, candidates are ranked by ``|age - query.age|`` with ties broken
    by ``subject_id`` then ``scan_id``; the top ``n_per_class`` are taken.
    The returned entries interleave the classes (+1 first) so that
    contiguous leave-k-out groups stay class-balanced.
    """
    if n_per_class < 1:
        raise GradingError(f"n_per_class must be >= 1, got {n_per_class}")
    by_class: dict[int, list[tuple[Volume, SubjectMeta]]] = {1: [], -1: []}
    for vol, meta in pool:
        if meta.subject_id == query.subject_id or meta.label == 0:
            continue
        by_class[meta.label].append((vol, meta))
    picked: dict[int, list[LibraryEntry]] = {}
    for label, name in ((1, "control"), (-1, "disease")):
        cands = sorted(
            by_class[label],
            key=lambda it: (abs(it[1].age - query.age), it[1].subject_id, it[1].scan_id),
        )
        if len(cands) < n_per_class:
            raise GradingError(
                f"only {len(cands)} eligible {name} templates for "
                f"{query.subject_id}, need {n_per_class}"
            )
        picked[label] = [LibraryEntry(v, m) for v, m in cands[:n_per_class]]
    interleaved = [e for pair in zip(picked[1], picked[-1]) for e in pair]
    return TemplateLibrary(interleaved, roi)


@dataclass
class GradingMap:
    """Per-voxel grading values over an ROI; NaN marks out-of-mask voxels."""

    volume: Volume
    mask: RoiMask

    def in_mask_values(self) -> np.ndarray:
        """Grading values at mask voxels in C-order grid scan."""
        return self.volume.data[..., 0][self.mask.mask]

    @property
    def mean_in_mask(self) -> float:
        return float(self.in_mask_values().mean())

    def save(self, path) -> None:
        """Write the map with zeros outside the mask, plus the mask itself."""
        path = Path(path)
        data = self.volume.data[..., 0].copy()
        data[~self.mask.mask] = 0.0
        save_volume(Volume(data, self.volume.spacing), path)
        suffix = ".f32" if path.suffix.lower() in (".f32", ".json") else path.suffix
        save_mask(self.mask, path.with_name(path.stem + "_mask" + suffix), self.volume.spacing)


def _check_mode(mode: str) -> None:
    if mode not in DISTANCE_MODES:
        raise GradingError(f"distance mode must be one of {DISTANCE_MODES}, got {mode!r}")


def _patch_offsets(radius: int):
    rng = range(-radius, radius + 1)
    return [(dz, dy, dx) for dz in rng for dy in rng for dx in rng]


def box_sum(field: np.ndarray, radius: int) -> np.ndarray:
    """Sum of each voxel's clipped cube neighborhood, fixed offset order."""
    if radius < 0:
        raise GradingError(f"radius must be >= 0, got {radius}")
    nz, ny, nx = field.shape
    acc = np.zeros_like(field)
    for dz, dy, dx in _patch_offsets(radius):
        dst = []
        src = []
        for d, n in ((dz, nz), (dy, ny), (dx, nx)):
            dst.append(slice(max(0, -d), n - max(0, d)))
            src.append(slice(max(0, d), n - max(0, -d)))
        acc[tuple(dst)] += field[tuple(src)]
    return acc


def patch_distance_field(l_s: Volume, l_t: Volume, radius: int, mode: str = "per-voxel") -> np.ndarray:
    """Patch distances between two log-tensor volumes at every voxel."""
    _check_mode(mode)
    if l_s.dims != l_t.dims:
        raise VolumeError(f"dims differ: {l_s.dims} vs {l_t.dims}")
    d = _frob6(l_s.data - l_t.data)
    if mode == "per-voxel":
        return box_sum(d, radius)
    return np.sqrt(box_sum(d * d, radius))


def patch_distance(
    l_s: Volume,
    l_t: Volume,
    center: tuple[int, int, int],
    radius: int,
    mode: str = "per-voxel",
) -> float:
    """Patch distance around one voxel, given as (x, y, z).

    The cube is clipped to the volume bounds identically for both fields.
    In ``per-voxel`` mode the per-voxel Frobenius norms are summed; in
    ``whole-patch`` mode their squares are summed before one square root.
    """
    _check_mode(mode)
    if l_s.dims != l_t.dims:
        raise VolumeError(f"dims differ: {l_s.dims} vs {l_t.dims}")
    if radius < 0:
        raise GradingError(f"radius must be >= 0, got {radius}")
    x, y, z = center
    nx, ny, nz = l_s.dims
    if not (0 <= x < nx and 0 <= y < ny and 0 <= z < nz):
        raise GradingError(f"center {center} out of bounds for dims {l_s.dims}")
    acc = np.float64(0.0)
    for dz, dy, dx in _patch_offsets(radius):
        zz, yy, xx = z + dz, y + dy, x + dx
        if not (0 <= xx < nx and 0 <= yy < ny and 0 <= zz < nz):
            continue
        val = _frob6(l_s.data[zz, yy, xx] - l_t.data[zz, yy, xx])
        if mode == "per-voxel":
            acc = acc + val
        else:
            acc = acc + val * val
    if mode == "whole-patch":
        return float(np.sqrt(acc))
    return float(acc)


class PatchDistanceCache:
    """Memo for patch-distance fields keyed by unordered scan pairs.

    Distances are symmetric, so one field serves both orientations. Scans
    without identity (``key is None``) are never cached.
    """

    def __init__(self):
        self._store: dict = {}

    def __len__(self) -> int:
        return len(self._store)

    def pair_field(self, key_s, l_s: Volume, key_t, l_t: Volume, radius: int, mode: str) -> np.ndarray:
        if key_s is None or key_t is None:
            return patch_distance_field(l_s, l_t, radius, mode)
        cache_key = (min(key_s, key_t), max(key_s, key_t), radius, mode)
        found = self._store.get(cache_key)
        if found is None:
            found = patch_distance_field(l_s, l_t, radius, mode)
            self._store[cache_key] = found
        return found


def _template_fields(
    subject: Volume,
    lib: TemplateLibrary,
    radius: int,
    mode: str,
    threads: int,
    cache: Optional[PatchDistanceCache],
    subject_key,
) -> list[np.ndarray]:
    if cache is None:
        cache = PatchDistanceCache()
    return map_ordered(
        lambda e: cache.pair_field(subject_key, subject, e.key, e.log, radius, mode),
        lib.entries,
        threads,
    )


def grade_voxel(
    subject: Volume,
    lib: TemplateLibrary,
    center: tuple[int, int, int],
    radius: int = 1,
    mode: str = "per-voxel",
    h_floor: float = H_FLOOR,
) -> float:
    """Similarity-weighted label vote at one voxel.

    Template weights are ``exp(-d_t / h)`` with ``h`` the smallest patch
    distance over the library, floored at ``h_floor`` to keep an exact
    template match well defined (it then dominates with weight 1).
    """
    dists = [patch_distance(subject, e.log, center, radius, mode) for e in lib.entries]
    h = dists[0]
    for d in dists[1:]:
        h = min(h, d)
    h = np.maximum(np.float64(h), h_floor)
    num = np.float64(0.0)
    den = np.float64(0.0)
    for d, y in zip(dists, lib.labels):
        w = np.exp(-(np.float64(d) / h))
        num = num + w * y
        den = den + w
    return float(num / den)


def grade_map(
    subject: Volume,
    lib: TemplateLibrary,
    radius: int = 1,
    mode: str = "per-voxel",
    h_floor: float = H_FLOOR,
    threads: int = 1,
    cache: Optional[PatchDistanceCache] = None,
    subject_key=None,
) -> GradingMap:
    """Grade every in-mask voxel of a subject against a template library.

    Equivalent to :func:`grade_voxel` at each mask voxel (bit-identical),
    with the patch-distance fields computed once per template and shared.
    Out-of-mask voxels carry NaN.
    """
    if subject.channels != 6:
        raise GradingError("subject must be a 6-channel log-tensor volume")
    if subject.dims != lib.roi.dims:
        raise VolumeError(f"subject dims {subject.dims} != ROI dims {lib.roi.dims}")
    fields = _template_fields(subject, lib, radius, mode, threads, cache, subject_key)
    h = fields[0].copy()
    for f in fields[1:]:
        np.minimum(h, f, out=h)
    h = np.maximum(h, h_floor)
    num = np.zeros_like(h)
    den = np.zeros_like(h)
    for f, y in zip(fields, lib.labels):
        w = np.exp(-(f / h))
        num = num + w * y
        den = den + w
    values = num / den
    values[~lib.roi.mask] = np.nan
    vol = Volume(values, subject.spacing, allow_nan=True)
    return GradingMap(vol, lib.roi)


def leave_out_groups(n: int, k: int) -> list[int]:
    """Group index per template for contiguous leave-k-out partitioning."""
    if not 1 <= k < n:
        raise GradingError(f"leave-out k must satisfy 1 <= k < library size, got k={k}, size={n}")
    return [i // k for i in range(n)]


def grade_templates(
    lib: TemplateLibrary,
    radius: int = 1,
    k: int = 10,
    mode: str = "per-voxel",
    h_floor: float = H_FLOOR,
    threads: int = 1,
    cache: Optional[PatchDistanceCache] = None,
) -> list[GradingMap]:
    """Grade each template against the library minus its held-out group.

    Templates are partitioned into contiguous groups of ``k`` in library
    order; a template's grading map never sees its own group, so it never
    contributes to itself.
    """
    groups = leave_out_groups(len(lib), k)
    shared = cache if cache is not None else PatchDistanceCache()

    def one(t_idx: int) -> GradingMap:
        keep = [e for i, e in enumerate(lib.entries) if groups[i] != groups[t_idx]]
        sub = TemplateLibrary(keep, lib.roi)
        entry = lib.entries[t_idx]
        return grade_map(
            entry.log, sub, radius, mode, h_floor, threads=1, cache=shared, subject_key=entry.key
        )

    return map_ordered(one, range(len(lib)), threads)


class PatchGrader(BaseEstimator):
    """Scikit-learn style front end for template-library grading.

    ``fit`` takes a list of 6-channel log-tensor volumes and their +/-1
    labels; ``transform`` grades further volumes on the same grid.

    Parameters
    ----------
    radius : int
        Patch radius in voxels (0 compares single voxels).
    distance_mode : str
        ``"per-voxel"`` or ``"whole-patch"``; see :func:`patch_distance`.
    h_floor : float
        Lower bound for the per-voxel distance normalizer.
    threads : int
        Worker cap; results are independent of the value.
    """

    def __init__(self, radius: int = 1, distance_mode: str = "per-voxel",
                 h_floor: float = H_FLOOR, threads: int = 1):
        self.radius = radius
        self.distance_mode = distance_mode
        self.h_floor = h_floor
        self.threads = threads

    def fit(self, X: Sequence[Volume], y: Sequence[int], *, roi: RoiMask,
            metas: Optional[Sequence[SubjectMeta]] = None):
        X = list(X)
        y = list(y)
        if len(X) != len(y):
            raise GradingError(f"{len(X)} volumes but {len(y)} labels")
        if metas is None:
            metas = [
                SubjectMeta(f"template{i:04d}", "s0", age=50.0, label=int(label))
                for i, label in enumerate(y)
            ]
        entries = [LibraryEntry(vol, meta) for vol, meta in zip(X, metas)]
        self.library_ = TemplateLibrary(entries, roi)
        return self

    def transform(self, X):
        if not hasattr(self, "library_"):
            raise GradingError("PatchGrader must be fitted before transform")
        single = isinstance(X, Volume)
        vols = [X] if single else list(X)
        maps = [
            grade_map(v, self.library_, self.radius, self.distance_mode,
                      self.h_floor, threads=self.threads)
            for v in vols
        ]
        return maps[0] if single else maps

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y, **fit_params).transform(X)
