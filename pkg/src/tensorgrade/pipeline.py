"""End-to-end run orchestration: tensorize, grade, select, classify.

A run is a pure function of its configuration and input files: random
choices derive from the configured seed, parallel stages collect results
in input order, and provenance records carry no timestamps, so reruns are
byte-identical at any thread count.

Longitudinal-safe grading follows the subject-wise scheme: every query
gets its own age-matched library (never containing its own scans), the
library's templates are graded leave-k-out among themselves, an
elastic net on those maps picks discriminant voxels, and the query's map
aggregates into one global grading value. Alongside the grading feature,
a structure-volume analogue integrates the deformation determinant over
the ROI.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ._parallel import map_ordered
from .classify import EvaluationReport, FeatureRow, FeatureTable, stratified_cv
from .grading import (
    GradingError,
    GradingMap,
    LibraryEntry,
    PatchDistanceCache,
    TemplateLibrary,
    build_library,
    grade_map,
    grade_templates,
)
from .io import load_mask, load_volume, save_volume
from .manifest import ManifestEntry, read_manifest
from .selection import CoefficientMap, DesignMatrix, fit_coefficient_map, global_grading
from .tensors import det_from_log, displacement_to_log_tensor
from .volume import RoiMask, Volume, VolumeError, crop, union_bbox

DEFAULT_RADIUS = 1
DEFAULT_N_PER_CLASS = 50
DEFAULT_RHO = 0.2
DEFAULT_LAM = 0.09
DEFAULT_C = 1.0
DEFAULT_N_ITER = 100
DEFAULT_TEST_FRACTION = 0.2
DEFAULT_LEAVE_OUT_K = 10


@dataclass
class RunConfig:
    """Paths plus every pipeline parameter, echoed into all reports."""

    manifest: str = ""
    roi: Optional[object] = None  # path or list of paths; falls back to the manifest ROI
    out_dir: str = "out"
    radius: int = DEFAULT_RADIUS
    n_per_class: int = DEFAULT_N_PER_CLASS
    rho: float = DEFAULT_RHO
    lam: float = DEFAULT_LAM
    C: float = DEFAULT_C
    n_iter: int = DEFAULT_N_ITER
    test_fraction: float = DEFAULT_TEST_FRACTION
    leave_out_k: int = DEFAULT_LEAVE_OUT_K
    distance_mode: str = "per-voxel"
    disp_sign: str = "minus"
    nonneg: bool = False
    seed: int = 0
    threads: int = 1
    compare_radii: Optional[list] = None

    def __post_init__(self):
        if self.disp_sign not in ("minus", "plus"):
            raise VolumeError(f"disp_sign must be 'minus' or 'plus', got {self.disp_sign!r}")

    @classmethod
    def from_sources(cls, config_path=None, overrides: Optional[dict] = None) -> "RunConfig":
        """Resolve flag > file > default precedence."""
        values: dict = {}
        if config_path is not None:
            values.update(json.loads(Path(config_path).read_text()))
        for key, val in (overrides or {}).items():
            if val is not None:
                values[key] = val
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(values) - known
        if unknown:
            raise VolumeError(f"unknown configuration keys: {sorted(unknown)}")
        return cls(**values)

    def echo(self) -> dict:
        """Parameter echo for reports.

        ``threads`` and ``out_dir`` are execution-placement knobs that never
        affect results, so they are left out: reruns must be byte-identical
        at any thread count.
        """
        doc = asdict(self)
        doc["roi"] = [str(p) for p in _roi_list(self.roi)] if self.roi else None
        del doc["threads"]
        del doc["out_dir"]
        return doc


def _roi_list(roi) -> list:
    if roi is None:
        return []
    if isinstance(roi, (str, Path)):
        return [roi]
    return list(roi)


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class TensorizedScan:
    """One scan after tensorization, cropped to the ROI grid."""

    log: Volume
    meta: object
    clamped_voxels: int
    volume_mm3: float

    @property
    def key(self):
        return (self.meta.subject_id, self.meta.scan_id)


class LogTensorCache:
    """Content-hash keyed store of full-grid log-tensor volumes.

    Entries are float64 ``.npy`` payloads plus a JSON sidecar, so resumed
    runs reuse bit-identical fields.
    """

    def __init__(self, root: Path):
        self.root = Path(root)
        self.hits = 0
        self.misses = 0

    def _paths(self, digest: str) -> tuple[Path, Path]:
        return self.root / f"{digest}.npy", self.root / f"{digest}.json"

    def load(self, digest: str):
        npy, meta = self._paths(digest)
        if not (npy.exists() and meta.exists()):
            return None
        info = json.loads(meta.read_text())
        data = np.load(npy)
        self.hits += 1
        return Volume(data, info["spacing"]), int(info["clamped_voxels"])

    def store(self, digest: str, log: Volume, clamped: int) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        npy, meta = self._paths(digest)
        np.save(npy, log.data)
        meta.write_text(json.dumps(
            {"spacing": list(log.spacing), "clamped_voxels": clamped}, sort_keys=True
        ) + "\n")
        self.misses += 1


def tensorize_scan(path, disp_sign: str = "minus", cache: Optional[LogTensorCache] = None):
    """Load one scan and return its full-grid log-tensor volume.

    Three-channel inputs are treated as displacement fields (optionally
    sign-flipped at ingestion); six-channel inputs are taken as already
    tensorized. Returns ``(log_volume, clamped_voxel_count)``.
    """
    path = Path(path)
    vol = load_volume(path)
    if vol.channels == 6:
        return vol, 0
    if vol.channels != 3:
        raise VolumeError(
            f"{path}: expected a 3-channel displacement or 6-channel log-tensor "
            f"volume, got {vol.channels} channels"
        )
    digest = None
    if cache is not None:
        h = hashlib.sha256()
        h.update(_sha256_file(path).encode())
        h.update(disp_sign.encode())
        digest = h.hexdigest()
        found = cache.load(digest)
        if found is not None:
            return found
    if disp_sign == "plus":
        vol = Volume(-vol.data, vol.spacing)
    log, clamped = displacement_to_log_tensor(vol)
    if cache is not None:
        cache.store(digest, log, clamped)
    return log, clamped


def resolve_roi(cfg_roi, manifest_roi: Optional[Path]) -> RoiMask:
    """Union the configured ROI masks (or the manifest's) into one."""
    paths = _roi_list(cfg_roi) or ([manifest_roi] if manifest_roi else [])
    if not paths:
        raise VolumeError("no ROI mask given and the manifest names none")
    return union_bbox([load_mask(p) for p in paths])


def tensorize_entries(
    entries: Sequence[ManifestEntry],
    roi_union: RoiMask,
    disp_sign: str,
    threads: int = 1,
    cache: Optional[LogTensorCache] = None,
) -> list[TensorizedScan]:
    """Tensorize, crop to the ROI bounding box, and measure volumes."""
    box = roi_union.bbox
    roi = roi_union.cropped(box)

    def one(entry: ManifestEntry) -> TensorizedScan:
        log_full, clamped = tensorize_scan(entry.path, disp_sign, cache)
        if log_full.dims != roi_union.dims:
            raise VolumeError(
                f"{entry.path}: dims {log_full.dims} do not match ROI dims {roi_union.dims}"
            )
        log = crop(log_full, box)
        det = det_from_log(log)
        volume_mm3 = float(det[roi.mask].sum() * log.voxel_volume_mm3)
        return TensorizedScan(log=log, meta=entry.meta, clamped_voxels=clamped,
                              volume_mm3=volume_mm3)

    return map_ordered(one, entries, threads)


def reference_library(scans: Sequence[TensorizedScan], roi: RoiMask) -> TemplateLibrary:
    """All labeled scans as one library, classes interleaved in scan order."""
    controls = [s for s in scans if s.meta.label == 1]
    disease = [s for s in scans if s.meta.label == -1]
    ordered: list[TensorizedScan] = []
    for a, b in zip(controls, disease):
        ordered.extend((a, b))
    longer = controls if len(controls) > len(disease) else disease
    ordered.extend(longer[min(len(controls), len(disease)):])
    return TemplateLibrary([LibraryEntry(s.log, s.meta) for s in ordered], roi)


@dataclass
class QueryResult:
    subject_id: str
    klass: int
    grading: float
    grading_plain_sum: Optional[float]
    volume_mm3: float
    coefficient_nonzeros: int
    converged: bool


@dataclass
class PipelineResult:
    config: RunConfig
    out_dir: Path
    feature_table: FeatureTable
    reports: dict
    pooled_coefficients: CoefficientMap
    clamped_voxels: int
    queries: list = field(default_factory=list)
    comparison_rows: list = field(default_factory=list)


def _grade_one_query(
    scan: TensorizedScan,
    pool: Sequence[TensorizedScan],
    roi: RoiMask,
    cfg: RunConfig,
    radius: int,
    cache: PatchDistanceCache,
    warm_start=None,
) -> QueryResult:
    lib = build_library(
        [(s.log, s.meta) for s in pool], scan.meta, cfg.n_per_class, roi
    )
    template_maps = grade_templates(
        lib, radius, cfg.leave_out_k, cfg.distance_mode, threads=1, cache=cache
    )
    design = DesignMatrix.from_grading_maps(template_maps, lib.labels)
    coeffs = fit_coefficient_map(
        design, cfg.rho, cfg.lam, nonneg=cfg.nonneg, warm_start=warm_start
    )
    # Query-to-template fields are reusable only when the query itself is
    # a pool member; skip the shared cache otherwise.
    query_cache = cache if scan.meta.label != 0 else None
    gmap = grade_map(
        scan.log, lib, radius, cfg.distance_mode,
        cache=query_cache, subject_key=scan.key,
    )
    gg = global_grading(gmap, coeffs)
    return QueryResult(
        subject_id=scan.meta.subject_id,
        klass=1 if scan.meta.label == 0 else -1,
        grading=gg.value,
        grading_plain_sum=gg.plain_sum,
        volume_mm3=scan.volume_mm3,
        coefficient_nonzeros=coeffs.nonzero_count,
        converged=coeffs.converged,
    )


def grade_all_queries(
    scans: Sequence[TensorizedScan],
    roi: RoiMask,
    cfg: RunConfig,
    radius: int,
    cache: Optional[PatchDistanceCache] = None,
    warm_start=None,
) -> list[QueryResult]:
    """Per-query library building, selection and global grading.

    Queries are the pre-manifest scans (label 0, positive class) and the
    controls (label +1, negative class); manifest scans only serve as
    templates. ``warm_start`` seeds every query's coefficient fit with one
    shared vector (typically the pooled fit), which keeps results
    independent of query processing order.
    """
    pool = [s for s in scans if s.meta.label in (-1, 1)]
    queries = [s for s in scans if s.meta.label in (0, 1)]
    if not queries:
        raise GradingError("no query subjects (labels 0 or +1) in the dataset")
    shared = cache if cache is not None else PatchDistanceCache()
    return map_ordered(
        lambda s: _grade_one_query(s, pool, roi, cfg, radius, shared, warm_start),
        queries,
        cfg.threads,
    )


def _radius_run(scans, roi, cfg: RunConfig, radius: int, cache: PatchDistanceCache):
    """Pooled selection plus per-query grading for one patch radius."""
    pool_scans = [s for s in scans if s.meta.label in (-1, 1)]
    pooled_lib = reference_library(pool_scans, roi)
    pooled_maps = grade_templates(
        pooled_lib, radius, cfg.leave_out_k, cfg.distance_mode,
        threads=cfg.threads, cache=cache,
    )
    pooled_design = DesignMatrix.from_grading_maps(pooled_maps, pooled_lib.labels)
    pooled = fit_coefficient_map(pooled_design, cfg.rho, cfg.lam, nonneg=cfg.nonneg)
    results = grade_all_queries(scans, roi, cfg, radius, cache, warm_start=pooled.beta)
    return results, pooled


def _feature_table(results: Sequence[QueryResult]) -> FeatureTable:
    rows = [
        FeatureRow(
            subject_id=r.subject_id,
            klass=r.klass,
            features={"grading": r.grading, "volume": r.volume_mm3},
        )
        for r in results
    ]
    return FeatureTable(rows, ["grading", "volume"])


FEATURE_SETS = (("grading",), ("volume",), ("volume", "grading"))


def run_pipeline(cfg: RunConfig) -> PipelineResult:
    """Execute the full pipeline and write all artifacts under ``out_dir``."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries, manifest_roi = read_manifest(cfg.manifest)
    roi_union = resolve_roi(cfg.roi, manifest_roi)
    roi = roi_union.cropped(roi_union.bbox)
    tensor_cache = LogTensorCache(out_dir / "cache")
    scans = tensorize_entries(entries, roi_union, cfg.disp_sign, cfg.threads, tensor_cache)
    clamped = sum(s.clamped_voxels for s in scans)

    pair_cache = PatchDistanceCache()
    results, pooled = _radius_run(scans, roi, cfg, cfg.radius, pair_cache)
    table = _feature_table(results)
    table.to_csv(out_dir / "feature_table.csv")

    reports: dict = {}
    for names in FEATURE_SETS:
        report = stratified_cv(
            table, list(names), cfg.n_iter, cfg.test_fraction, cfg.seed, cfg.C, cfg.threads
        )
        report.config.update({"pipeline": cfg.echo(), "radius": cfg.radius})
        stem = "report_" + "_".join(names)
        report.to_json(out_dir / f"{stem}.json")
        report.to_csv(out_dir / f"{stem}.csv")
        reports[names] = report

    # The pooled coefficient map doubles as the exported visualization.
    save_volume(pooled.to_volume(), out_dir / "coefficient_map.f32")
    pooled.write_csv(out_dir / "coefficient_map.csv")

    comparison_rows: list[dict] = []
    if cfg.compare_radii:
        for radius in cfg.compare_radii:
            radius = int(radius)
            res_r = results if radius == cfg.radius else _radius_run(
                scans, roi, cfg, radius, pair_cache
            )[0]
            rep = stratified_cv(
                _feature_table(res_r), ["grading"], cfg.n_iter,
                cfg.test_fraction, cfg.seed, cfg.C, cfg.threads,
            )
            side = 2 * radius + 1
            comparison_rows.append({
                "radius": radius,
                "patch": f"{side}x{side}x{side}",
                "acc_mean": rep.summary["acc"]["mean"],
                "acc_sem": rep.summary["acc"]["sem"],
                "sen_mean": rep.summary["sen"]["mean"],
                "sen_sem": rep.summary["sen"]["sem"],
                "spe_mean": rep.summary["spe"]["mean"],
                "spe_sem": rep.summary["spe"]["sem"],
            })
        _write_comparison_csv(out_dir / "patch_size_comparison.csv", comparison_rows)

    record = {
        "command": "pipeline",
        "config": cfg.echo(),
        "inputs": {
            "manifest": _sha256_file(Path(cfg.manifest)),
            "roi": [
                _sha256_file(Path(p))
                for p in (_roi_list(cfg.roi) or ([manifest_roi] if manifest_roi else []))
            ],
        },
        "stats": {
            "clamped_voxels": clamped,
            "n_scans": len(scans),
            "n_queries": len(results),
            "n_templates": sum(1 for s in scans if s.meta.label in (-1, 1)),
            "roi_voxels": roi.count,
            "pooled_nonzero_coefficients": pooled.nonzero_count,
        },
        "globals": {
            r.subject_id: {
                "class": r.klass,
                "grading": r.grading,
                "grading_plain_sum": r.grading_plain_sum,
                "volume_mm3": r.volume_mm3,
            }
            for r in results
        },
    }
    (out_dir / "run.json").write_text(json.dumps(record, sort_keys=True, indent=2) + "\n")

    return PipelineResult(
        config=cfg,
        out_dir=out_dir,
        feature_table=table,
        reports=reports,
        pooled_coefficients=pooled,
        clamped_voxels=clamped,
        queries=results,
        comparison_rows=comparison_rows,
    )


def _write_comparison_csv(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["radius", "patch", "acc_mean", "acc_sem", "sen_mean", "sen_sem", "spe_mean", "spe_sem"]
        )
        for row in rows:
            writer.writerow([
                row["radius"], row["patch"],
                *(repr(float(row[k])) for k in
                  ("acc_mean", "acc_sem", "sen_mean", "sen_sem", "spe_mean", "spe_sem")),
            ])
