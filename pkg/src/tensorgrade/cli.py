"""Command-line front end wiring the pipeline stages together.

Subcommands: ``tensorize``, ``grade``, ``select``, ``classify``,
``phantom``, ``pipeline``, ``export-slices``. Every command writes its
outputs under ``--out-dir`` together with a ``run.json`` provenance record
(configuration echo plus input hashes, no timestamps). Any error exits
nonzero with a message naming the offending file or field.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

from .classify import ClassifyError, FeatureTable, stratified_cv
from .export import export_slices
from .grading import GradingError, grade_map, grade_templates
from .io import load_volume, save_volume
from .manifest import read_manifest
from .phantom import PhantomConfig, generate_population
from .pipeline import (
    LogTensorCache,
    RunConfig,
    reference_library,
    resolve_roi,
    run_pipeline,
    tensorize_entries,
    tensorize_scan,
)
from .selection import DesignMatrix, SelectionError, fit_coefficient_map
from .volume import VolumeError, crop


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_record(out_dir: Path, command: str, params: dict, inputs: dict) -> None:
    record = {
        "command": command,
        "config": params,
        "inputs": {
            key: ([_sha256(p) for p in val] if isinstance(val, list) else _sha256(val))
            for key, val in inputs.items()
        },
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.json").write_text(json.dumps(record, sort_keys=True, indent=2) + "\n")


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out-dir", default="out", help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="RNG seed")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker cap; results are identical at any value")
    parser.add_argument("--disp-sign", choices=["minus", "plus"], default=None,
                        help="displacement convention: mapped point = x - u (minus) or x + u")
    parser.add_argument("--distance-mode", choices=["per-voxel", "whole-patch"], default=None,
                        help="patch distance: sum of per-voxel norms, or one norm over the patch")
    parser.add_argument("--nonneg", action="store_true", default=None,
                        help="constrain selection coefficients to be nonnegative")
    parser.add_argument("--config", default=None, help="JSON configuration file")


def _int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok != ""]


def cmd_tensorize(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache = LogTensorCache(out_dir / "cache")
    disp_sign = args.disp_sign or "minus"
    total = 0
    outputs = []
    for raw in args.inputs:
        src = Path(raw)
        log, clamped = tensorize_scan(src, disp_sign, cache)
        suffix = ".nii" if src.suffix.lower() == ".nii" else ".f32"
        dst = out_dir / (src.stem + "_logtensor" + suffix)
        save_volume(log, dst)
        outputs.append({"input": str(src), "output": str(dst), "clamped_voxels": clamped})
        total += clamped
        print(f"{src} -> {dst} (clamped voxels: {clamped})")
    print(f"total clamped voxels: {total}")
    _write_record(out_dir, "tensorize",
                  {"disp_sign": disp_sign, "files": outputs}, {"inputs": list(args.inputs)})
    return 0


def cmd_grade(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries, manifest_roi = read_manifest(args.library)
    roi_union = resolve_roi(args.roi, manifest_roi)
    roi = roi_union.cropped(roi_union.bbox)
    cache = LogTensorCache(out_dir / "cache")
    disp_sign = args.disp_sign or "minus"
    labeled = [e for e in entries if e.meta.label in (-1, 1)]
    if not labeled:
        raise GradingError(f"library manifest {args.library} holds no labeled templates")
    scans = tensorize_entries(labeled, roi_union, disp_sign, args.threads or 1, cache)
    lib = reference_library(scans, roi)
    subject_full, _ = tensorize_scan(args.subject, disp_sign, cache)
    subject = crop(subject_full, roi_union.bbox)
    gmap = grade_map(subject, lib, args.radius, args.distance_mode or "per-voxel",
                     threads=args.threads or 1)
    gmap.save(out_dir / "grading_map.f32")
    mean = gmap.mean_in_mask
    print(f"graded {roi.count} voxels against {len(lib)} templates; mean grading {mean:+.4f}")
    _write_record(
        out_dir, "grade",
        {"radius": args.radius, "distance_mode": args.distance_mode or "per-voxel",
         "disp_sign": disp_sign, "templates": len(lib), "mean_grading": mean},
        {"subject": args.subject, "library": args.library},
    )
    return 0


def cmd_select(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries, manifest_roi = read_manifest(args.library)
    roi_union = resolve_roi(args.roi, manifest_roi)
    roi = roi_union.cropped(roi_union.bbox)
    cache = LogTensorCache(out_dir / "cache")
    disp_sign = args.disp_sign or "minus"
    labeled = [e for e in entries if e.meta.label in (-1, 1)]
    if not labeled:
        raise GradingError(f"library manifest {args.library} holds no labeled templates")
    scans = tensorize_entries(labeled, roi_union, disp_sign, args.threads or 1, cache)
    lib = reference_library(scans, roi)
    maps = grade_templates(lib, args.radius, args.leave_out_k,
                           args.distance_mode or "per-voxel", threads=args.threads or 1)
    design = DesignMatrix.from_grading_maps(maps, lib.labels)
    coeffs = fit_coefficient_map(design, args.rho, args.lam, nonneg=bool(args.nonneg))
    save_volume(coeffs.to_volume(), out_dir / "coefficient_map.f32")
    coeffs.write_csv(out_dir / "coefficient_map.csv")
    print(f"selected {coeffs.nonzero_count} of {len(coeffs.beta)} voxels "
          f"(rho={args.rho}, lam={args.lam}, converged={coeffs.converged})")
    _write_record(
        out_dir, "select",
        {"radius": args.radius, "leave_out_k": args.leave_out_k, "rho": args.rho,
         "lam": args.lam, "nonneg": bool(args.nonneg),
         "nonzero_coefficients": coeffs.nonzero_count, "converged": coeffs.converged},
        {"library": args.library},
    )
    return 0


def cmd_classify(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = FeatureTable.from_csv(args.table)
    names = [tok for tok in args.features.split(",") if tok]
    report = stratified_cv(
        table, names, n_iter=args.n_iter, test_fraction=args.test_fraction,
        seed=args.seed if args.seed is not None else 0, C=args.C,
        threads=args.threads or 1,
    )
    report.to_json(out_dir / "report.json")
    report.to_csv(out_dir / "report.csv")
    acc = report.summary["acc"]
    print(f"features {names}: ACC {acc['mean']:.1f} +/- {acc['sem']:.1f} "
          f"(SD {acc['sd']:.1f}) over {args.n_iter} iterations")
    _write_record(out_dir, "classify", dict(report.config), {"table": args.table})
    return 0


def cmd_phantom(args) -> int:
    cfg = PhantomConfig.from_json(args.config) if args.config else PhantomConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    out_dir = Path(args.out_dir)
    dataset = generate_population(cfg, out_dir, threads=args.threads or 1)
    print(f"wrote {len(dataset.entries)} subjects to {out_dir}")
    inputs = {"config": args.config} if args.config else {}
    _write_record(out_dir, "phantom", asdict(cfg), inputs)
    return 0


def cmd_pipeline(args) -> int:
    overrides = {
        "manifest": args.manifest,
        "roi": args.roi,
        "out_dir": args.out_dir if args.out_dir != "out" else None,
        "radius": args.radius,
        "n_per_class": args.n_per_class,
        "rho": args.rho,
        "lam": args.lam,
        "C": args.C,
        "n_iter": args.n_iter,
        "test_fraction": args.test_fraction,
        "leave_out_k": args.leave_out_k,
        "distance_mode": args.distance_mode,
        "disp_sign": args.disp_sign,
        "nonneg": args.nonneg,
        "seed": args.seed,
        "threads": args.threads,
        "compare_radii": _int_list(args.compare_radii) if args.compare_radii else None,
    }
    cfg = RunConfig.from_sources(args.config, overrides)
    if not cfg.manifest:
        raise VolumeError("pipeline needs a dataset manifest (--manifest or config file)")
    result = run_pipeline(cfg)
    for names, report in result.reports.items():
        acc = report.summary["acc"]
        print(f"{'+'.join(names)}: ACC {acc['mean']:.1f} +/- {acc['sem']:.1f}")
    print(f"outputs in {result.out_dir} (clamped voxels: {result.clamped_voxels})")
    return 0


def cmd_export_slices(args) -> int:
    vol = load_volume(args.input)
    out_dir = Path(args.out_dir)
    written = export_slices(vol, args.axis, _int_list(args.indices), out_dir, stem=args.stem)
    for p in written:
        print(p)
    _write_record(out_dir, "export-slices",
                  {"axis": args.axis, "indices": _int_list(args.indices), "stem": args.stem},
                  {"input": args.input})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tensorgrade",
        description="Patch-based grading of deformation tensor fields",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tensorize", help="displacement volumes to log-tensor volumes")
    p.add_argument("inputs", nargs="+", help="displacement volume files")
    _common_flags(p)
    p.set_defaults(func=cmd_tensorize)

    p = sub.add_parser("grade", help="grade one subject against a template library")
    p.add_argument("--subject", required=True, help="subject displacement or log-tensor volume")
    p.add_argument("--library", required=True, help="library manifest JSON")
    p.add_argument("--roi", action="append", default=None, help="ROI mask volume (repeatable)")
    p.add_argument("--radius", type=int, default=1, help="patch radius in voxels")
    _common_flags(p)
    p.set_defaults(func=cmd_grade)

    p = sub.add_parser("select", help="elastic-net voxel selection over a library")
    p.add_argument("--library", required=True, help="library manifest JSON")
    p.add_argument("--roi", action="append", default=None)
    p.add_argument("--radius", type=int, default=1)
    p.add_argument("--leave-out-k", type=int, default=10, dest="leave_out_k")
    p.add_argument("--rho", type=float, default=0.2, help="ridge weight")
    p.add_argument("--lam", type=float, default=0.09, help="lasso weight")
    _common_flags(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("classify", help="repeated stratified CV on a feature table")
    p.add_argument("--table", required=True, help="feature table CSV")
    p.add_argument("--features", default="grading",
                   help="comma-separated feature columns (e.g. volume,grading)")
    p.add_argument("--n-iter", type=int, default=100, dest="n_iter")
    p.add_argument("--test-fraction", type=float, default=0.2, dest="test_fraction")
    p.add_argument("--C", type=float, default=1.0, help="soft-margin weight")
    _common_flags(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("phantom", help="generate a synthetic phantom population")
    _common_flags(p)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("pipeline", help="full run from a dataset manifest")
    p.add_argument("--manifest", default=None, help="dataset manifest JSON")
    p.add_argument("--roi", action="append", default=None)
    p.add_argument("--radius", type=int, default=None)
    p.add_argument("--n-per-class", type=int, default=None, dest="n_per_class")
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--C", type=float, default=None)
    p.add_argument("--n-iter", type=int, default=None, dest="n_iter")
    p.add_argument("--test-fraction", type=float, default=None, dest="test_fraction")
    p.add_argument("--leave-out-k", type=int, default=None, dest="leave_out_k")
    p.add_argument("--compare-radii", default=None,
                   help="comma-separated radii for the patch-size comparison table")
    _common_flags(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("export-slices", help="grayscale PGM + CSV slices of a map volume")
    p.add_argument("--input", required=True, help="volume file to slice")
    p.add_argument("--axis", choices=["x", "y", "z"], default="z")
    p.add_argument("--indices", required=True, help="comma-separated slice indices")
    p.add_argument("--stem", default="slice")
    _common_flags(p)
    p.set_defaults(func=cmd_export_slices)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (VolumeError, GradingError, SelectionError, ClassifyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
