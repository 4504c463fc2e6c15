"""Dataset manifests: a JSON index of scans with identity, age and label.

The manifest lives next to the volumes it lists; entry paths are stored
relative to the manifest file so datasets stay relocatable. The same
schema serves phantom populations and template libraries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .volume import SubjectMeta, VolumeError


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    meta: SubjectMeta


def write_manifest(
    path,
    entries: Sequence[ManifestEntry],
    roi_path: Optional[Path] = None,
    extra: Optional[dict] = None,
) -> None:
    path = Path(path)
    base = path.parent
    doc = {
        "entries": [
            {
                "path": str(e.path.relative_to(base)) if e.path.is_absolute() else str(e.path),
                "subject_id": e.meta.subject_id,
                "scan_id": e.meta.scan_id,
                "age": e.meta.age,
                "label": e.meta.label,
            }
            for e in entries
        ],
    }
    if roi_path is not None:
        roi_path = Path(roi_path)
        doc["roi"] = str(roi_path.relative_to(base)) if roi_path.is_absolute() else str(roi_path)
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def read_manifest(path) -> tuple[list[ManifestEntry], Optional[Path]]:
    """Load a manifest; returns entries with absolute paths and the ROI path."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise VolumeError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise VolumeError(f"manifest {path} is not valid JSON: {exc}") from exc
    if "entries" not in doc or not isinstance(doc["entries"], list):
        raise VolumeError(f"manifest {path} has no entry list")
    base = path.parent
    entries = []
    seen = set()
    for i, raw in enumerate(doc["entries"]):
        for key in ("path", "subject_id", "scan_id", "age", "label"):
            if key not in raw:
                raise VolumeError(f"manifest {path} entry {i} missing field {key!r}")
        meta = SubjectMeta(
            subject_id=str(raw["subject_id"]),
            scan_id=str(raw["scan_id"]),
            age=float(raw["age"]),
            label=int(raw["label"]),
        )
        scan_key = (meta.subject_id, meta.scan_id)
        if scan_key in seen:
            raise VolumeError(f"manifest {path} lists scan {scan_key} twice")
        seen.add(scan_key)
        entries.append(ManifestEntry(path=(base / raw["path"]).resolve(), meta=meta))
    roi = (base / doc["roi"]).resolve() if "roi" in doc else None
    return entries, roi
