"""Synthetic two-population displacement phantoms with known atrophy.

Each subject is a displacement volume combining a radial contraction
toward a fixed center (Gaussian falloff, class-dependent strength) with
band-limited random noise. Controls get zero contraction, manifest
subjects the full configured strength, pre-manifest subjects a fraction
of it. The accompanying ROI is a sphere of twice the atrophy radius.

All randomness derives from per-subject streams seeded by
``(seed, subject index)``, so a population is a pure function of its
configuration.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._parallel import map_ordered
from .io import save_mask, save_volume
from .manifest import ManifestEntry, write_manifest
from .volume import RoiMask, SubjectMeta, Volume, VolumeError

CLASS_NAMES = ("control", "pre-manifest", "manifest")
CLASS_LABELS = {"control": 1, "pre-manifest": 0, "manifest": -1}
CLASS_PREFIX = {"control": "cn", "pre-manifest": "pre", "manifest": "hd"}


@dataclass
class PhantomConfig:
    """Geometry, atrophy model, noise model and cohort sizes."""

    dims: tuple = (24, 24, 24)
    spacing: tuple = (1.0, 1.0, 1.0)
    atrophy_center: tuple = (12, 12, 12)
    atrophy_radius_mm: float = 4.0
    atrophy_strength: float = 0.33
    pre_strength_fraction: float = 0.5
    center_jitter_mm: float = 0.75
    noise_amplitude_mm: float = 0.33
    noise_correlation_mm: float = 1.3
    n_control: int = 30
    n_pre_manifest: int = 30
    n_manifest: int = 30
    age_range_control: tuple = (30.0, 65.0)
    age_range_pre_manifest: tuple = (30.0, 55.0)
    age_range_manifest: tuple = (40.0, 70.0)
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.atrophy_center = tuple(int(c) for c in self.atrophy_center)
        self.age_range_control = tuple(float(a) for a in self.age_range_control)
        self.age_range_pre_manifest = tuple(float(a) for a in self.age_range_pre_manifest)
        self.age_range_manifest = tuple(float(a) for a in self.age_range_manifest)
        if not 0.0 <= self.atrophy_strength < 1.0:
            raise VolumeError(
                f"atrophy_strength must be in [0, 1), got {self.atrophy_strength}"
            )
        if not self.atrophy_radius_mm > 0:
            raise VolumeError(f"atrophy_radius_mm must be > 0, got {self.atrophy_radius_mm}")
        if self.noise_amplitude_mm < 0 or self.noise_correlation_mm <= 0:
            raise VolumeError("noise amplitude must be >= 0 and correlation length > 0")
        if self.center_jitter_mm < 0:
            raise VolumeError(f"center_jitter_mm must be >= 0, got {self.center_jitter_mm}")
        if min(self.n_control, self.n_pre_manifest, self.n_manifest) < 1:
            raise VolumeError("each class needs at least one subject")
        if any(s <= 0 for s in self.spacing) or min(self.dims) < 2:
            raise VolumeError("spacing must be positive and dims >= 2 per axis")

    @classmethod
    def from_json(cls, path) -> "PhantomConfig":
        raw = json.loads(Path(path).read_text())
        return cls(**raw)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), sort_keys=True, indent=2) + "\n")

    def class_strength(self, klass: str) -> float:
        if klass == "control":
            return 0.0
        if klass == "pre-manifest":
            return self.pre_strength_fraction * self.atrophy_strength
        if klass == "manifest":
            return self.atrophy_strength
        raise VolumeError(f"unknown class {klass!r}; expected one of {CLASS_NAMES}")

    def age_range(self, klass: str) -> tuple[float, float]:
        return {
            "control": self.age_range_control,
            "pre-manifest": self.age_range_pre_manifest,
            "manifest": self.age_range_manifest,
        }[klass]


def _coordinate_offsets_mm(cfg: PhantomConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Physical offsets from the atrophy center, shape (nz, ny, nx) each."""
    nx, ny, nz = cfg.dims
    sx, sy, sz = cfg.spacing
    cx, cy, cz = cfg.atrophy_center
    xs = (np.arange(nx) - cx) * sx
    ys = (np.arange(ny) - cy) * sy
    zs = (np.arange(nz) - cz) * sz
    gz, gy, gx = np.meshgrid(zs, ys, xs, indexing="ij")
    return gx, gy, gz


def band_limited_noise(cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    """One scalar noise field with Gaussian spectral envelope, unit RMS."""
    nx, ny, nz = cfg.dims
    sx, sy, sz = cfg.spacing
    white = rng.standard_normal((nz, ny, nx))
    kz = 2.0 * np.pi * np.fft.fftfreq(nz, d=sz)
    ky = 2.0 * np.pi * np.fft.fftfreq(ny, d=sy)
    kx = 2.0 * np.pi * np.fft.rfftfreq(nx, d=sx)
    k2 = kz[:, None, None] ** 2 + ky[None, :, None] ** 2 + kx[None, None, :] ** 2
    envelope = np.exp(-0.5 * k2 * cfg.noise_correlation_mm**2)
    smooth = np.fft.irfftn(np.fft.rfftn(white) * envelope, s=(nz, ny, nx), axes=(0, 1, 2))
    rms = np.sqrt(np.mean(smooth * smooth))
    return smooth / rms


def generate_subject(
    cfg: PhantomConfig, klass: str, rng: np.random.Generator, subject_id: str = "subject", scan_id: str = "s1"
) -> tuple[Volume, SubjectMeta]:
    """Draw one subject's displacement volume and metadata.

    The deterministic part is ``u = strength * exp(-r^2 / (2 sigma^2)) * d``
    with ``d`` the physical offset from the subject's atrophy center and
    ``sigma`` the atrophy radius. Each subject's center is jittered
    uniformly within ``center_jitter_mm`` per axis (anatomical variability
    left over after registration), and an independent band-limited noise
    field per component is added at the configured RMS amplitude.
    """
    strength = cfg.class_strength(klass)
    lo, hi = cfg.age_range(klass)
    age = float(rng.uniform(lo, hi))
    jitter = rng.uniform(-cfg.center_jitter_mm, cfg.center_jitter_mm, size=3)
    gx, gy, gz = _coordinate_offsets_mm(cfg)
    gx, gy, gz = gx - jitter[0], gy - jitter[1], gz - jitter[2]
    r2 = gx * gx + gy * gy + gz * gz
    sigma = cfg.atrophy_radius_mm
    profile = strength * np.exp(-r2 / (2.0 * sigma * sigma))
    u = np.stack([profile * gx, profile * gy, profile * gz], axis=-1)
    if cfg.noise_amplitude_mm > 0:
        for comp in range(3):
            u[..., comp] += cfg.noise_amplitude_mm * band_limited_noise(cfg, rng)
    meta = SubjectMeta(subject_id=subject_id, scan_id=scan_id, age=age, label=CLASS_LABELS[klass])
    return Volume(u, cfg.spacing), meta


def roi_sphere(cfg: PhantomConfig) -> RoiMask:
    """Spherical ROI of radius twice the atrophy radius around its center."""
    gx, gy, gz = _coordinate_offsets_mm(cfg)
    r2 = gx * gx + gy * gy + gz * gz
    radius = 2.0 * cfg.atrophy_radius_mm
    return RoiMask(r2 <= radius * radius)


@dataclass
class PhantomDataset:
    manifest_path: Path
    roi_path: Path
    entries: list = field(default_factory=list)


def generate_population(cfg: PhantomConfig, out_dir, threads: int = 1) -> PhantomDataset:
    """Write a full phantom population: volumes, ROI mask and manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plan = []
    index = 0
    for klass, count in (
        ("control", cfg.n_control),
        ("pre-manifest", cfg.n_pre_manifest),
        ("manifest", cfg.n_manifest),
    ):
        for k in range(count):
            sid = f"{CLASS_PREFIX[klass]}{k:03d}"
            plan.append((index, klass, sid))
            index += 1

    def one(item) -> ManifestEntry:
        idx, klass, sid = item
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, idx]))
        vol, meta = generate_subject(cfg, klass, rng, subject_id=sid)
        path = out_dir / f"{sid}.f32"
        save_volume(vol, path)
        return ManifestEntry(path=path, meta=meta)

    entries = map_ordered(one, plan, threads)
    roi_path = out_dir / "roi_mask.f32"
    save_mask(roi_sphere(cfg), roi_path, cfg.spacing)
    manifest_path = out_dir / "manifest.json"
    write_manifest(manifest_path, entries, roi_path=roi_path)
    cfg.to_json(out_dir / "phantom_config.json")
    return PhantomDataset(manifest_path=manifest_path, roi_path=roi_path, entries=entries)
