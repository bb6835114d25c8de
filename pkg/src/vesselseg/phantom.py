"""Synthetic vascular phantoms with complete and deliberately partial annotations.

A phantom is a recursive binary tree of capsules (sphere-swept segments)
inside a spherical "brain" region. Intensities follow three bands
(background < tissue < vessel) plus Gaussian noise. The partial mask keeps
only segments at least ``annotation_radius`` thick, which mimics clinical
labels that cover the main vessels and leave fine branches as background.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume_core import (
    AnnotationExtent,
    CaseRecord,
    DatasetManifest,
    LabelMask,
    Volume,
    mask_bounding_box,
    save_manifest,
    save_mask,
    save_volume,
    split_dataset,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PhantomSpec:
    grid_size: int = 64
    spacing: float = 0.35  # mm
    depth: int = 3
    trunk_radius: float = 1.2  # mm
    radius_decay: float = 0.7
    trunk_length: float = 14.0  # mm
    length_decay: float = 0.7
    branch_angle: tuple[float, float] = (25.0, 60.0)  # degrees from the parent direction
    background: tuple[float, float] = (20.0, 8.0)  # (mean, std)
    tissue: tuple[float, float] = (80.0, 8.0)
    vessel: tuple[float, float] = (160.0, 8.0)
    noise_sigma: float = 4.0
    annotation_radius: float = 1.0  # mm; thinner segments stay unannotated
    brain_radius_fraction: float = 0.46
    extent_margin: int = 2  # voxels added around the partial mask's bounding box
    seed: int = 0

    def __post_init__(self):
        if not self.background[0] < self.tissue[0] < self.vessel[0]:
            raise ValueError("band means must satisfy background < tissue < vessel")
        if self.grid_size < 8 or self.spacing <= 0 or self.trunk_radius <= 0:
            raise ValueError("invalid phantom geometry")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")


@dataclass(frozen=True)
class Segment:
    start: np.ndarray  # mm
    end: np.ndarray
    radius: float
    level: int


@dataclass
class Phantom:
    volume: Volume
    full_mask: LabelMask
    partial_mask: LabelMask
    extent: AnnotationExtent
    segments: list[Segment]

    @property
    def fine_mask(self) -> np.ndarray:
        return (self.full_mask.data > 0) & (self.partial_mask.data == 0)


def _orthonormal(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(d, u)


def _grow_tree(spec: PhantomSpec, rng: np.random.Generator) -> list[Segment]:
    extent_mm = spec.grid_size * spec.spacing
    center = np.full(3, extent_mm / 2.0)
    # oblique trunk so its bounding box is thick along every axis
    direction = rng.uniform(0.5, 1.0, size=3) * rng.choice([-1.0, 1.0], size=3)
    direction /= np.linalg.norm(direction)
    start = center - direction * spec.trunk_length * 0.6
    segments: list[Segment] = []

    def grow(a, d, length, radius, level):
        b = a + d * length
        segments.append(Segment(a, b, radius, level))
        if level >= spec.depth:
            return
        u, v = _orthonormal(d)
        phi = rng.uniform(0, 2 * math.pi)
        for k in range(2):
            theta = math.radians(rng.uniform(*spec.branch_angle))
            az = phi + k * math.pi
            child = math.cos(theta) * d + math.sin(theta) * (math.cos(az) * u + math.sin(az) * v)
            grow(b, child / np.linalg.norm(child), length * spec.length_decay,
                 radius * spec.radius_decay, level + 1)

    grow(start, direction, spec.trunk_length, spec.trunk_radius, 0)
    return segments


def rasterize_capsule(shape, spacing: float, seg: Segment, out: np.ndarray) -> bool:
    """Mark voxels whose centre lies within ``seg.radius`` of the segment. Returns False if clipped."""
    lo_mm = np.minimum(seg.start, seg.end) - seg.radius
    hi_mm = np.maximum(seg.start, seg.end) + seg.radius
    lo = np.maximum(np.floor(lo_mm / spacing).astype(int), 0)
    hi = np.minimum(np.ceil(hi_mm / spacing).astype(int) + 1, shape)
    clipped = bool((lo_mm < 0).any() or (hi_mm > np.array(shape) * spacing).any())
    if (hi <= lo).any():
        return False
    axes = [np.arange(lo[i], hi[i]) * spacing for i in range(3)]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([x, y, z], axis=-1)
    ab = seg.end - seg.start
    t = np.clip(((pts - seg.start) @ ab) / max(float(ab @ ab), 1e-12), 0.0, 1.0)
    closest = seg.start + t[..., None] * ab
    inside = np.linalg.norm(pts - closest, axis=-1) <= seg.radius
    out[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] |= inside
    return not clipped


def generate_phantom(spec: PhantomSpec) -> Phantom:
    rng = np.random.default_rng(spec.seed)
    n = spec.grid_size
    shape = (n, n, n)
    segments = _grow_tree(spec, rng)

    full = np.zeros(shape, dtype=bool)
    partial = np.zeros(shape, dtype=bool)
    n_clipped = 0
    for seg in segments:
        n_clipped += not rasterize_capsule(shape, spec.spacing, seg, full)
        if seg.radius >= spec.annotation_radius:
            rasterize_capsule(shape, spec.spacing, seg, partial)
    if n_clipped:
        log.warning("%d vessel segments leave the grid and were clipped", n_clipped)

    idx = (np.indices(shape).reshape(3, -1).T + 0.5) - n / 2.0
    brain = (np.linalg.norm(idx, axis=1) <= spec.brain_radius_fraction * n).reshape(shape)
    data = np.empty(shape, dtype=np.float32)
    for region, (mu, sigma) in ((~brain, spec.background), (brain, spec.tissue), (full, spec.vessel)):
        data[region] = mu + sigma * rng.standard_normal(int(region.sum()))
    data += spec.noise_sigma * rng.standard_normal(shape).astype(np.float32)

    sp = (spec.spacing,) * 3
    partial_mask = LabelMask(partial, sp)
    extent = mask_bounding_box(partial_mask).dilate(spec.extent_margin, shape)
    return Phantom(Volume(data, sp), LabelMask(full, sp), partial_mask, extent, segments)


def phantom_suite(n_cases: int, base_spec: PhantomSpec, seed: int, out_dir,
                  ratios=(0.7, 0.1, 0.2)) -> DatasetManifest:
    """Generate ``n_cases`` phantoms into ``out_dir`` with a patient-wise split manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    case_seeds = np.random.SeedSequence(seed).generate_state(n_cases)
    records = []
    for i, s in enumerate(case_seeds):
        cid = f"case_{i:03d}"
        ph = generate_phantom(dataclasses.replace(base_spec, seed=int(s)))
        save_volume(ph.volume, out / cid / "image.nii.gz")
        save_mask(ph.partial_mask, out / cid / "mask.nii.gz")
        save_mask(ph.full_mask, out / cid / "full_mask.nii.gz")
        records.append(CaseRecord(id=cid, patient=cid, volume=f"{cid}/image.nii.gz", mask=f"{cid}/mask.nii.gz",
                                  center="phantom", extent=ph.extent, full_mask=f"{cid}/full_mask.nii.gz"))
    manifest = DatasetManifest(records, root=out)
    try:
        manifest = split_dataset(manifest, ratios, seed)
    except ValueError:
        log.warning("%d cases are too few for a train/val/test split; manifest left unsplit", n_cases)
    save_manifest(manifest, out / "manifest.json")
    return manifest
