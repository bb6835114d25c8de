"""Resolution standardization, Adaptive Histogram Attention (AHA) and patch grouping.

AHA finds the background mode of the global intensity histogram, locates the
valley that separates it from brain tissue, clamps everything below that
cutoff and min-max normalizes the rest to [0, 1]. The resulting "vessel-like"
volume drops the easy background/vessel contrast so the model has to separate
vessels from tissue by structure.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume_core import (
    AnnotationExtent,
    CaseRecord,
    DatasetManifest,
    LabelMask,
    Volume,
    load_mask,
    load_volume,
    mask_bounding_box,
    save_mask,
    save_volume,
)

log = logging.getLogger(__name__)

DEFAULT_SPACING = 0.35  # mm/voxel


@dataclass(frozen=True)
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    degenerate: bool = False

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    @property
    def bin_width(self) -> float:
        return float(self.bin_edges[1] - self.bin_edges[0])


@dataclass(frozen=True)
class AhaParams:
    bins: int = 256
    smoothing_window: int = 5
    background_search_fraction: float = 1.0 / 3.0

    def __post_init__(self):
        if self.bins < 16:
            raise ValueError("AHA needs at least 16 bins")
        if self.smoothing_window < 1 or self.smoothing_window % 2 == 0:
            raise ValueError("smoothing_window must be odd and >= 1")
        if not 0 < self.background_search_fraction <= 1:
            raise ValueError("background_search_fraction must lie in (0, 1]")


class PatchGroup(str, enum.Enum):
    LABELED = "labeled"
    UNLABELED = "unlabeled"


@dataclass
class Patch:
    image: np.ndarray
    vessel_like: np.ndarray
    grid_origin: tuple[int, int, int]
    group: PatchGroup
    mask: np.ndarray | None = None
    case_id: str = ""

    def __post_init__(self):
        if self.group == PatchGroup.LABELED and self.mask is None:
            raise ValueError("labeled patch needs a mask")
        if self.group == PatchGroup.UNLABELED and self.mask is not None:
            raise ValueError("unlabeled patch must not carry a mask")


# ---------------------------------------------------------------------------
# resampling


def resample_to_spacing(vol: Volume, mask: LabelMask | None = None, target_spacing=DEFAULT_SPACING,
                        mask_interpolation: str = "nearest"):
    """Resample to ``target_spacing`` mm (scalar for isotropic, or 3-vector).

    The image is interpolated trilinearly, the mask with nearest neighbour
    (or trilinear + 0.5 threshold when ``mask_interpolation="linear"``).
    """
    if np.isscalar(target_spacing):
        target = (float(target_spacing),) * 3
    else:
        target = tuple(float(s) for s in target_spacing)
    if any(s <= 0 for s in target):
        raise ValueError("target spacing must be positive")
    if mask is not None and mask.shape != vol.shape:
        raise ValueError("mask and volume shapes differ")
    out_shape = tuple(int(round(n * s / t)) for n, s, t in zip(vol.shape, vol.spacing, target))
    if min(out_shape) < 4:
        raise ValueError(f"resampled shape {out_shape} has a dimension < 4")
    if out_shape == vol.shape and np.allclose(vol.spacing, target, rtol=0, atol=1e-9):
        return vol, mask

    factors = [o / n for o, n in zip(out_shape, vol.shape)]
    data = ndimage.zoom(vol.data.astype(np.float32), factors, order=1, mode="nearest")
    new_vol = Volume(data, target, vol.origin)
    new_mask = None
    if mask is not None:
        if mask_interpolation == "nearest":
            m = ndimage.zoom(mask.data, factors, order=0, mode="nearest")
        elif mask_interpolation == "linear":
            m = ndimage.zoom(mask.data.astype(np.float32), factors, order=1, mode="nearest") >= 0.5
        else:
            raise ValueError(f"unknown mask interpolation {mask_interpolation!r}")
        new_mask = LabelMask(m, target, mask.origin)
    return new_vol, new_mask


def standardize(data: np.ndarray) -> np.ndarray:
    """Z-score intensities; used for the raw (teacher) input stream."""
    data = np.asarray(data, dtype=np.float32)
    std = float(data.std())
    return ((data - data.mean()) / (std if std > 0 else 1.0)).astype(np.float32)


# ---------------------------------------------------------------------------
# AHA


def compute_histogram(vol, bins: int) -> Histogram:
    if bins < 2:
        raise ValueError("bins must be >= 2")
    data = np.asarray(vol.data if isinstance(vol, Volume) else vol, dtype=np.float64).ravel()
    lo, hi = float(data.min()), float(data.max())
    if lo == hi:
        return Histogram(np.array([lo, lo + 1.0]), np.array([data.size], dtype=np.int64), degenerate=True)
    counts, edges = np.histogram(data, bins=bins, range=(lo, hi))
    return Histogram(edges, counts.astype(np.int64))


def _smooth(counts: np.ndarray, window: int) -> np.ndarray:
    if window == 1:
        return counts.astype(np.float64)
    return ndimage.uniform_filter1d(counts.astype(np.float64), size=window, mode="nearest")


def find_background_cutoff(hist: Histogram, params: AhaParams = AhaParams()) -> float:
    """Intensity separating the background mode from the rest of the histogram.

    The background peak is the tallest smoothed bin within the lowest
    ``background_search_fraction`` of the range; the cutoff is the first
    local minimum after it (centre of a flat valley), or failing that the
    upper edge of the steepest descending step after the peak.
    """
    if hist.degenerate:
        raise ValueError("degenerate histogram (constant volume)")
    counts = hist.counts
    nbins = counts.size
    n_search = max(1, int(math.ceil(nbins * params.background_search_fraction)))
    if counts[:n_search].sum() == 0:
        return float(hist.bin_edges[0])

    s = _smooth(counts, params.smoothing_window)
    peak = int(np.argmax(s[:n_search]))

    # scan runs of equal values; a run entered by a descent and left by a rise is a valley
    j = peak + 1
    while j < nbins - 1:
        k = j
        while k < nbins - 1 and s[k + 1] == s[k]:
            k += 1
        if k >= nbins - 1:
            break
        if s[j] < s[j - 1] and s[k + 1] > s[k]:
            return float(hist.centers[(j + k) // 2])
        j = k + 1

    diffs = np.diff(s)[peak:]
    if diffs.size == 0:
        return float(hist.bin_edges[-1])
    step = peak + int(np.argmin(diffs))
    return float(hist.bin_edges[step + 1])


def apply_cutoff(data: np.ndarray, cutoff: float) -> np.ndarray:
    """Clamp below ``cutoff`` and map ``[cutoff, max]`` onto ``[0, 1]``."""
    data = np.asarray(data, dtype=np.float64)
    top = float(data.max())
    if top <= cutoff:
        log.warning("AHA cutoff %.4g >= max intensity %.4g; returning zeros", cutoff, top)
        return np.zeros(data.shape, dtype=np.float32)
    out = (np.maximum(data, cutoff) - cutoff) / (top - cutoff)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def adaptive_histogram_attention(vol: Volume, params: AhaParams = AhaParams()) -> Volume:
    hist = compute_histogram(vol, params.bins)
    if hist.degenerate:
        log.warning("constant volume; AHA output is all zeros")
        return Volume(np.zeros(vol.shape, dtype=np.float32), vol.spacing, vol.origin)
    cutoff = find_background_cutoff(hist, params)
    return Volume(apply_cutoff(vol.data, cutoff), vol.spacing, vol.origin)


# ---------------------------------------------------------------------------
# patches


def grid_positions(shape, patch_size: int, stride: int, cover_edges: bool = False) -> list[tuple[int, int, int]]:
    axes = []
    for n in shape:
        if patch_size > n:
            raise ValueError(f"patch size {patch_size} exceeds volume dimension {n}")
        pos = list(range(0, n - patch_size + 1, stride))
        if cover_edges and pos[-1] != n - patch_size:
            pos.append(n - patch_size)
        axes.append(pos)
    return [(i, j, k) for i in axes[0] for j in axes[1] for k in axes[2]]


def _box_inside(origin, size, extent: AnnotationExtent) -> bool:
    return all(lo <= o and o + size <= hi for o, lo, hi in zip(origin, extent.bbox_min, extent.bbox_max))


def _box_disjoint(origin, size, extent: AnnotationExtent) -> bool:
    return any(o + size <= lo or o >= hi for o, lo, hi in zip(origin, extent.bbox_min, extent.bbox_max))


def extract_patches(vol: Volume, vessel_like: Volume, mask: LabelMask, extent: AnnotationExtent,
                    patch_size: int, stride: int | None = None, case_id: str = ""):
    """Split a case into labeled (inside the extent) and unlabeled (disjoint) patches.

    Patches straddling the extent boundary are dropped.
    """
    stride = patch_size // 2 if stride is None else stride
    if stride < 1 or stride > patch_size:
        raise ValueError("stride must lie in [1, patch_size]")
    if vessel_like.shape != vol.shape or (mask is not None and mask.shape != vol.shape):
        raise ValueError("volume, vessel-like volume and mask shapes differ")
    extent.check_within(vol.shape)
    if any(s < patch_size for s in extent.size):
        log.warning("annotation extent %s smaller than patch %d; no labeled patches", extent.size, patch_size)

    labeled, unlabeled = [], []
    p = patch_size
    for origin in grid_positions(vol.shape, p, stride):
        sl = tuple(slice(o, o + p) for o in origin)
        if _box_inside(origin, p, extent):
            labeled.append(Patch(vol.data[sl].copy(), vessel_like.data[sl].copy(), origin,
                                 PatchGroup.LABELED, mask=mask.data[sl].copy(), case_id=case_id))
        elif _box_disjoint(origin, p, extent):
            unlabeled.append(Patch(vol.data[sl].copy(), vessel_like.data[sl].copy(), origin,
                                   PatchGroup.UNLABELED, case_id=case_id))
    return labeled, unlabeled


# ---------------------------------------------------------------------------
# case cache


@dataclass
class PreparedCase:
    """A resampled case ready for patching: standardized image, AHA twin, annotation."""

    case_id: str
    image: Volume  # z-scored raw intensities
    vessel_like: Volume
    mask: LabelMask
    extent: AnnotationExtent
    full_mask: LabelMask | None = None

    def patches(self, patch_size: int, stride: int | None = None):
        return extract_patches(self.image, self.vessel_like, self.mask, self.extent, patch_size, stride,
                               case_id=self.case_id)


def prepare_case(vol: Volume, mask: LabelMask, case_id: str = "", spacing=DEFAULT_SPACING,
                 aha: AhaParams = AhaParams(), extent: AnnotationExtent | None = None,
                 full_mask: LabelMask | None = None) -> PreparedCase:
    if not np.allclose(vol.spacing, spacing if not np.isscalar(spacing) else (spacing,) * 3):
        old_shape = vol.shape
        vol, mask = resample_to_spacing(vol, mask, spacing)
        if full_mask is not None:
            _, full_mask = resample_to_spacing(Volume(np.zeros(old_shape, np.float32), full_mask.spacing),
                                               full_mask, spacing)
        extent = None  # voxel box no longer valid; rederive
    vessel_like = adaptive_histogram_attention(vol, aha)
    if extent is None:
        extent = mask_bounding_box(mask)
    image = Volume(standardize(vol.data), vol.spacing, vol.origin)
    return PreparedCase(case_id, image, vessel_like, mask, extent, full_mask)


def save_prepared(case: PreparedCase, out_dir, patch_size: int, stride: int) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_volume(case.image, out_dir / "image.nii.gz")
    save_volume(case.vessel_like, out_dir / "vessel_like.nii.gz")
    save_mask(case.mask, out_dir / "mask.nii.gz")
    if case.full_mask is not None:
        save_mask(case.full_mask, out_dir / "full_mask.nii.gz")
    labeled, unlabeled = case.patches(patch_size, stride)
    index = {
        "case": case.case_id,
        "patch_size": patch_size,
        "stride": stride,
        "spacing": list(case.image.spacing),
        "extent": case.extent.to_json(),
        "patches": [{"origin": list(p.grid_origin), "group": p.group.value} for p in labeled + unlabeled],
    }
    with open(out_dir / "patches.json", "w") as f:
        json.dump(index, f, indent=1)
    return out_dir


def load_prepared(cache_dir) -> PreparedCase:
    cache_dir = Path(cache_dir)
    with open(cache_dir / "patches.json") as f:
        index = json.load(f)
    full = cache_dir / "full_mask.nii.gz"
    return PreparedCase(
        case_id=index["case"],
        image=load_volume(cache_dir / "image.nii.gz"),
        vessel_like=load_volume(cache_dir / "vessel_like.nii.gz"),
        mask=load_mask(cache_dir / "mask.nii.gz"),
        extent=AnnotationExtent.from_json(index["extent"]),
        full_mask=load_mask(full) if full.exists() else None,
    )


def case_from_manifest(manifest: DatasetManifest, record: CaseRecord, spacing=DEFAULT_SPACING,
                       aha: AhaParams = AhaParams()) -> PreparedCase:
    """Cached preparation when the record points at one, otherwise prepared on the fly."""
    if record.cache is not None:
        return load_prepared(manifest.resolve(record.cache))
    if record.mask is None:
        raise ValueError(f"case {record.id} has no mask")
    vol = load_volume(manifest.resolve(record.volume))
    mask = load_mask(manifest.resolve(record.mask))
    full = load_mask(manifest.resolve(record.full_mask)) if record.full_mask else None
    return prepare_case(vol, mask, record.id, spacing, aha, record.extent, full)
