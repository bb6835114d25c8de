"""Volumes, masks, annotation extents and dataset manifests.

Two on-disk formats are understood:

* NIfTI-1 (``.nii`` / ``.nii.gz``) via nibabel, spacing from the header zooms.
* A raw fixture format: ``<stem>.raw`` holding C-ordered little-endian voxels
  next to ``<stem>.json`` with ``shape``, ``dtype``, ``spacing`` and optional
  ``origin``. Used by tests that want to avoid NIfTI.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class Volume:
    data: np.ndarray  # (D, H, W)
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        if not np.isfinite(data).all():
            raise ValueError("non-finite intensities in volume")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class LabelMask:
    data: np.ndarray  # uint8 in {0, 1}
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {data.shape}")
        # any nonzero value counts as foreground (e.g. 255 exports)
        object.__setattr__(self, "data", (data != 0).astype(np.uint8))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def check_pairs(self, vol: Volume) -> None:
        if self.shape != vol.shape:
            raise ValueError(f"mask shape {self.shape} != volume shape {vol.shape}")


@dataclass(frozen=True)
class AnnotationExtent:
    """Voxel box ``[bbox_min, bbox_max)`` around the annotated region."""

    bbox_min: tuple[int, int, int]
    bbox_max: tuple[int, int, int]

    def __post_init__(self):
        lo = tuple(int(v) for v in self.bbox_min)
        hi = tuple(int(v) for v in self.bbox_max)
        if len(lo) != 3 or len(hi) != 3 or any(a >= b for a, b in zip(lo, hi)):
            raise ValueError(f"invalid extent {lo} .. {hi}")
        object.__setattr__(self, "bbox_min", lo)
        object.__setattr__(self, "bbox_max", hi)

    @classmethod
    def full(cls, shape) -> "AnnotationExtent":
        return cls((0, 0, 0), tuple(shape))

    def check_within(self, shape) -> None:
        if any(a < 0 for a in self.bbox_min) or any(b > s for b, s in zip(self.bbox_max, shape)):
            raise ValueError(f"extent {self.bbox_min}..{self.bbox_max} outside volume {tuple(shape)}")

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(a, b) for a, b in zip(self.bbox_min, self.bbox_max))

    @property
    def size(self) -> tuple[int, int, int]:
        return tuple(b - a for a, b in zip(self.bbox_min, self.bbox_max))

    def dilate(self, margin: int, shape) -> "AnnotationExtent":
        lo = tuple(max(0, a - margin) for a in self.bbox_min)
        hi = tuple(min(s, b + margin) for b, s in zip(self.bbox_max, shape))
        return AnnotationExtent(lo, hi)

    def to_json(self) -> dict:
        return {"bbox_min": list(self.bbox_min), "bbox_max": list(self.bbox_max)}

    @classmethod
    def from_json(cls, d: dict) -> "AnnotationExtent":
        return cls(tuple(d["bbox_min"]), tuple(d["bbox_max"]))


@dataclass(frozen=True)
class CaseRecord:
    id: str
    patient: str
    volume: str
    mask: str | None = None
    center: str = ""
    extent: AnnotationExtent | None = None
    # phantom-only: complete ground truth including unannotated fine vessels
    full_mask: str | None = None
    # set by preprocessing: directory of the cached resampled case
    cache: str | None = None

    def to_json(self) -> dict:
        d = {"id": self.id, "patient": self.patient, "volume": self.volume,
             "mask": self.mask, "center": self.center}
        if self.extent is not None:
            d["extent"] = self.extent.to_json()
        if self.full_mask is not None:
            d["full_mask"] = self.full_mask
        if self.cache is not None:
            d["cache"] = self.cache
        return d

    @classmethod
    def from_json(cls, d: dict) -> "CaseRecord":
        extent = AnnotationExtent.from_json(d["extent"]) if d.get("extent") else None
        return cls(id=str(d["id"]), patient=str(d.get("patient", d["id"])), volume=d["volume"],
                   mask=d.get("mask"), center=d.get("center", ""), extent=extent,
                   full_mask=d.get("full_mask"), cache=d.get("cache"))


@dataclass(frozen=True)
class DatasetManifest:
    """Case list plus split assignment (split name -> case ids).

    ``root`` is the directory relative paths are resolved against.
    """

    cases: tuple[CaseRecord, ...]
    splits: dict = field(default_factory=dict)
    root: Path = Path(".")
    fold: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "cases", tuple(self.cases))
        ids = [c.id for c in self.cases]
        if len(set(ids)) != len(ids):
            raise ValueError("case ids must be unique")
        known = set(ids)
        for name, members in self.splits.items():
            missing = set(members) - known
            if missing:
                raise ValueError(f"split {name!r} references unknown cases {sorted(missing)}")

    @property
    def patients(self) -> list[str]:
        return sorted({c.patient for c in self.cases})

    def case(self, case_id: str) -> CaseRecord:
        for c in self.cases:
            if c.id == case_id:
                return c
        raise KeyError(case_id)

    def split(self, name: str) -> list[CaseRecord]:
        if name not in self.splits:
            raise KeyError(f"manifest has no {name!r} split")
        wanted = set(self.splits[name])
        return [c for c in self.cases if c.id in wanted]

    def resolve(self, rel: str | None) -> Path | None:
        if rel is None:
            return None
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def to_json(self) -> dict:
        d = {"cases": [c.to_json() for c in self.cases],
             "splits": {k: list(v) for k, v in self.splits.items()}}
        if self.fold is not None:
            d["fold"] = self.fold
        return d


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    with open(path) as f:
        raw = json.load(f)
    manifest = DatasetManifest(
        cases=[CaseRecord.from_json(c) for c in raw["cases"]],
        splits=raw.get("splits", {}),
        root=path.parent,
        fold=raw.get("fold"),
    )
    if check_files:
        for c in manifest.cases:
            for rel in (c.volume, c.mask, c.full_mask):
                p = manifest.resolve(rel)
                if p is not None and not p.exists():
                    raise FileNotFoundError(f"case {c.id}: {p} does not exist")
    return manifest


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(manifest.to_json(), f, indent=2)


# ---------------------------------------------------------------------------
# volume I/O


def _is_nifti(path: Path) -> bool:
    return path.name.endswith(".nii") or path.name.endswith(".nii.gz")


def _read_array(path) -> tuple[np.ndarray, tuple, tuple]:
    path = Path(path)
    if _is_nifti(path):
        import nibabel as nib

        try:
            img = nib.load(str(path))
            data = np.asanyarray(img.dataobj)
        except Exception as exc:  # nibabel raises a zoo of types
            raise OSError(f"cannot read {path}: {exc}") from exc
        zooms = img.header.get_zooms()[:3]
        if len(zooms) < 3 or not all(z > 0 for z in zooms):
            raise ValueError(f"{path}: missing spacing metadata")
        origin = tuple(float(v) for v in img.affine[:3, 3])
        return data, tuple(float(z) for z in zooms), origin
    if path.suffix == ".raw":
        meta_path = path.with_suffix(".json")
        if not meta_path.exists():
            raise ValueError(f"{path}: missing sidecar {meta_path.name}")
        with open(meta_path) as f:
            meta = json.load(f)
        if "spacing" not in meta:
            raise ValueError(f"{path}: missing spacing metadata")
        dtype = np.dtype(meta.get("dtype", "float32")).newbyteorder("<")
        data = np.fromfile(path, dtype=dtype).reshape(meta["shape"])
        return data, tuple(meta["spacing"]), tuple(meta.get("origin", (0.0, 0.0, 0.0)))
    raise ValueError(f"unsupported volume format: {path}")


def load_volume(path) -> Volume:
    data, spacing, origin = _read_array(path)
    data = np.asarray(data)
    if data.ndim == 4 and data.shape[-1] == 1:
        data = data[..., 0]
    if np.issubdtype(data.dtype, np.floating) and not np.isfinite(data).all():
        raise ValueError(f"{path}: non-finite intensities")
    return Volume(data, spacing, origin)


def load_mask(path) -> LabelMask:
    data, spacing, origin = _read_array(path)
    data = np.asarray(data)
    if data.ndim == 4 and data.shape[-1] == 1:
        data = data[..., 0]
    return LabelMask(data, spacing, origin)


def _write_array(data: np.ndarray, spacing, origin, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if _is_nifti(path):
        import nibabel as nib

        affine = np.diag([*spacing, 1.0])
        affine[:3, 3] = origin
        img = nib.Nifti1Image(data, affine)
        img.header.set_zooms(tuple(spacing))
        nib.save(img, str(path))
    elif path.suffix == ".raw":
        arr = np.ascontiguousarray(data)
        arr.astype(arr.dtype.newbyteorder("<"), copy=False).tofile(path)
        with open(path.with_suffix(".json"), "w") as f:
            json.dump({"shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>|="),
                       "spacing": list(spacing), "origin": list(origin)}, f)
    else:
        raise ValueError(f"unsupported volume format: {path}")


def save_volume(vol: Volume, path) -> None:
    _write_array(vol.data, vol.spacing, vol.origin, path)


def save_mask(mask: LabelMask, path) -> None:
    _write_array(mask.data.astype(np.uint8), mask.spacing, mask.origin, path)


# ---------------------------------------------------------------------------
# annotation extent and splits


def mask_bounding_box(mask: LabelMask) -> AnnotationExtent:
    """Tightest box containing every foreground voxel."""
    data = mask.data if isinstance(mask, LabelMask) else np.asarray(mask)
    lo, hi = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        occupied = np.flatnonzero(data.any(axis=other))
        if occupied.size == 0:
            raise ValueError("no annotated voxels")
        lo.append(int(occupied[0]))
        hi.append(int(occupied[-1]) + 1)
    return AnnotationExtent(tuple(lo), tuple(hi))


def _split_counts(n: int, ratios) -> list[int]:
    counts = [int(math.floor(n * r + 1e-9)) for r in ratios]
    remainder = n - sum(counts)
    # remainders go to train, then test, then val
    order = [0, 2, 1]
    i = 0
    while remainder > 0:
        counts[order[i % 3]] += 1
        remainder -= 1
        i += 1
    return counts


def _patients_by_case(manifest: DatasetManifest) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    for c in manifest.cases:
        groups.setdefault(c.patient, []).append(c.id)
    return groups


def split_dataset(manifest: DatasetManifest, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> DatasetManifest:
    """Patient-wise train/val/test assignment, deterministic for a seed."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    groups = _patients_by_case(manifest)
    patients = sorted(groups)
    counts = _split_counts(len(patients), ratios)
    if any(c == 0 for c in counts):
        raise ValueError(f"{len(patients)} patients cannot populate splits with ratios {ratios}")
    order = np.random.default_rng(seed).permutation(len(patients))
    shuffled = [patients[i] for i in order]
    splits, start = {}, 0
    for name, n in zip(SPLIT_NAMES, counts):
        members = shuffled[start:start + n]
        start += n
        splits[name] = sorted(cid for p in members for cid in groups[p])
    return replace(manifest, splits=splits)


def make_folds(manifest: DatasetManifest, k: int = 5, seed: int = 0) -> list[DatasetManifest]:
    """k-fold patient-wise cross-validation; test sets partition the patients."""
    groups = _patients_by_case(manifest)
    patients = sorted(groups)
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > len(patients):
        raise ValueError(f"k={k} exceeds patient count {len(patients)}")
    order = np.random.default_rng(seed).permutation(len(patients))
    shuffled = [patients[i] for i in order]
    chunks = np.array_split(np.arange(len(shuffled)), k)
    folds = []
    for i, chunk in enumerate(chunks):
        test_patients = {shuffled[j] for j in chunk}
        test = sorted(cid for p in test_patients for cid in groups[p])
        train = sorted(cid for p in patients if p not in test_patients for cid in groups[p])
        folds.append(replace(manifest, splits={"train": train, "test": test}, fold=i))
    return folds
