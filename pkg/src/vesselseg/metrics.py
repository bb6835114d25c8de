"""Pixel metrics inside the annotation box and mesh-based surface error.

Surface error is directional: for every ground-truth mesh vertex, the exact
Euclidean distance to the nearest predicted triangle, averaged over the
ground-truth vertices.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.spatial import cKDTree

from .volume_core import AnnotationExtent, LabelMask

log = logging.getLogger(__name__)

METRIC_NAMES = ("sensitivity", "precision", "specificity", "jaccard", "vs", "dsc")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _data(mask) -> np.ndarray:
    return (mask.data if isinstance(mask, LabelMask) else np.asarray(mask)) != 0


def confusion(pred, gt, roi: AnnotationExtent | None = None) -> ConfusionCounts:
    p, g = _data(pred), _data(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    if roi is not None:
        roi.check_within(p.shape)
        p, g = p[roi.slices], g[roi.slices]
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, p.size - tp - fp - fn, fn)


@dataclass(frozen=True)
class PixelMetrics:
    sensitivity: float
    precision: float
    specificity: float
    jaccard: float
    vs: float
    dsc: float

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _ratio(num: int, den: int, exact: bool, name: str):
    if den == 0:
        log.debug("%s is 0/0; reported as 1", name)
        return Fraction(1) if exact else 1.0
    return Fraction(num, den) if exact else num / den


def pixel_metrics(c: ConfusionCounts, exact: bool = False) -> PixelMetrics:
    """Six overlap metrics; any 0/0 is 1. ``exact=True`` returns Fractions."""
    tp, fp, tn, fn = c.tp, c.fp, c.tn, c.fn
    union = 2 * tp + fp + fn
    vs = 1 - _ratio(abs(fp - fn), union, exact, "vs") if union else _ratio(0, 0, exact, "vs")
    return PixelMetrics(
        sensitivity=_ratio(tp, tp + fn, exact, "sensitivity"),
        precision=_ratio(tp, tp + fp, exact, "precision"),
        specificity=_ratio(tn, tn + fp, exact, "specificity"),
        jaccard=_ratio(tp, tp + fp + fn, exact, "jaccard"),
        vs=vs,
        dsc=_ratio(2 * tp, union, exact, "dsc"),
    )


# ---------------------------------------------------------------------------
# meshes


@dataclass
class SurfaceMesh:
    vertices: np.ndarray  # (V, 3) mm
    triangles: np.ndarray  # (T, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def corners(self) -> np.ndarray:
        """(T, 3, 3) triangle vertex coordinates."""
        return self.vertices[self.triangles]

    def area(self) -> float:
        c = self.corners
        return float(0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1).sum())

    def transformed(self, rotation: np.ndarray, translation) -> "SurfaceMesh":
        return SurfaceMesh(self.vertices @ np.asarray(rotation).T + np.asarray(translation), self.triangles.copy())


def extract_surface(mask, spacing=None, origin=(0.0, 0.0, 0.0)) -> SurfaceMesh:
    """Marching-cubes iso-surface at 0.5 in physical coordinates (index * spacing + origin)."""
    from skimage.measure import marching_cubes

    if isinstance(mask, LabelMask):
        spacing = mask.spacing if spacing is None else spacing
        origin = mask.origin
    spacing = (1.0, 1.0, 1.0) if spacing is None else tuple(float(s) for s in np.broadcast_to(spacing, 3))
    data = _data(mask)
    if not data.any():
        raise ValueError("cannot extract a surface from an empty mask")
    # zero border so the surface closes at the volume boundary
    padded = np.pad(data.astype(np.float32), 1)
    verts, faces, _, _ = marching_cubes(padded, level=0.5, spacing=spacing)
    verts = verts - np.asarray(spacing) + np.asarray(origin)
    return SurfaceMesh(verts, faces)


def point_triangle_distance(points: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Exact distances from points (N, 3) to triangles (N, 3, 3), pairwise by row.

    Closest-point-on-triangle via Voronoi regions of the vertices, edges and face.
    """
    p = np.asarray(points, dtype=np.float64)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    denom = va + vb + vc
    safe = np.where(denom != 0, denom, 1.0)
    v = vb / safe
    w = vc / safe
    closest = a + ab * v[:, None] + ac * w[:, None]  # face region by default
    done = np.zeros(len(p), dtype=bool)

    def take(cond, value):
        nonlocal closest, done
        sel = cond & ~done
        if sel.any():
            closest[sel] = value[sel]
            done |= sel

    with np.errstate(divide="ignore", invalid="ignore"):
        take((d1 <= 0) & (d2 <= 0), a)
        take((d3 >= 0) & (d4 <= d3), b)
        t = d1 / (d1 - d3)
        take((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + ab * t[:, None])
        take((d6 >= 0) & (d5 <= d6), c)
        t = d2 / (d2 - d6)
        take((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + ac * t[:, None])
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        take((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + (c - b) * t[:, None])
    # degenerate (zero-area) triangles that reached the face branch: fall back to edges
    bad = ~done & (denom == 0)
    if bad.any():
        closest[bad] = _closest_on_edges(p[bad], tri[bad])
    return np.linalg.norm(p - closest, axis=1)


def _closest_on_edges(p, tri):
    best = None
    best_d = None
    for i, j in ((0, 1), (1, 2), (2, 0)):
        a, b = tri[:, i], tri[:, j]
        ab = b - a
        L = np.einsum("ij,ij->i", ab, ab)
        t = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.where(L > 0, L, 1.0), 0, 1)
        q = a + ab * t[:, None]
        d = np.linalg.norm(p - q, axis=1)
        if best is None:
            best, best_d = q, d
        else:
            upd = d < best_d
            best[upd], best_d[upd] = q[upd], d[upd]
    return best


class TriangleIndex:
    """Exact nearest-triangle distance queries.

    Triangles are indexed by centroid in a KD-tree. For a query point the k
    nearest centroids give an upper bound ``ub`` on the distance; every
    triangle whose centroid lies within ``ub + max_circumradius`` is then
    checked exactly, which cannot miss the true nearest triangle.
    """

    def __init__(self, mesh: SurfaceMesh, k: int = 8):
        if len(mesh.triangles) == 0:
            raise ValueError("mesh has no triangles")
        self.tri = mesh.corners
        self.centroids = self.tri.mean(axis=1)
        self.radius = float(np.linalg.norm(self.tri - self.centroids[:, None], axis=2).max())
        self.tree = cKDTree(self.centroids)
        self.k = min(k, len(self.tri))

    def distances(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        _, idx = self.tree.query(points, k=self.k)
        idx = np.asarray(idx).reshape(len(points), -1)
        ub = np.full(len(points), np.inf)
        for j in range(idx.shape[1]):
            ub = np.minimum(ub, point_triangle_distance(points, self.tri[idx[:, j]]))
        candidates = self.tree.query_ball_point(points, ub + self.radius + 1e-12)
        out = ub.copy()
        counts = np.fromiter((len(c) for c in candidates), dtype=np.int64, count=len(points))
        if counts.sum():
            rows = np.repeat(np.arange(len(points)), counts)
            cols = np.concatenate([np.asarray(c, dtype=np.int64) for c in candidates if len(c)])
            d = point_triangle_distance(points[rows], self.tri[cols])
            np.minimum.at(out, rows, d)
        return out


def surface_error(gt: SurfaceMesh, pred: SurfaceMesh, symmetric: bool = False) -> float:
    """Mean distance (mm) from ground-truth vertices to the predicted surface.

    ``symmetric=True`` averages both directions (diagnostics only).
    """
    if len(gt.vertices) == 0 or len(pred.triangles) == 0:
        raise ValueError("surface error needs two non-empty meshes")
    forward = float(TriangleIndex(pred).distances(gt.vertices).mean())
    if not symmetric:
        return forward
    if len(gt.triangles) == 0:
        raise ValueError("symmetric surface error needs ground-truth triangles")
    backward = float(TriangleIndex(gt).distances(pred.vertices).mean())
    return 0.5 * (forward + backward)


def write_stl(mesh: SurfaceMesh, path) -> None:
    c = mesh.corners
    normals = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
    lens = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = normals / np.where(lens > 0, lens, 1.0)
    lines = ["solid vessel"]
    for n, t in zip(normals, c):
        lines.append(f"  facet normal {n[0]:.6e} {n[1]:.6e} {n[2]:.6e}")
        lines.append("    outer loop")
        lines.extend(f"      vertex {v[0]:.6e} {v[1]:.6e} {v[2]:.6e}" for v in t)
        lines.append("    endloop")
        lines.append("  endfacet")
    lines.append("endsolid vessel")
    Path(path).write_text("\n".join(lines) + "\n")


def write_obj(mesh: SurfaceMesh, path) -> None:
    lines = [f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}" for v in mesh.vertices]
    lines += [f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}" for t in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# case reports


@dataclass
class CaseMetrics:
    case_id: str
    sensitivity: float
    precision: float
    specificity: float
    jaccard: float
    vs: float
    dsc: float
    surface_error: float  # mm; NaN when exactly one of the two crops is empty

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def evaluate_case(pred, gt, roi: AnnotationExtent | None, spacing, case_id: str = "") -> CaseMetrics:
    p, g = _data(pred), _data(gt)
    roi = roi or AnnotationExtent.full(g.shape)
    pm = pixel_metrics(confusion(p, g, roi))
    pc, gc = p[roi.slices], g[roi.slices]
    if not gc.any() and not pc.any():
        se = 0.0
    elif not gc.any() or not pc.any():
        log.warning("case %s: one of prediction/ground truth is empty inside the ROI", case_id)
        se = float("nan")
    else:
        se = surface_error(extract_surface(gc, spacing), extract_surface(pc, spacing))
    return CaseMetrics(case_id, **pm.as_dict(), surface_error=se)


def aggregate(rows: list[CaseMetrics]) -> dict[str, tuple[float, float]]:
    """Mean and population std per metric, NaNs ignored."""
    out = {}
    for name in (*METRIC_NAMES, "surface_error"):
        vals = np.array([getattr(r, name) for r in rows], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        out[name] = (float(vals.mean()), float(vals.std())) if vals.size else (math.nan, math.nan)
    return out


@dataclass(frozen=True)
class PairedTestResult:
    p_value: float
    statistic: float  # sum of positive-difference ranks
    degenerate: bool = False
    exact: bool = True


def _signed_rank_exact(doubled_ranks: np.ndarray, t_plus: int) -> float:
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=object)  # python ints avoid overflow
    counts[0] = 1
    for r in doubled_ranks:
        r = int(r)
        counts[r:] = counts[r:] + counts[:total + 1 - r].copy()
    n_patterns = sum(counts)
    lower = sum(counts[:t_plus + 1])
    upper = sum(counts[t_plus:])
    return min(1.0, 2 * float(Fraction(min(lower, upper), n_patterns)))


def paired_test(errors_a, errors_b, exact_max_n: int = 25) -> PairedTestResult:
    """Two-sided Wilcoxon signed-rank test on paired per-case values.

    Exact null distribution (midranks for ties, zero differences dropped) for
    n <= ``exact_max_n``; normal approximation beyond.
    """
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    if len(a) < 5:
        raise ValueError("paired test needs at least 5 cases")
    d = b - a
    d = d[d != 0]
    if d.size == 0:
        return PairedTestResult(1.0, 0.0, degenerate=True)
    ranks = stats.rankdata(np.abs(d))
    doubled = np.rint(2 * ranks).astype(np.int64)
    t_plus2 = int(doubled[d > 0].sum())
    if d.size <= exact_max_n:
        return PairedTestResult(_signed_rank_exact(doubled, t_plus2), t_plus2 / 2.0)
    res = stats.wilcoxon(d, zero_method="wilcox", alternative="two-sided", method="approx")
    return PairedTestResult(float(res.pvalue), t_plus2 / 2.0, exact=False)
