"""Labeled point clouds: voxel-grid filtering, Euclidean clustering,
vote-based needle selection, tip localization and RANSAC sphere fitting."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import least_squares
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .distortion import GalvoParams, correct_point
from .volume import ScanGeometry, Volume

logger = logging.getLogger(__name__)

DEFAULT_LEAF_MM = 0.02
DEFAULT_CLUSTER_TOL_MM = 0.1
RANSAC_SEED = 20180709


class NoNeedleEvidence(ValueError):
    """Every cluster has zero needle votes."""


@dataclass(frozen=True)
class LabeledPoint:
    position: np.ndarray
    b: bool


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Points as an ``(N, 3)`` mm array plus the per-point needle flag."""

    positions: np.ndarray
    flags: np.ndarray
    geometry: ScanGeometry | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        flags = np.asarray(self.flags, dtype=bool).reshape(-1)
        if len(pos) != len(flags):
            raise ValueError("positions and flags differ in length")
        if not np.all(np.isfinite(pos)):
            raise ValueError("point cloud holds non-finite coordinates")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "flags", flags)

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, i) -> LabeledPoint:
        return LabeledPoint(self.positions[i], bool(self.flags[i]))

    def subset(self, idx) -> PointCloud:
        return PointCloud(self.positions[idx], self.flags[idx], self.geometry)

    @classmethod
    def from_points(cls, points: Sequence[LabeledPoint], geometry=None) -> PointCloud:
        if not points:
            return cls(np.empty((0, 3)), np.empty(0, dtype=bool), geometry)
        return cls(np.array([p.position for p in points]), np.array([p.b for p in points]), geometry)


@dataclass(frozen=True)
class Cluster:
    indices: np.ndarray
    votes: int

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True)
class SphereFit:
    center: np.ndarray
    radius: float
    inliers: int


def voxel_grid_filter(positions, flags, leaf: float = DEFAULT_LEAF_MM):
    """Replace the points of every occupied ``leaf``-sized cell by their centroid.

    The merged flag is the logical OR of the merged flags.  Output order
    follows the lexicographic order of the cell indices.
    """
    if leaf <= 0:
        raise ValueError("leaf size must be positive")
    pos = np.asarray(positions, dtype=float).reshape(-1, 3)
    flags = np.asarray(flags, dtype=bool).reshape(-1)
    if len(pos) == 0:
        return pos.copy(), flags.copy()
    cells = np.floor(pos / leaf).astype(np.int64)
    cells -= cells.min(axis=0)
    span = cells.max(axis=0) + 1
    key = (cells[:, 0] * span[1] + cells[:, 1]) * span[2] + cells[:, 2]
    _, inverse, counts = np.unique(key, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n = len(counts)
    sums = np.column_stack([np.bincount(inverse, weights=pos[:, d], minlength=n) for d in range(3)])
    votes = np.bincount(inverse, weights=flags.astype(float), minlength=n)
    return sums / counts[:, None], votes > 0


def volume_to_cloud(v: Volume, labels, leaf: float | None = DEFAULT_LEAF_MM) -> PointCloud:
    """Foreground voxels of ``v`` as a labeled point cloud at voxel-centre positions.

    ``labels`` is a sequence of per-B-scan objects with ``mask`` and ``needle``
    arrays (see :func:`octhandeye.segmentation.label_volume`).  ``leaf=None``
    disables the voxel-grid filter.
    """
    g = v.geometry
    if len(labels) != g.n_y:
        raise ValueError(f"labels cover {len(labels)} B-scans, volume has {g.n_y}")
    mask = np.stack([lb.mask for lb in labels])
    needle = np.stack([lb.needle for lb in labels])
    iy, iz, ix = np.nonzero(mask)
    pitch = g.pitch
    pos = np.column_stack([(ix + 0.5) * pitch[0], (iy + 0.5) * pitch[1], (iz + 0.5) * pitch[2]])
    flags = needle[iy, iz, ix]
    if leaf is not None:
        pos, flags = voxel_grid_filter(pos, flags, leaf)
    return PointCloud(pos, flags, g)


def cluster_euclidean(cloud: PointCloud, t: float = DEFAULT_CLUSTER_TOL_MM) -> list[Cluster]:
    """Split the cloud into clusters separated by at least ``t``.

    Points closer than ``t`` are linked (kd-tree radius search); clusters are
    the connected components.  Clusters are ordered by their lowest member
    index and members are sorted.
    """
    if t <= 0:
        raise ValueError("cluster tolerance must be positive")
    n = len(cloud)
    if n == 0:
        return []
    tree = cKDTree(cloud.positions)
    # strict "< t": the largest double below t
    pairs = tree.query_pairs(np.nextafter(t, 0.0), output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs), dtype=np.int8), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    order = np.argsort(comp, kind="stable")
    comp_sorted = comp[order]
    cuts = np.flatnonzero(np.diff(comp_sorted)) + 1
    groups = np.split(order, cuts)
    groups.sort(key=lambda g: g[0])
    return [Cluster(indices=g, votes=int(cloud.flags[g].sum())) for g in groups]


def segment_needle(clusters: Sequence[Cluster]) -> Cluster:
    """Return the cluster with the most needle votes (first maximum wins)."""
    if len(clusters) == 0:
        raise ValueError("no clusters to choose from")
    max_vote, max_index = 0, 0
    for i, c in enumerate(clusters):
        if c.votes > max_vote:
            max_vote, max_index = c.votes, i
    if max_vote == 0:
        raise NoNeedleEvidence("no cluster carries needle votes")
    return clusters[max_index]


def slice_index(cloud: PointCloud, y=None) -> np.ndarray:
    if cloud.geometry is None:
        raise ValueError("cloud has no source geometry; cannot map y to B-scan index")
    y = cloud.positions[:, 1] if y is None else y
    return np.floor(np.asarray(y) / cloud.geometry.pitch[1]).astype(int)


def locate_tip(needle: Cluster, cloud: PointCloud, g: GalvoParams | None, reverse: bool = False) -> np.ndarray:
    """Distortion-corrected centroid of the needle points in its first B-scan.

    The first B-scan is the lowest slice index (highest with ``reverse``).
    ``g=None`` skips the correction.
    """
    if len(needle) == 0:
        raise ValueError("empty needle cluster")
    pts = cloud.positions[needle.indices]
    sl = slice_index(cloud, pts[:, 1])
    first = sl.max() if reverse else sl.min()
    tip = pts[sl == first].mean(axis=0)
    return tip if g is None else correct_point(tip, g)


def fit_sphere(points) -> SphereFit:
    """Least-squares sphere: algebraic initial fit refined on geometric residuals."""
    pts = np.asarray(points, dtype=float)
    if len(pts) < 4:
        raise ValueError("sphere fit needs at least 4 points")
    mean = pts.mean(axis=0)
    q = pts - mean
    scale = np.sqrt((q**2).sum(axis=1).mean())
    if scale == 0:
        raise ValueError("sphere fit: points coincide")
    q /= scale
    A = np.column_stack([q, np.ones(len(q))])
    b = -(q**2).sum(axis=1)
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    c = -sol[:3] / 2
    r2 = c @ c - sol[3]
    if not r2 > 0:
        raise ValueError("sphere fit: degenerate configuration")

    def resid(x):
        return np.linalg.norm(q - x[:3], axis=1) - x[3]

    res = least_squares(resid, np.concatenate([c, [np.sqrt(r2)]]), method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
    center = res.x[:3] * scale + mean
    radius = abs(res.x[3]) * scale
    return SphereFit(center=center, radius=float(radius), inliers=len(pts))


def _sphere_from_4(p: np.ndarray):
    A = np.column_stack([p, np.ones(4)])
    b = -(p**2).sum(axis=1)
    try:
        sol = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        return None
    c = -sol[:3] / 2
    r2 = c @ c - sol[3]
    if not np.isfinite(r2) or r2 <= 0:
        return None
    return c, np.sqrt(r2)


def fit_sphere_ransac(
    cloud,
    radius_hint: float | None = 0.25,
    iters: int = 500,
    inlier_tol: float = 0.02,
    min_support: float = 0.25,
    seed: int = RANSAC_SEED,
) -> SphereFit:
    """RANSAC sphere over 4-point minimal samples, refined on the inliers.

    Candidates whose radius lies outside ``radius_hint`` +/- 20 % are
    rejected.  The best candidate must reach ``min_support`` (fraction of
    the cloud) inliers.  Deterministic for a fixed ``seed``.
    """
    pts = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    n = len(pts)
    if n < 4:
        raise ValueError("RANSAC sphere fit needs at least 4 points")
    rng = np.random.default_rng(seed)
    need = max(4, int(np.ceil(min_support * n)))
    best_count, best = -1, None
    for _ in range(iters):
        cand = _sphere_from_4(pts[rng.choice(n, 4, replace=False)])
        if cand is None:
            continue
        c, r = cand
        if radius_hint is not None and not (0.8 * radius_hint <= r <= 1.2 * radius_hint):
            continue
        count = int(np.count_nonzero(np.abs(np.linalg.norm(pts - c, axis=1) - r) <= inlier_tol))
        if count > best_count:
            best_count, best = count, (c, r)
    if best is None or best_count < need:
        raise ValueError(f"no sphere candidate reached {need} inliers (best {max(best_count, 0)})")
    c, r = best
    fit = None
    for _ in range(2):
        inl = np.abs(np.linalg.norm(pts - c, axis=1) - r) <= inlier_tol
        if inl.sum() < 4:
            break
        fit = fit_sphere(pts[inl])
        c, r = fit.center, fit.radius
    if fit is None:
        raise ValueError("sphere refinement lost its inliers")
    count = int(np.count_nonzero(np.abs(np.linalg.norm(pts - c, axis=1) - r) <= inlier_tol))
    return SphereFit(center=c, radius=r, inliers=count)


def save_cloud(cloud: PointCloud, path) -> None:
    """Plain-text export, one ``x_mm y_mm z_mm b`` line per point."""
    with open(path, "w") as fh:
        for p, b in zip(cloud.positions, cloud.flags):
            fh.write(f"{p[0]:.9f} {p[1]:.9f} {p[2]:.9f} {int(b)}\n")


def load_cloud(path, geometry: ScanGeometry | None = None) -> PointCloud:
    data = np.loadtxt(Path(path), ndmin=2)
    if data.size == 0:
        return PointCloud(np.empty((0, 3)), np.empty(0, dtype=bool), geometry)
    return PointCloud(data[:, :3], data[:, 3] != 0, geometry)
