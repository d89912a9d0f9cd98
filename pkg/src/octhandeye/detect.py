"""Volume-level detectors: needle tip (vote-based) and ball marker (RANSAC sphere)."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .cloud import (
    DEFAULT_CLUSTER_TOL_MM,
    DEFAULT_LEAF_MM,
    RANSAC_SEED,
    PointCloud,
    cluster_euclidean,
    fit_sphere_ransac,
    locate_tip,
    segment_needle,
    volume_to_cloud,
    voxel_grid_filter,
)
from .distortion import GalvoParams, correct_point
from .segmentation import SegmentationParams, denoise_stack, label_volume, threshold_stack
from .volume import Volume


class DetectionError(RuntimeError):
    pass


@dataclass
class Detection:
    position: np.ndarray
    raw_position: np.ndarray
    seconds: float
    n_points: int
    n_clusters: int
    extra: dict = field(default_factory=dict)


def detect_needle_tip(
    v: Volume,
    galvo: GalvoParams | None,
    seg: SegmentationParams | None = None,
    leaf: float = DEFAULT_LEAF_MM,
    t: float = DEFAULT_CLUSTER_TOL_MM,
    reverse: bool = False,
    keep: bool = False,
) -> Detection:
    """Segment, cluster, vote and localize the needle tip (corrected mm)."""
    t0 = time.perf_counter()
    labels = label_volume(v, seg)
    cloud = volume_to_cloud(v, labels, leaf)
    clusters = cluster_euclidean(cloud, t)
    if not clusters:
        raise DetectionError("empty point cloud")
    try:
        needle = segment_needle(clusters)
    except ValueError as exc:
        raise DetectionError(str(exc)) from exc
    raw_tip = locate_tip(needle, cloud, None, reverse=reverse)
    tip = raw_tip if galvo is None else correct_point(raw_tip, galvo)
    extra = {"votes": needle.votes, "needle_points": len(needle)}
    if keep:
        extra.update(labels=labels, cloud=cloud, clusters=clusters, needle=needle)
    return Detection(tip, raw_tip, time.perf_counter() - t0, len(cloud), len(clusters), extra)


def foreground_cloud(v: Volume, seg: SegmentationParams | None = None, leaf: float = DEFAULT_LEAF_MM) -> PointCloud:
    """Thresholded, denoised foreground as a voxel-filtered cloud (no needle labels)."""
    p = seg or SegmentationParams()
    mask = denoise_stack(threshold_stack(v.voxels, p.k), p.median_size, p.gauss_size, p.gauss_sigma)
    iy, iz, ix = np.nonzero(mask)
    pitch = v.geometry.pitch
    pos = np.column_stack([(ix + 0.5) * pitch[0], (iy + 0.5) * pitch[1], (iz + 0.5) * pitch[2]])
    flags = np.zeros(len(pos), dtype=bool)
    if leaf is not None:
        pos, flags = voxel_grid_filter(pos, flags, leaf)
    return PointCloud(pos, flags, v.geometry)


def detect_marker(
    v: Volume,
    galvo: GalvoParams | None,
    seg: SegmentationParams | None = None,
    leaf: float = DEFAULT_LEAF_MM,
    t: float = DEFAULT_CLUSTER_TOL_MM,
    radius_hint: float = 0.25,
    iters: int = 500,
    inlier_tol: float = 0.02,
    seed: int = RANSAC_SEED,
    keep: bool = False,
) -> Detection:
    """Ball-marker centre (corrected mm) by per-cluster RANSAC sphere fitting.

    The cluster whose sphere collects the most inliers wins.
    """
    t0 = time.perf_counter()
    cloud = foreground_cloud(v, seg, leaf)
    clusters = cluster_euclidean(cloud, t)
    best = None
    for c in clusters:
        if len(c) < 20:
            continue
        try:
            fit = fit_sphere_ransac(cloud.positions[c.indices], radius_hint, iters, inlier_tol, seed=seed)
        except ValueError:
            continue
        if best is None or fit.inliers > best.inliers:
            best = fit
    if best is None:
        raise DetectionError("no sphere found in any cluster")
    raw = best.center
    center = raw if galvo is None else correct_point(raw, galvo)
    extra = {"radius": best.radius, "inliers": best.inliers}
    if keep:
        extra.update(cloud=cloud, clusters=clusters)
    return Detection(center, raw, time.perf_counter() - t0, len(cloud), len(clusters), extra)


class TipDetector(BaseEstimator, TransformerMixin):
    """Maps a sequence of volumes to an ``(n, 3)`` array of corrected positions.

    ``mode='needle'`` localizes the needle tip, ``mode='marker'`` the ball
    centre.  Stateless; ``fit`` only validates parameters.
    """

    def __init__(
        self,
        mode: str = "needle",
        galvo: GalvoParams | None = None,
        k: float = 2.0,
        m_e: float | None = None,
        d_tol: float = 2.0,
        leaf: float = DEFAULT_LEAF_MM,
        t: float = DEFAULT_CLUSTER_TOL_MM,
        radius_hint: float = 0.25,
        reverse: bool = False,
    ):
        self.mode = mode
        self.galvo = galvo
        self.k = k
        self.m_e = m_e
        self.d_tol = d_tol
        self.leaf = leaf
        self.t = t
        self.radius_hint = radius_hint
        self.reverse = reverse

    def _seg(self) -> SegmentationParams:
        return SegmentationParams(k=self.k, m_e=self.m_e, d_tol=self.d_tol)

    def fit(self, X=None, y=None):
        if self.mode not in ("needle", "marker"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.leaf <= 0 or self.t <= 0:
            raise ValueError("leaf and t must be positive")
        return self

    def detect(self, v: Volume) -> Detection:
        galvo = self.galvo if self.galvo is not None else GalvoParams.default()
        if self.mode == "needle":
            return detect_needle_tip(v, galvo, self._seg(), self.leaf, self.t, self.reverse)
        return detect_marker(v, galvo, self._seg(), self.leaf, self.t, self.radius_hint)

    def transform(self, X):
        self.fit()
        vols = [X] if isinstance(X, Volume) else list(X)
        return np.array([self.detect(v).position for v in vols]).reshape(-1, 3)
