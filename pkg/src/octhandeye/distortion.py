"""Galvanometer fan-scan distortion: pivot calibration, correction and its inverse.

Each scan mirror sweeps the beam as a fan about a virtual pivot.  A raw
lateral coordinate encodes the beam angle, the raw axial coordinate encodes
the optical path length from the pivot.  A physically flat surface is
therefore imaged as an arc whose best-fit circle is centred at
``(x_c, z_xc)`` in raw B-scan coordinates; these arc centres are the
calibration constants stored in :class:`GalvoParams`.

With that convention the physical pivot of the X mirror sits at depth
``-z_xc`` and the correction of one mirror reads::

    theta = (x - x_c) / z_xc            # beam angle
    r     = z + z_xc                    # path length from the pivot
    x'    = r * sin(theta) + x_c
    z*    = r * cos(theta) - z_xc

The Y mirror is undone the same way on ``(y, z*)`` with ``(y_c, z_yc)``.
The column ``x = x_c`` (resp. row ``y = y_c``) is left unchanged.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .volume import Volume

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GalvoParams:
    """Virtual pivot centres of the two scan mirrors, in mm."""

    x_c: float
    z_xc: float
    y_c: float
    z_yc: float

    def __post_init__(self):
        vals = np.array([self.x_c, self.z_xc, self.y_c, self.z_yc], dtype=float)
        if not np.all(np.isfinite(vals)):
            raise ValueError("galvo parameters must be finite")
        if self.z_xc <= 0 or self.z_yc <= 0:
            raise ValueError("pivot depths z_xc and z_yc must be positive")

    @classmethod
    def default(cls) -> GalvoParams:
        """Pivot constants of the reference scanner setup."""
        return cls(x_c=1.489, z_xc=151.563, y_c=1.068, z_yc=428.541)

    @classmethod
    def identity_like(cls, geometry=None, depth: float = 1e6) -> GalvoParams:
        """Pivots pushed far away so the correction is (nearly) the identity."""
        if geometry is None:
            return cls(0.0, depth, 0.0, depth)
        return cls(geometry.extent_x_mm / 2, depth, geometry.extent_y_mm / 2, depth)

    def check_field(self, extent_z_mm: float) -> None:
        if self.z_xc <= extent_z_mm or self.z_yc <= extent_z_mm:
            raise ValueError("pivot depths must exceed the axial extent of the scan")

    def save(self, path) -> None:
        save_galvo_params(self, path)


def save_galvo_params(g: GalvoParams, path) -> None:
    """Write the four constants as a two-line whitespace table (mm)."""
    header = "x_c z_xc y_c z_yc"
    values = " ".join(repr(float(v)) for v in (g.x_c, g.z_xc, g.y_c, g.z_yc))
    Path(path).write_text(f"# galvo pivot centres (mm)\n{header}\n{values}\n")


def load_galvo_params(path) -> GalvoParams:
    rows = [
        ln.split()
        for ln in Path(path).read_text().splitlines()
        if ln.strip() and not ln.lstrip().startswith("#")
    ]
    if len(rows) != 2 or len(rows[0]) != len(rows[1]):
        raise ValueError(f"{path}: expected a header row and a value row")
    data = dict(zip(rows[0], (float(v) for v in rows[1])))
    try:
        return GalvoParams(**{k: data[k] for k in ("x_c", "z_xc", "y_c", "z_yc")})
    except KeyError as exc:
        raise ValueError(f"{path}: missing column {exc.args[0]!r}") from None


@dataclass(frozen=True)
class CircleFit:
    center: np.ndarray
    radius: float
    rms_residual: float


def fit_circle(points) -> CircleFit:
    """Algebraic (Kasa) least-squares circle through 2-D points.

    Points are centred and scaled before solving so that shallow arcs of
    very large circles stay well conditioned.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be an (N, 2) array")
    if len(pts) < 3:
        raise ValueError("circle fit needs at least 3 points")
    mean = pts.mean(axis=0)
    q = pts - mean
    scale = np.sqrt((q**2).sum(axis=1).mean())
    if scale == 0:
        raise ValueError("circle fit: all points coincide")
    q = q / scale
    # u^2 + v^2 + D u + E v + F = 0
    A = np.column_stack([q[:, 0], q[:, 1], np.ones(len(q))])
    b = -(q**2).sum(axis=1)
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] <= 1e-12 * sv[0]:
        raise ValueError("circle fit: points are collinear")
    (D, E, F), *_ = np.linalg.lstsq(A, b, rcond=None)
    cu, cv = -D / 2, -E / 2
    r2 = cu * cu + cv * cv - F
    if r2 <= 0:
        raise ValueError("circle fit: degenerate solution")
    center = np.array([cu, cv]) * scale + mean
    radius = float(np.sqrt(r2) * scale)
    resid = np.hypot(pts[:, 0] - center[0], pts[:, 1] - center[1]) - radius
    return CircleFit(center=center, radius=radius, rms_residual=float(np.sqrt(np.mean(resid**2))))


def _surface_depth(cols: np.ndarray, threshold) -> np.ndarray:
    """Sub-voxel top-surface depth (voxel units, edge-referenced) per column.

    ``cols`` has depth on axis 0.  Returns NaN where no sample reaches the
    threshold.  The depth estimate assumes a partial-volume edge: the voxel
    straddling the surface carries a fraction of the full band intensity.
    """
    c = np.asarray(cols, dtype=float)
    nz = c.shape[0]
    thr = np.broadcast_to(np.asarray(threshold, dtype=float), c.shape[1:])
    hit = c >= thr
    any_hit = hit.any(axis=0)
    k = np.argmax(hit, axis=0)
    flat = c.reshape(nz, -1)
    kf = k.reshape(-1)
    idx = np.arange(flat.shape[1])

    def at(i):
        ok = (i >= 0) & (i < nz)
        out = np.zeros(len(kf))
        out[ok] = flat[i[ok], idx[ok]]
        return out, ok

    ck, _ = at(kf)
    cnext, ok_next = at(kf + 1)
    cprev, ok_prev = at(kf - 1)
    # background estimate from up to three samples above the edge
    bg_sum = np.zeros(len(kf))
    bg_n = np.zeros(len(kf))
    for d in (2, 3, 4):
        v, ok = at(kf - d)
        bg_sum += np.where(ok, v, 0.0)
        bg_n += ok
    bg = np.where(bg_n > 0, bg_sum / np.maximum(bg_n, 1), np.where(ok_prev, np.minimum(cprev, ck), 0.0))
    full = np.where(ok_next, np.maximum(ck, cnext), ck)
    span = full - bg
    with np.errstate(invalid="ignore", divide="ignore"):
        f_k = np.where(span > 0, np.clip((ck - bg) / span, 0, 1), 1.0)
        f_prev = np.where(ok_prev & (span > 0), np.clip((cprev - bg) / span, 0, 1), 0.0)
    depth = kf + 1.0 - f_k - f_prev
    depth = depth.reshape(k.shape)
    return np.where(any_hit, depth, np.nan)


def detect_top_surface(
    bscan, threshold=None, lateral_pitch: float = 1.0, axial_pitch: float = 1.0, k: float = 2.0
) -> np.ndarray:
    """Top surface of a B-scan as ``(x_mm, z_mm)`` points, one per lit column.

    The depth is the sub-voxel position of the upper edge of the first
    sample reaching ``threshold`` (defaults to the adaptive ``mean + k*std``
    of the image).  ``x`` is the column centre.  Columns with no hit are
    omitted.
    """
    img = np.asarray(bscan, dtype=float)
    if img.ndim != 2 or img.size == 0:
        raise ValueError("bscan must be a non-empty 2-D image")
    if threshold is None:
        mu, sd = img.mean(), img.std()
        if sd == 0:
            return np.empty((0, 2))
        threshold = mu + k * sd
    depth = _surface_depth(img, threshold)
    cols = np.flatnonzero(np.isfinite(depth))
    return np.column_stack([(cols + 0.5) * lateral_pitch, depth[cols] * axial_pitch])


def _theta_correct(u, z, uc, zc):
    theta = (u - uc) / zc
    r = z + zc
    return r * np.sin(theta) + uc, r * np.cos(theta) - zc


def _theta_distort(u, z, uc, zc):
    du = u - uc
    dz = z + zc
    r = np.hypot(du, dz)
    theta = np.arctan2(du, dz)
    return uc + zc * theta, r - zc


def correct_points(points, g: GalvoParams) -> np.ndarray:
    """Undo the fan distortion for an ``(N, 3)`` array of raw mm positions."""
    p = np.asarray(points, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    xc, zstar = _theta_correct(x, z, g.x_c, g.z_xc)
    yc, zc = _theta_correct(y, zstar, g.y_c, g.z_yc)
    return np.stack([xc, yc, zc], axis=-1)


def distort_points(points, g: GalvoParams) -> np.ndarray:
    """Exact inverse of :func:`correct_points` (M_y undone first, then M_x)."""
    p = np.asarray(points, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    if np.any(z + g.z_yc <= 0) or np.any(z + g.z_xc <= 0):
        raise ValueError("point lies behind a pivot; outside the invertible region")
    yr, zstar = _theta_distort(y, z, g.y_c, g.z_yc)
    xr, zr = _theta_distort(x, zstar, g.x_c, g.z_xc)
    return np.stack([xr, yr, zr], axis=-1)


def correct_point(p, g: GalvoParams) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape != (3,):
        raise ValueError("correct_point expects a 3-vector")
    return correct_points(p, g)


def distort_point(p, g: GalvoParams) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape != (3,):
        raise ValueError("distort_point expects a 3-vector")
    return distort_points(p, g)


def surface_depth_map(v: Volume, threshold=None, k: float = 2.0) -> np.ndarray:
    """Sub-voxel top-surface depth in mm for every ``(iy, ix)`` column.

    The threshold defaults to the adaptive per-B-scan ``mean + k*std``.
    """
    vox = v.voxels
    if threshold is None:
        flat = vox.reshape(vox.shape[0], -1).astype(float)
        thr = flat.mean(axis=1) + k * flat.std(axis=1)
        thr = np.where(flat.std(axis=1) > 0, thr, np.inf)
        thr = np.broadcast_to(thr[:, None], (vox.shape[0], vox.shape[2]))
    else:
        thr = np.full((vox.shape[0], vox.shape[2]), float(threshold))
    # depth axis first: (n_z, n_y, n_x)
    depth = _surface_depth(np.moveaxis(vox, 1, 0), thr)
    return depth * v.geometry.pitch[2]


def calibrate_galvo(
    flat_volume_x: Volume, flat_volume_y: Volume | None = None, threshold=None, k: float = 2.0
) -> GalvoParams:
    """Estimate the pivot centres from volumes of a flat reference surface.

    ``(x_c, z_xc)`` is the mean circle centre over the X-direction B-scans
    (the x-z images) of ``flat_volume_x``; ``(y_c, z_yc)`` is the mean over
    the Y-direction sections (the y-z images) of ``flat_volume_y``, which
    defaults to the same volume.
    """
    if flat_volume_y is None:
        flat_volume_y = flat_volume_x

    gx = flat_volume_x.geometry
    depth_x = surface_depth_map(flat_volume_x, threshold, k)
    xs = (np.arange(gx.n_x) + 0.5) * gx.pitch[0]
    centers_x = np.empty((gx.n_y, 2))
    for iy in range(gx.n_y):
        row = depth_x[iy]
        ok = np.isfinite(row)
        if ok.sum() < 3:
            raise ValueError(f"no detectable surface in X-direction B-scan {iy}")
        centers_x[iy] = fit_circle(np.column_stack([xs[ok], row[ok]])).center

    gy = flat_volume_y.geometry
    depth_y = depth_x if flat_volume_y is flat_volume_x else surface_depth_map(flat_volume_y, threshold, k)
    ys = (np.arange(gy.n_y) + 0.5) * gy.pitch[1]
    centers_y = np.empty((gy.n_x, 2))
    for ix in range(gy.n_x):
        col = depth_y[:, ix]
        ok = np.isfinite(col)
        if ok.sum() < 3:
            raise ValueError(f"no detectable surface in Y-direction section {ix}")
        centers_y[ix] = fit_circle(np.column_stack([ys[ok], col[ok]])).center

    # fixed-order sums so the result does not depend on evaluation order
    x_c, z_xc = centers_x.sum(axis=0) / len(centers_x)
    y_c, z_yc = centers_y.sum(axis=0) / len(centers_y)
    logger.debug("galvo calibration: x=(%.4f, %.3f) y=(%.4f, %.3f)", x_c, z_xc, y_c, z_yc)
    return GalvoParams(float(x_c), float(z_xc), float(y_c), float(z_yc))


class GalvoCorrector(BaseEstimator, TransformerMixin):
    """Estimator wrapper: ``fit`` calibrates from flat volumes, ``transform`` corrects points.

    ``fit`` accepts a :class:`Volume` or a ``(volume_x, volume_y)`` pair.
    Passing ``params`` skips calibration and uses the given constants.
    """

    def __init__(self, params: GalvoParams | None = None, threshold=None, k: float = 2.0):
        self.params = params
        self.threshold = threshold
        self.k = k

    def fit(self, X, y=None):
        if self.params is not None:
            self.params_ = self.params
        elif isinstance(X, Volume):
            self.params_ = calibrate_galvo(X, None, self.threshold, self.k)
        else:
            vx, vy = X
            self.params_ = calibrate_galvo(vx, vy, self.threshold, self.k)
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=float)
        if X.shape[1] != 3:
            raise ValueError("expected (n_points, 3) positions in mm")
        return correct_points(X, self.params_)

    def inverse_transform(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=float)
        return distort_points(X, self.params_)

    def get_params_dict(self) -> dict:
        check_is_fitted(self, "params_")
        return asdict(self.params_)
