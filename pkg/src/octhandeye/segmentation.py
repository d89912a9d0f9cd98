"""Per-B-scan needle segmentation.

Pipeline for one B-scan: adaptive binarization, median + Gaussian
denoising, topmost-contour extraction, ellipse fitting of each contour
group, and a per-pixel needle flag for foreground pixels that lie on an
accepted ellipse.  All images are ``(n_z, n_x)`` arrays (depth on rows).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .volume import ScanGeometry, Volume

NEEDLE_DIAMETER_MM = 0.31


@dataclass(frozen=True)
class SegmentationParams:
    """Tunable constants of the 2-D stage.  ``m_e`` is in lateral pixels."""

    k: float = 2.0
    m_e: float | None = None
    d_tol: float = 2.0
    median_size: int = 3
    gauss_size: int = 5
    gauss_sigma: float = 1.0
    max_depth_jump: int = 3
    major_factor: float = 2.0

    def resolve_m_e(self, geometry: ScanGeometry) -> float:
        return self.m_e if self.m_e is not None else default_m_e(geometry)


def default_m_e(geometry: ScanGeometry, diameter_mm: float = NEEDLE_DIAMETER_MM, factor: float = 1.5) -> float:
    """Minor-axis gate: ``factor`` times the instrument diameter in lateral pixels."""
    return factor * diameter_mm / geometry.pitch[0]


@dataclass(frozen=True)
class ContourGroup:
    pixels: np.ndarray  # (N, 2) integer (ix, iz), sorted by ix

    def __len__(self):
        return len(self.pixels)


@dataclass(frozen=True)
class EllipseParams:
    center: np.ndarray
    semi_major: float
    semi_minor: float
    tilt: float

    def boundary(self, n: int = 720) -> np.ndarray:
        t = np.linspace(0, 2 * np.pi, n, endpoint=False)
        c, s = np.cos(self.tilt), np.sin(self.tilt)
        u = self.semi_major * np.cos(t)
        v = self.semi_minor * np.sin(t)
        return np.column_stack([self.center[0] + c * u - s * v, self.center[1] + s * u + c * v])


@dataclass(frozen=True)
class LabeledBScan:
    mask: np.ndarray
    needle: np.ndarray
    ellipses: tuple = ()


def _bscan_stats(img: np.ndarray):
    a = img.reshape(img.shape[0], -1) if img.ndim == 3 else img.reshape(1, -1)
    a = a.astype(np.float64)
    return a.mean(axis=1), a.std(axis=1)


def adaptive_threshold(bscan, k: float = 2.0) -> np.ndarray:
    """Foreground where intensity exceeds the B-scan's ``mean + k * std``."""
    img = np.asarray(bscan)
    if img.size == 0:
        raise ValueError("empty image")
    mu, sd = _bscan_stats(img)
    return img > (mu[0] + k * sd[0])


def threshold_stack(voxels: np.ndarray, k: float = 2.0) -> np.ndarray:
    """:func:`adaptive_threshold` applied to every B-scan of an ``(n_y, n_z, n_x)`` stack."""
    thr = np.empty(voxels.shape[0])
    for iy in range(voxels.shape[0]):
        b = voxels[iy].astype(np.float64)
        thr[iy] = b.mean() + k * b.std()
    return voxels > thr[:, None, None]


def _reflect_shift_sum(a: np.ndarray, axis: int, radius: int, weights=None):
    """Sum (or weighted sum) of ``a`` over a centred window along ``axis``, reflect borders."""
    n = a.shape[axis]
    pad = [(0, 0)] * a.ndim
    pad[axis] = (radius, radius)
    ap = np.pad(a, pad, mode="symmetric")
    out = None
    for j in range(2 * radius + 1):
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(j, j + n)
        term = ap[tuple(sl)]
        if weights is not None:
            term = term * weights[j]
        out = term.copy() if out is None else out + term
    return out


def _gauss_weights(radius: int, sigma: float) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=float)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return (w / w.sum()).astype(np.float32)


def _denoise_axes(mask: np.ndarray, axes, median_size: int, gauss_size: int, gauss_sigma: float):
    """Median then Gaussian (re-binarized at 0.5) over the two image axes.

    On a 0/1 image the median is the majority vote inside the window, which
    is computed with integer window sums.  The Gaussian is evaluated only on
    image rows that can receive non-zero response; elsewhere it is exactly 0.
    """
    za, xa = axes
    m = mask.astype(np.uint8)
    mr = median_size // 2
    s = _reflect_shift_sum(_reflect_shift_sum(m, za, mr), xa, mr)
    med = s > (median_size * median_size) // 2
    gr = gauss_size // 2
    w = _gauss_weights(gr, gauss_sigma)
    # move to (..., z, x) with all leading axes flattened
    medv = np.moveaxis(med, (za, xa), (-2, -1))
    lead = medv.shape[:-2]
    nz, nx = medv.shape[-2:]
    med2 = medv.reshape(-1, nz, nx)
    rows = med2.any(axis=2)
    out = np.zeros(med2.shape, dtype=bool)
    if rows.any():
        gx = np.zeros(med2.shape, dtype=np.float32)
        rb, rz = np.nonzero(rows)
        gx[rb, rz] = _reflect_shift_sum(med2[rb, rz].astype(np.float32), 1, gr, w)
        active = rows.copy()
        for d in range(1, gr + 1):
            active[:, d:] |= rows[:, :-d]
            active[:, :-d] |= rows[:, d:]
        ab, az = np.nonzero(active)
        acc = np.zeros((len(ab), nx), dtype=np.float32)
        for j, off in enumerate(range(-gr, gr + 1)):
            zi = az + off
            zi = np.where(zi < 0, -zi - 1, zi)
            zi = np.where(zi >= nz, 2 * nz - zi - 1, zi)
            acc += w[j] * gx[ab, zi]
        out[ab, az] = acc > 0.5
    out = out.reshape(*lead, nz, nx)
    return np.moveaxis(out, (-2, -1), (za, xa))


def denoise(mask, median_size: int = 3, gauss_size: int = 5, gauss_sigma: float = 1.0) -> np.ndarray:
    """Median filter, then Gaussian blur re-binarized at 0.5."""
    mask = np.asarray(mask, dtype=bool)
    return _denoise_axes(mask, (0, 1), median_size, gauss_size, gauss_sigma)


def denoise_stack(masks, median_size: int = 3, gauss_size: int = 5, gauss_sigma: float = 1.0) -> np.ndarray:
    """Per-B-scan :func:`denoise` over an ``(n_y, n_z, n_x)`` stack."""
    return _denoise_axes(np.asarray(masks, dtype=bool), (1, 2), median_size, gauss_size, gauss_sigma)


def _top_rows(mask: np.ndarray) -> np.ndarray:
    """First foreground row per column, -1 where the column is empty."""
    has = mask.any(axis=-2)
    top = np.argmax(mask, axis=-2)
    return np.where(has, top, -1)


def _groups_from_top(top: np.ndarray, max_depth_jump: int | None) -> list[ContourGroup]:
    cols = np.flatnonzero(top >= 0)
    if len(cols) == 0:
        return []
    z = top[cols]
    brk = np.diff(cols) != 1
    if max_depth_jump is not None:
        brk |= np.abs(np.diff(z)) > max_depth_jump
    starts = np.concatenate([[0], np.flatnonzero(brk) + 1])
    ends = np.concatenate([starts[1:], [len(cols)]])
    return [ContourGroup(np.column_stack([cols[a:b], z[a:b]])) for a, b in zip(starts, ends)]


def extract_topmost_contours(mask, max_depth_jump: int | None = 3) -> list[ContourGroup]:
    """Topmost foreground pixel per column, grouped into lateral runs.

    A run breaks at an empty column or, when ``max_depth_jump`` is set, where
    the topmost depth changes by more than that many pixels between
    neighbouring columns (the contours are no longer connected).
    """
    mask = np.asarray(mask, dtype=bool)
    return _groups_from_top(_top_rows(mask), max_depth_jump)


def _conic_to_ellipse(coef) -> EllipseParams:
    a, b, c, d, e, f = coef
    M = np.array([[2 * a, b], [b, 2 * c]])
    if np.linalg.det(M) <= 0 or 4 * a * c - b * b <= 0:
        raise ValueError("fitted conic is not an ellipse")
    x0, y0 = np.linalg.solve(M, [-d, -e])
    f0 = a * x0 * x0 + b * x0 * y0 + c * y0 * y0 + d * x0 + e * y0 + f
    Q = np.array([[a, b / 2], [b / 2, c]])
    lam, vec = np.linalg.eigh(Q)
    ax2 = -f0 / lam
    if np.any(ax2 <= 0) or not np.all(np.isfinite(ax2)):
        raise ValueError("fitted conic is imaginary or degenerate")
    axes = np.sqrt(ax2)
    i_major = int(np.argmax(axes))
    major_dir = vec[:, i_major]
    tilt = float(np.arctan2(major_dir[1], major_dir[0]))
    if tilt <= -np.pi / 2:
        tilt += np.pi
    elif tilt > np.pi / 2:
        tilt -= np.pi
    return EllipseParams(
        center=np.array([x0, y0]),
        semi_major=float(axes[i_major]),
        semi_minor=float(axes[1 - i_major]),
        tilt=tilt,
    )


def fit_ellipse(group) -> EllipseParams:
    """Direct least-squares ellipse fit (ellipse-specific constraint 4ac - b^2 = 1).

    Uses the numerically stable partitioned formulation on centred and
    scaled coordinates.  Accepts a :class:`ContourGroup` or an ``(N, 2)`` array.
    """
    pts = np.asarray(group.pixels if isinstance(group, ContourGroup) else group, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 5:
        raise ValueError("ellipse fit needs at least 5 points")
    mean = pts.mean(axis=0)
    scale = np.sqrt(((pts - mean) ** 2).sum(axis=1).mean())
    if scale == 0:
        raise ValueError("ellipse fit: all points coincide")
    x, y = ((pts - mean) / scale).T
    D1 = np.column_stack([x * x, x * y, y * y])
    D2 = np.column_stack([x, y, np.ones_like(x)])
    S1, S2, S3 = D1.T @ D1, D1.T @ D2, D2.T @ D2
    try:
        T = -np.linalg.solve(S3, S2.T)
    except np.linalg.LinAlgError:
        raise ValueError("ellipse fit: singular scatter matrix") from None
    M = S1 + S2 @ T
    M = np.array([M[2] / 2, -M[1], M[0] / 2])
    w, v = np.linalg.eig(M)
    v = np.real(v)
    cond = 4 * v[0] * v[2] - v[1] ** 2
    ok = np.flatnonzero(cond > 0)
    if len(ok) == 0:
        raise ValueError("ellipse fit: no elliptical solution")
    a1 = v[:, ok[np.argmin(np.abs(np.real(w[ok])))]]
    A, B, C, Dn, En, Fn = np.concatenate([a1, T @ a1])
    # undo normalization: u = (X - mx)/s
    s, mx, my = scale, mean[0], mean[1]
    A2, B2, C2 = A / s**2, B / s**2, C / s**2
    D2c, E2c = Dn / s, En / s
    coef = (
        A2,
        B2,
        C2,
        D2c - 2 * A2 * mx - B2 * my,
        E2c - 2 * C2 * my - B2 * mx,
        A2 * mx * mx + B2 * mx * my + C2 * my * my - D2c * mx - E2c * my + Fn,
    )
    return _conic_to_ellipse(coef)


def _accept(e: EllipseParams, m_e: float, major_factor: float) -> bool:
    return 2 * e.semi_minor < m_e and 2 * e.semi_major < major_factor * m_e


def _label_from_mask(mask: np.ndarray, m_e: float, p: SegmentationParams):
    needle = np.zeros_like(mask)
    accepted = []
    for grp in extract_topmost_contours(mask, p.max_depth_jump):
        if len(grp) < 5:
            continue
        try:
            e = fit_ellipse(grp)
        except (ValueError, np.linalg.LinAlgError):
            continue
        if not _accept(e, m_e, p.major_factor):
            continue
        accepted.append(e)
        ix0, ix1 = grp.pixels[0, 0], grp.pixels[-1, 0]
        bnd = e.boundary(max(720, int(8 * np.pi * e.semi_major)))
        z_lo = max(int(np.floor(bnd[:, 1].min() - p.d_tol)), 0)
        z_hi = min(int(np.ceil(bnd[:, 1].max() + p.d_tol)) + 1, mask.shape[0])
        if z_hi <= z_lo:
            continue
        sub = mask[z_lo:z_hi, ix0 : ix1 + 1]
        zz, xx = np.nonzero(sub)
        if len(zz) == 0:
            continue
        cand = np.column_stack([xx + ix0, zz + z_lo]).astype(float)
        dist, _ = cKDTree(bnd).query(cand)
        on = dist <= p.d_tol
        needle[zz[on] + z_lo, xx[on] + ix0] = True
    return needle, tuple(accepted)


def label_needle_pixels(bscan, m_e: float, params: SegmentationParams | None = None, **overrides) -> LabeledBScan:
    """Binarize, denoise and flag the needle-body pixels of one B-scan.

    A pixel is flagged when it is foreground, lies within ``d_tol`` pixels
    of an accepted ellipse and inside the lateral span of the contour group
    that produced it.  Ellipses are accepted when ``2 * semi_minor < m_e``
    (and the major axis stays below ``major_factor * m_e``).
    """
    if m_e <= 0:
        raise ValueError("m_e must be positive")
    p = params or SegmentationParams()
    if overrides:
        p = SegmentationParams(**{**p.__dict__, **overrides})
    img = np.asarray(bscan)
    mask = denoise(adaptive_threshold(img, p.k), p.median_size, p.gauss_size, p.gauss_sigma)
    needle, ellipses = _label_from_mask(mask, m_e, p)
    return LabeledBScan(mask=mask, needle=needle, ellipses=ellipses)


def label_volume(v: Volume, params: SegmentationParams | None = None) -> list[LabeledBScan]:
    """Label every B-scan of ``v``; thresholding and filtering run on the whole stack."""
    p = params or SegmentationParams()
    m_e = p.resolve_m_e(v.geometry)
    masks = denoise_stack(threshold_stack(v.voxels, p.k), p.median_size, p.gauss_size, p.gauss_sigma)
    out = []
    for iy in range(v.n_bscans):
        needle, ellipses = _label_from_mask(masks[iy], m_e, p)
        out.append(LabeledBScan(mask=masks[iy], needle=needle, ellipses=ellipses))
    return out


def label_image(lb: LabeledBScan) -> np.ndarray:
    """8-bit debug rendering: 0 background, 128 foreground, 255 needle."""
    img = np.zeros(lb.mask.shape, dtype=np.uint8)
    img[lb.mask] = 128
    img[lb.needle] = 255
    return img


def write_pgm(img: np.ndarray, path) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def export_labels(labels, directory) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for iy, lb in enumerate(labels):
        path = d / f"bscan_{iy:04d}.pgm"
        write_pgm(label_image(lb), path)
        paths.append(path)
    return paths
