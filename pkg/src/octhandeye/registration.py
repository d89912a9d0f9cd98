"""Rigid hand-eye registration between the scanner frame and the robot frame.

Given robot-frame tip positions ``A'`` and camera-frame detections ``B``,
find ``R, T`` minimising ``sum |A'_i - (R B_i + T)|^2``.  Two closed-form
solvers are provided (SVD and unit quaternion), plus a linear Kalman
pre-filter on the camera track.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

METHODS = ("SVDT", "QT", "QKT")
DEGENERATE_SV_MM = 1e-9


class DegenerateConfiguration(ValueError):
    """Camera points are (nearly) collinear; rotation about the line is unobservable."""


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        T = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", T)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> RigidTransform:
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> RigidTransform:
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: RigidTransform) -> RigidTransform:
        """``self`` after ``other``."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def is_proper(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return bool(np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1) < tol)


def apply_transform(x: RigidTransform, p) -> np.ndarray:
    return x.apply(p)


def rotation_angle(R1, R2) -> float:
    """Geodesic angle (rad) between two rotations, accurate near zero."""
    d = np.linalg.norm(np.asarray(R1) - np.asarray(R2))
    return float(2 * np.arcsin(min(1.0, d / (2 * np.sqrt(2)))))


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def save_transform(x: RigidTransform, path) -> None:
    """Row-major 3x4 ``[R | T]`` (mm), full double precision."""
    m = x.as_matrix()[:3]
    lines = [" ".join(repr(float(v)) for v in row) for row in m]
    Path(path).write_text("# camera -> robot rigid transform [R | T], mm\n" + "\n".join(lines) + "\n")


def load_transform(path) -> RigidTransform:
    m = np.loadtxt(path, comments="#")
    if m.shape != (3, 4):
        raise ValueError(f"{path}: expected a 3x4 matrix, got shape {m.shape}")
    return RigidTransform(m[:, :3], m[:, 3])


@dataclass(frozen=True)
class Correspondences:
    robot_points: np.ndarray
    camera_points: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.robot_points, dtype=float)
        B = np.asarray(self.camera_points, dtype=float)
        if A.ndim != 2 or A.shape[1] != 3 or B.shape != A.shape:
            raise ValueError("robot and camera points must both be (N, 3) with equal N")
        object.__setattr__(self, "robot_points", A)
        object.__setattr__(self, "camera_points", B)

    def __len__(self):
        return len(self.robot_points)


def _prepare(c: Correspondences):
    if len(c) < 3:
        raise ValueError("at least 3 point pairs are required")
    A, B = c.robot_points, c.camera_points
    a0, b0 = A.mean(axis=0), B.mean(axis=0)
    Ac, Bc = A - a0, B - b0
    sv = np.linalg.svd(Bc, compute_uv=False)
    if sv[1] < DEGENERATE_SV_MM:
        raise DegenerateConfiguration("camera points are collinear")
    return a0, b0, Ac, Bc


def solve_svdt(c: Correspondences) -> RigidTransform:
    """Least-squares rotation from the SVD of the cross-covariance, with reflection guard."""
    a0, b0, Ac, Bc = _prepare(c)
    H = Bc.T @ Ac
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidTransform(R, a0 - R @ b0)


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (y * x + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
            [2 * (z * x - w * y), 2 * (z * y + w * x), w * w - x * x - y * y + z * z],
        ]
    )


def solve_qt_quaternion(c: Correspondences):
    """Unit quaternion ``(w, x, y, z)``, ``w >= 0``, plus translation."""
    a0, b0, Ac, Bc = _prepare(c)
    S = Bc.T @ Ac
    Sxx, Sxy, Sxz = S[0]
    Syx, Syy, Syz = S[1]
    Szx, Szy, Szz = S[2]
    N = np.array(
        [
            [Sxx + Syy + Szz, Syz - Szy, Szx - Sxz, Sxy - Syx],
            [Syz - Szy, Sxx - Syy - Szz, Sxy + Syx, Szx + Sxz],
            [Szx - Sxz, Sxy + Syx, -Sxx + Syy - Szz, Syz + Szy],
            [Sxy - Syx, Szx + Sxz, Syz + Szy, -Sxx - Syy + Szz],
        ]
    )
    _, vecs = np.linalg.eigh(N)
    q = vecs[:, -1]
    if q[0] < 0:
        q = -q
    q = q / np.linalg.norm(q)
    R = quaternion_to_matrix(q)
    return q, a0 - R @ b0


def solve_qt(c: Correspondences) -> RigidTransform:
    """Rotation as the unit quaternion maximising the quadratic form of the profile matrix."""
    q, T = solve_qt_quaternion(c)
    return RigidTransform(quaternion_to_matrix(q), T)


@dataclass
class KalmanTrack:
    """Constant-position filter on a 3-D position; axes are independent."""

    mean: np.ndarray
    cov: np.ndarray
    q: float
    r: float

    def predict(self, control=None) -> None:
        if control is not None:
            self.mean = self.mean + control
        self.cov = self.cov + self.q * np.eye(3)

    def update(self, z) -> None:
        S = self.cov + self.r * np.eye(3)
        K = self.cov @ np.linalg.inv(S)
        self.mean = self.mean + K @ (z - self.mean)
        IK = np.eye(3) - K
        # Joseph form keeps the covariance symmetric PSD
        self.cov = IK @ self.cov @ IK.T + K @ (self.r * np.eye(3)) @ K.T


def kalman_filter_track(measurements, q: float = 1e-6, r: float = 1e-4, controls=None, prior_var: float = 1e6):
    """Linear Kalman filter over a sequence of 3-D positions (mm).

    State = position.  ``controls[k]`` (optional) is the known displacement
    between steps ``k-1`` and ``k`` expressed in the measurement frame; when
    omitted the position is modelled as constant.  Initialized at the first
    measurement with prior variance ``prior_var``.
    """
    z = np.asarray(measurements, dtype=float).reshape(-1, 3)
    if len(z) == 0:
        raise ValueError("no measurements to filter")
    if q < 0 or r < 0:
        raise ValueError("noise variances must be non-negative")
    if controls is not None:
        controls = np.asarray(controls, dtype=float).reshape(-1, 3)
        if len(controls) != len(z):
            raise ValueError("controls must match measurements in length")
    track = KalmanTrack(mean=z[0].copy(), cov=prior_var * np.eye(3), q=q, r=r)
    out = np.empty_like(z)
    for k in range(len(z)):
        if k > 0:
            track.predict(None if controls is None else controls[k])
        track.update(z[k])
        out[k] = track.mean
    return out


def robot_motion_controls(robot_points, rotation) -> np.ndarray:
    """Commanded robot steps mapped into the camera frame by ``rotation`` (camera -> robot)."""
    A = np.asarray(robot_points, dtype=float)
    steps = np.vstack([np.zeros(3), np.diff(A, axis=0)])
    return steps @ np.asarray(rotation)


def solve_handeye(
    c: Correspondences, method: str = "QKT", q: float = 1e-6, r: float = 1e-4, use_robot_motion: bool = True
) -> RigidTransform:
    """Camera -> robot transform by SVDT, QT, or QKT (Kalman-filtered camera track, then QT).

    For QKT the filter's control input is the commanded robot step, rotated
    into the camera frame with a preliminary QT estimate.
    """
    method = method.upper()
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if method == "SVDT":
        return solve_svdt(c)
    if method == "QT":
        return solve_qt(c)
    return solve_qt(solver_input(c, method, q, r, use_robot_motion))


def solver_input(
    c: Correspondences, method: str = "QKT", q: float = 1e-6, r: float = 1e-4, use_robot_motion: bool = True
) -> Correspondences:
    """The correspondences a method actually solves: Kalman-filtered camera track for QKT, else ``c``."""
    method = method.upper()
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if method != "QKT":
        return c
    controls = None
    if use_robot_motion:
        controls = robot_motion_controls(c.robot_points, solve_qt(c).rotation)
    filtered = kalman_filter_track(c.camera_points, q=q, r=r, controls=controls)
    return Correspondences(c.robot_points, filtered)


@dataclass(frozen=True)
class ErrorReport:
    """Per-point errors (um) and box-plot statistics.

    Quartiles use linear interpolation between order statistics.  Whisker
    fences sit 1.0 IQR beyond the quartiles; values outside are outliers.
    """

    errors: np.ndarray
    mean: float
    median: float
    q1: float
    q3: float
    min: float
    max: float
    whisker_low: float
    whisker_high: float
    outlier_indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1

    @property
    def outliers(self) -> np.ndarray:
        return self.errors[self.outlier_indices]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "e_um"])
        for i, e in enumerate(self.errors):
            w.writerow([i, f"{e:.6f}"])
        for key in ("mean", "median", "q1", "q3", "min", "max", "whisker_low", "whisker_high"):
            w.writerow([key, f"{getattr(self, key):.6f}"])
        w.writerow(["n_outliers", len(self.outlier_indices)])
        return buf.getvalue()

    def save_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    def summary(self) -> dict:
        return {
            "n": len(self.errors),
            "mean": self.mean,
            "median": self.median,
            "q1": self.q1,
            "q3": self.q3,
            "min": self.min,
            "max": self.max,
            "whisker_low": self.whisker_low,
            "whisker_high": self.whisker_high,
            "n_outliers": len(self.outlier_indices),
        }


def report_stats(errors, whisker: float = 1.0) -> ErrorReport:
    e = np.asarray(errors, dtype=float).reshape(-1)
    if len(e) == 0:
        raise ValueError("no errors to summarize")
    if np.any(e < 0) or not np.all(np.isfinite(e)):
        raise ValueError("errors must be finite and non-negative")
    q1, med, q3 = np.percentile(e, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - whisker * iqr, q3 + whisker * iqr
    out = np.flatnonzero((e < lo_fence) | (e > hi_fence))
    inside = e[(e >= lo_fence) & (e <= hi_fence)]
    return ErrorReport(
        errors=e,
        mean=float(e.mean()),
        median=float(med),
        q1=float(q1),
        q3=float(q3),
        min=float(e.min()),
        max=float(e.max()),
        whisker_low=float(inside.min()),
        whisker_high=float(inside.max()),
        outlier_indices=out,
    )


def load_error_csv(path) -> np.ndarray:
    vals = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if len(row) < 2 or not row[0].strip().lstrip("-").isdigit():
                continue
            vals.append(float(row[1]))
    return np.array(vals)


def point_errors_um(c: Correspondences, x: RigidTransform) -> np.ndarray:
    return np.linalg.norm(c.robot_points - x.apply(c.camera_points), axis=1) * 1000.0


def calib_error(c: Correspondences, x: RigidTransform) -> ErrorReport:
    """Euclidean distance between robot positions and transformed detections, in um."""
    return report_stats(point_errors_um(c, x))


class HandEyeCalibrator(BaseEstimator, RegressorMixin):
    """Estimator form of the hand-eye solvers.

    ``fit(X, y)`` takes camera-frame points ``X`` and robot-frame points
    ``y`` (both ``(n, 3)`` mm, paired by row and in acquisition order);
    ``predict`` maps camera points into the robot frame.
    """

    def __init__(self, method: str = "QKT", q: float = 1e-6, r: float = 1e-4, use_robot_motion: bool = True):
        self.method = method
        self.q = q
        self.r = r
        self.use_robot_motion = use_robot_motion

    def fit(self, X, y):
        if str(self.method).upper() not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        X = check_array(X, dtype=float)
        y = check_array(y, dtype=float)
        c = Correspondences(y, X)
        self.transform_ = solve_handeye(c, self.method, self.q, self.r, self.use_robot_motion)
        self.n_features_in_ = 3
        return self

    def predict(self, X):
        check_is_fitted(self, "transform_")
        return self.transform_.apply(check_array(X, dtype=float))

    def error_report(self, X, y) -> ErrorReport:
        check_is_fitted(self, "transform_")
        return calib_error(Correspondences(y, X), self.transform_)
