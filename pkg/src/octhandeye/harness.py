"""Experiment runner: datasets, per-pose detection, solving and error reports.

Dataset layout (one directory)::

    pose_000.hdr / pose_000.raw   one volume per trajectory pose
    robot_poses.csv               index,x_mm,y_mm,z_mm (robot frame)
    galvo.txt                     galvo pivot constants used for correction
    ground_truth.json             oracle record (synthetic datasets only)
    synth.json                    generating config (synthetic datasets only)

Every file a run writes is a deterministic function of its configuration.
Wall-clock timings go to the log, never into output files.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .detect import DetectionError, TipDetector
from .distortion import GalvoParams, load_galvo_params, save_galvo_params
from .registration import (
    METHODS,
    Correspondences,
    ErrorReport,
    RigidTransform,
    calib_error,
    save_transform,
    solve_handeye,
    solver_input,
)
from .synth import GroundTruth, SynthConfig, add_noise
from .volume import Volume, load_volume, save_volume

logger = logging.getLogger(__name__)

SWEEP_SIGMAS = tuple(range(0, 41, 4))
MODES = ("needle", "marker")


class PoseDetectionError(RuntimeError):
    def __init__(self, index: int, message: str):
        super().__init__(f"pose {index}: {message}")
        self.index = index


@dataclass
class RunConfig:
    """One calibration run.

    Exactly one of ``dataset`` (directory) and ``synth`` (config) is the
    volume source.  ``galvo`` may be a params object, a params file, or
    ``None`` to use the source's own galvo constants.  ``seed`` and
    ``noise_sigma`` override the synthetic config when given.
    """

    dataset: str | Path | None = None
    synth: SynthConfig | None = None
    mode: str | None = None
    method: str = "QKT"
    k: float = 2.0
    m_e: float | None = None
    d_tol: float = 2.0
    leaf: float = 0.02
    t: float = 0.1
    radius_hint: float = 0.25
    q: float = 1e-6
    r: float = 1e-4
    galvo: GalvoParams | str | Path | None = None
    out_dir: str | Path | None = None
    seed: int | None = None
    noise_sigma: float | None = None
    skip_failed: bool = False
    reverse: bool = False

    def validate(self) -> None:
        if str(self.method).upper() not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if (self.dataset is None) == (self.synth is None):
            raise ValueError("give exactly one of a dataset directory or a synth config")
        if self.dataset is not None:
            d = Path(self.dataset)
            if not (d / "robot_poses.csv").is_file():
                raise FileNotFoundError(f"{d}: no robot_poses.csv")
        if isinstance(self.galvo, (str, Path)) and not Path(self.galvo).is_file():
            raise FileNotFoundError(f"galvo params file {self.galvo} not found")
        if self.mode is not None and self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.leaf <= 0 or self.t <= 0:
            raise ValueError("leaf and t must be positive")
        if self.noise_sigma is not None and self.noise_sigma < 0:
            raise ValueError("noise sigma must be non-negative")

    def synth_config(self) -> SynthConfig:
        s = self.synth
        if self.seed is not None:
            s = replace(s, seed=int(self.seed))
        if self.noise_sigma is not None:
            s = replace(s, noise_sigma=float(self.noise_sigma))
        if self.mode is not None:
            s = replace(s, mode=self.mode)
        return s


@dataclass
class TrajectoryRun:
    """Correspondences, per-pose detections, the solved transform and its errors."""

    method: str
    mode: str
    correspondences: Correspondences
    detections: list
    transform: RigidTransform
    report: ErrorReport
    pose_indices: np.ndarray
    failures: list = field(default_factory=list)
    seconds: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def mean_seconds(self) -> float:
        return float(np.mean(self.seconds)) if len(self.seconds) else float("nan")


@dataclass
class NoiseSweepResult:
    """Per-sigma error reports (``None`` where the sigma failed) and runs."""

    sigmas: tuple
    reports: list
    failures: list
    runs: list = field(default_factory=list)

    def means(self) -> np.ndarray:
        return np.array([np.nan if r is None else r.mean for r in self.reports])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        keys = ("mean", "median", "q1", "q3", "min", "max", "whisker_low", "whisker_high")
        w.writerow(["sigma", "status", "n", *keys, "n_outliers", "n_failed_poses"])
        for s, rep, fail in zip(self.sigmas, self.reports, self.failures):
            if rep is None:
                w.writerow([s, "failed", 0, *([""] * len(keys)), "", len(fail)])
            else:
                w.writerow([s, "ok", len(rep.errors), *(f"{getattr(rep, k):.6f}" for k in keys), len(rep.outlier_indices), len(fail)])
        return buf.getvalue()

    def save_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


# ---------------------------------------------------------------- datasets


def save_points_csv(points, path, header=("index", "x_mm", "y_mm", "z_mm"), indices=None) -> None:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    idx = range(len(pts)) if indices is None else indices
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, p in zip(idx, pts):
            w.writerow([int(i), *(f"{v:.9f}" for v in p)])


def load_points_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["index"]:
        raise ValueError(f"{path}: missing 'index' header")
    return np.array([[float(v) for v in r[1:4]] for r in rows[1:] if r], dtype=float).reshape(-1, 3)


def pose_path(directory, k: int) -> Path:
    return Path(directory) / f"pose_{k:03d}.hdr"


def write_dataset(cfg: SynthConfig, directory) -> Path:
    """Render every pose of ``cfg`` into ``directory`` (layout in the module docstring)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    truth = cfg.ground_truth()
    for k in range(len(truth.robot_tips)):
        save_volume(cfg.render_pose(k, truth), pose_path(d, k))
    save_points_csv(truth.robot_tips, d / "robot_poses.csv")
    save_galvo_params(cfg.galvo, d / "galvo.txt")
    (d / "ground_truth.json").write_text(truth.to_json() + "\n")
    cfg.save(d / "synth.json")
    return d


@dataclass
class _Source:
    robot: np.ndarray
    volume: Callable[[int], Volume]
    galvo: GalvoParams
    mode: str
    truth: GroundTruth | None


def _source(cfg: RunConfig) -> _Source:
    if cfg.synth is not None:
        s = cfg.synth_config()
        truth = s.ground_truth()
        galvo = s.galvo
        src = _Source(truth.robot_tips, lambda k: s.render_pose(k, truth), galvo, s.mode, truth)
    else:
        d = Path(cfg.dataset)
        robot = load_points_csv(d / "robot_poses.csv")
        truth = None
        if (d / "ground_truth.json").is_file():
            truth = GroundTruth.from_json((d / "ground_truth.json").read_text())
        galvo = load_galvo_params(d / "galvo.txt") if (d / "galvo.txt").is_file() else None
        mode = cfg.mode or (truth.mode if truth is not None else None)
        if mode not in MODES:
            raise ValueError("dataset does not record its mode; pass one explicitly")
        src = _Source(robot, lambda k: load_volume(pose_path(d, k)), galvo, mode, truth)
    if isinstance(cfg.galvo, GalvoParams):
        src.galvo = cfg.galvo
    elif cfg.galvo is not None:
        src.galvo = load_galvo_params(cfg.galvo)
    if src.galvo is None:
        raise ValueError("no galvo parameters: pass a params file")
    if cfg.mode is not None:
        src.mode = cfg.mode
    return src


def make_detector(cfg: RunConfig, mode: str, galvo: GalvoParams) -> TipDetector:
    return TipDetector(
        mode=mode,
        galvo=galvo,
        k=cfg.k,
        m_e=cfg.m_e,
        d_tol=cfg.d_tol,
        leaf=cfg.leaf,
        t=cfg.t,
        radius_hint=cfg.radius_hint,
        reverse=cfg.reverse,
    ).fit()


# ---------------------------------------------------------------- runs


def _sigma_dir(sg) -> str:
    return f"sigma_{sg:02d}" if isinstance(sg, int) else f"sigma_{sg:g}"


def _detect_pose(det: TipDetector, v: Volume, k: int):
    try:
        d = det.detect(v)
    except (DetectionError, ValueError) as exc:
        return None, str(exc)
    logger.info("pose %d: %s detected in %.3f s", k, det.mode, d.seconds)
    return d, None


def solve_run(cfg: RunConfig, mode: str, robot, detections, failures) -> TrajectoryRun:
    """Stack successful detections into correspondences, solve and score."""
    if failures and not cfg.skip_failed:
        k, msg = failures[0]
        raise PoseDetectionError(k, msg)
    keep = np.array([k for k, d in enumerate(detections) if d is not None], dtype=int)
    if len(keep) < 3:
        raise ValueError(f"only {len(keep)} poses detected; need at least 3")
    cam = np.array([detections[k].position for k in keep])
    c = Correspondences(np.asarray(robot)[keep], cam)
    method = cfg.method.upper()
    x = solve_handeye(c, method, cfg.q, cfg.r)
    report = calib_error(solver_input(c, method, cfg.q, cfg.r), x)
    secs = np.array([detections[k].seconds for k in keep])
    return TrajectoryRun(method, mode, c, detections, x, report, keep, list(failures), secs)


def write_run(run: TrajectoryRun, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "detections.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "x_mm", "y_mm", "z_mm", "raw_x_mm", "raw_y_mm", "raw_z_mm", "n_points", "n_clusters"])
        for k, det in enumerate(run.detections):
            if det is None:
                continue
            w.writerow([k, *(f"{v:.9f}" for v in det.position), *(f"{v:.9f}" for v in det.raw_position), det.n_points, det.n_clusters])
    with open(d / "failures.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "message"])
        for k, msg in run.failures:
            w.writerow([k, msg])
    save_transform(run.transform, d / "transform.txt")
    run.report.save_csv(d / "errors.csv")


def run_trajectory(cfg: RunConfig) -> TrajectoryRun:
    """Detect every pose, solve the hand-eye problem with ``cfg.method`` and report errors.

    A failed pose aborts the run with its index unless ``skip_failed`` is
    set, in which case it is excluded from the correspondences and listed
    in ``failures``.
    """
    cfg.validate()
    src = _source(cfg)
    det = make_detector(cfg, src.mode, src.galvo)
    detections, failures = [], []
    for k in range(len(src.robot)):
        d, err = _detect_pose(det, src.volume(k), k)
        if err is not None:
            if not cfg.skip_failed:
                raise PoseDetectionError(k, err)
            failures.append((k, err))
        detections.append(d)
    run = solve_run(cfg, src.mode, src.robot, detections, failures)
    logger.info("%s run: mean %.3f um, mean detection time %.3f s", run.mode, run.report.mean, run.mean_seconds)
    if cfg.out_dir is not None:
        write_run(run, cfg.out_dir)
    return run


def noise_sweep(cfg: RunConfig, sigmas=SWEEP_SIGMAS, method: str = "QKT") -> NoiseSweepResult:
    """Re-run the synthetic trajectory at every noise level with ``method``.

    Each pose is rendered once noise-free; each sigma then adds its noise
    with the pose's own seed, so the sigma entry equals a plain
    :func:`run_trajectory` at that sigma.  A failing sigma is recorded and
    the sweep continues.
    """
    if cfg.synth is None:
        raise ValueError("noise sweep needs a synth config")
    cfg = replace(cfg, method=method)
    cfg.validate()
    sigmas = tuple(sorted(float(s) if s != int(s) else int(s) for s in sigmas))
    if any(s < 0 for s in sigmas):
        raise ValueError("noise sigma must be non-negative")
    s = cfg.synth_config()
    truth = s.ground_truth()
    src = _source(cfg)
    det = make_detector(cfg, s.mode, src.galvo)
    n = len(truth.robot_tips)
    dets = {sg: [None] * n for sg in sigmas}
    fails = {sg: [] for sg in sigmas}
    for k in range(n):
        clean = s.clean_volume(k, truth)
        for sg in sigmas:
            t0 = time.perf_counter()
            d, err = _detect_pose(det, add_noise(clean, sg, s.pose_seed(k)), k)
            logger.debug("sigma %s pose %d: %.3f s", sg, k, time.perf_counter() - t0)
            dets[sg][k] = d
            if err is not None:
                fails[sg].append((k, err))
    reports, failures, runs = [], [], []
    for sg in sigmas:
        try:
            run = solve_run(cfg, s.mode, truth.robot_tips, dets[sg], fails[sg])
        except (PoseDetectionError, ValueError) as exc:
            logger.warning("sigma %s failed: %s", sg, exc)
            reports.append(None)
            runs.append(None)
            failures.append(fails[sg] or [(-1, str(exc))])
            continue
        reports.append(run.report)
        runs.append(run)
        failures.append(fails[sg])
        if cfg.out_dir is not None:
            write_run(run, Path(cfg.out_dir) / _sigma_dir(sg))
    result = NoiseSweepResult(sigmas, reports, failures, runs)
    if cfg.out_dir is not None:
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        result.save_csv(Path(cfg.out_dir) / "sweep.csv")
    return result
