"""Command-line front end (``octhandeye <command> ...``)."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path


from .cloud import DEFAULT_CLUSTER_TOL_MM, DEFAULT_LEAF_MM
from .detect import TipDetector
from .distortion import GalvoParams, calibrate_galvo, load_galvo_params, save_galvo_params
from .harness import SWEEP_SIGMAS, RunConfig, noise_sweep, run_trajectory, write_dataset
from .registration import METHODS, load_error_csv, report_stats
from .synth import SynthConfig
from .volume import load_volume

log = logging.getLogger("octhandeye")


def _add_detection_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k", type=float, default=2.0, help="adaptive threshold factor (mean + k*std)")
    p.add_argument("--m-e", type=float, default=None, help="ellipse minor-axis gate in pixels (default 1.5 needle diameters)")
    p.add_argument("--d-tol", type=float, default=2.0, help="needle-pixel distance to the ellipse, pixels")
    p.add_argument("--leaf", type=float, default=DEFAULT_LEAF_MM, help="voxel-grid leaf size, mm")
    p.add_argument("--t", type=float, default=DEFAULT_CLUSTER_TOL_MM, help="cluster distance threshold, mm")
    p.add_argument("--radius-hint", type=float, default=0.25, help="marker radius hint, mm")
    p.add_argument("--reverse", action="store_true", help="needle enters from the last B-scan")
    p.add_argument("--galvo", type=Path, default=None, help="galvo params file")


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", default="QKT", choices=METHODS)
    p.add_argument("--q", type=float, default=1e-6, help="Kalman process noise, mm^2")
    p.add_argument("--r", type=float, default=1e-4, help="Kalman measurement noise, mm^2")


def _run_config(a, **kw) -> RunConfig:
    return RunConfig(
        method=getattr(a, "method", "QKT"),
        k=a.k,
        m_e=a.m_e,
        d_tol=a.d_tol,
        leaf=a.leaf,
        t=a.t,
        radius_hint=a.radius_hint,
        q=a.q,
        r=a.r,
        galvo=a.galvo,
        out_dir=a.out,
        seed=a.seed,
        skip_failed=a.skip_failed,
        reverse=a.reverse,
        **kw,
    )


def _synth_config(a) -> SynthConfig:
    s = SynthConfig.load(a.config) if a.config is not None else SynthConfig()
    if getattr(a, "mode", None) is not None:
        s = replace(s, mode=a.mode)
    if getattr(a, "sigma", None) is not None:
        s = replace(s, noise_sigma=a.sigma)
    if a.seed is not None:
        s = replace(s, seed=a.seed)
    return s


def cmd_synth(a) -> int:
    s = _synth_config(a)
    write_dataset(s, a.out)
    print(f"wrote {len(s.ground_truth().robot_tips)} poses to {a.out}")
    return 0


def cmd_calibrate_galvo(a) -> int:
    vx = load_volume(a.flat_x)
    vy = load_volume(a.flat_y) if a.flat_y is not None else None
    g = calibrate_galvo(vx, vy, threshold=a.threshold, k=a.k)
    save_galvo_params(g, a.out)
    print(f"x_c={g.x_c:.6f} z_xc={g.z_xc:.6f} y_c={g.y_c:.6f} z_yc={g.z_yc:.6f}")
    return 0


def cmd_detect_tip(a) -> int:
    galvo = load_galvo_params(a.galvo) if a.galvo is not None else GalvoParams.default()
    det = TipDetector(
        mode=a.mode, galvo=galvo, k=a.k, m_e=a.m_e, d_tol=a.d_tol, leaf=a.leaf, t=a.t, radius_hint=a.radius_hint, reverse=a.reverse
    ).fit()
    rows = []
    for i, path in enumerate(a.volumes):
        d = det.detect(load_volume(path))
        log.info("%s: %.3f s", path, d.seconds)
        rows.append([i, Path(path).name, *(f"{v:.9f}" for v in d.position), *(f"{v:.9f}" for v in d.raw_position)])
    out = open(a.out, "w", newline="") if a.out is not None else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["index", "volume", "x_mm", "y_mm", "z_mm", "raw_x_mm", "raw_y_mm", "raw_z_mm"])
        w.writerows(rows)
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def _print_summary(rep) -> None:
    for key, val in rep.summary().items():
        print(f"{key}: {val:.6f}" if isinstance(val, float) else f"{key}: {val}")


def cmd_run(a) -> int:
    if a.dataset is not None:
        cfg = _run_config(a, dataset=a.dataset, mode=a.mode)
    else:
        cfg = _run_config(a, synth=_synth_config(a))
    run = run_trajectory(cfg)
    log.info("mean detection time %.3f s per volume", run.mean_seconds)
    print(f"method: {run.method}  mode: {run.mode}  poses: {len(run.pose_indices)}  failed: {len(run.failures)}")
    _print_summary(run.report)
    return 0


def cmd_noise_sweep(a) -> int:
    cfg = _run_config(a, synth=_synth_config(a))
    sigmas = SWEEP_SIGMAS if a.sigmas is None else tuple(a.sigmas)
    res = noise_sweep(cfg, sigmas, method=a.method)
    if a.out is None:
        sys.stdout.write(res.to_csv())
    else:
        print(f"wrote {Path(a.out) / 'sweep.csv'}")
    return 0


def cmd_stats(a) -> int:
    rep = report_stats(load_error_csv(a.errors))
    if a.out is not None:
        rep.save_csv(a.out)
    _print_summary(rep)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="octhandeye", description="Marker-free OCT hand-eye calibration toolkit")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic trajectory dataset")
    p.add_argument("--config", type=Path, default=None, help="synth config JSON")
    p.add_argument("--mode", choices=("needle", "marker"), default=None)
    p.add_argument("--sigma", type=float, default=None, help="noise standard deviation")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=Path, required=True, help="dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("calibrate-galvo", help="estimate galvo pivots from flat-surface volumes")
    p.add_argument("flat_x", type=Path, help="flat-surface volume (B-scans along x)")
    p.add_argument("flat_y", type=Path, nargs="?", default=None, help="flat-surface volume for the y-z sections (default: flat_x)")
    p.add_argument("--threshold", type=float, default=None, help="fixed intensity threshold (default adaptive)")
    p.add_argument("--k", type=float, default=2.0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_calibrate_galvo)

    p = sub.add_parser("detect-tip", help="detect needle tips or marker centres in volumes")
    p.add_argument("volumes", nargs="+", type=Path)
    p.add_argument("--mode", choices=("needle", "marker"), default="needle")
    _add_detection_flags(p)
    p.add_argument("--out", type=Path, default=None, help="CSV path (default stdout)")
    p.set_defaults(func=cmd_detect_tip)

    for name, func, helptext in (
        ("run", cmd_run, "detect, solve and score one trajectory"),
        ("noise-sweep", cmd_noise_sweep, "rerun a synthetic trajectory over noise levels"),
    ):
        p = sub.add_parser(name, help=helptext)
        if name == "run":
            p.add_argument("--dataset", type=Path, default=None, help="dataset directory (default: synthesize)")
        p.add_argument("--config", type=Path, default=None, help="synth config JSON")
        p.add_argument("--mode", choices=("needle", "marker"), default=None)
        p.add_argument("--seed", type=int, default=None)
        if name == "run":
            p.add_argument("--sigma", type=float, default=None, help="noise standard deviation (synthetic only)")
        else:
            p.add_argument("--sigmas", type=float, nargs="+", default=None)
        p.add_argument("--skip-failed", action="store_true", help="drop poses whose detection fails")
        p.add_argument("--out", type=Path, default=None, help="output directory")
        _add_detection_flags(p)
        _add_solver_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("stats", help="box-plot statistics of an error CSV")
    p.add_argument("errors", type=Path)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_stats)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    a = ap.parse_args(argv)
    level = logging.WARNING - 10 * min(a.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return a.func(a)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a nonzero exit
        if a.verbose > 1:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
