import numpy as np
import pytest

from octhandeye.cli import main
from octhandeye.distortion import GalvoParams, load_galvo_params
from octhandeye.harness import (
    PoseDetectionError,
    RunConfig,
    load_points_csv,
    noise_sweep,
    pose_path,
    run_trajectory,
    write_dataset,
)
from octhandeye.registration import load_error_csv, load_transform
from octhandeye.synth import SynthConfig, TrajectorySpec, flat_scene, render_scene
from octhandeye.volume import ScanGeometry, Volume, save_volume

SMALL = ScanGeometry(n_x=128, n_y=32, n_z=128)
SHORT = TrajectorySpec("custom", legs=(("X", 2), ("Z", 2), ("Y", 2)))


def small_config(**kw):
    kw.setdefault("geometry", SMALL)
    kw.setdefault("trajectory", SHORT)
    kw.setdefault("noise_sigma", 4.0)
    return SynthConfig(**kw)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("ds")
    write_dataset(small_config(), d)
    return d


def test_unknown_method_fails_before_work(tmp_path):
    cfg = RunConfig(dataset=tmp_path / "missing", method="ICP")
    with pytest.raises(ValueError, match="unknown method"):
        run_trajectory(cfg)


def test_needs_exactly_one_source():
    with pytest.raises(ValueError):
        run_trajectory(RunConfig())


def test_dataset_layout(dataset):
    robot = load_points_csv(dataset / "robot_poses.csv")
    assert robot.shape == (7, 3)
    assert all(pose_path(dataset, k).with_suffix(".raw").is_file() for k in range(7))
    assert load_galvo_params(dataset / "galvo.txt") == GalvoParams.default()


def test_dataset_run_matches_synth_run(dataset, tmp_path):
    a = run_trajectory(RunConfig(dataset=dataset, method="SVDT", out_dir=tmp_path))
    b = run_trajectory(RunConfig(synth=small_config(), method="SVDT"))
    assert np.array_equal(a.correspondences.camera_points, b.correspondences.camera_points)
    # a 40 um trajectory barely constrains rotation; check residuals only
    assert a.report.mean < 25
    assert np.allclose(load_error_csv(tmp_path / "errors.csv"), a.report.errors, atol=1e-6)
    assert np.allclose(load_transform(tmp_path / "transform.txt").rotation, a.transform.rotation, atol=1e-12)


def test_failed_pose_aborts_or_is_skipped(dataset, tmp_path):
    # swap one pose for an empty volume
    import shutil

    d = tmp_path / "broken"
    shutil.copytree(dataset, d)
    save_volume(Volume(SMALL, np.full(SMALL.shape, 10, dtype=np.uint8)), pose_path(d, 3))
    with pytest.raises(PoseDetectionError) as ei:
        run_trajectory(RunConfig(dataset=d, method="QT"))
    assert ei.value.index == 3
    run = run_trajectory(RunConfig(dataset=d, method="QT", skip_failed=True))
    assert [k for k, _ in run.failures] == [3]
    assert 3 not in run.pose_indices and len(run.pose_indices) == 6


def test_noise_sweep_entry_matches_plain_run(tmp_path):
    res = noise_sweep(RunConfig(synth=small_config(), out_dir=tmp_path), sigmas=[0, 8])
    plain = run_trajectory(RunConfig(synth=small_config(noise_sigma=8.0)))
    assert res.reports[1].mean == pytest.approx(plain.report.mean, abs=1e-9)
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("sigma,status,n,mean") and len(lines) == 3
    assert (tmp_path / "sigma_08" / "errors.csv").is_file()


# ---- CLI


def test_cli_synth_run_stats(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    small_config(mode="marker").save(cfg)
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "ds")]) == 0
    assert main(["run", "--dataset", str(tmp_path / "ds"), "--method", "SVDT", "--out", str(tmp_path / "run")]) == 0
    out = capsys.readouterr().out
    assert "mode: marker" in out and "mean:" in out
    assert main(["stats", str(tmp_path / "run" / "errors.csv"), "--out", str(tmp_path / "s.csv")]) == 0
    assert (tmp_path / "s.csv").read_text().startswith("index,e_um")


def test_cli_detect_tip(dataset, tmp_path):
    out = tmp_path / "tips.csv"
    vols = [str(pose_path(dataset, k)) for k in (0, 1)]
    assert main(["detect-tip", *vols, "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0].startswith("index,volume,x_mm") and len(rows) == 3


def test_cli_calibrate_galvo(tmp_path, capsys):
    g = ScanGeometry(n_x=256, n_y=32, n_z=256)
    vol, _ = render_scene(flat_scene(1.3), g, GalvoParams.default())
    save_volume(vol, tmp_path / "flat")
    assert main(["calibrate-galvo", str(tmp_path / "flat.hdr"), "--out", str(tmp_path / "g.txt")]) == 0
    est = load_galvo_params(tmp_path / "g.txt")
    assert est.z_xc == pytest.approx(151.563, rel=0.05)
    assert est.x_c == pytest.approx(1.489, abs=0.05)


def test_cli_noise_sweep_stdout(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    small_config().save(cfg)
    assert main(["noise-sweep", "--config", str(cfg), "--sigmas", "0", "4"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("sigma,") and lines[1].startswith("0,ok,7")


def test_cli_errors_exit_nonzero(tmp_path, capsys):
    assert main(["run", "--dataset", str(tmp_path / "nope")]) == 1
    assert "error:" in capsys.readouterr().err
    assert main(["stats", str(tmp_path / "missing.csv")]) == 1
    with pytest.raises(SystemExit) as ei:
        main(["run", "--method", "ICP"])
    assert ei.value.code != 0
