import numpy as np
import pytest

from octhandeye.distortion import GalvoParams, detect_top_surface
from octhandeye.synth import (
    BallSpec,
    GroundTruth,
    NeedleSpec,
    Scene,
    SynthConfig,
    TrajectorySpec,
    add_noise,
    flat_scene,
    make_trajectory,
    render_clean,
    render_scene,
    visible_tip_reference,
)
from octhandeye.volume import ScanGeometry, Volume

SMALL = ScanGeometry(3.01, 3.10, 2.60, 64, 8, 256)


def test_traj1_positions():
    p = make_trajectory(TrajectorySpec("traj1"))
    assert p.shape == (31, 3)
    assert np.allclose(p[10], [0.2, 0, 0]) and np.allclose(p[20], [0.2, 0, 0.2])
    assert np.allclose(p[30], [0.2, 0.2, 0.2])


def test_traj2_positions():
    p = make_trajectory(TrajectorySpec("traj2"))
    assert p.shape == (31, 3)
    assert np.allclose(p[15], [0.1, 0.1, 0.1]) and np.allclose(p[30], [0.2, 0.2, 0.2])


def test_steps_are_twenty_microns():
    for pat in ("traj1", "traj2"):
        d = np.linalg.norm(np.diff(make_trajectory(TrajectorySpec(pat)), axis=0), axis=1)
        assert np.allclose(d, 0.02)


def test_custom_legs_and_start():
    p = make_trajectory(TrajectorySpec("custom", legs=(("x", 2), ("z", -1))), start=(1, 1, 1))
    assert np.allclose(p, [[1, 1, 1], [1.02, 1, 1], [1.04, 1, 1], [1.04, 1, 0.98]])


@pytest.mark.parametrize("spec", [TrajectorySpec(step_um=0), TrajectorySpec("zigzag"), TrajectorySpec("custom", legs=(("W", 1),))])
def test_bad_trajectory(spec):
    with pytest.raises(ValueError):
        make_trajectory(spec)


def test_empty_scene_is_background():
    vol, truth = render_scene(Scene(speckle_sigma=0.0), SMALL, GalvoParams.default())
    assert (vol.voxels == 10).all()
    assert truth.mode == "none" and len(truth.robot_tips) == 0


def test_flat_surface_depth_recovered():
    g = GalvoParams.identity_like(SMALL)
    vol, _ = render_scene(flat_scene(1.3), SMALL, g)
    pitch = SMALL.pitch
    for bscan in vol.voxels:
        pts = detect_top_surface(bscan, lateral_pitch=pitch[0], axial_pitch=pitch[2])
        assert len(pts) == SMALL.n_x
        assert np.abs(pts[:, 1] - 1.3).max() <= pitch[2] / 2


def test_rendering_is_deterministic():
    s = Scene(needle=NeedleSpec(tip=(1.5, 1.0, 1.0)))
    a, _ = render_scene(s, SMALL, GalvoParams.default(), noise_sigma=8, seed=3)
    b, _ = render_scene(s, SMALL, GalvoParams.default(), noise_sigma=8, seed=3)
    c, _ = render_scene(s, SMALL, GalvoParams.default(), noise_sigma=8, seed=4)
    assert np.array_equal(a.voxels, b.voxels) and not np.array_equal(a.voxels, c.voxels)


def test_needle_band_at_reference_depth():
    g = GalvoParams.identity_like(SMALL)
    n = NeedleSpec(tip=(1.5, 0.2, 1.0))
    vol = render_clean(Scene(needle=n, speckle_sigma=0.0), SMALL, g)
    ix = int(1.5 / SMALL.pitch[0])
    col = vol[SMALL.n_y - 1, :, ix]
    top = np.argmax(col > 60) * SMALL.pitch[2]
    assert top == pytest.approx(1.0 - n.radius, abs=1.5 * SMALL.pitch[2])
    ref = visible_tip_reference(n, SMALL)
    assert ref[2] < 1.0 and ref[:2] == pytest.approx([1.5, 0.2])


def test_scene_validation():
    with pytest.raises(ValueError):
        Scene(needle=NeedleSpec(tip=(9.0, 1.0, 1.0))).validate(SMALL)
    with pytest.raises(ValueError):
        Scene(needle=NeedleSpec(axis=(0.0, -1.0, 0.0))).validate(SMALL)
    with pytest.raises(ValueError):
        Scene(ball=BallSpec(center=(1.0, 1.0, 5.0))).validate(SMALL)


def test_add_noise_identity_at_zero():
    v = Volume(SMALL, np.full(SMALL.shape, 100, dtype=np.uint8))
    assert np.array_equal(add_noise(v, 0).voxels, v.voxels)


def test_add_noise_std():
    v = Volume(SMALL, np.full(SMALL.shape, 128, dtype=np.uint8))
    out = add_noise(v, 40, seed=1).voxels.astype(float)
    assert out.std() == pytest.approx(40, rel=0.05)
    assert abs(out.mean() - 128) < 1


def test_add_noise_clamps():
    v = Volume(SMALL, np.full(SMALL.shape, 250, dtype=np.uint8))
    out = add_noise(v, 30, seed=2).voxels
    assert out.dtype == np.uint8 and out.max() == 255


def test_add_noise_rejects_negative():
    with pytest.raises(ValueError):
        add_noise(Volume(SMALL, np.zeros(SMALL.shape, dtype=np.uint8)), -1)


def test_ground_truth_consistency():
    cfg = SynthConfig()
    t = cfg.ground_truth()
    assert len(t.robot_tips) == 31
    assert np.allclose(t.transform.apply(t.camera_tips), t.robot_tips, atol=1e-12)
    assert np.allclose(t.camera_tips[0], cfg.camera_start)
    assert t.transform.is_proper()
    assert np.degrees(np.arccos((np.trace(t.transform.rotation) - 1) / 2)) == pytest.approx(25)


def test_ground_truth_json_round_trip():
    t = SynthConfig(mode="marker").ground_truth()
    u = GroundTruth.from_json(t.to_json())
    assert np.array_equal(u.robot_tips, t.robot_tips) and np.array_equal(u.camera_reference, t.camera_reference)
    assert u.mode == "marker" and u.galvo == t.galvo


def test_marker_scene_has_ball_only():
    cfg = SynthConfig(mode="marker")
    s = cfg.scene_for(cfg.camera_start)
    assert s.needle is None and s.ball is not None
    assert np.allclose(np.asarray(s.ball.center) + [0, 0.15, 0], cfg.camera_start)


def test_config_round_trip(tmp_path):
    cfg = SynthConfig(
        mode="marker",
        trajectory=TrajectorySpec("custom", legs=(("X", 3),)),
        geometry=SMALL,
        tissue=None,
        noise_sigma=4.0,
    )
    cfg.save(tmp_path / "c.json")
    assert SynthConfig.load(tmp_path / "c.json") == cfg


def test_config_rejects_unknown_key():
    with pytest.raises(ValueError):
        SynthConfig.from_dict({"noise": 3})


def test_pose_seeds_distinct():
    cfg = SynthConfig()
    assert len({cfg.pose_seed(k) for k in range(31)}) == 31
