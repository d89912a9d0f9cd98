"""Synthetic OCT phantoms with ground truth.

Objects are described in corrected (metric) scanner coordinates.  For each
raw A-scan column the renderer solves for the raw depth whose corrected
position lies on an object's top surface, then draws a bright band of
``band_voxels`` voxels below it with partial-volume intensity at the
edges.  Background is a constant level with Gaussian speckle; additive
Gaussian noise is applied last and the result clamped to ``[0, 255]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .distortion import GalvoParams, correct_points
from .registration import RigidTransform, rotation_from_axis_angle
from .volume import ScanGeometry, Volume

NEEDLE_RADIUS_MM = 0.155
BALL_RADIUS_MM = 0.25
_SPECKLE_STREAM = 1
_NOISE_STREAM = 2


@dataclass(frozen=True)
class NeedleSpec:
    """Cylindrical needle.  ``axis`` points from the tip back along the shaft."""

    tip: tuple = (1.5, 1.0, 0.9)
    axis: tuple = (0.0, 1.0, 0.0)
    radius: float = NEEDLE_RADIUS_MM
    length: float = 20.0
    reflectivity: float = 120.0
    truncation: float = 0.0
    tip_fade_mm: float = 0.0

    def unit_axis(self) -> np.ndarray:
        u = np.asarray(self.axis, dtype=float)
        return u / np.linalg.norm(u)

    def visible_tip(self) -> np.ndarray:
        return np.asarray(self.tip, dtype=float) + self.truncation * self.unit_axis()


@dataclass(frozen=True)
class BallSpec:
    center: tuple = (1.5, 1.0, 0.9)
    radius: float = BALL_RADIUS_MM
    reflectivity: float = 220.0


@dataclass(frozen=True)
class FlatSpec:
    depth: float = 1.3
    reflectivity: float = 200.0


@dataclass(frozen=True)
class TissueSpec:
    """Convex spherical cap (eye surface) seen from above; ``apex`` is its shallowest point."""

    apex: tuple = (1.5, 1.55, 1.9)
    radius: float = 12.0
    reflectivity: float = 150.0
    interior: float = 60.0
    attenuation_mm: float = 0.03


@dataclass(frozen=True)
class Scene:
    needle: NeedleSpec | None = None
    ball: BallSpec | None = None
    flat: FlatSpec | None = None
    tissue: TissueSpec | None = None
    background: float = 10.0
    speckle_sigma: float = 4.0
    band_voxels: float = 3.0

    def validate(self, geom: ScanGeometry) -> None:
        ext = geom.extent
        if self.needle is not None:
            u = self.needle.unit_axis()
            if u[1] <= 0:
                raise ValueError("needle axis must have a positive y component")
            if not _inside(self.needle.visible_tip(), ext):
                raise ValueError("needle tip lies outside the scan field")
        if self.ball is not None:
            c = np.asarray(self.ball.center, dtype=float)
            if not _inside(c, ext) or self.ball.radius <= 0:
                raise ValueError("ball lies outside the scan field")
        if self.flat is not None and not (0 < self.flat.depth < ext[2]):
            raise ValueError("flat surface lies outside the scan field")
        if self.tissue is not None and not _inside(np.asarray(self.tissue.apex, dtype=float), ext):
            raise ValueError("tissue apex lies outside the scan field")


def _inside(p, ext) -> bool:
    return bool(np.all(p >= 0) and np.all(p <= ext))


# ---------------------------------------------------------------- surfaces


def _needle_top(n: NeedleSpec, x, y):
    """Top-surface depth and axial coordinate of the needle for vertical rays at (x, y)."""
    u = n.unit_axis()
    T = n.visible_tip()
    L = n.length - n.truncation
    w = np.stack([x - T[0], y - T[1], -np.full_like(x, T[2])], axis=-1)
    wu = w @ u
    wp = w - wu[..., None] * u
    dp = np.array([0.0, 0.0, 1.0]) - u[2] * u
    a = dp @ dp
    b = 2 * (wp @ dp)
    c = (wp * wp).sum(-1) - n.radius**2
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore"):
        z_side = (-b - np.sqrt(disc)) / (2 * a)
    s_side = wu + z_side * u[2]
    side_ok = (disc >= 0) & (s_side >= 0) & (s_side <= L)
    z = np.where(side_ok, z_side, np.nan)
    s = np.where(side_ok, s_side, np.nan)
    if u[2] > 1e-12:
        # tip cap faces upward and can be entered from above
        z_cap = -wu / u[2]
        q = w + z_cap[..., None] * np.array([0.0, 0.0, 1.0])
        rad = np.linalg.norm(q - (q @ u)[..., None] * u, axis=-1)
        cap_ok = rad <= n.radius
        better = cap_ok & (~side_ok | (z_cap < z))
        z = np.where(better, z_cap, z)
        s = np.where(better, 0.0, s)
    return z, s


def _sphere_top(center, radius, x, y):
    d2 = radius**2 - (x - center[0]) ** 2 - (y - center[1]) ** 2
    with np.errstate(invalid="ignore"):
        return np.where(d2 >= 0, center[2] - np.sqrt(d2), np.nan)


def _surfaces(scene: Scene):
    """(name, top(x, y) -> (z, intensity), interior level, attenuation mm) per object."""
    out = []
    if scene.tissue is not None:
        t = scene.tissue
        c = np.asarray(t.apex, dtype=float) + np.array([0, 0, t.radius])
        out.append(
            ("tissue", lambda x, y, c=c, t=t: (_sphere_top(c, t.radius, x, y), t.reflectivity), t.interior, t.attenuation_mm)
        )
    if scene.flat is not None:
        f = scene.flat
        out.append(("flat", lambda x, y, f=f: (np.full_like(x, f.depth), f.reflectivity), 0.0, 0.0))
    if scene.ball is not None:
        b = scene.ball
        c = np.asarray(b.center, dtype=float)
        out.append(("ball", lambda x, y, c=c, b=b: (_sphere_top(c, b.radius, x, y), b.reflectivity), 0.0, 0.0))
    if scene.needle is not None:
        n = scene.needle

        def needle_top(x, y, n=n):
            z, s = _needle_top(n, x, y)
            refl = n.reflectivity
            if n.tip_fade_mm > 0:
                refl = n.reflectivity * np.clip(s / n.tip_fade_mm, 0.0, 1.0)
            return z, refl

        out.append(("needle", needle_top, 0.0, 0.0))
    return out


def _raw_surface_depth(top, X, Y, g: GalvoParams, iters: int = 8):
    """Raw depth along each raw column whose corrected position hits the surface."""
    z, refl = top(X, Y)
    z = np.array(z, dtype=float)
    for _ in range(iters):
        pts = correct_points(np.stack([X, Y, np.nan_to_num(z)], axis=-1), g)
        zt, refl = top(pts[..., 0], pts[..., 1])
        z = z + (zt - pts[..., 2])
    return z, np.broadcast_to(refl, z.shape)


# ---------------------------------------------------------------- rendering


def _rng(seed: int, stream: int, iy: int):
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream, iy]))


def _paint(vol, iy_idx, ix_idx, s, level, width, n_z):
    """Partial-volume band ``[s, s + width)`` (voxel units) blended onto ``vol``."""
    base = np.floor(s).astype(np.int64)
    for k in range(int(math.ceil(width)) + 1):
        iz = base + k
        cov = np.clip(np.minimum(iz + 1, s + width) - np.maximum(iz, s), 0.0, 1.0)
        ok = (cov > 0) & (iz >= 0) & (iz < n_z)
        if not ok.any():
            continue
        a, b, c = iy_idx[ok], iz[ok], ix_idx[ok]
        cur = vol[a, b, c]
        vol[a, b, c] = np.maximum(cur, (1 - cov[ok]) * cur + cov[ok] * level[ok])


def render_clean(scene: Scene, geom: ScanGeometry, g: GalvoParams, seed: int = 0) -> np.ndarray:
    """Float intensity volume (background + speckle + objects), before added noise."""
    scene.validate(geom)
    n_y, n_z, n_x = geom.shape
    pitch = geom.pitch
    vol = np.empty(geom.shape, dtype=np.float32)
    for iy in range(n_y):
        if scene.speckle_sigma > 0:
            sl = vol[iy]
            _rng(seed, _SPECKLE_STREAM, iy).standard_normal(dtype=np.float32, out=sl)
            sl *= np.float32(scene.speckle_sigma)
            sl += np.float32(scene.background)
        else:
            vol[iy] = scene.background
    iy_grid, ix_grid = np.meshgrid(np.arange(n_y), np.arange(n_x), indexing="ij")
    X = (ix_grid + 0.5) * pitch[0]
    Y = (iy_grid + 0.5) * pitch[1]
    for _name, top, interior, atten in _surfaces(scene):
        z, refl = _raw_surface_depth(top, X, Y, g)
        hit = np.isfinite(z)
        if not hit.any():
            continue
        s = z[hit] / pitch[2]
        level = np.asarray(refl, dtype=float)[hit]
        iy_h, ix_h = iy_grid[hit], ix_grid[hit]
        _paint(vol, iy_h, ix_h, s, level, scene.band_voxels, n_z)
        if interior > 0 and atten > 0:
            depth_vox = atten / pitch[2]
            start = s + scene.band_voxels
            n_steps = int(math.ceil(5 * depth_vox))
            for k in range(n_steps):
                lv = interior * np.exp(-(k + 0.5) / depth_vox) * np.ones_like(start)
                _paint(vol, iy_h, ix_h, start + k, lv, 1.0, n_z)
    return vol


def add_noise(v: Volume, sigma: float, seed: int = 0) -> Volume:
    """Zero-mean Gaussian noise per voxel, clamped to [0, 255].  ``sigma=0`` is the identity."""
    if sigma < 0:
        raise ValueError("noise sigma must be non-negative")
    if sigma == 0:
        return Volume(v.geometry, v.voxels.copy())
    out = np.empty(v.voxels.shape, dtype=np.uint8)
    buf = np.empty(v.voxels.shape[1:], dtype=np.float32)
    for iy in range(v.voxels.shape[0]):
        _rng(seed, _NOISE_STREAM, iy).standard_normal(dtype=np.float32, out=buf)
        buf *= np.float32(sigma)
        buf += v.voxels[iy]
        np.rint(buf, out=buf)
        np.clip(buf, 0, 255, out=buf)
        out[iy] = buf
    return Volume(v.geometry, out)


def _quantize(vol: np.ndarray) -> np.ndarray:
    np.rint(vol, out=vol)
    np.clip(vol, 0, 255, out=vol)
    return vol.astype(np.uint8)


def visible_tip_reference(n: NeedleSpec, geom: ScanGeometry, band_voxels: float = 3.0) -> np.ndarray:
    """Expected detector output for a needle: centre of the upper-surface band at the tip.

    Averaging the top surface of a cylinder cross-section uniformly over
    the lateral columns gives a mean height of ``pi/4`` of the vertical
    semi-axis above the axis; the band centre adds half its thickness.
    """
    u = n.unit_axis()
    cos_a = math.sqrt(max(1e-12, 1 - u[2] ** 2))
    off = -(math.pi / 4) * n.radius / cos_a + 0.5 * band_voxels * geom.pitch[2]
    return n.visible_tip() + np.array([0.0, 0.0, off])


@dataclass
class GroundTruth:
    """Oracle record for a rendered dataset (camera frame = corrected scanner mm)."""

    transform: RigidTransform
    robot_tips: np.ndarray
    camera_tips: np.ndarray
    camera_reference: np.ndarray
    galvo: GalvoParams
    noise_sigma: float
    seed: int
    mode: str = "needle"

    def to_json(self) -> str:
        return json.dumps(
            {
                "transform": self.transform.as_matrix()[:3].tolist(),
                "robot_tips_mm": self.robot_tips.tolist(),
                "camera_tips_mm": self.camera_tips.tolist(),
                "camera_reference_mm": self.camera_reference.tolist(),
                "galvo": asdict(self.galvo),
                "noise_sigma": self.noise_sigma,
                "seed": self.seed,
                "mode": self.mode,
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> GroundTruth:
        d = json.loads(text)
        m = np.asarray(d["transform"], dtype=float)
        return cls(
            transform=RigidTransform(m[:, :3], m[:, 3]),
            robot_tips=np.asarray(d["robot_tips_mm"], dtype=float),
            camera_tips=np.asarray(d["camera_tips_mm"], dtype=float),
            camera_reference=np.asarray(d["camera_reference_mm"], dtype=float),
            galvo=GalvoParams(**d["galvo"]),
            noise_sigma=float(d["noise_sigma"]),
            seed=int(d["seed"]),
            mode=d.get("mode", "needle"),
        )


def render_scene(scene: Scene, geom: ScanGeometry, g: GalvoParams, noise_sigma: float = 0.0, seed: int = 0):
    """Render one volume.  Returns ``(Volume, GroundTruth)`` with an identity transform."""
    clean = Volume(geom, _quantize(render_clean(scene, geom, g, seed)))
    vol = add_noise(clean, noise_sigma, seed)
    if scene.needle is not None:
        tip = np.asarray(scene.needle.tip, dtype=float)[None]
        ref = visible_tip_reference(scene.needle, geom, scene.band_voxels)[None]
        mode = "needle"
    elif scene.ball is not None:
        tip = np.asarray(scene.ball.center, dtype=float)[None]
        ref = tip.copy()
        mode = "marker"
    else:
        tip = ref = np.empty((0, 3))
        mode = "none"
    truth = GroundTruth(RigidTransform.identity(), tip.copy(), tip, ref, g, noise_sigma, seed, mode)
    return vol, truth


# ---------------------------------------------------------------- trajectories

_AXES = {"X": 0, "Y": 1, "Z": 2}


@dataclass(frozen=True)
class TrajectorySpec:
    """Step-and-hold robot trajectory.

    ``traj1``: ``steps_per_leg`` (10) steps along each axis in ``axis_order``.
    ``traj2``: ``steps_per_leg`` (5) steps per axis, the whole pattern
    repeated ``repeats`` (2) times.  ``custom``: explicit ``legs`` of
    ``(axis, signed step count)``.
    """

    pattern: str = "traj1"
    step_um: float = 20.0
    steps_per_leg: int | None = None
    axis_order: str = "XZY"
    repeats: int | None = None
    legs: tuple = ()

    def resolved_legs(self) -> list[tuple[str, int]]:
        if self.pattern == "traj1":
            n = 10 if self.steps_per_leg is None else self.steps_per_leg
            reps = 1 if self.repeats is None else self.repeats
        elif self.pattern == "traj2":
            n = 5 if self.steps_per_leg is None else self.steps_per_leg
            reps = 2 if self.repeats is None else self.repeats
        elif self.pattern == "custom":
            return [(str(a).upper(), int(k)) for a, k in self.legs]
        else:
            raise ValueError(f"unknown trajectory pattern {self.pattern!r}")
        return [(a, n) for _ in range(reps) for a in self.axis_order.upper()]


def make_trajectory(spec: TrajectorySpec, start=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Robot-frame tip positions (mm), starting pose included."""
    if not spec.step_um > 0:
        raise ValueError("step size must be positive")
    step = spec.step_um / 1000.0
    pos = [np.asarray(start, dtype=float)]
    for axis, count in spec.resolved_legs():
        if axis not in _AXES:
            raise ValueError(f"unknown axis {axis!r}")
        d = np.zeros(3)
        d[_AXES[axis]] = step * np.sign(count)
        for _ in range(abs(count)):
            pos.append(pos[-1] + d)
    return np.array(pos)


# ---------------------------------------------------------------- datasets


@dataclass(frozen=True)
class SynthConfig:
    """Everything needed to render a calibration dataset."""

    mode: str = "needle"
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    geometry: ScanGeometry = field(default_factory=ScanGeometry)
    galvo: GalvoParams = field(default_factory=GalvoParams.default)
    rotation_axis: tuple = (1.0, -2.0, 3.0)
    rotation_deg: float = 25.0
    robot_start: tuple = (12.0, -4.0, 30.0)
    camera_start: tuple = (1.35, 0.85, 0.75)
    needle: NeedleSpec = field(default_factory=NeedleSpec)
    ball: BallSpec = field(default_factory=BallSpec)
    ball_offset_mm: float = 0.15
    tissue: TissueSpec | None = field(default_factory=TissueSpec)
    background: float = 10.0
    speckle_sigma: float = 4.0
    band_voxels: float = 3.0
    noise_sigma: float = 8.0
    seed: int = 7

    def transform(self) -> RigidTransform:
        """Camera -> robot transform placing ``camera_start`` at ``robot_start``."""
        R = rotation_from_axis_angle(self.rotation_axis, math.radians(self.rotation_deg))
        T = np.asarray(self.robot_start, dtype=float) - R @ np.asarray(self.camera_start, dtype=float)
        return RigidTransform(R, T)

    def ground_truth(self) -> GroundTruth:
        X = self.transform()
        robot = make_trajectory(self.trajectory, self.robot_start)
        cam = X.inverse().apply(robot)
        if self.mode == "needle":
            ref = np.array([visible_tip_reference(replace(self.needle, tip=tuple(p)), self.geometry, self.band_voxels) for p in cam])
        elif self.mode == "marker":
            ref = cam - self.ball_offset_mm * self.needle.unit_axis()
        else:
            raise ValueError(f"unknown mode {self.mode!r}")
        return GroundTruth(X, robot, cam, ref, self.galvo, self.noise_sigma, self.seed, self.mode)

    def scene_for(self, camera_tip) -> Scene:
        """Needle mode: the needle alone.  Marker mode: the ball alone (its holder
        lies outside the scan field), centred ``ball_offset_mm`` behind the tip."""
        needle = replace(self.needle, tip=tuple(float(v) for v in camera_tip))
        ball = None
        if self.mode == "marker":
            c = np.asarray(camera_tip, dtype=float) - self.ball_offset_mm * needle.unit_axis()
            ball = replace(self.ball, center=tuple(float(v) for v in c))
            needle = None
        return Scene(
            needle=needle,
            ball=ball,
            tissue=self.tissue,
            background=self.background,
            speckle_sigma=self.speckle_sigma,
            band_voxels=self.band_voxels,
        )

    def pose_seed(self, k: int) -> int:
        return int(self.seed) * 1000 + k

    def clean_volume(self, k: int, truth: GroundTruth | None = None) -> Volume:
        truth = truth or self.ground_truth()
        vol = render_clean(self.scene_for(truth.camera_tips[k]), self.geometry, self.galvo, self.pose_seed(k))
        return Volume(self.geometry, _quantize(vol))

    def render_pose(self, k: int, truth: GroundTruth | None = None, noise_sigma: float | None = None) -> Volume:
        sigma = self.noise_sigma if noise_sigma is None else noise_sigma
        return add_noise(self.clean_volume(k, truth), sigma, self.pose_seed(k))

    # -- config file I/O (JSON)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trajectory"]["legs"] = [list(leg) for leg in self.trajectory.legs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SynthConfig:
        d = dict(d)
        kw = {}
        if "trajectory" in d:
            t = dict(d.pop("trajectory"))
            t["legs"] = tuple(tuple(leg) for leg in t.get("legs", ()))
            kw["trajectory"] = TrajectorySpec(**t)
        if "geometry" in d:
            kw["geometry"] = ScanGeometry(**d.pop("geometry"))
        if "galvo" in d:
            kw["galvo"] = GalvoParams(**d.pop("galvo"))
        if "needle" in d:
            kw["needle"] = NeedleSpec(**_tuples(d.pop("needle")))
        if "ball" in d:
            kw["ball"] = BallSpec(**_tuples(d.pop("ball")))
        if "tissue" in d:
            t = d.pop("tissue")
            kw["tissue"] = None if t is None else TissueSpec(**_tuples(t))
        for key in ("rotation_axis", "robot_start", "camera_start"):
            if key in d:
                kw[key] = tuple(d.pop(key))
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**kw, **d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> SynthConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def flat_scene(depth: float = 1.3, reflectivity: float = 200.0) -> Scene:
    """Noise-free flat-surface phantom for pivot calibration."""
    return Scene(flat=FlatSpec(depth, reflectivity), speckle_sigma=0.0)
