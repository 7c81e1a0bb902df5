"""Procedural street scenes and spinning-LiDAR simulation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .mesh import TriMesh, box_mesh, cast_rays, merge_meshes

__all__ = [
    "BeamConfig", "Pose", "Trajectory", "RangeImage", "NoiseModel", "SceneConfig", "Scene",
    "waymo_beams", "eval_beams", "carla_gt_beams", "beam_preset", "rotation_matrix",
    "scan", "scan_rolling", "add_noise", "gen_scene", "split_of", "truncated_poisson_mean",
    "NO_HIT",
]

NO_HIT = -1.0


@dataclass(frozen=True)
class BeamConfig:
    elevations: tuple  # degrees, strictly increasing
    azimuth_count: int
    max_range: float = 75.0
    min_range: float = 0.5

    def __post_init__(self):
        e = np.asarray(self.elevations, dtype=np.float64)
        if e.ndim != 1 or len(e) == 0 or np.any(np.diff(e) <= 0):
            raise ValueError("elevations must be a non-empty strictly increasing list")
        if self.azimuth_count < 1:
            raise ValueError("azimuth_count must be >= 1")
        if not 0 < self.min_range < self.max_range:
            raise ValueError("need 0 < min_range < max_range")
        object.__setattr__(self, "elevations", tuple(float(v) for v in e))

    @property
    def rows(self):
        return len(self.elevations)

    def sensor_dirs(self) -> np.ndarray:
        """Unit directions in the sensor frame, shape (rows, cols, 3); x forward, z up."""
        el = np.deg2rad(np.asarray(self.elevations))[:, None]
        az = (2.0 * np.pi * np.arange(self.azimuth_count) / self.azimuth_count)[None, :]
        return np.stack(np.broadcast_arrays(np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)), axis=-1)


def waymo_beams() -> BeamConfig:
    # stand-in elevation table: 64 beams uniform over a typical top-LiDAR field of view
    return BeamConfig(tuple(np.linspace(-17.6, 2.4, 64)), 2650, 75.0, 0.5)


def eval_beams() -> BeamConfig:
    return BeamConfig(tuple(np.linspace(-30.0, 30.0, 128)), 2650, 75.0, 0.5)


def carla_gt_beams() -> BeamConfig:
    return BeamConfig(tuple(np.linspace(-30.0, 30.0, 512)), 2650, 75.0, 0.5)


_PRESETS = {"waymo64": waymo_beams, "eval128": eval_beams, "carla-gt512": carla_gt_beams}


def beam_preset(name: str) -> BeamConfig:
    try:
        return _PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown beam preset {name!r}; choose from {sorted(_PRESETS)}") from None


def rotation_matrix(yaw, pitch, roll) -> np.ndarray:
    """Z-Y-X (yaw, pitch, roll) rotation in degrees, sensor to world."""
    y, p, r = np.deg2rad([yaw, pitch, roll])
    cy, sy, cp, sp, cr, sr = np.cos(y), np.sin(y), np.cos(p), np.sin(p), np.cos(r), np.sin(r)
    return np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])


@dataclass(frozen=True)
class Pose:
    position: tuple
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))

    @property
    def R(self):
        return rotation_matrix(self.yaw, self.pitch, self.roll)

    def to_dict(self):
        return {"position": list(self.position), "yaw": self.yaw, "pitch": self.pitch, "roll": self.roll}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["position"]), d.get("yaw", 0.0), d.get("pitch", 0.0), d.get("roll", 0.0))


@dataclass(frozen=True)
class Trajectory:
    times: tuple
    poses: tuple

    def __post_init__(self):
        if len(self.poses) < 1 or len(self.times) != len(self.poses):
            raise ValueError("trajectory needs one timestamp per pose and at least one pose")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    @property
    def t_start(self):
        return self.times[0]

    @property
    def t_end(self):
        return self.times[-1]

    def _segment(self, t):
        if not self.t_start - 1e-12 <= t <= self.t_end + 1e-12:
            raise ValueError(f"time {t} outside trajectory [{self.t_start}, {self.t_end}]")
        if len(self.times) == 1:
            return 0, 0, 0.0
        i = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2))
        s = (t - self.times[i]) / (self.times[i + 1] - self.times[i])
        return i, i + 1, float(np.clip(s, 0.0, 1.0))

    def frame_at(self, t):
        """(position, rotation matrix) at time ``t``; linear position, slerp orientation."""
        i, j, s = self._segment(t)
        a, b = self.poses[i], self.poses[j]
        pa, pb = np.asarray(a.position), np.asarray(b.position)
        pos = pa + (pb - pa) * s
        if (a.yaw, a.pitch, a.roll) == (b.yaw, b.pitch, b.roll):
            return pos, a.R
        rots = Rotation.from_matrix(np.stack([a.R, b.R]))
        return pos, Slerp([0.0, 1.0], rots)([s]).as_matrix()[0]

    def pose_at(self, t) -> Pose:
        pos, R = self.frame_at(t)
        yaw, pitch, roll = Rotation.from_matrix(R).as_euler("ZYX", degrees=True)
        return Pose(tuple(pos), float(yaw), float(pitch), float(roll))


@dataclass
class RangeImage:
    ranges: np.ndarray  # (rows, cols) meters or NO_HIT
    origins: np.ndarray  # (cols, 3) emit position per column
    rotations: np.ndarray  # (cols, 3, 3) sensor-to-world per column
    beams: BeamConfig

    @property
    def shape(self):
        return self.ranges.shape

    def directions(self) -> np.ndarray:
        return np.einsum("cij,rcj->rci", self.rotations, self.beams.sensor_dirs())

    def points(self) -> np.ndarray:
        hit = self.ranges != NO_HIT
        d = self.directions()
        pts = self.origins[None] + self.ranges[..., None] * d
        return pts[hit]


@dataclass(frozen=True)
class NoiseModel:
    point_sigma: float = 0.01
    pitch_sigma: float = 0.02  # degrees

    def __post_init__(self):
        if self.point_sigma < 0 or self.pitch_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")


def _pitch_delta_rotation(R, dpitch_deg):
    """World rotation equivalent to changing the pose pitch by ``dpitch`` (about the sensor y axis)."""
    d = np.deg2rad(dpitch_deg)
    c, s = np.cos(d), np.sin(d)
    Ry = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return R @ Ry @ R.T


def add_noise(points, pose: Pose, model: NoiseModel, rng):
    """Register ``points`` with a pitch-perturbed pose and add coordinate jitter.

    Returns ``(noisy_points, noisy_pose)``. The pitch error rotates the points
    about the sensor origin; coordinates then get i.i.d. Gaussian noise.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dp = rng.normal(0.0, model.pitch_sigma) if model.pitch_sigma > 0 else 0.0
    out = pts
    if dp != 0.0:
        o = np.asarray(pose.position)
        out = o + (pts - o) @ _pitch_delta_rotation(pose.R, dp).T
    if model.point_sigma > 0:
        out = out + rng.normal(0.0, model.point_sigma, out.shape)
    return out, Pose(pose.position, pose.yaw, pose.pitch + dp, pose.roll)


def _cast_image(scene, origins, rotations, beams):
    dirs = np.einsum("cij,rcj->rci", rotations, beams.sensor_dirs())
    o = np.broadcast_to(origins[None], dirs.shape)
    t, _ = cast_rays(scene, o.reshape(-1, 3), dirs.reshape(-1, 3), beams.max_range)
    t = t.reshape(dirs.shape[:2])
    ranges = np.where((t >= beams.min_range) & (t <= beams.max_range), t, NO_HIT)
    return RangeImage(ranges, np.ascontiguousarray(origins), np.ascontiguousarray(rotations), beams)


def scan(scene: TriMesh, pose: Pose, beams: BeamConfig, rng=None, noise: NoiseModel | None = None):
    """Static 360° scan. Returns ``(RangeImage, points)``."""
    cols = beams.azimuth_count
    origins = np.broadcast_to(np.asarray(pose.position), (cols, 3)).copy()
    rots = np.broadcast_to(pose.R, (cols, 3, 3)).copy()
    img = _cast_image(scene, origins, rots, beams)
    pts = img.points()
    if noise is not None:
        if rng is None:
            raise ValueError("noise requires an rng")
        pts, _ = add_noise(pts, pose, noise, rng)
    return img, pts


def scan_rolling(scene: TriMesh, trajectory: Trajectory, beams: BeamConfig, period: float = 0.1, rng=None,
                 noise: NoiseModel | None = None, t0: float | None = None, return_image: bool = False):
    """Rotating-beam scan: column ``a`` fires at ``t0 + a / azimuth_count * period``."""
    t0 = trajectory.t_start if t0 is None else t0
    if t0 < trajectory.t_start - 1e-12 or t0 + period > trajectory.t_end + 1e-9 and len(trajectory.poses) > 1:
        raise ValueError("trajectory does not cover one revolution")
    if len(trajectory.poses) == 1 and period > 0:
        raise ValueError("trajectory does not cover one revolution")
    cols = beams.azimuth_count
    frames = [trajectory.frame_at(t0 + a / cols * period) for a in range(cols)]
    origins = np.stack([f[0] for f in frames])
    rots = np.stack([f[1] for f in frames])
    img = _cast_image(scene, origins, rots, beams)
    hit = img.ranges != NO_HIT
    pts = img.points()
    if noise is not None:
        if rng is None:
            raise ValueError("noise requires an rng")
        col_of = np.broadcast_to(np.arange(cols)[None], hit.shape)[hit]
        dp = rng.normal(0.0, noise.pitch_sigma, cols) if noise.pitch_sigma > 0 else np.zeros(cols)
        deltas = np.stack([_pitch_delta_rotation(rots[c], dp[c]) for c in range(cols)])
        rel = pts - origins[col_of]
        pts = origins[col_of] + np.einsum("nij,nj->ni", deltas[col_of], rel)
        if noise.point_sigma > 0:
            pts = pts + rng.normal(0.0, noise.point_sigma, pts.shape)
    return (pts, img) if return_image else pts


# ---------------------------------------------------------------- scenes

@dataclass
class SceneConfig:
    block_length: float = 40.0
    street_half_width: float = 3.0
    car_size: tuple = (4.2, 1.8, 1.5)
    car_lambda: float = 2.0
    car_max: int = 7
    car_gap: float = 0.3
    setback: tuple = (0.3, 1.5)
    building_width: tuple = (4.0, 10.0)
    building_gap: tuple = (0.0, 2.5)
    building_depth: tuple = (6.0, 12.0)
    building_height: tuple = (2.5, 9.0)
    ground_tile: float = 2.0
    ground_margin: float = 12.0
    sensor_height: float = 1.73
    lane_offset: float = 0.9
    speed: float = 10.0
    pose_spacing: float = 1.0
    split_ranges: dict = field(default_factory=lambda: {"train": (0, 100000), "val": (100000, 110000),
                                                         "test": (110000, 120000)})


def split_of(seed: int, cfg: SceneConfig | None = None) -> str:
    cfg = cfg or SceneConfig()
    for name, (lo, hi) in cfg.split_ranges.items():
        if lo <= seed < hi:
            return name
    raise ValueError(f"seed {seed} outside every split range")


def truncated_poisson_mean(lam: float, cap: int) -> float:
    """E[min(N, cap)] for N ~ Poisson(lam)."""
    from scipy.stats import poisson

    k = np.arange(cap)
    return float(np.sum(k * poisson.pmf(k, lam)) + cap * poisson.sf(cap - 1, lam))


@dataclass
class Scene:
    seed: int
    split: str
    mesh: TriMesh
    car_boxes: list  # (lo, hi) footprints per car body
    trajectories: list
    street_half_width: float
    config: SceneConfig

    def gt_points(self, box, density=400.0, seed_offset=0) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 7, seed_offset])
        return self.mesh.sample_surface(density, rng, box)

    def street_roi(self, center_x, half_len):
        """Main-street box (x, y) used for street Chamfer distance."""
        h = self.street_half_width
        return (np.array([center_x - half_len, -h, -np.inf]), np.array([center_x + half_len, h, np.inf]))

    def cars_per_side(self):
        return [sum(1 for b in self.car_boxes if np.sign(b[0][1] + b[1][1]) == s) for s in (-1, 1)]


def _place_cars(rng, n, length, lo_x, hi_x, gap):
    """Uniform placement with per-car redraw on collision; falls back to gap spacing."""
    placed = []
    for _ in range(n):
        for _attempt in range(200):
            x = rng.uniform(lo_x + length / 2, hi_x - length / 2)
            if all(abs(x - p) >= length + gap for p in placed):
                placed.append(x)
                break
        else:
            break
    if len(placed) < n:
        free = (hi_x - lo_x) - n * (length + gap)
        u = np.sort(rng.uniform(0.0, max(free, 0.0), n))
        placed = [lo_x + u[i] + i * (length + gap) + length / 2 for i in range(n)]
    return sorted(placed)


def _ground(cfg: SceneConfig):
    L = cfg.block_length / 2 + cfg.ground_margin
    W = cfg.street_half_width + cfg.ground_margin + cfg.building_depth[1]
    xs = np.arange(-L, L + 1e-9, cfg.ground_tile)
    ys = np.arange(-W, W + 1e-9, cfg.ground_tile)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    verts = np.stack([gx, gy, np.zeros_like(gx)], -1).reshape(-1, 3)
    ny = len(ys)
    i, j = np.meshgrid(np.arange(len(xs) - 1), np.arange(ny - 1), indexing="ij")
    a = (i * ny + j).ravel()
    b, c, d = a + ny, a + ny + 1, a + 1
    tris = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return TriMesh(verts, tris)


def gen_scene(seed: int, cfg: SceneConfig | None = None) -> Scene:
    """Toy street block: tiled ground, setback box buildings, parked box cars, two drives."""
    cfg = cfg or SceneConfig()
    rng = np.random.default_rng([seed, 0x5CE7E])
    half = cfg.block_length / 2
    parts = [_ground(cfg)]
    for side in (-1, 1):
        x = -half - cfg.ground_margin / 2
        while x < half + cfg.ground_margin / 2:
            w = rng.uniform(*cfg.building_width)
            y0 = cfg.street_half_width + rng.uniform(*cfg.setback)
            depth = rng.uniform(*cfg.building_depth)
            h = rng.uniform(*cfg.building_height)
            y_lo, y_hi = (y0, y0 + depth) if side > 0 else (-y0 - depth, -y0)
            parts.append(box_mesh((x, y_lo, 0.0), (x + w, y_hi, h)))
            x += w + rng.uniform(*cfg.building_gap)
    car_boxes = []
    cl, cw, ch = cfg.car_size
    for side in (-1, 1):
        n = min(int(rng.poisson(cfg.car_lambda)), cfg.car_max)
        xs = _place_cars(rng, n, cl, -half, half, cfg.car_gap)
        yc = side * (cfg.street_half_width - cw / 2 - 0.1)
        for xc in xs:
            lo, hi = np.array([xc - cl / 2, yc - cw / 2, 0.0]), np.array([xc + cl / 2, yc + cw / 2, ch * 0.55])
            car_boxes.append((lo, hi))
            parts.append(box_mesh(lo, hi))
            cab_lo = np.array([xc - cl * 0.25, yc - cw * 0.42, ch * 0.55])
            cab_hi = np.array([xc + cl * 0.2, yc + cw * 0.42, ch])
            parts.append(box_mesh(cab_lo, cab_hi))
    mesh = merge_meshes(parts)
    trajs = []
    for direction in (1, -1):
        y = -direction * cfg.lane_offset
        xs = np.arange(-half, half + 1e-9, cfg.pose_spacing) * direction
        times = np.arange(len(xs)) * cfg.pose_spacing / cfg.speed
        yaw = 0.0 if direction > 0 else 180.0
        poses = tuple(Pose((float(x), y, cfg.sensor_height), yaw) for x in xs)
        trajs.append(Trajectory(tuple(times), poses))
    return Scene(seed, split_of(seed, cfg), mesh, car_boxes, trajs, cfg.street_half_width, cfg)
