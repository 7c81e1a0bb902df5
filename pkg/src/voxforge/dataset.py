"""Turn procedural scenes into completion samples: partial scans, ground truth, poses, ROI."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lidarsim import NoiseModel, Pose, Scene, Trajectory, beam_preset, gen_scene, scan_rolling
from .voxgrid import VolumeSpec, voxelize

__all__ = ["SampleConfig", "Sample", "make_sample", "roi_volume"]


@dataclass
class SampleConfig:
    extent: tuple = (9.6, 9.6, 3.2)
    voxel_size: float = 0.2
    z_origin: float = -0.05
    n_scans: int = 5
    scan_spacing: float = 1.75
    beams: str = "waymo64"
    noise: bool = True
    period: float = 0.1
    gt_density: float = 1000.0
    resim_margin: float = 0.3
    tsdf_spacing: float = 1.5


@dataclass
class Sample:
    seed: int
    scene: Scene
    volume: VolumeSpec  # coarse ROI volume
    center: float
    scans: list  # world-frame point arrays
    scan_poses: list
    gt_points: np.ndarray
    resim_poses: list
    tsdf_poses: list

    @property
    def fine_volume(self):
        return self.volume.with_voxel_size(self.volume.voxel_size / 2)

    @property
    def roi(self):
        lo = np.asarray(self.volume.origin)
        return lo, lo + np.asarray(self.volume.extent)

    def input_points(self):
        return np.concatenate(self.scans) if self.scans else np.zeros((0, 3))

    def input_grid(self, volume=None):
        return voxelize(self.input_points(), volume or self.volume)

    def gt_grid(self, volume=None):
        return voxelize(self.gt_points, volume or self.volume)


def roi_volume(center_x, cfg: SampleConfig) -> VolumeSpec:
    ex, ey, ez = cfg.extent
    return VolumeSpec((center_x - ex / 2, -ey / 2, cfg.z_origin), cfg.extent, cfg.voxel_size)


def _sub_trajectory(traj: Trajectory, t0, period):
    p0, p1 = traj.pose_at(t0), traj.pose_at(t0 + period)
    return Trajectory((t0, t0 + period), (p0, p1))


def make_sample(seed: int, cfg: SampleConfig | None = None, scene_cfg=None) -> Sample:
    """Scene ``seed`` cropped to an ROI around a random center on the street.

    Input scans fire along the first drive with a rolling shutter; evaluation
    poses sit where that drive enters and leaves the ROI.
    """
    cfg = cfg or SampleConfig()
    scene = gen_scene(seed, scene_cfg)
    rng = np.random.default_rng([seed, 0xDA7A])
    half = scene.config.block_length / 2
    margin = cfg.extent[0] / 2 + 1.0
    center = float(rng.integers(int(-half + margin), int(half - margin) + 1))
    volume = roi_volume(center, cfg)
    traj = scene.trajectories[0]
    speed = scene.config.speed
    beams = beam_preset(cfg.beams)
    noise = NoiseModel() if cfg.noise else None
    offsets = (np.arange(cfg.n_scans) - (cfg.n_scans - 1) / 2) * cfg.scan_spacing
    x_start = traj.poses[0].position[0]
    scans, poses = [], []
    for j, off in enumerate(offsets):
        t0 = (center + off - x_start) / speed
        sub = _sub_trajectory(traj, t0, cfg.period)
        pts = scan_rolling(scene.mesh, sub, beams, cfg.period, rng=np.random.default_rng([seed, 11, j]),
                           noise=noise)
        scans.append(pts)
        poses.append(sub.poses[0])
    lo = np.asarray(volume.origin)
    hi = lo + np.asarray(volume.extent)
    gt = scene.gt_points((lo, hi), cfg.gt_density)
    y, zs = traj.poses[0].position[1], traj.poses[0].position[2]
    ex = cfg.extent[0] / 2 - cfg.resim_margin
    resim = [Pose((center - ex, y, zs)), Pose((center + ex, y, zs))]
    n_t = int(np.floor(cfg.extent[0] / cfg.tsdf_spacing))
    xs = center + (np.arange(n_t + 1) - n_t / 2) * cfg.tsdf_spacing
    tsdf = [Pose((float(x), y, zs)) for x in xs]
    return Sample(seed, scene, volume, center, scans, poses, gt, resim, tsdf)
