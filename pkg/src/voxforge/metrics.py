"""Completion metrics: Chamfer, re-simulated LiDAR Chamfer, TMD, TSDF visibility, IoU, street Chamfer."""
from __future__ import annotations

import csv
import io as _io
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .lidarsim import NO_HIT, Pose, eval_beams, scan
from .voxgrid import SparseOccupancyGrid, VolumeSpec, downsample2x, iou
from ._validation import check_points

log = logging.getLogger(__name__)

__all__ = [
    "NnIndex", "chamfer", "lidar_resim_cd", "ResimResult", "select_resim_poses", "tmd", "TsdfGrid",
    "tsdf_fuse", "visibility_mask", "street_cd", "report", "EvalReport", "crop_points", "visible_iou",
]


class NnIndex:
    """Nearest-neighbor queries over a fixed point set.

    The tree picks the neighbor; the returned distance is recomputed as
    ``sqrt(sum((q - p)**2))`` so it matches a brute-force evaluation bit for bit.
    """

    def __init__(self, points):
        self.points = check_points(points)
        if len(self.points) == 0:
            raise ValueError("cannot index an empty point set")
        self._tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def query(self, q):
        q = check_points(q, "queries")
        _, idx = self._tree.query(q)
        d = np.sqrt(np.sum((q - self.points[idx]) ** 2, axis=1))
        return d, idx


def _mean_nn(x, y_index: NnIndex):
    return float(np.mean(y_index.query(x)[0]))


def chamfer(X, Y) -> float:
    """Symmetric non-squared Chamfer distance: half the sum of both mean NN distances."""
    X, Y = check_points(X, "X"), check_points(Y, "Y")
    if len(X) == 0 or len(Y) == 0:
        raise ValueError(f"chamfer needs non-empty sets, got {len(X)} and {len(Y)} points")
    a = _mean_nn(X, NnIndex(Y))
    b = _mean_nn(Y, NnIndex(X))
    return 0.5 * (a + b)


def crop_points(points, box):
    lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
    pts = check_points(points)
    return pts[np.all((pts >= lo) & (pts <= hi), axis=1)]


@dataclass
class ResimResult:
    per_pose: list
    mean: float
    skipped: list = field(default_factory=list)


def lidar_resim_cd(gt_scene, completion, poses, beams=None, roi=None) -> ResimResult:
    """Chamfer between scans of ``gt_scene`` and ``completion`` from each pose, averaged."""
    poses = list(poses)
    if not poses:
        raise ValueError("need at least one pose")
    beams = beams or eval_beams()
    per, skipped = [], []
    for j, pose in enumerate(poses):
        _, a = scan(gt_scene, pose, beams)
        _, b = scan(completion, pose, beams)
        if roi is not None:
            a, b = crop_points(a, roi), crop_points(b, roi)
        if len(a) == 0 or len(b) == 0:
            warnings.warn(f"pose {j}: a re-simulated scan has no returns inside the ROI; skipped")
            skipped.append(j)
            continue
        per.append(chamfer(a, b))
    if not per:
        raise ValueError("every pose was skipped: no returns to compare")
    return ResimResult(per, float(np.mean(per)), skipped)


def select_resim_poses(trajectory, roi, n_samples=2001):
    """Poses where ``trajectory`` enters and leaves the ROI footprint (x-y)."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in roi)
    ts = np.linspace(trajectory.t_start, trajectory.t_end, n_samples)
    inside = []
    for t in ts:
        p = np.asarray(trajectory.frame_at(t)[0])
        inside.append(bool(np.all((p[:2] >= lo[:2]) & (p[:2] <= hi[:2]))))
    idx = np.flatnonzero(inside)
    if len(idx) == 0:
        raise ValueError("trajectory never enters the ROI")
    return [trajectory.pose_at(ts[idx[0]]), trajectory.pose_at(ts[idx[-1]])]


def tmd(completion_sets) -> float:
    """Mean over partial inputs of the mean pairwise Chamfer distance among its completions."""
    vals = []
    for j, comps in enumerate(completion_sets):
        k = len(comps)
        if k < 2:
            raise ValueError(f"partial {j} has {k} completion(s); TMD needs at least 2")
        s = 0.0
        for a in range(k):
            for b in range(a + 1, k):
                s += chamfer(comps[a], comps[b])
        vals.append(2.0 * s / (k * (k - 1)))
    if not vals:
        raise ValueError("no completion sets given")
    return float(np.mean(vals))


@dataclass
class TsdfGrid:
    volume: VolumeSpec
    tsdf: np.ndarray  # meters, clamped to [-tau, tau]
    weight: np.ndarray
    tau: float


def _pixel_lookup(image, points):
    """Range image pixel hit by the ray from the image origin towards each point."""
    o = image.origins[0]
    R = image.rotations[0]
    v = (points - o) @ R  # sensor frame
    dist = np.linalg.norm(v, axis=1)
    az = np.mod(np.arctan2(v[:, 1], v[:, 0]), 2 * np.pi)
    cols = image.beams.azimuth_count
    col = np.mod(np.rint(az / (2 * np.pi) * cols).astype(np.int64), cols)
    el = np.degrees(np.arcsin(np.clip(v[:, 2] / np.maximum(dist, 1e-12), -1, 1)))
    elev = np.asarray(image.beams.elevations)
    row = np.clip(np.searchsorted(elev, el), 1, len(elev) - 1)
    row = np.where(np.abs(elev[row - 1] - el) <= np.abs(elev[row] - el), row - 1, row)
    spacing = np.median(np.diff(elev)) if len(elev) > 1 else 1.0
    valid = (np.abs(elev[row] - el) <= 0.5 * spacing + 1e-9) & (dist > 0)
    return row, col, dist, valid


def tsdf_fuse(images, volume: VolumeSpec, tau=0.3) -> TsdfGrid:
    """Projective TSDF over the voxel centers of ``volume``.

    Per view the signed distance is measured range minus voxel range, clamped
    to ``tau``; voxels more than ``tau`` behind the surface are not updated.
    Rays with no return count as free space up to the sensor range.
    """
    images = list(images)
    if not images:
        raise ValueError("need at least one range image")
    dims = volume.dims
    cells = np.argwhere(np.ones(dims, bool))
    centers = volume.cell_centers(cells)
    tsdf = np.zeros(len(cells))
    weight = np.zeros(len(cells))
    for img in images:
        row, col, dist, valid = _pixel_lookup(img, centers)
        rng_m = img.ranges[row, col]
        free = rng_m == NO_HIT
        measured = np.where(free, img.beams.max_range + tau, rng_m)
        sdf = measured - dist
        upd = valid & (sdf >= -tau) & (dist <= img.beams.max_range)
        val = np.minimum(sdf[upd], tau)
        w = weight[upd]
        tsdf[upd] = (tsdf[upd] * w + val) / (w + 1.0)
        weight[upd] = w + 1.0
    return TsdfGrid(volume, tsdf.reshape(dims), weight.reshape(dims), tau)


def visibility_mask(grid: TsdfGrid, threshold=-0.3) -> SparseOccupancyGrid:
    """Observed voxels above ``threshold`` OR-pooled to twice the voxel size."""
    vis = (grid.weight > 0) & (grid.tsdf > threshold)
    return downsample2x(SparseOccupancyGrid.from_dense(grid.volume, vis))


def visible_iou(pred: SparseOccupancyGrid, gt: SparseOccupancyGrid, mask: SparseOccupancyGrid) -> float:
    return iou(pred, gt, mask)


def street_cd(pred_points, gt_points, street_roi, z_min=0.2) -> float:
    """Chamfer over points above ``z_min`` inside the street footprint."""
    lo, hi = (np.asarray(b, dtype=np.float64).copy() for b in street_roi)
    lo[2] = max(lo[2], z_min)

    def keep(p):
        p = check_points(p)
        return p[np.all((p >= lo) & (p <= hi), axis=1) & (p[:, 2] > z_min)]
    a, b = keep(pred_points), keep(gt_points)
    if len(a) == 0 or len(b) == 0:
        raise ValueError(f"street_cd: nothing left after cropping to the street above z={z_min} "
                         f"(prediction {len(a)} points, ground truth {len(b)} points)")
    return chamfer(a, b)


@dataclass
class EvalReport:
    cd_resim_min: float
    cd_resim_avg: float
    tmd: float | None
    iou: float
    street_cd: float | None
    k: int
    poses: list
    seeds: list
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.cd_resim_min > self.cd_resim_avg + 1e-12:
            raise ValueError("cd_resim_min exceeds cd_resim_avg")
        for name in ("cd_resim_min", "cd_resim_avg", "tmd", "iou", "street_cd"):
            v = getattr(self, name)
            if v is not None and not np.isfinite(v):
                raise ValueError(f"{name} is not finite")

    def scaled(self) -> dict:
        """Distances times 10 (IoU unchanged), the usual table convention."""
        out = {}
        for name in ("cd_resim_min", "cd_resim_avg", "tmd", "street_cd"):
            v = getattr(self, name)
            out[name] = None if v is None else 10.0 * v
        out["iou"] = self.iou
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["x10"] = self.scaled()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        cols = ["cd_resim_min", "cd_resim_avg", "tmd", "iou", "street_cd", "k"]
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols + [c + "_x10" for c in cols[:5]])
        sc = self.scaled()
        w.writerow([_fmt(getattr(self, c)) for c in cols] + [_fmt(sc[c]) for c in cols[:5]])
        return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def report(gt_scene, completions, *, poses, roi, gt_coarse=None, pred_coarse=None, mask=None,
           completion_points=None, gt_points=None, street_roi=None, beams=None, seeds=(), config=None,
           z_min=0.2) -> EvalReport:
    """Metric bundle for ``k`` completions (meshes) of one partial input.

    IoU and street Chamfer are averaged over the completions; TMD is omitted
    with a warning when fewer than two completions are given.
    """
    completions = list(completions)
    k = len(completions)
    if k == 0:
        raise ValueError("missing artifact: completions")
    for name, val in (("poses", poses), ("roi", roi)):
        if val is None:
            raise ValueError(f"missing artifact: {name}")
    cds = [lidar_resim_cd(gt_scene, c, poses, beams, roi).mean for c in completions]
    pts = completion_points
    t = None
    if pts is not None:
        if len(pts) != k:
            raise ValueError("completion_points must have one entry per completion")
        if k >= 2:
            t = tmd([pts])
        else:
            warnings.warn("TMD needs at least two completions; omitted")
    elif k >= 2:
        raise ValueError("missing artifact: completion_points")
    io_val = float("nan")
    if pred_coarse is not None:
        if gt_coarse is None:
            raise ValueError("missing artifact: gt_coarse")
        if len(pred_coarse) != k:
            raise ValueError("pred_coarse must have one grid per completion")
        io_val = float(np.mean([iou(p, gt_coarse, mask) for p in pred_coarse]))
    else:
        raise ValueError("missing artifact: pred_coarse")
    scd = None
    if street_roi is not None:
        if gt_points is None or pts is None:
            raise ValueError("missing artifact: gt_points/completion_points for street_cd")
        scd = float(np.mean([street_cd(p, gt_points, street_roi, z_min) for p in pts]))
    return EvalReport(float(np.min(cds)), float(np.mean(cds)), t, io_val, scd, k,
                      [p.to_dict() if isinstance(p, Pose) else p for p in poses], list(seeds), dict(config or {}))
