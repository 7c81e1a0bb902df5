"""Fine stage: local latent autoencoder, continuous GCA upsampler, UDF decoding and meshing.

Distances handled here are in fine-voxel units (1.0 = one fine voxel) unless
a name says otherwise. Cell-local coordinates are offsets from the cell
center, also in voxel units.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .gca import (Adam, InfusionSchedule, KernelConfig, WindowedKernel, infusion_rate, sigmoid, step_rng)
from .mesh import TriMesh
from .ndiff import ParamStore, load_checkpoint, save_checkpoint
from .ndiff import ops as T
from .ndiff.layers import init_linear, linear
from .voxgrid import SparseOccupancyGrid, VolumeSpec, cells_to_keys, dilate, upscale2x, voxelize
from ._validation import check_points

log = logging.getLogger(__name__)

__all__ = [
    "AugmentedLatentGrid", "LatentAE", "LatentAutoencoder", "ContinuousGCA",
    "sample_pairs", "encode_cell", "encode_cells", "decode_udf", "ae_train_step",
    "build_initial_fine_state", "cgca_rollout", "cgca_train_step", "extract_mesh",
    "surface_points", "toy_shape", "ToyShape", "decode_lattice", "LatticeField", "fine_target", "CgcaConfig",
]

SIGMAS = (0.03, 0.1)


# ------------------------------------------------------------------ state

@dataclass(frozen=True, eq=False)
class AugmentedLatentGrid:
    """Occupied fine cells with one latent vector each (sorted by cell key)."""
    volume: VolumeSpec
    cells: np.ndarray
    latents: np.ndarray

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.int64).reshape(-1, 3)
        lat = np.asarray(self.latents, dtype=np.float64)
        if lat.ndim != 2 or len(lat) != len(cells):
            raise ValueError(f"need one latent row per cell, got {lat.shape} for {len(cells)} cells")
        if not np.all(np.isfinite(lat)):
            raise ValueError("latents must be finite")
        if len(cells) and not self.volume.contains(cells).all():
            raise ValueError("cells outside volume dims")
        keys = cells_to_keys(cells, self.volume.dims)
        uk, first = np.unique(keys, return_index=True)
        if len(uk) != len(keys):
            raise ValueError("duplicate cells")
        object.__setattr__(self, "cells", cells[first])
        object.__setattr__(self, "latents", lat[first])

    @classmethod
    def empty(cls, volume, k):
        return cls(volume, np.zeros((0, 3), np.int64), np.zeros((0, k)))

    @property
    def k(self):
        return self.latents.shape[1]

    def __len__(self):
        return len(self.cells)

    @property
    def keys(self):
        return cells_to_keys(self.cells, self.volume.dims)

    @property
    def grid(self) -> SparseOccupancyGrid:
        return SparseOccupancyGrid(self.volume, self.cells)

    def lookup(self, cells) -> tuple:
        """``(latents, found)`` for arbitrary cells; missing or outside cells read zero."""
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
        out = np.zeros((len(cells), self.k))
        inside = self.volume.contains(cells)
        found = np.zeros(len(cells), bool)
        if len(self) == 0 or not inside.any():
            return out, found
        keys = self.keys
        q = cells_to_keys(cells[inside], self.volume.dims)
        pos = np.clip(np.searchsorted(keys, q), 0, len(keys) - 1)
        hit = keys[pos] == q
        idx = np.flatnonzero(inside)[hit]
        out[idx] = self.latents[pos[hit]]
        found[idx] = True
        return out, found

    def crop(self, lo, size) -> "AugmentedLatentGrid":
        """Cells inside the box ``[lo, lo + size)`` re-indexed into a sub-volume."""
        lo = np.asarray(lo, dtype=np.int64)
        size = np.asarray(size, dtype=np.int64)
        vol = self.volume
        sub = VolumeSpec(tuple(np.asarray(vol.origin) + lo * vol.voxel_size), tuple(size * vol.voxel_size),
                         vol.voxel_size)
        keep = np.all((self.cells >= lo) & (self.cells < lo + size), axis=1)
        return AugmentedLatentGrid(sub, self.cells[keep] - lo, self.latents[keep])


def _crop_grid(grid: SparseOccupancyGrid, lo, size) -> SparseOccupancyGrid:
    return AugmentedLatentGrid(grid.volume, grid.cells, np.zeros((len(grid), 0))).crop(lo, size).grid


# ------------------------------------------------------------------ point-distance pairs

def sample_pairs(surface, n, rng, sigmas=SIGMAS, tree=None):
    """``n`` (point, distance) samples around a surface point set, meters.

    Half of the samples use each noise level; the distance is the nearest
    neighbor distance to the surface samples.
    """
    if isinstance(surface, TriMesh):
        surface = surface.sample_surface(max(1000.0, 4.0 * n / max(surface.areas().sum(), 1e-9)), rng)
    pts = check_points(surface, "surface")
    if len(pts) == 0:
        raise ValueError("cannot sample pairs around an empty surface")
    if n < 1:
        raise ValueError("n must be >= 1")
    sig = np.repeat(np.asarray(sigmas, dtype=np.float64), int(np.ceil(n / len(sigmas))))[:n]
    base = pts[rng.integers(0, len(pts), n)]
    q = base + rng.normal(size=(n, 3)) * sig[:, None]
    tree = tree if tree is not None else cKDTree(pts)
    d, _ = tree.query(q)
    return q, d


def _support_rows(points, cells_sorted_keys, volume: VolumeSpec, max_pairs, rng):
    """Assign points to every occupied cell whose 3-voxel support cube contains them.

    Returns ``(point_idx, cell_idx)`` with at most ``max_pairs`` rows per cell.
    """
    vs = volume.voxel_size
    u = (points - np.asarray(volume.origin)) / vs
    base = np.floor(u).astype(np.int64)
    off = np.array(np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1], indexing="ij")).reshape(3, -1).T
    nb = (base[:, None, :] + off[None]).reshape(-1, 3)
    pidx = np.repeat(np.arange(len(points)), 27)
    ok = volume.contains(nb)
    nb, pidx = nb[ok], pidx[ok]
    # cube of side 3 centered on the cell center: |u - (c + 0.5)| <= 1.5 per axis
    inside = np.all(np.abs(u[pidx] - (nb + 0.5)) <= 1.5, axis=1)
    nb, pidx = nb[inside], pidx[inside]
    keys = cells_to_keys(nb, volume.dims)
    pos = np.clip(np.searchsorted(cells_sorted_keys, keys), 0, max(len(cells_sorted_keys) - 1, 0))
    hit = (cells_sorted_keys[pos] == keys) if len(cells_sorted_keys) else np.zeros(len(keys), bool)
    pidx, cidx = pidx[hit], pos[hit]
    if max_pairs is not None and len(cidx):
        shuffle = rng.permutation(len(cidx))
        pidx, cidx = pidx[shuffle], cidx[shuffle]
        order = np.argsort(cidx, kind="stable")
        pidx, cidx = pidx[order], cidx[order]
        starts = np.flatnonzero(np.r_[True, cidx[1:] != cidx[:-1]])
        rank = np.arange(len(cidx)) - np.repeat(starts, np.diff(np.r_[starts, len(cidx)]))
        keep = rank < max_pairs
        pidx, cidx = pidx[keep], cidx[keep]
    return pidx, cidx


# ------------------------------------------------------------------ autoencoder

@dataclass
class LatentAE:
    """Encoder/decoder parameter bundle sharing one :class:`ParamStore`."""
    store: ParamStore
    k: int = 8
    hidden: int = 64
    dec_hidden: int = 32
    prefix: str = "ae."

    @classmethod
    def create(cls, rng, k=8, hidden=64, dec_hidden=32, store=None, prefix="ae."):
        store = store if store is not None else ParamStore()
        p = prefix
        init_linear(store, p + "enc.0", 4, hidden, rng)
        init_linear(store, p + "enc.1", hidden, hidden, rng)
        init_linear(store, p + "enc.2", hidden, k, rng, gain=1.0)
        init_linear(store, p + "dec.0", 3 + k, dec_hidden, rng)
        init_linear(store, p + "dec.1", dec_hidden, dec_hidden, rng)
        init_linear(store, p + "dec.2", dec_hidden, dec_hidden, rng)
        init_linear(store, p + "dec.3", dec_hidden, 1, rng, gain=1.0)
        return cls(store, k, hidden, dec_hidden, prefix)

    def encode(self, feats, segments, n_segments) -> T.Tensor:
        """Per-pair MLP, max over each segment, final FC; ``feats`` rows are (dx, dy, dz, d)."""
        p = self.prefix
        h = T.relu(linear(self.store, p + "enc.0", feats))
        h = T.relu(linear(self.store, p + "enc.1", h))
        pooled = T.segment_max(h, segments, n_segments)
        return linear(self.store, p + "enc.2", pooled)

    def decode(self, offsets, z) -> T.Tensor:
        """Distance (voxel units, >= 0) at cell-local ``offsets`` given latents ``z``."""
        p = self.prefix
        h = T.concat([T.as_tensor(offsets), T.as_tensor(z)], axis=-1)
        for l in range(3):
            h = T.relu(linear(self.store, p + f"dec.{l}", h))
        return T.softplus(linear(self.store, p + "dec.3", h))


def _pair_features(points, dists, cells, volume):
    vs = volume.voxel_size
    centers = np.asarray(volume.origin) + (cells + 0.5) * vs
    return np.concatenate([(points - centers) / vs, (np.asarray(dists) / vs)[:, None]], axis=1)


def encode_cells(ae: LatentAE, cells, points, dists, volume: VolumeSpec, max_pairs=64, rng=None, tensor=False):
    """Latents for sorted unique ``cells`` from the pairs in each cell's support.

    Cells without any pair get the zero latent.
    """
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    keys = cells_to_keys(cells, volume.dims)
    rng = rng if rng is not None else np.random.default_rng(0)
    pidx, cidx = _support_rows(points, keys, volume, max_pairs, rng)
    feats = _pair_features(points[pidx], np.asarray(dists)[pidx], cells[cidx], volume)
    z = ae.encode(feats, cidx, len(cells))
    has = np.bincount(cidx, minlength=len(cells)) > 0
    if not has.all():
        z = T.mul(z, has[:, None].astype(np.float64))
    return z if tensor else z.data


def encode_cell(ae: LatentAE, cell, points, dists, volume: VolumeSpec):
    """Latent of one cell from pairs (meters) inside its 3-voxel support cube."""
    points = check_points(points)
    cell = np.asarray(cell, dtype=np.int64).reshape(1, 3)
    keys = cells_to_keys(cell, volume.dims)
    pidx, _ = _support_rows(points, keys, volume, None, np.random.default_rng(0))
    if len(pidx) == 0:
        raise ValueError(f"no pairs inside the support of cell {tuple(cell[0])}")
    return encode_cells(ae, cell, points, dists, volume, max_pairs=None)[0]


def _blend_rows(queries, volume: VolumeSpec):
    """The 8 cells around each query with trilinear weights and cell-local offsets."""
    vs = volume.voxel_size
    u = (np.asarray(queries, dtype=np.float64) - np.asarray(volume.origin)) / vs - 0.5
    base = np.floor(u).astype(np.int64)
    frac = u - base
    off = np.array(np.meshgrid([0, 1], [0, 1], [0, 1], indexing="ij")).reshape(3, -1).T
    cells = base[:, None, :] + off[None]  # (N, 8, 3)
    w = np.prod(np.where(off[None] == 1, frac[:, None, :], 1.0 - frac[:, None, :]), axis=-1)
    offsets = (u[:, None, :] + 0.5) - (cells + 0.5)
    return cells.reshape(-1, 3), w, offsets.reshape(-1, 3)


def decode_udf(ae: LatentAE, queries, grid: AugmentedLatentGrid, chunk=65536, tensor_latents=None):
    """Unsigned distance (voxel units) at ``queries`` by trilinear blending of 8 cell decodes.

    With ``tensor_latents`` (a Tensor aligned with ``grid.latents``) the result is a
    differentiable Tensor; otherwise a plain array is returned in chunks.
    """
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if tensor_latents is not None:
        cells, w, offsets = _blend_rows(q, grid.volume)
        zt = T.concat([tensor_latents, T.Tensor(np.zeros((1, grid.k)))], axis=0)
        idx = _latent_index(grid, cells)
        d = ae.decode(offsets, T.gather_rows(zt, idx))
        return T.sum(T.mul(T.reshape(d, (len(q), 8)), w), axis=1)
    out = np.empty(len(q))
    for s in range(0, len(q), chunk):
        cells, w, offsets = _blend_rows(q[s:s + chunk], grid.volume)
        z, _ = grid.lookup(cells)
        d = ae.decode(offsets, z).data.reshape(-1, 8)
        out[s:s + chunk] = (d * w).sum(axis=1)
    return out


def _latent_index(grid, cells):
    """Row of each cell in ``grid.latents``; missing cells map to the extra zero row."""
    idx = np.full(len(cells), len(grid), np.int64)
    inside = grid.volume.contains(cells)
    if len(grid) and inside.any():
        keys = grid.keys
        q = cells_to_keys(cells[inside], grid.volume.dims)
        pos = np.clip(np.searchsorted(keys, q), 0, len(keys) - 1)
        hit = keys[pos] == q
        sub = np.full(len(q), len(grid), np.int64)
        sub[hit] = pos[hit]
        idx[inside] = sub
    return idx


# ------------------------------------------------------------------ toy shapes

@dataclass
class ToyShape:
    points: np.ndarray  # dense surface samples, meters
    volume: VolumeSpec
    distance: object  # callable: (N, 3) meters -> meters

    def cells(self):
        return voxelize(self.points, self.volume)


def toy_shape(seed, kind=None, voxel_size=0.1, extent=1.6, density=10000.0) -> ToyShape:
    """A plane, a sphere, or both inside a cube of side ``extent`` (meters)."""
    rng = np.random.default_rng([seed, 0x70F])
    kind = kind or ("plane", "sphere", "both")[int(rng.integers(3))]
    half = extent / 2
    vol = VolumeSpec((-half, -half, -half), (extent,) * 3, voxel_size)
    parts, dists = [], []
    if kind in ("plane", "both"):
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        c = rng.uniform(-0.2, 0.2) if kind == "plane" else -0.45
        if kind == "both":
            n = np.array([0.0, 0.0, 1.0]) + 0.2 * rng.normal(size=3)
            n /= np.linalg.norm(n)
        a = np.cross(n, [1.0, 0.0, 0.0] if abs(n[0]) < 0.9 else [0.0, 1.0, 0.0])
        a /= np.linalg.norm(a)
        b = np.cross(n, a)
        m = int(density * (2 * extent) ** 2)
        uv = rng.uniform(-extent, extent, (m, 2))
        p = c * n + uv[:, :1] * a + uv[:, 1:] * b
        parts.append(p[np.all(np.abs(p) <= half, axis=1)])
        dists.append(lambda x, n=n, c=c: np.abs(x @ n - c))
    if kind in ("sphere", "both"):
        r = rng.uniform(0.25, 0.45)
        ctr = rng.uniform(-half + r + 0.1, half - r - 0.1, 3)
        if kind == "both":
            ctr[2] = -0.45 + r + rng.uniform(0.1, 0.3)
            ctr[2] = min(ctr[2], half - r - 0.05)
        m = int(density * 4 * np.pi * r * r)
        d = rng.normal(size=(m, 3))
        parts.append(ctr + r * d / np.linalg.norm(d, axis=1, keepdims=True))
        dists.append(lambda x, ctr=ctr, r=r: np.abs(np.linalg.norm(x - ctr, axis=1) - r))
    pts = np.concatenate(parts)

    def distance(x):
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        return np.min([f(x) for f in dists], axis=0)
    return ToyShape(pts, vol, distance)


# ------------------------------------------------------------------ AE training

def _ae_batch(shape: ToyShape, rng, tree, n_enc=3000, n_query=256, radius=4):
    """Encoder pairs and query targets around a random surface cell of ``shape``."""
    vol = shape.volume
    occ = shape.cells()
    anchor = occ.cells[rng.integers(len(occ))]
    near = np.all(np.abs(occ.cells - anchor) <= radius, axis=1)
    cells = occ.cells[near]
    lo = vol.cell_centers(anchor[None])[0] - (radius + 1.5) * vol.voxel_size
    hi = lo + (2 * radius + 3) * vol.voxel_size
    sel = np.all((shape.points >= lo) & (shape.points <= hi), axis=1)
    local = shape.points[sel]
    q, d = sample_pairs(local, n_enc, rng, tree=tree)
    surf = local[rng.integers(0, len(local), n_enc // 2)]
    enc_pts = np.concatenate([q, surf])
    enc_d = np.concatenate([d, np.zeros(len(surf))])
    # queries stay well inside the crop so all 8 blend cells are represented
    qq, qd = sample_pairs(local, 4 * n_query, rng, tree=tree)
    qhalf = (radius - 1.5) * vol.voxel_size
    ok = np.all(np.abs(qq - vol.cell_centers(anchor[None])[0]) <= qhalf, axis=1) & vol.contains(
        np.floor((qq - np.asarray(vol.origin)) / vol.voxel_size).astype(np.int64))
    qq, qd = qq[ok][:n_query], qd[ok][:n_query]
    return cells, enc_pts, enc_d, qq, qd


def ae_train_step(ae: LatentAE, batch, optimizer, volume: VolumeSpec, rng=None, max_pairs=64):
    """One L1 reconstruction step end-to-end through encoding and blending.

    ``batch`` is ``(cells, enc_points, enc_dists, queries, query_dists)`` in meters.
    Returns the loss in voxel units.
    """
    cells, enc_pts, enc_d, qq, qd = batch
    if len(cells) == 0 or len(qq) == 0:
        raise ValueError("empty AE batch")
    ae.store.zero_grad()
    grid = AugmentedLatentGrid(volume, cells, np.zeros((len(cells), ae.k)))
    z = encode_cells(ae, grid.cells, enc_pts, enc_d, volume, max_pairs, rng, tensor=True)
    pred = decode_udf(ae, qq, grid, tensor_latents=z)
    loss = T.l1(pred, np.asarray(qd) / volume.voxel_size)
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite AE loss")
    loss.backward()
    optimizer.step()
    return float(loss.data)


class LatentAutoencoder(BaseEstimator):
    """Learns cell latents that decode to unsigned distance fields.

    ``fit`` takes a list of :class:`ToyShape` (or point arrays with ``volume``
    given per shape) and trains end-to-end on random local crops.
    """

    def __init__(self, k=8, hidden=64, dec_hidden=32, voxel_size=0.1, n_steps=3000, lr=2e-3, clip_norm=0.5,
                 max_pairs=64, seed=0, verbose=0):
        self.k = k
        self.hidden = hidden
        self.dec_hidden = dec_hidden
        self.voxel_size = voxel_size
        self.n_steps = n_steps
        self.lr = lr
        self.clip_norm = clip_norm
        self.max_pairs = max_pairs
        self.seed = seed
        self.verbose = verbose

    def _build(self):
        self.ae_ = LatentAE.create(np.random.default_rng(self.seed), self.k, self.hidden, self.dec_hidden)
        self.loss_curve_ = []

    def fit(self, X, y=None):
        shapes = list(X)
        if not shapes:
            raise ValueError("need at least one training shape")
        if not hasattr(self, "ae_"):
            self._build()
        return self.partial_fit(shapes, self.n_steps)

    def partial_fit(self, shapes, n_steps):
        opt = Adam(self.ae_.store, self.lr, self.clip_norm)
        rng = np.random.default_rng([self.seed, 2, self.ae_.store.step_count])
        trees = [cKDTree(s.points) for s in shapes]
        for _ in range(n_steps):
            i = int(rng.integers(len(shapes)))
            batch = _ae_batch(shapes[i], rng, trees[i])
            if len(batch[3]) == 0:
                continue
            loss = ae_train_step(self.ae_, batch, opt, shapes[i].volume, rng, self.max_pairs)
            self.loss_curve_.append((self.ae_.store.step_count, loss))
            if self.verbose and self.ae_.store.step_count % self.verbose == 0:
                log.info("ae step %d loss %.4f", self.ae_.store.step_count, loss)
        return self

    def encode_surface(self, points, volume, n_pairs=None, rng=None):
        """Latent grid over the voxelized ``points`` using noisy and on-surface pairs."""
        check_is_fitted(self, "ae_")
        rng = rng if rng is not None else np.random.default_rng(self.seed)
        pts = check_points(points)
        occ = voxelize(pts, volume)
        n_pairs = n_pairs or max(1, 4 * len(pts))
        q, d = sample_pairs(pts, n_pairs, rng)
        enc_pts = np.concatenate([q, pts])
        enc_d = np.concatenate([d, np.zeros(len(pts))])
        z = encode_cells(self.ae_, occ.cells, enc_pts, enc_d, volume, self.max_pairs, rng)
        return AugmentedLatentGrid(volume, occ.cells, z)

    def transform(self, X):
        """Latent grids for a list of :class:`ToyShape`."""
        return [self.encode_surface(s.points, s.volume) for s in X]

    def decode(self, queries, grid):
        check_is_fitted(self, "ae_")
        return decode_udf(self.ae_, queries, grid)

    def score(self, X, y=None, n_queries=2000):
        """Negative mean |decoded - true| distance (voxel units) near each shape's surface."""
        errs = []
        for j, s in enumerate(X):
            rng = np.random.default_rng([self.seed, 3, j])
            grid = self.encode_surface(s.points, s.volume, rng=rng)
            errs.append(self.query_error(s, grid, rng, n_queries))
        return -float(np.mean(errs))

    def query_error(self, shape, grid, rng, n_queries=2000):
        q, _ = sample_pairs(shape.points, n_queries, rng)
        ok = shape.volume.contains(np.floor((q - np.asarray(shape.volume.origin)) / shape.volume.voxel_size)
                                   .astype(np.int64))
        q = q[ok]
        pred = decode_udf(self.ae_, q, grid)
        return float(np.mean(np.abs(pred - shape.distance(q) / shape.volume.voxel_size)))

    def save(self, path):
        check_is_fitted(self, "ae_")
        save_checkpoint(path, self.ae_.store, {"estimator": "LatentAutoencoder", "params": self.get_params()})

    @classmethod
    def load(cls, path):
        store, extra = load_checkpoint(path)
        if extra.get("estimator") != "LatentAutoencoder":
            raise ValueError(f"{path} is not a latent autoencoder checkpoint")
        est = cls(**extra["params"])
        est.ae_ = LatentAE(store, est.k, est.hidden, est.dec_hidden)
        est.loss_curve_ = []
        return est


# ------------------------------------------------------------------ continuous GCA

def build_initial_fine_state(scans, coarse: SparseOccupancyGrid, ae: LatentAE, fine_volume=None, max_pairs=64,
                             rng=None) -> AugmentedLatentGrid:
    """Union of voxelized scans and the upscaled coarse state at half the coarse voxel size.

    Scan cells carry latents encoded from the scan points (distance 0); cells
    that come only from the coarse state start at zero.
    """
    fine_volume = fine_volume or coarse.volume.with_voxel_size(coarse.volume.voxel_size / 2)
    if isinstance(scans, np.ndarray):
        pts = check_points(scans)
    else:
        scans = [check_points(s) for s in scans]
        pts = np.concatenate(scans) if scans else np.zeros((0, 3))
    scan_grid = voxelize(pts, fine_volume)
    up = upscale2x(coarse) if len(coarse) else SparseOccupancyGrid(fine_volume)
    if up.volume != fine_volume:
        raise ValueError(f"coarse volume {coarse.volume} is not compatible with {fine_volume}")
    if len(scan_grid) == 0 and len(up) == 0:
        raise ValueError("both the scans and the coarse state are empty")
    allg = scan_grid.union(up)
    z = np.zeros((len(allg), ae.k))
    if len(scan_grid):
        zs = encode_cells(ae, scan_grid.cells, pts, np.zeros(len(pts)), fine_volume, max_pairs,
                          rng if rng is not None else np.random.default_rng(0))
        pos = np.searchsorted(allg.keys, scan_grid.keys)
        z[pos] = zs
    return AugmentedLatentGrid(fine_volume, allg.cells, z)


def fine_target(gt_points, ae: LatentAE, fine_volume, rng, max_pairs=64, pair_factor=2) -> AugmentedLatentGrid:
    """Ground-truth augmented state: gt cells with latents encoded from gt pairs."""
    pts = check_points(gt_points)
    occ = voxelize(pts, fine_volume)
    q, d = sample_pairs(pts, max(1, pair_factor * len(pts)), rng)
    enc_pts = np.concatenate([q, pts])
    enc_d = np.concatenate([d, np.zeros(len(pts))])
    z = encode_cells(ae, occ.cells, enc_pts, enc_d, fine_volume, max_pairs, rng)
    return AugmentedLatentGrid(fine_volume, occ.cells, z)


def _kernel_out(kernel: WindowedKernel, state: AugmentedLatentGrid, cands, initial, chunk=16384):
    outs = []
    grid = state.grid
    for s in range(0, len(cands), chunk):
        feats = kernel.features(grid, cands[s:s + chunk], latents=state.latents, initial=initial)
        outs.append(kernel.forward(feats).data)
    return np.concatenate(outs) if outs else np.zeros((0, 1 + state.k))


@dataclass
class CgcaConfig:
    T: int = 15
    r: int = 2
    seed: int = 0
    mle_last: bool = True


def cgca_rollout(initial: AugmentedLatentGrid, kernel: WindowedKernel, config: CgcaConfig | None = None):
    """Continuous GCA transitions; surviving cells adopt the predicted latents."""
    config = config or CgcaConfig()
    if len(initial) == 0:
        raise ValueError("initial augmented state is empty")
    x0 = initial.grid
    state = initial
    for t in range(config.T):
        if len(state) == 0:
            break
        cands = dilate(state.grid, config.r)
        out = _kernel_out(kernel, state, cands, x0)
        if config.mle_last and t == config.T - 1:
            keep = out[:, 0] > 0
        else:
            keep = step_rng(config.seed, t).random(len(cands)) < sigmoid(out[:, 0])
        state = AugmentedLatentGrid(initial.volume, cands[keep], out[keep, 1:])
    return state


def cgca_train_step(state: AugmentedLatentGrid, gt: AugmentedLatentGrid, kernel: WindowedKernel, schedule, t,
                    optimizer, initial: AugmentedLatentGrid, *, r=2, lambda_z=1.0, rng=None, frame=None):
    """One infusion-training step of the continuous GCA; returns ``(loss, next_state)``.

    The trajectory starts from an initial state built from the ground-truth
    coarse grid, never from a stage-one rollout. ``frame`` is the crop's
    ``(offset, parent_dims)`` when training on crops.
    """
    if len(gt) == 0:
        raise ValueError("empty ground truth")
    if state.volume != gt.volume:
        raise ValueError("state and ground truth live in different volumes")
    cands = dilate(state.grid, r)
    if len(cands) == 0:
        raise ValueError("empty candidate set: restart the training trajectory from its initial state")
    optimizer.store.zero_grad()
    feats = kernel.features(state.grid, cands, latents=state.latents, initial=initial.grid, frame=frame)
    out = kernel.forward(feats)
    logits = T.reshape(T.columns(out, 0, 1), (len(cands),))
    z_gt, in_gt = gt.lookup(cands)
    loss = T.bce_with_logits(logits, in_gt.astype(np.float64))
    rows = np.flatnonzero(in_gt)
    if lambda_z and len(rows):
        zp = T.gather_rows(T.columns(out, 1, 1 + gt.k), rows)
        loss = T.add(loss, T.scale(T.l1(zp, z_gt[rows]), lambda_z))
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite cGCA loss")
    loss.backward()
    optimizer.step()
    rng = rng if rng is not None else np.random.default_rng()
    alpha = infusion_rate(schedule, t)
    p = (1.0 - alpha) * sigmoid(logits.data) + alpha * in_gt
    keep = rng.random(len(cands)) < p
    z_next = out.data[:, 1:].copy()
    use_gt = in_gt & (rng.random(len(cands)) < alpha)
    z_next[use_gt] = z_gt[use_gt]
    nxt = AugmentedLatentGrid(state.volume, cands[keep], z_next[keep])
    return float(loss.data), nxt


class ContinuousGCA(BaseEstimator):
    """Fine-stage upsampler over augmented latent states.

    ``fit(X, y)``: ``X`` initial augmented states, ``y`` ground-truth augmented
    states in the same volumes. Training runs on random crops of ``crop`` cells.
    """

    def __init__(self, T=15, r=2, k=8, window=2, latent_window=1, init_window=1, hidden=32, posenc_dims=128,
                 lambda_z=1.0, lr=5e-4, clip_norm=0.5, n_steps=1000, crop=(32, 32, 32), infusion_a=0.15,
                 infusion_b=0.005, mle_last=True, seed=0, verbose=0):
        self.T = T
        self.r = r
        self.k = k
        self.window = window
        self.latent_window = latent_window
        self.init_window = init_window
        self.hidden = hidden
        self.posenc_dims = posenc_dims
        self.lambda_z = lambda_z
        self.lr = lr
        self.clip_norm = clip_norm
        self.n_steps = n_steps
        self.crop = crop
        self.infusion_a = infusion_a
        self.infusion_b = infusion_b
        self.mle_last = mle_last
        self.seed = seed
        self.verbose = verbose

    def _kernel_config(self):
        return KernelConfig(window=self.window, hidden=self.hidden, posenc_dims=self.posenc_dims,
                            latent_dim=self.k, latent_window=self.latent_window, init_window=self.init_window)

    def _build(self):
        self.store_ = ParamStore()
        self.kernel_ = WindowedKernel.create(self.store_, self._kernel_config(), np.random.default_rng(self.seed))
        self.loss_curve_ = []

    def fit(self, X, y):
        X, y = list(X), list(y)
        if not X or len(X) != len(y):
            raise ValueError("need matching, non-empty lists of initial and target states")
        for a, b in zip(X, y):
            if a.volume != b.volume or a.k != self.k or b.k != self.k:
                raise ValueError("initial/target states must share a volume and latent size k")
        if not hasattr(self, "store_"):
            self._build()
        return self.partial_fit(X, y, self.n_steps)

    def _random_crop(self, x0, gt, rng):
        """``(x0 crop, gt crop, frame)``; the frame keeps positions in the full volume's coordinates."""
        dims = np.asarray(x0.volume.dims)
        size = np.minimum(np.asarray(self.crop), dims)
        for _ in range(20):
            anchor = gt.cells[rng.integers(len(gt))]
            lo = np.clip(anchor - size // 2, 0, dims - size)
            c0, cg = x0.crop(lo, size), gt.crop(lo, size)
            if len(c0) and len(cg):
                return c0, cg, (lo, tuple(dims))
        return x0, gt, None

    def partial_fit(self, X, y, n_steps):
        schedule = InfusionSchedule(self.infusion_a, self.infusion_b)
        opt = Adam(self.store_, self.lr, self.clip_norm)
        rng = np.random.default_rng([self.seed, 4, self.store_.step_count])
        state = x0 = gt = frame = None
        t = self.T
        for _ in range(n_steps):
            if t >= self.T or state is None or len(state) == 0:
                i = int(rng.integers(len(X)))
                x0, gt, frame = self._random_crop(X[i], y[i], rng)
                state, t = x0, 0
            loss, state = cgca_train_step(state, gt, self.kernel_, schedule, t, opt, x0, r=self.r,
                                          lambda_z=self.lambda_z, rng=rng, frame=frame)
            t += 1
            self.loss_curve_.append((self.store_.step_count, loss))
            if self.verbose and self.store_.step_count % self.verbose == 0:
                log.info("cgca step %d loss %.4f", self.store_.step_count, loss)
        return self

    def rollout(self, x0, seed=None):
        check_is_fitted(self, "store_")
        return cgca_rollout(x0, self.kernel_, CgcaConfig(self.T, self.r, self.seed if seed is None else seed,
                                                         self.mle_last))

    def predict(self, X, seed=None):
        return [self.rollout(x, seed) for x in X]

    def save(self, path):
        check_is_fitted(self, "store_")
        params = self.get_params()
        params["crop"] = list(params["crop"])
        save_checkpoint(path, self.store_, {"estimator": "ContinuousGCA", "params": params})

    @classmethod
    def load(cls, path):
        store, extra = load_checkpoint(path)
        if extra.get("estimator") != "ContinuousGCA":
            raise ValueError(f"{path} is not a continuous GCA checkpoint")
        params = dict(extra["params"])
        params["crop"] = tuple(params["crop"])
        est = cls(**params)
        est.store_ = store
        est.kernel_ = WindowedKernel(store, est._kernel_config())
        est.loss_curve_ = []
        return est


# ------------------------------------------------------------------ meshing

def _lattice(grid: AugmentedLatentGrid, cell_size):
    """5 cm style sub-lattice covering the dilated occupied cells.

    Returns ``(origin, shape, mask, points)``: lattice point ``idx`` sits at
    ``origin + idx * cell_size`` (sub-cell centers).
    """
    vol = grid.volume
    sub = int(round(vol.voxel_size / cell_size))
    if sub < 1 or not np.isclose(sub * cell_size, vol.voxel_size):
        raise ValueError(f"cell_size {cell_size} must divide the voxel size {vol.voxel_size}")
    cells = dilate(grid.grid, 1)
    lo, hi = cells.min(axis=0), cells.max(axis=0) + 1
    shape = tuple((hi - lo) * sub)
    mask = np.zeros(shape, bool)
    off = np.array(np.meshgrid(*[np.arange(sub)] * 3, indexing="ij")).reshape(3, -1).T
    idx = ((cells - lo)[:, None, :] * sub + off[None]).reshape(-1, 3)
    mask[tuple(idx.T)] = True
    origin = np.asarray(vol.origin) + lo * vol.voxel_size + 0.5 * cell_size
    pts = origin + np.argwhere(mask) * cell_size
    return origin, shape, mask, pts


def _udf_gradient(udf, p, h):
    g = np.zeros_like(p)
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        g[:, a] = (udf(p + e) - udf(p - e)) / (2 * h)
    return g


def _dedupe_components(mesh: TriMesh, tol):
    """Drop connected components lying on top of an already kept (larger) component."""
    comps = mesh.components()
    if len(comps) < 2:
        return mesh
    comps = sorted(comps, key=lambda c: (-len(c), int(np.min(c))))
    kept, kept_pts = [], []
    for c in comps:
        verts = np.unique(mesh.triangles[c])
        pts = mesh.vertices[verts]
        if kept_pts:
            d, _ = cKDTree(np.concatenate(kept_pts)).query(pts)
            if np.median(d) < tol:
                continue
        kept.append(c)
        kept_pts.append(pts)
    return mesh.submesh(np.sort(np.concatenate(kept)))


@dataclass
class LatticeField:
    """Decoded distances (voxel units) on the sub-lattice of a latent grid."""
    origin: np.ndarray
    shape: tuple
    mask: np.ndarray
    points: np.ndarray
    values: np.ndarray
    cell_size: float


def decode_lattice(grid: AugmentedLatentGrid, ae=None, cell_size=0.05, udf=None) -> LatticeField:
    if udf is None:
        if ae is None:
            raise ValueError("need an autoencoder or an explicit udf")
        udf = lambda q: decode_udf(ae, q, grid)  # noqa: E731
    origin, shape, mask, pts = _lattice(grid, cell_size)
    return LatticeField(origin, shape, mask, pts, udf(pts), cell_size)


def _empty_mesh():
    return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))


def extract_mesh(grid: AugmentedLatentGrid, ae=None, cell_size=0.05, iso=0.5, udf=None, project=True,
                 dedupe=True, lattice: LatticeField | None = None) -> TriMesh:
    """Mesh the decoded unsigned distance field.

    Marching cubes runs on ``iso - value`` over the sub-lattice of the dilated
    occupied cells, which yields a thin double shell around the surface. Each
    vertex is then moved onto the distance minimum with one Newton step
    ``p - u grad(u) / |grad(u)|^2`` and coincident shells are merged by dropping
    duplicate components. ``udf`` (meters -> voxel units) overrides the decoder.
    """
    from skimage.measure import marching_cubes

    if len(grid) == 0:
        return _empty_mesh()
    if udf is None:
        if ae is None:
            raise ValueError("need an autoencoder or an explicit udf")
        udf = lambda q: decode_udf(ae, q, grid)  # noqa: E731
    lat = lattice if lattice is not None else decode_lattice(grid, cell_size=cell_size, udf=udf)
    field = np.full(lat.shape, -1.0)
    field[lat.mask] = iso - lat.values
    if min(lat.shape) < 2 or field.max() <= 0 or field[lat.mask].min() >= 0:
        warnings.warn("no iso-surface crossing in the decoded field; returning an empty mesh")
        return _empty_mesh()
    verts, faces, _, _ = marching_cubes(field, level=0.0, spacing=(lat.cell_size,) * 3, allow_degenerate=False)
    verts = verts + lat.origin
    if project and len(verts):
        u = udf(verts)
        g = _udf_gradient(udf, verts, 0.25 * lat.cell_size)
        gn = np.sum(g * g, axis=1)
        ok = gn > 1e-12
        verts[ok] -= (u[ok] / gn[ok])[:, None] * g[ok]
    mesh = TriMesh(verts, faces.astype(np.int64))
    if dedupe and project:
        mesh = _dedupe_components(mesh, 0.5 * lat.cell_size)
    return mesh


def surface_points(grid: AugmentedLatentGrid, ae=None, cell_size=0.05, tau=0.5, udf=None,
                   lattice: LatticeField | None = None):
    """Centers of lattice cells whose decoded distance is below ``tau`` (voxel units)."""
    if len(grid) == 0:
        return np.zeros((0, 3))
    lat = lattice if lattice is not None else decode_lattice(grid, ae, cell_size, udf)
    return lat.points[lat.values < tau]
