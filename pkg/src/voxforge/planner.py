"""Bird's-eye-view planner: pillar point-net, 2D UNet, SPADE and rough-occupancy heads.

The planner reads only the initial coarse state and produces per-pillar
(gamma, beta) maps that modulate the hidden layers of the transition kernel,
plus a low-resolution occupancy prediction used as an auxiliary loss.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .ndiff import ops as T
from .ndiff import posenc2d
from .ndiff.layers import conv, init_conv, init_linear, linear
from .voxgrid import SparseOccupancyGrid

log = logging.getLogger(__name__)

__all__ = [
    "PillarGrid", "PlannerConfig", "Planner", "PlannerOutput",
    "pillarize", "pillar_encode", "bev_unet", "heads", "planner_loss",
    "pool_rough_target", "bev_pca_dump",
]

N_SPADE = 4
PILLAR_DIM = 32
BEV_DIM = 128


@dataclass(frozen=True)
class PillarGrid:
    shape: tuple  # (h_max, w_max)
    pillar_ids: np.ndarray  # (N,) flat pillar index i * w + j per point
    coords: np.ndarray  # (N, 3) normalized coordinates in [0, 1]

    def pillar(self, i, j) -> np.ndarray:
        return self.coords[self.pillar_ids == i * self.shape[1] + j]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.pillar_ids, minlength=self.shape[0] * self.shape[1]).reshape(self.shape)


def pillarize(state: SparseOccupancyGrid) -> PillarGrid:
    dims = state.volume.dims
    cells = state.cells
    coords = (cells + 0.5) / np.asarray(dims, dtype=np.float64)
    ids = cells[:, 0] * dims[1] + cells[:, 1]
    return PillarGrid((dims[0], dims[1]), ids.astype(np.int64), coords)


@dataclass
class PlannerConfig:
    h_max: int
    w_max: int
    z_max: int
    z_r: int = 4
    kernel_hidden: int = 32
    unet_channels: tuple = (32, 48, 64)
    head_channels: int = 16

    def __post_init__(self):
        if self.h_max % 3 or self.w_max % 3:
            raise ValueError(f"h_max, w_max must be divisible by 3, got {self.h_max}x{self.w_max}")
        if self.h_max % 4 or self.w_max % 4:
            raise ValueError(f"h_max, w_max must be divisible by 4, got {self.h_max}x{self.w_max}")
        if self.z_max % self.z_r:
            raise ValueError(f"z_max {self.z_max} not divisible by z_r {self.z_r}")

    @property
    def rough_shape(self):
        return (self.h_max // 3, self.w_max // 3, self.z_r)


@dataclass
class PlannerOutput:
    bev: T.Tensor  # (h, w, 128)
    spade: list  # N_SPADE pairs of (gamma, beta), each (h * w, hidden)
    rough: T.Tensor  # (h_r, w_r, z_r) logits


def init_planner_params(store, cfg: PlannerConfig, rng, prefix="planner.", zero_unet_out=False):
    p = prefix
    init_linear(store, p + "pn.in", 3, PILLAR_DIM, rng)
    for b in range(3):
        init_linear(store, p + f"pn.res{b}.a", PILLAR_DIM, PILLAR_DIM, rng)
        init_linear(store, p + f"pn.res{b}.b", PILLAR_DIM, PILLAR_DIM, rng, gain=0.5)
    init_linear(store, p + "pn.out", PILLAR_DIM, PILLAR_DIM, rng, gain=1.0)
    c1, c2, c3 = cfg.unet_channels
    init_conv(store, p + "unet.enc1", PILLAR_DIM, c1, rng)
    init_conv(store, p + "unet.enc2", c1, c2, rng)
    init_conv(store, p + "unet.mid", c2, c3, rng)
    init_conv(store, p + "unet.dec2", c3 + c2, c2, rng)
    init_conv(store, p + "unet.dec1", c2 + c1, c1, rng)
    init_conv(store, p + "unet.out", c1, BEV_DIM, rng, k=1, zero=zero_unet_out)
    hc = cfg.head_channels
    for l in range(N_SPADE):
        init_conv(store, p + f"head.spade{l}.a", BEV_DIM, hc, rng)
        init_conv(store, p + f"head.spade{l}.b", hc, 2 * cfg.kernel_hidden, rng, zero=True)
    init_conv(store, p + "head.rough.a", BEV_DIM, hc, rng)
    init_conv(store, p + "head.rough.b", hc, cfg.z_r, rng)


def pillar_encode(pillars: PillarGrid, store, prefix="planner.") -> T.Tensor:
    """Per-point MLP, max over each pillar, plus a 2D positional encoding."""
    h, w = pillars.shape
    p = prefix
    x = T.relu(linear(store, p + "pn.in", pillars.coords))
    for b in range(3):
        y = T.relu(linear(store, p + f"pn.res{b}.a", x))
        x = T.relu(T.add(x, linear(store, p + f"pn.res{b}.b", y)))
    x = linear(store, p + "pn.out", x)
    pooled = T.segment_max(x, pillars.pillar_ids, h * w)
    ij = np.stack(np.meshgrid(np.arange(h), np.arange(w), indexing="ij"), -1).reshape(-1, 2)
    pe = posenc2d(ij, PILLAR_DIM, (h, w))
    return T.reshape(T.add(pooled, pe), (h, w, PILLAR_DIM))


def _block(store, name, x):
    return T.relu(conv(store, name, x))


def bev_unet(features: T.Tensor, store, prefix="planner.") -> T.Tensor:
    h, w, _ = features.shape
    if h % 4 or w % 4:
        raise ValueError(f"BEV grid {h}x{w} must be divisible by 4")
    p = prefix + "unet."
    e1 = _block(store, p + "enc1", features)
    e2 = _block(store, p + "enc2", T.maxpool2d(e1))
    m = _block(store, p + "mid", T.maxpool2d(e2))
    d2 = _block(store, p + "dec2", T.concat([T.upsample2d(m), e2], axis=-1))
    d1 = _block(store, p + "dec1", T.concat([T.upsample2d(d2), e1], axis=-1))
    return conv(store, p + "out", d1)


def heads(f: T.Tensor, store, cfg: PlannerConfig, prefix="planner."):
    """SPADE (gamma, beta) pairs and rough occupancy logits from the BEV feature."""
    h, w, _ = f.shape
    if h % 3 or w % 3:
        raise ValueError(f"BEV grid {h}x{w} must be divisible by 3")
    p = prefix + "head."
    hid = cfg.kernel_hidden
    spade = []
    for l in range(N_SPADE):
        y = conv(store, p + f"spade{l}.b", T.relu(conv(store, p + f"spade{l}.a", f)))
        y = T.reshape(y, (h * w, 2 * hid))
        gamma = T.add(T.columns(y, 0, hid), 1.0)
        beta = T.columns(y, hid, 2 * hid)
        spade.append((gamma, beta))
    r = conv(store, p + "rough.b", T.relu(conv(store, p + "rough.a", f)))
    rough = T.avgpool2d(r, 3)
    return spade, rough


class Planner:
    """Bundles the planner sub-networks over a shared :class:`ParamStore`."""

    def __init__(self, store, cfg: PlannerConfig, prefix="planner."):
        self.store = store
        self.cfg = cfg
        self.prefix = prefix

    @classmethod
    def create(cls, store, cfg: PlannerConfig, rng, prefix="planner.", **kw):
        init_planner_params(store, cfg, rng, prefix, **kw)
        return cls(store, cfg, prefix)

    def __call__(self, s0: SparseOccupancyGrid) -> PlannerOutput:
        dims = s0.volume.dims
        if (dims[0], dims[1], dims[2]) != (self.cfg.h_max, self.cfg.w_max, self.cfg.z_max):
            raise ValueError(f"planner configured for {self.cfg.h_max}x{self.cfg.w_max}x{self.cfg.z_max}, got {dims}")
        feats = pillar_encode(pillarize(s0), self.store, self.prefix)
        bev = bev_unet(feats, self.store, self.prefix)
        spade, rough = heads(bev, self.store, self.cfg, self.prefix)
        return PlannerOutput(bev, spade, rough)

    def param_names(self):
        return [n for n in self.store.names() if n.startswith(self.prefix)]


def pool_rough_target(gt: SparseOccupancyGrid, rough_shape) -> np.ndarray:
    """Logical OR of the coarse ground truth over each rough super-cell."""
    h, w, z = gt.volume.dims
    hr, wr, zr = rough_shape
    if h % hr or w % wr or z % zr:
        raise ValueError(f"grid {h}x{w}x{z} does not tile into {rough_shape}")
    occ = gt.dense().reshape(hr, h // hr, wr, w // wr, zr, z // zr)
    return occ.any(axis=(1, 3, 5)).astype(np.float64)


def planner_loss(rough: T.Tensor, gt: SparseOccupancyGrid, beta_w: float = 0.1) -> T.Tensor:
    target = pool_rough_target(gt, rough.shape)
    return T.bce_with_logits(rough, target, weight=beta_w)


def bev_pca_dump(f, path=None) -> np.ndarray:
    """Project BEV features on their first 3 principal axes as an 8-bit RGB image.

    Each component's sign is chosen so its largest-magnitude loading is
    positive. With fewer than 3 informative components a grayscale image of
    the first component (or a uniform image) is produced instead.
    """
    data = f.data if isinstance(f, T.Tensor) else np.asarray(f, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise ValueError("BEV feature contains non-finite values")
    h, w, c = data.shape
    x = data.reshape(-1, c)
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    tol = max(xc.shape) * np.finfo(float).eps * (s[0] if len(s) else 0.0)
    rank = int(np.sum(s > tol)) if len(s) and s[0] > 0 else 0
    for k in range(min(3, len(vt))):
        if vt[k, np.argmax(np.abs(vt[k]))] < 0:
            vt[k] = -vt[k]
    if rank >= 3:
        proj = xc @ vt[:3].T
    else:
        log.warning("degenerate BEV covariance (rank %d); writing grayscale", rank)
        base = xc @ vt[:1].T if rank >= 1 else np.zeros((len(x), 1))
        proj = np.repeat(base, 3, axis=1)
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    img = np.round((proj - lo) / span * 255.0).clip(0, 255).astype(np.uint8).reshape(h, w, 3)
    if path is not None:
        from PIL import Image

        Image.fromarray(img, mode="RGB").save(path)
    return img
