"""Coarse generative cellular automaton: kernel, stochastic transitions, infusion training."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .ndiff import ParamStore, adam_step, posenc3d
from .ndiff import ops as T
from .ndiff.layers import init_linear, linear
from .planner import N_SPADE, Planner, PlannerConfig, planner_loss
from .voxgrid import SparseOccupancyGrid, cells_to_keys, dilate, iou
from ._validation import check_grid_list

log = logging.getLogger(__name__)

__all__ = [
    "KernelConfig", "WindowedKernel", "CandidateLogits", "InfusionSchedule", "GcaConfig", "Adam",
    "kernel_logits", "transition_sample", "mle_select", "rollout", "infusion_rate",
    "infused_sample", "train_step", "GCACompleter", "step_rng", "sigmoid",
]


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def step_rng(seed, step) -> np.random.Generator:
    """Independent stream per (seed, step); draws are consumed in sorted cell order."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(step)])


def _offsets(m):
    r = np.arange(-m, m + 1)
    return np.array(np.meshgrid(r, r, r, indexing="ij")).reshape(3, -1).T


def window_occupancy(occ: np.ndarray, cells: np.ndarray, m: int) -> np.ndarray:
    """Binary occupancy of the (2m+1)^3 window around each cell; outside the volume reads empty."""
    if len(cells) == 0:
        return np.zeros((0, (2 * m + 1) ** 3))
    padded = np.pad(occ, m)
    pd = padded.shape
    base = np.ravel_multi_index((cells + m).T, pd)
    off = _offsets(m)
    flat_off = (off[:, 0] * pd[1] + off[:, 1]) * pd[2] + off[:, 2]
    return padded.reshape(-1)[base[:, None] + flat_off[None, :]].astype(np.float64)


def window_values(keys_sorted, values, cells, dims, m) -> np.ndarray:
    """Gather per-cell vectors ``values`` (aligned with ``keys_sorted``) over a window; missing → 0."""
    k = values.shape[1]
    off = _offsets(m)
    n = len(cells)
    out = np.zeros((n, len(off), k))
    if n == 0 or len(keys_sorted) == 0:
        return out.reshape(n, -1)
    nb = cells[:, None, :] + off[None]
    inside = np.all((nb >= 0) & (nb < np.asarray(dims)), axis=-1)
    nk = np.where(inside, np.ravel_multi_index(np.clip(nb, 0, np.asarray(dims) - 1).transpose(2, 0, 1), dims), -1)
    pos = np.searchsorted(keys_sorted, nk)
    pos = np.clip(pos, 0, len(keys_sorted) - 1)
    hit = inside & (keys_sorted[pos] == nk)
    out[hit] = values[pos[hit]]
    return out.reshape(n, -1)


@dataclass
class KernelConfig:
    window: int = 2
    hidden: int = 32
    posenc_dims: int = 128
    posenc_scale: float = 1.0
    latent_dim: int = 0
    latent_window: int = 1
    init_window: int = 1

    def n_features(self):
        n = (2 * self.window + 1) ** 3 + self.posenc_dims
        if self.latent_dim:
            n += (2 * self.latent_window + 1) ** 3 * (self.latent_dim + 1)
        return n


class WindowedKernel:
    """Windowed-occupancy MLP transition kernel.

    Input per candidate: occupancy of its (2m+1)^3 window, a 3D positional
    encoding and (continuous variant) neighbouring latents plus initial-state
    occupancy. Four hidden layers are standardized and then modulated by the
    planner's per-pillar (gamma, beta) when a context is given. Output column 0
    is the occupancy logit; columns 1..K are the predicted latent.
    """

    def __init__(self, store, cfg: KernelConfig, prefix="kernel."):
        self.store = store
        self.cfg = cfg
        self.prefix = prefix
        self._pe_cache = {}

    @classmethod
    def create(cls, store, cfg: KernelConfig, rng, prefix="kernel."):
        n_in = cfg.n_features()
        init_linear(store, prefix + "l0", n_in, cfg.hidden, rng)
        for l in range(1, N_SPADE):
            init_linear(store, prefix + f"l{l}", cfg.hidden, cfg.hidden, rng)
        init_linear(store, prefix + "out", cfg.hidden, 1 + cfg.latent_dim, rng, gain=1.0)
        return cls(store, cfg, prefix)

    def param_names(self):
        return [n for n in self.store.names() if n.startswith(self.prefix)]

    def _posenc(self, cells, dims):
        pd = self.cfg.posenc_dims
        usable = pd - pd % 6
        key = (tuple(dims), pd)
        if key not in self._pe_cache:
            # per-axis tables; the 3D encoding is axis-major so tables concatenate
            tabs = []
            for a, d in enumerate(dims):
                c = np.zeros((d, 3), np.int64)
                c[:, a] = np.arange(d)
                full = posenc3d(c, usable, dims)
                w = usable // 3
                tabs.append(full[:, a * w:(a + 1) * w])
            self._pe_cache[key] = tabs
        tabs = self._pe_cache[key]
        pe = np.concatenate([tabs[a][cells[:, a]] for a in range(3)] + [np.zeros((len(cells), pd - usable))], axis=1)
        return pe * self.cfg.posenc_scale

    def features(self, state: SparseOccupancyGrid, cells, latents=None, initial: SparseOccupancyGrid | None = None,
                 frame=None):
        """Per-candidate feature rows.

        ``frame=(offset, parent_dims)`` marks ``state`` as a crop of a larger
        volume; positions are then encoded in the parent's coordinates so
        crops and full volumes see the same encoding.
        """
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
        dims = state.volume.dims
        if frame is None:
            pe = self._posenc(cells, dims)
        else:
            offset, parent = frame
            pe = self._posenc(cells + np.asarray(offset, dtype=np.int64), tuple(int(d) for d in parent))
        parts = [window_occupancy(state.dense(), cells, self.cfg.window), pe]
        if self.cfg.latent_dim:
            lat = np.zeros((len(state), self.cfg.latent_dim)) if latents is None else np.asarray(latents)
            parts.append(window_values(state.keys, lat, cells, dims, self.cfg.latent_window))
            init_occ = (initial if initial is not None else state).dense()
            parts.append(window_occupancy(init_occ, cells, self.cfg.latent_window))
        return np.concatenate(parts, axis=1)

    def forward(self, feats, context=None, pillar_idx=None) -> T.Tensor:
        x = feats
        p = self.prefix
        for l in range(N_SPADE):
            h = linear(self.store, p + f"l{l}", x)
            if context is not None:
                g, b = context.spade[l]
                h = T.spade_modulate(h, T.gather_rows(g, pillar_idx), T.gather_rows(b, pillar_idx))
            else:
                h = T.normalize(h)
            x = T.relu(h)
        return linear(self.store, p + "out", x)

    def evaluate(self, state, cells, context=None, **kw) -> np.ndarray:
        """Occupancy logits as a plain array."""
        feats = self.features(state, cells, **kw)
        return self.forward(feats, context, pillar_index(cells, state.volume.dims)).data[:, 0]


def _detached(context):
    from .planner import PlannerOutput

    return PlannerOutput(T.Tensor(context.bev.data),
                         [(T.Tensor(g.data), T.Tensor(b.data)) for g, b in context.spade],
                         T.Tensor(context.rough.data))


def pillar_index(cells, dims):
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    return cells[:, 0] * dims[1] + cells[:, 1]


@dataclass(frozen=True)
class CandidateLogits:
    volume: object
    cells: np.ndarray
    logits: np.ndarray

    def __len__(self):
        return len(self.cells)

    def as_dict(self) -> dict:
        return {tuple(c): float(v) for c, v in zip(self.cells.tolist(), self.logits)}

    @property
    def keys(self):
        return cells_to_keys(self.cells, self.volume.dims)


@dataclass(frozen=True)
class InfusionSchedule:
    a: float = 0.15
    b: float = 0.005

    def __call__(self, t):
        return infusion_rate(self, t)


def infusion_rate(schedule: InfusionSchedule, t) -> float:
    if t < 0:
        raise ValueError("step must be non-negative")
    return float(min(1.0, max(0.0, schedule.a + schedule.b * t)))


@dataclass
class GcaConfig:
    T: int = 30
    r: int = 1
    seed: int = 0
    mle_last: bool = True

    def __post_init__(self):
        if self.T < 1 or self.r < 0:
            raise ValueError(f"invalid GCA config T={self.T} r={self.r}")


def kernel_logits(kernel, state: SparseOccupancyGrid, context=None, r: int = 1) -> CandidateLogits:
    cands = dilate(state, r)
    if len(cands) == 0:
        return CandidateLogits(state.volume, cands, np.zeros(0))
    return CandidateLogits(state.volume, cands, np.asarray(kernel.evaluate(state, cands, context), dtype=np.float64))


def transition_sample(state, logits: CandidateLogits, rng) -> SparseOccupancyGrid:
    u = rng.random(len(logits))
    return SparseOccupancyGrid(logits.volume, logits.cells[u < sigmoid(logits.logits)])


def mle_select(logits: CandidateLogits) -> SparseOccupancyGrid:
    return SparseOccupancyGrid(logits.volume, logits.cells[logits.logits > 0])


def infused_sample(logits: CandidateLogits, gt: SparseOccupancyGrid, alpha, rng) -> SparseOccupancyGrid:
    """Sample with probability ``(1 - alpha) * sigmoid(logit) + alpha * [cell in gt]``."""
    if gt.volume != logits.volume:
        raise ValueError("ground truth and candidates live in different volumes")
    in_gt = np.isin(logits.keys, gt.keys)
    p = (1.0 - alpha) * sigmoid(logits.logits) + alpha * in_gt
    u = rng.random(len(logits))
    return SparseOccupancyGrid(logits.volume, logits.cells[u < p])


def rollout(initial: SparseOccupancyGrid, kernel, context, config: GcaConfig):
    """Run ``T`` transitions; the last is the thresholded one when ``mle_last``."""
    traj = [initial]
    state = initial
    for t in range(config.T):
        if len(state) == 0:
            traj.append(state)
            continue
        lg = kernel_logits(kernel, state, context, config.r)
        if config.mle_last and t == config.T - 1:
            state = mle_select(lg)
        else:
            state = transition_sample(state, lg, step_rng(config.seed, t))
        traj.append(state)
    return state, traj


class Adam:
    def __init__(self, store, lr=5e-4, clip_norm=0.5):
        self.store = store
        self.lr = lr
        self.clip_norm = clip_norm

    def step(self, grads=None):
        adam_step(self.store, grads, lr=self.lr, clip_norm=self.clip_norm)


def gca_loss(kernel, state, gt, cands, context=None):
    feats = kernel.features(state, cands)
    out = kernel.forward(feats, context, pillar_index(cands, state.volume.dims))
    logits = T.reshape(T.columns(out, 0, 1), (len(cands),))
    targets = np.isin(cells_to_keys(cands, state.volume.dims), gt.keys).astype(np.float64)
    return T.bce_with_logits(logits, targets), logits


def train_step(state, gt, kernel, schedule, t, optimizer, *, r=1, rng=None, planner=None, s0=None,
               beta_w=0.1):
    """One infusion-training step; returns ``(loss, next_state)``."""
    if len(gt) == 0:
        raise ValueError("empty ground truth")
    cands = dilate(state, r)
    if len(cands) == 0:
        raise ValueError("empty candidate set: restart the training trajectory from its seed state")
    optimizer.store.zero_grad()
    context = planner(s0 if s0 is not None else state) if planner is not None else None
    loss, logits = gca_loss(kernel, state, gt, cands, context)
    if context is not None and beta_w:
        loss = T.add(loss, planner_loss(context.rough, gt, beta_w))
    loss.backward()
    optimizer.step()
    rng = rng if rng is not None else np.random.default_rng()
    nxt = infused_sample(CandidateLogits(state.volume, cands, logits.data.copy()), gt, infusion_rate(schedule, t), rng)
    return float(loss.data), nxt


class GCACompleter(BaseEstimator):
    """Coarse scene completion with an optional BEV planner.

    ``fit`` takes the voxelized partial scans (initial states) and complete
    ground-truth grids at the same resolution. ``predict`` runs one rollout per
    input; ``sample`` draws ``k`` independent completions.
    """

    def __init__(self, T=30, r=1, window=2, hidden=32, posenc_dims=128, use_planner=True, beta_w=0.1,
                 z_r=4, lr=5e-4, clip_norm=0.5, n_steps=2000, infusion_a=0.15, infusion_b=0.005,
                 mle_last=True, seed=0, verbose=0):
        self.T = T
        self.r = r
        self.window = window
        self.hidden = hidden
        self.posenc_dims = posenc_dims
        self.use_planner = use_planner
        self.beta_w = beta_w
        self.z_r = z_r
        self.lr = lr
        self.clip_norm = clip_norm
        self.n_steps = n_steps
        self.infusion_a = infusion_a
        self.infusion_b = infusion_b
        self.mle_last = mle_last
        self.seed = seed
        self.verbose = verbose

    def _build(self, volume):
        rng = np.random.default_rng(self.seed)
        self.store_ = ParamStore()
        self.kernel_ = WindowedKernel.create(
            self.store_, KernelConfig(window=self.window, hidden=self.hidden, posenc_dims=self.posenc_dims), rng)
        self.planner_ = None
        if self.use_planner:
            h, w, z = volume.dims
            self.planner_ = Planner.create(self.store_, PlannerConfig(h, w, z, z_r=self.z_r, kernel_hidden=self.hidden), rng)
        self.volume_ = volume

    def fit(self, X, y):
        X = check_grid_list(X)
        y = check_grid_list(y, volume=X[0].volume, n=len(X), like=X)
        if not hasattr(self, "store_") or self.store_ is None:
            self._build(X[0].volume)
            self.loss_curve_ = []
        self.partial_fit(X, y, self.n_steps)
        return self

    def partial_fit(self, X, y, n_steps):
        schedule = InfusionSchedule(self.infusion_a, self.infusion_b)
        opt = Adam(self.store_, self.lr, self.clip_norm)
        rng = np.random.default_rng([self.seed, 1, self.store_.step_count])
        states = list(X)
        ts = [0] * len(X)
        order = []
        for _ in range(n_steps):
            if not order:
                order = list(rng.permutation(len(X)))
            i = order.pop()
            if ts[i] >= self.T or len(states[i]) == 0:
                states[i], ts[i] = X[i], 0
            loss, nxt = train_step(states[i], y[i], self.kernel_, schedule, ts[i], opt, r=self.r, rng=rng,
                                   planner=self.planner_, s0=X[i], beta_w=self.beta_w)
            states[i] = nxt
            ts[i] += 1
            self.loss_curve_.append((self.store_.step_count, loss))
            if self.verbose and self.store_.step_count % self.verbose == 0:
                log.info("step %d loss %.5f", self.store_.step_count, loss)
        return self

    def context(self, s0):
        check_is_fitted(self, "store_")
        if self.planner_ is None:
            return None
        return _detached(self.planner_(s0))

    def rollout(self, s0, seed=None):
        check_is_fitted(self, "store_")
        cfg = GcaConfig(self.T, self.r, self.seed if seed is None else seed, self.mle_last)
        return rollout(s0, self.kernel_, self.context(s0), cfg)

    def predict(self, X, seed=None):
        X = check_grid_list(X)
        return [self.rollout(x, seed)[0] for x in X]

    def sample(self, X, k=3, seed=None):
        """``k`` completions per input using seeds ``seed*1000 + j``."""
        X = check_grid_list(X)
        base = self.seed if seed is None else seed
        return [[self.rollout(x, base * 1000 + j)[0] for j in range(k)] for x in X]

    def score(self, X, y, masks=None):
        """Mean IoU of predictions against ``y``, optionally inside per-sample masks."""
        preds = self.predict(X)
        masks = masks if masks is not None else [None] * len(preds)
        return float(np.mean([iou(p, g, m) for p, g, m in zip(preds, y, masks)]))

    def save(self, path):
        from .ndiff import save_checkpoint

        check_is_fitted(self, "store_")
        save_checkpoint(path, self.store_, {"estimator": "GCACompleter", "params": self.get_params(),
                                            "volume": _volume_dict(self.volume_)})

    @classmethod
    def load(cls, path):
        from .ndiff import load_checkpoint
        from .voxgrid import VolumeSpec

        store, extra = load_checkpoint(path)
        est = cls(**extra["params"])
        est._build(VolumeSpec(**extra["volume"]))
        for n in store.names():
            est.store_.params[n].data = store.params[n].data
            est.store_.adam_m[n] = store.adam_m[n]
            est.store_.adam_v[n] = store.adam_v[n]
        est.store_.step_count = store.step_count
        est.loss_curve_ = []
        return est


def _volume_dict(v):
    return {"origin": list(v.origin), "extent": list(v.extent), "voxel_size": v.voxel_size}
