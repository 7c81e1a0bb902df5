import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxforge.gca import (Adam, CandidateLogits, GCACompleter, GcaConfig, InfusionSchedule, KernelConfig,
                          WindowedKernel, infused_sample, infusion_rate, kernel_logits, mle_select, rollout,
                          step_rng, train_step, transition_sample)
from voxforge.ndiff import ParamStore
from voxforge.voxgrid import SparseOccupancyGrid, VolumeSpec, cells_to_keys, dilate

VOL = VolumeSpec((0, 0, 0), (1.2, 1.2, 0.8), 0.1)


class ConstKernel:
    def __init__(self, value):
        self.value = value

    def evaluate(self, state, cells, context=None):
        return np.full(len(cells), self.value)


class CopyKernel:
    """+40 on occupied cells, -40 elsewhere: every state is a fixed point."""

    def evaluate(self, state, cells, context=None):
        return np.where(np.isin(cells_to_keys(cells, state.volume.dims), state.keys), 40.0, -40.0)


def grid(cells, vol=VOL):
    return SparseOccupancyGrid(vol, cells)


def logits_for(cells, values, vol=VOL):
    g = grid(cells, vol)
    order = np.argsort(cells_to_keys(np.asarray(cells), vol.dims))
    return CandidateLogits(vol, g.cells, np.asarray(values, float)[order])


def small_kernel(seed=0, **kw):
    store = ParamStore()
    cfg = KernelConfig(window=1, hidden=8, posenc_dims=12, **kw)
    return WindowedKernel.create(store, cfg, np.random.default_rng(seed)), store


class TestKernelLogits:
    def test_empty_state(self):
        k, _ = small_kernel()
        assert len(kernel_logits(k, grid([]))) == 0

    def test_one_logit_per_candidate_and_pure(self):
        k, _ = small_kernel()
        s = grid([(3, 3, 3), (4, 3, 3)])
        a, b = kernel_logits(k, s), kernel_logits(k, s)
        assert len(a) == len(dilate(s, 1))
        assert a.logits.tobytes() == b.logits.tobytes()

    def test_order_independent(self):
        k, _ = small_kernel()
        s = grid([(3, 3, 3), (4, 3, 4), (8, 2, 1)])
        cands = dilate(s, 1)
        base = dict(zip(map(tuple, cands.tolist()), k.evaluate(s, cands)))
        perm = np.random.default_rng(1).permutation(len(cands))
        shuffled = k.evaluate(s, cands[perm])
        for c, v in zip(cands[perm].tolist(), shuffled):
            assert base[tuple(c)] == pytest.approx(v, abs=1e-12)

    def test_translation_consistent_without_posenc(self):
        k, _ = small_kernel(posenc_scale=0.0)
        cells = np.array([(3, 3, 2), (4, 3, 2), (4, 4, 3)])
        off = np.array([2, 1, 1])
        a = kernel_logits(k, grid(cells))
        b = kernel_logits(k, grid(cells + off))
        da = {tuple(c): v for c, v in zip((a.cells + off).tolist(), a.logits)}
        db = b.as_dict()
        assert da.keys() == db.keys()
        for c in da:
            assert da[c] == pytest.approx(db[c], abs=1e-10)
        top = lambda d: {c for c, v in d.items() if v == max(d.values())}
        assert top(da) == top(db)


class TestTransitions:
    def test_saturated(self):
        s = grid([(5, 5, 3)])
        cands = dilate(s, 1)
        lg = CandidateLogits(VOL, cands, np.full(len(cands), 40.0))
        assert len(transition_sample(s, lg, step_rng(0, 0))) == 27
        lg = CandidateLogits(VOL, cands, np.full(len(cands), -40.0))
        assert len(transition_sample(s, lg, step_rng(0, 0))) == 0

    def test_seeded(self):
        s = grid([(5, 5, 3)])
        cands = dilate(s, 1)
        lg = CandidateLogits(VOL, cands, np.linspace(-2, 2, len(cands)))
        assert transition_sample(s, lg, step_rng(9, 3)) == transition_sample(s, lg, step_rng(9, 3))

    def test_mle(self):
        lg = logits_for([(0, 0, 0), (0, 0, 1)], [1.2, -0.4])
        assert mle_select(lg).cell_set() == {(0, 0, 0)}
        assert len(mle_select(logits_for([(0, 0, 0), (1, 0, 0)], [-1, -2]))) == 0
        assert len(mle_select(logits_for([(0, 0, 0)], [0.0]))) == 0


class TestRollout:
    def test_negative_kernel_empties(self):
        final, traj = rollout(grid([(5, 5, 3)]), ConstKernel(-40.0), None, GcaConfig(T=5))
        assert len(traj[1]) == 0 and len(final) == 0 and len(traj) == 6

    def test_fixed_point(self):
        s = grid([(5, 5, 3), (6, 6, 3), (1, 2, 0)])
        final, traj = rollout(s, CopyKernel(), None, GcaConfig(T=4))
        assert final == s and all(t == s for t in traj)

    def test_seeded_trajectory(self):
        k, _ = small_kernel()
        s = grid([(5, 5, 3), (6, 5, 3)])
        _, t1 = rollout(s, k, None, GcaConfig(T=4, seed=3, mle_last=False))
        _, t2 = rollout(s, k, None, GcaConfig(T=4, seed=3, mle_last=False))
        assert all(a == b for a, b in zip(t1, t2))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31), st.integers(0, 2))
    def test_growth_bounded(self, seed, r):
        k, _ = small_kernel(seed % 7)
        rng = np.random.default_rng(seed)
        s = grid(rng.integers(0, VOL.dims, (6, 3)))
        _, traj = rollout(s, k, None, GcaConfig(T=3, r=r, seed=seed, mle_last=False))
        for a, b in zip(traj, traj[1:]):
            assert b.cell_set() <= set(map(tuple, dilate(a, r).tolist()))
            assert len(b) <= len(a) * (2 * r + 1) ** 3

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            GcaConfig(T=0)
        with pytest.raises(ValueError):
            GcaConfig(r=-1)


class TestInfusion:
    def test_rates(self):
        sch = InfusionSchedule()
        assert infusion_rate(sch, 0) == 0.15
        assert infusion_rate(sch, 10) == 0.20
        assert infusion_rate(sch, 1000) == 1.0
        with pytest.raises(ValueError):
            infusion_rate(sch, -1)

    def test_alpha_one_gives_gt(self):
        s = grid([(5, 5, 3)])
        cands = dilate(s, 1)
        gt = grid([(5, 5, 3), (6, 6, 4), (0, 0, 0)])
        lg = CandidateLogits(VOL, cands, np.random.default_rng(0).normal(size=len(cands)))
        assert infused_sample(lg, gt, 1.0, step_rng(0, 0)).cell_set() == {(5, 5, 3), (6, 6, 4)}

    def test_alpha_zero_matches_transition(self):
        s = grid([(5, 5, 3)])
        cands = dilate(s, 1)
        lg = CandidateLogits(VOL, cands, np.random.default_rng(0).normal(size=len(cands)))
        gt = grid([(5, 5, 3)])
        assert infused_sample(lg, gt, 0.0, step_rng(4, 1)) == transition_sample(s, lg, step_rng(4, 1))

    def test_perfect_logits_any_alpha(self):
        s = grid([(5, 5, 3)])
        cands = dilate(s, 1)
        gt = grid([(5, 5, 3), (6, 5, 3)])
        v = np.where(np.isin(cells_to_keys(cands, VOL.dims), gt.keys), 40.0, -40.0)
        lg = CandidateLogits(VOL, cands, v)
        for a in (0.0, 0.3, 1.0):
            assert infused_sample(lg, gt, a, step_rng(0, 0)) == gt

    def test_marginal(self):
        s = grid([(5, 5, 3)])
        cands = dilate(s, 1)
        gt = grid([(5, 5, 3)])
        lg = CandidateLogits(VOL, cands, np.zeros(len(cands)))
        rng = np.random.default_rng(0)
        hits = sum((5, 5, 3) in infused_sample(lg, gt, 0.4, rng).cell_set() for _ in range(4000))
        assert hits / 4000 == pytest.approx(0.4 + 0.6 * 0.5, abs=0.03)

    def test_volume_mismatch(self):
        lg = logits_for([(0, 0, 0)], [0.0])
        with pytest.raises(ValueError):
            infused_sample(lg, SparseOccupancyGrid(VolumeSpec((0, 0, 0), (1, 1, 1), 0.1)), 0.5, step_rng(0, 0))


class TestTrainStep:
    def setup_method(self):
        self.state = grid([(5, 5, 3), (6, 5, 3)])
        self.gt = grid([(5, 5, 3), (6, 5, 3), (7, 5, 3), (5, 6, 3)])

    def test_zero_logits_give_ln2(self):
        k, store = small_kernel()
        for n in k.param_names():
            if "out" in n:
                store[n].data[...] = 0.0
        loss, _ = train_step(self.state, self.gt, k, InfusionSchedule(), 0, Adam(store), rng=np.random.default_rng(0))
        assert loss == pytest.approx(np.log(2), abs=1e-12)

    def test_perfect_kernel(self):
        # bias-only output layer: zero weights, bias picks the sign for every candidate of one class
        k, store = small_kernel()
        for n in k.param_names():
            if "out" in n:
                store[n].data[...] = 0.0
        gt = grid(dilate(self.state, 1))
        store[k.prefix + "out.b"].data[...] = 40.0
        loss, _ = train_step(self.state, gt, k, InfusionSchedule(), 0, Adam(store), rng=np.random.default_rng(0))
        assert loss < 1e-10

    def test_loss_drops_tenfold(self):
        k, store = small_kernel(1)
        opt = Adam(store, lr=1e-2, clip_norm=None)
        losses = [train_step(self.state, self.gt, k, InfusionSchedule(), 0, opt, rng=np.random.default_rng(0))[0]
                  for _ in range(200)]
        assert losses[-1] * 10 <= losses[0]

    def test_errors(self):
        k, store = small_kernel()
        with pytest.raises(ValueError):
            train_step(grid([]), self.gt, k, InfusionSchedule(), 0, Adam(store))
        with pytest.raises(ValueError):
            train_step(self.state, grid([]), k, InfusionSchedule(), 0, Adam(store))

    def test_next_state_inside_candidates(self):
        k, store = small_kernel()
        _, nxt = train_step(self.state, self.gt, k, InfusionSchedule(), 5, Adam(store), rng=np.random.default_rng(2))
        assert nxt.cell_set() <= set(map(tuple, dilate(self.state, 1).tolist()))


def _toy_pairs(n, seed):
    rng = np.random.default_rng(seed)
    vol = VolumeSpec((0, 0, 0), (1.2, 1.2, 0.8), 0.1)
    X, y = [], []
    for _ in range(n):
        x0, y0 = rng.integers(2, 8, 2)
        full = [(x0 + i, y0 + j, 1) for i in range(3) for j in range(3)]
        y.append(SparseOccupancyGrid(vol, full))
        X.append(SparseOccupancyGrid(vol, full[::3]))
    return X, y


class TestEstimator:
    def test_fit_predict_deterministic(self, tmp_path):
        X, y = _toy_pairs(3, 0)
        kw = dict(T=3, hidden=8, posenc_dims=12, window=1, n_steps=6, seed=2)
        a = GCACompleter(**kw).fit(X, y)
        b = GCACompleter(**kw).fit(X, y)
        assert a.store_.step_count == 6
        pa, pb = a.predict(X), b.predict(X)
        assert all(p == q for p, q in zip(pa, pb))
        a.save(tmp_path / "m.ndf")
        c = GCACompleter.load(tmp_path / "m.ndf")
        assert all(p == q for p, q in zip(pa, c.predict(X)))
        assert len(a.sample(X[:1], k=2)[0]) == 2
        assert 0.0 <= a.score(X, y) <= 1.0

    def test_planner_context_is_constant(self):
        X, y = _toy_pairs(2, 1)
        est = GCACompleter(T=3, hidden=8, posenc_dims=12, window=1, n_steps=2, seed=0).fit(X, y)
        c1, c2 = est.context(X[0]), est.context(X[0])
        for (g1, b1), (g2, b2) in zip(c1.spade, c2.spade):
            assert np.array_equal(g1.data, g2.data) and np.array_equal(b1.data, b2.data)

    def test_rejects_mismatched_volumes(self):
        X, y = _toy_pairs(2, 0)
        y[1] = SparseOccupancyGrid(VolumeSpec((0, 0, 0), (1, 1, 1), 0.1))
        with pytest.raises(ValueError):
            GCACompleter(n_steps=1).fit(X, y)

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError

        X, _ = _toy_pairs(1, 0)
        with pytest.raises(NotFittedError):
            GCACompleter().predict(X)
