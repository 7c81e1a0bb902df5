import numpy as np
import pytest

from voxforge.gca import KernelConfig, WindowedKernel, gca_loss
from voxforge.ndiff import ParamStore, Tensor
from voxforge.ndiff import ops as T
from voxforge.planner import (BEV_DIM, Planner, PlannerConfig, bev_pca_dump, bev_unet, heads, init_planner_params,
                              pillar_encode, pillarize, planner_loss, pool_rough_target)
from voxforge.voxgrid import SparseOccupancyGrid, VolumeSpec, dilate

VOL = VolumeSpec((0, 0, 0), (1.2, 1.2, 0.8), 0.1)  # 12 x 12 x 8


def small_cfg(**kw):
    base = dict(h_max=12, w_max=12, z_max=8, kernel_hidden=8, unet_channels=(4, 6, 8), head_channels=4)
    base.update(kw)
    return PlannerConfig(**base)


def make(seed=0, **kw):
    store = ParamStore()
    return Planner.create(store, small_cfg(), np.random.default_rng(seed), **kw), store


class TestPillarize:
    def test_empty(self):
        p = pillarize(SparseOccupancyGrid(VOL))
        assert p.sizes().sum() == 0 and p.sizes().shape == (12, 12)

    def test_normalization(self):
        vol = VolumeSpec((0, 0, 0), (38.4, 38.4, 8.0), 0.2)
        p = pillarize(SparseOccupancyGrid(vol, [(3, 5, 2)]))
        np.testing.assert_allclose(p.pillar(3, 5), [[3.5 / 192, 5.5 / 192, 2.5 / 40]])

    def test_count_preserved(self):
        rng = np.random.default_rng(0)
        g = SparseOccupancyGrid(VOL, rng.integers(0, VOL.dims, (50, 3)))
        assert pillarize(g).sizes().sum() == len(g)


class TestPillarEncode:
    def test_empty_pillar_is_positional_only(self):
        planner, store = make()
        g = SparseOccupancyGrid(VOL, [(2, 3, 1)])
        f = pillar_encode(pillarize(g), store).data
        empty = pillar_encode(pillarize(SparseOccupancyGrid(VOL)), store).data
        assert np.array_equal(f[0, 0], empty[0, 0])
        assert not np.array_equal(f[2, 3], empty[2, 3])

    def test_permutation_invariant(self):
        _, store = make()
        rng = np.random.default_rng(1)
        g = SparseOccupancyGrid(VOL, rng.integers(0, VOL.dims, (40, 3)))
        p = pillarize(g)
        perm = rng.permutation(len(p.coords))
        q = type(p)(p.shape, p.pillar_ids[perm], p.coords[perm])
        assert np.array_equal(pillar_encode(p, store).data, pillar_encode(q, store).data)


class TestUnetAndHeads:
    def test_shapes(self):
        planner, _ = make()
        out = planner(SparseOccupancyGrid(VOL, [(1, 1, 1), (5, 7, 3)]))
        assert out.bev.shape == (12, 12, BEV_DIM)
        assert len(out.spade) == 4
        assert all(g.shape == (144, 8) and b.shape == (144, 8) for g, b in out.spade)
        assert out.rough.shape == (4, 4, 4)

    def test_zero_input_zero_output(self):
        store = ParamStore()
        init_planner_params(store, small_cfg(), np.random.default_rng(0), zero_unet_out=True)
        out = bev_unet(Tensor(np.zeros((12, 12, 32))), store)
        assert np.array_equal(out.data, np.zeros((12, 12, BEV_DIM)))

    def test_deterministic(self):
        a, _ = make(3)
        b, _ = make(3)
        g = SparseOccupancyGrid(VOL, [(1, 1, 1), (5, 7, 3)])
        assert a(g).bev.data.tobytes() == b(g).bev.data.tobytes()

    def test_unet_rejects_bad_size(self):
        _, store = make()
        with pytest.raises(ValueError):
            bev_unet(Tensor(np.zeros((6, 12, 32))), store)

    def test_paper_scale_rough_shape(self):
        cfg = PlannerConfig(192, 192, 40, kernel_hidden=4, head_channels=2)
        store = ParamStore()
        init_planner_params(store, cfg, np.random.default_rng(0))
        spade, rough = heads(Tensor(np.zeros((192, 192, BEV_DIM))), store, cfg)
        assert rough.shape == (64, 64, 4) and len(spade) == 4

    @pytest.mark.parametrize("h,w,z", [(10, 12, 8), (12, 9, 8), (12, 12, 6)])
    def test_config_divisibility(self, h, w, z):
        with pytest.raises(ValueError):
            PlannerConfig(h, w, z)

    def test_volume_mismatch(self):
        planner, _ = make()
        with pytest.raises(ValueError):
            planner(SparseOccupancyGrid(VolumeSpec((0, 0, 0), (2.4, 1.2, 0.8), 0.1)))


class TestLoss:
    def test_pooling_is_or(self):
        gt = SparseOccupancyGrid(VOL, [(0, 0, 0), (11, 11, 7)])
        t = pool_rough_target(gt, (4, 4, 4))
        assert t.sum() == 2 and t[0, 0, 0] == 1 and t[3, 3, 3] == 1

    def test_zero_and_perfect(self):
        gt = SparseOccupancyGrid(VOL, [(0, 0, 0), (5, 5, 5)])
        assert float(planner_loss(Tensor(np.zeros((4, 4, 4))), gt).data) == pytest.approx(0.1 * np.log(2))
        t = pool_rough_target(gt, (4, 4, 4))
        assert float(planner_loss(Tensor(np.where(t > 0, 40.0, -40.0)), gt).data) < 1e-10

    def test_zero_weight_no_gradient(self):
        planner, store = make()
        s0 = SparseOccupancyGrid(VOL, [(1, 1, 1), (5, 7, 3)])
        store.zero_grad()
        planner_loss(planner(s0).rough, s0, beta_w=0.0).backward()
        for n in planner.param_names():
            g = store[n].grad
            assert g is None or not np.any(g)

    def test_zero_weight_matches_plain_kernel_loss(self):
        rng = np.random.default_rng(0)
        store = ParamStore()
        kern = WindowedKernel.create(store, KernelConfig(window=1, hidden=8, posenc_dims=12), rng)
        planner = Planner.create(store, small_cfg(), rng)
        s0 = SparseOccupancyGrid(VOL, [(3, 3, 3), (4, 3, 3)])
        gt = SparseOccupancyGrid(VOL, [(3, 3, 3), (4, 3, 3), (5, 3, 3)])
        cands = dilate(s0, 1)

        def grads(beta_w):
            store.zero_grad()
            ctx = planner(s0)
            loss, _ = gca_loss(kern, s0, gt, cands, ctx)
            if beta_w is not None:
                loss = T.add(loss, planner_loss(ctx.rough, gt, beta_w))
            loss.backward()
            return {n: store[n].grad.copy() for n in kern.param_names()}

        a, b = grads(None), grads(0.0)
        for n in a:
            assert a[n].tobytes() == b[n].tobytes()


class TestPca:
    def test_constant(self):
        img = bev_pca_dump(np.ones((6, 9, 5)))
        assert img.shape == (6, 9, 3) and len(np.unique(img)) == 1

    def test_deterministic_and_written(self, tmp_path):
        f = np.random.default_rng(0).normal(size=(8, 8, 16))
        a = bev_pca_dump(f, tmp_path / "bev.png")
        assert np.array_equal(a, bev_pca_dump(f.copy()))
        assert a.min() == 0 and a.max() == 255
        from PIL import Image

        assert np.array_equal(np.asarray(Image.open(tmp_path / "bev.png")), a)

    def test_shift_invariant(self):
        f = np.random.default_rng(1).normal(size=(8, 8, 16))
        assert np.array_equal(bev_pca_dump(f), bev_pca_dump(f + 3.0))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            bev_pca_dump(np.full((4, 4, 3), np.nan))
