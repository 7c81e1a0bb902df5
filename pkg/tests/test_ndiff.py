import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcases import GRAPHS, OPS, draw
from voxforge.ndiff import (ParamStore, ShapeError, Tensor, adam_step, clip_by_global_norm, directional_check,
                            grad_check, load_checkpoint, posenc3d, save_checkpoint)
from voxforge.ndiff import ops as T


class TestOps:
    def test_bce_at_zero(self):
        assert float(T.bce_with_logits(Tensor([0.0]), [1.0]).data) == pytest.approx(np.log(2), abs=1e-12)

    def test_bce_stable_for_large_logits(self):
        v = float(T.bce_with_logits(Tensor([800.0, -800.0]), [1.0, 0.0]).data)
        assert v == 0.0

    def test_relu_negative(self):
        x = Tensor([-3.0], requires_grad=True)
        y = T.relu(x)
        T.sum(y).backward()
        assert y.data[0] == 0.0 and x.grad[0] == 0.0

    def test_affine_derivative(self):
        for v in (-2.0, 0.3, 11.0):
            x = Tensor([[v]], requires_grad=True)
            T.sum(T.affine(x, Tensor([[2.0]]), Tensor([1.0]))).backward()
            assert x.grad[0, 0] == 2.0

    def test_bce_gradient_analytic(self):
        for target in (0.0, 1.0):
            x = Tensor([0.0], requires_grad=True)
            T.bce_with_logits(x, [target]).backward()
            assert x.grad[0] == pytest.approx(0.5 - target)
            assert grad_check(lambda t: T.bce_with_logits(t, [target]), [np.zeros(1)]) < 1e-8

    def test_constant_graph(self):
        assert grad_check(lambda x: T.sum(T.scale(x, 0.0)), [np.ones(3)]) == 0.0

    def test_shape_errors_name_the_op(self):
        with pytest.raises(ShapeError, match="matmul"):
            T.matmul(np.ones((2, 3)), np.ones((2, 3)))
        with pytest.raises(ShapeError, match="spade_modulate"):
            T.spade_modulate(np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 3)))
        with pytest.raises(ShapeError, match="conv2d"):
            T.conv2d(np.ones((4, 4, 2)), np.ones((3, 3, 3, 1)), np.ones(1))

    def test_spade_identity_and_degenerate(self):
        h = np.array([[1.0, 2.0, 4.0]])
        out = T.spade_modulate(h, np.ones((1, 3)), np.zeros((1, 3))).data
        np.testing.assert_allclose(out, T.normalize(h).data)
        beta = np.array([[0.5, -1.0, 2.0]])
        assert np.array_equal(T.spade_modulate(h, np.zeros((1, 3)), beta).data, beta)
        const = T.spade_modulate(np.full((1, 3), 7.0), np.ones((1, 3)), beta).data
        np.testing.assert_allclose(const, beta, atol=1e-12)

    def test_segment_max_empty_segment_is_zero(self):
        out = T.segment_max(np.array([[1.0], [3.0]]), [0, 0], 2).data
        assert out.tolist() == [[3.0], [0.0]]

    def test_conv_reflect_padding(self):
        x = np.arange(12.0).reshape(3, 4, 1)
        w = np.zeros((3, 3, 1, 1))
        w[0, 1, 0, 0] = 1.0  # picks the row above
        out = T.conv2d(x, w, np.zeros(1)).data[..., 0]
        assert out[0].tolist() == x[1, :, 0].tolist()
        assert out[1].tolist() == x[0, :, 0].tolist()

    def test_backward_deterministic(self):
        rng = np.random.default_rng(2)
        fn, ts = GRAPHS["kernel"](rng)
        for t in ts:
            t.requires_grad = True
        fn(*ts).backward()
        g1 = [t.grad.copy() for t in ts]
        for t in ts:
            t.grad = None
        fn(*ts).backward()
        for a, t in zip(g1, ts):
            assert np.array_equal(a, t.grad)


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(20):
        fn, inputs = draw(OPS[name], rng)
        assert grad_check(fn, inputs) <= 1e-4


@pytest.mark.parametrize("name", sorted(GRAPHS))
def test_composed_gradients(name):
    rng = np.random.default_rng(7)
    fn, inputs = draw(GRAPHS[name], rng)
    if name == "planner":
        err = max(grad_check(fn, inputs, max_elements=40, rng=rng), directional_check(fn, inputs, rng=rng))
    else:
        err = grad_check(fn, inputs)
    assert err <= 1e-4


def test_grad_check_validates_eps():
    with pytest.raises(ValueError):
        grad_check(lambda x: T.sum(x), [np.ones(2)], eps=0.1)


def test_grad_check_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        grad_check(lambda x: T.sum(T.scale(x, np.inf)), [np.ones(2)])


def test_grad_check_catches_wrong_gradient():
    def bad(x):
        return T._node(x.data.sum() ** 2, (x,), lambda g: (np.ones_like(x.data) * g,))
    assert grad_check(bad, [np.ones(3)]) > 0.5


class TestAdam:
    def _store(self, value):
        s = ParamStore()
        s.add("p", np.atleast_1d(np.asarray(value, dtype=float)))
        return s

    def test_first_step(self):
        s = self._store(0.0)
        adam_step(s, {"p": np.array([1.0])}, lr=5e-4, clip_norm=None)
        assert s["p"].data[0] == pytest.approx(-5e-4 / (1 + 1e-8), rel=1e-12)
        assert s.step_count == 1

    def test_clip_scales_before_update(self):
        g = np.array([1.2, 1.6])  # norm 2
        clipped, norm = clip_by_global_norm({"p": g}, 0.5)
        assert norm == pytest.approx(2.0)
        np.testing.assert_allclose(clipped["p"], g * 0.25)
        s = self._store([0.0, 0.0])
        adam_step(s, {"p": g}, clip_norm=0.5)
        np.testing.assert_allclose(s.adam_m["p"], 0.1 * g * 0.25)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.floats(1e-3, 10))
    def test_clip_bound(self, vals, clip):
        clipped, _ = clip_by_global_norm({"a": np.array(vals)}, clip)
        assert np.linalg.norm(clipped["a"]) <= clip + 1e-12

    def test_zero_gradient(self):
        s = self._store([1.0, 2.0])
        adam_step(s, {"p": np.array([1.0, -1.0])})
        before = s["p"].data.copy()
        m, v = s.adam_m["p"].copy(), s.adam_v["p"].copy()
        adam_step(s, {"p": np.zeros(2)})
        np.testing.assert_allclose(s.adam_m["p"], 0.9 * m)
        np.testing.assert_allclose(s.adam_v["p"], 0.999 * v)
        # the bias-corrected first moment still moves the parameter; moments only decay
        assert np.all(np.sign(s["p"].data - before) == -np.sign([1.0, -1.0]))

    def test_zero_gradient_from_fresh_state(self):
        s = self._store([1.0, 2.0])
        adam_step(s, {"p": np.zeros(2)})
        assert s["p"].data.tolist() == [1.0, 2.0]

    def test_nan_gradient_leaves_params(self):
        s = self._store([1.0])
        with pytest.raises(FloatingPointError):
            adam_step(s, {"p": np.array([np.nan])})
        assert s["p"].data[0] == 1.0 and s.step_count == 0

    def test_deterministic(self):
        a, b = self._store([0.3, -0.2]), self._store([0.3, -0.2])
        for k in range(5):
            g = np.array([np.sin(k), np.cos(k)])
            adam_step(a, {"p": g})
            adam_step(b, {"p": g.copy()})
        assert a["p"].data.tobytes() == b["p"].data.tobytes()


def test_checkpoint_round_trip():
    rng = np.random.default_rng(0)
    s = ParamStore()
    s.add("b", rng.normal(size=(3, 2)))
    s.add("a", rng.normal(size=4))
    adam_step(s, {"a": rng.normal(size=4), "b": rng.normal(size=(3, 2))})
    buf = io.BytesIO()
    save_checkpoint(buf, s, {"note": 1})
    raw = buf.getvalue()
    assert raw[:4] == b"NDF1"
    buf.seek(0)
    s2, extra = load_checkpoint(buf)
    assert extra == {"note": 1} and s2.step_count == 1 and s2.names() == ["a", "b"]
    for n in s.names():
        assert s2[n].data.tobytes() == s[n].data.tobytes()
        assert s2.adam_m[n].tobytes() == s.adam_m[n].tobytes()
        assert s2.adam_v[n].tobytes() == s.adam_v[n].tobytes()
    buf2 = io.BytesIO()
    save_checkpoint(buf2, s2, extra)
    assert buf2.getvalue() == raw


class TestPosenc:
    def test_zero_coordinate(self):
        # normalized coordinate 0 corresponds to c = -0.5
        e = posenc3d(np.array([[-0.5, -0.5, -0.5]]), 12, (4, 4, 4))[0]
        assert np.allclose(e[0::2], 0.0) and np.allclose(e[1::2], 1.0)

    def test_length(self):
        assert posenc3d(np.zeros((2, 3), int), 126, (8, 8, 8)).shape == (2, 126)

    def test_divisibility(self):
        with pytest.raises(ValueError):
            posenc3d(np.zeros((1, 3)), 128, (4, 4, 4))

    def test_injective_on_sample(self):
        rng = np.random.default_rng(0)
        cells = np.unique(rng.integers(0, 192, (2000, 3)), axis=0)
        enc = posenc3d(cells, 126, (192, 192, 192))
        assert len(np.unique(np.round(enc, 12), axis=0)) == len(cells)
