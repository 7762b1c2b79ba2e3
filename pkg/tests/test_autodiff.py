import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capslam import autodiff as ad
from capslam.errors import CheckpointError, NonFiniteValue, NonScalarLoss, ShapeMismatch

TOL = 1e-4


def away_from_zero(rng, shape, lo=0.2, hi=2.0):
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


# (name, loss builder, input factory) -- losses reduce with a fixed random
# weighting so every output element contributes a distinct gradient
def _weighted(t, seed=99):
    w = np.random.default_rng(seed).uniform(0.5, 1.5, t.shape)
    return ad.tsum(ad.mul(t, w))


PRIMITIVES = {
    "add": (lambda a, b: _weighted(ad.add(a, b)), lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))]),
    "sub": (lambda a, b: _weighted(ad.sub(a, b)), lambda r: [r.normal(size=(3, 1)), r.normal(size=(3, 4))]),
    "mul": (lambda a, b: _weighted(ad.mul(a, b)), lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))]),
    "div": (lambda a, b: _weighted(ad.div(a, b)), lambda r: [r.normal(size=(2, 3)), away_from_zero(r, (2, 3))]),
    "neg": (lambda a: _weighted(ad.neg(a)), lambda r: [r.normal(size=(5,))]),
    "power": (lambda a: _weighted(ad.power(a, 3.0)), lambda r: [r.normal(size=(5,))]),
    "square": (lambda a: _weighted(ad.square(a)), lambda r: [r.normal(size=(2, 2))]),
    "sqrt": (lambda a: _weighted(ad.sqrt(a)), lambda r: [r.uniform(0.2, 2.0, (6,))]),
    "exp": (lambda a: _weighted(ad.exp(a)), lambda r: [r.normal(size=(6,))]),
    "log": (lambda a: _weighted(ad.log(a)), lambda r: [r.uniform(0.2, 2.0, (6,))]),
    "abs": (lambda a: _weighted(ad.abs(a)), lambda r: [away_from_zero(r, (6,))]),
    "sigmoid": (lambda a: _weighted(ad.sigmoid(a)), lambda r: [r.normal(size=(6,))]),
    "relu": (lambda a: _weighted(ad.relu(a)), lambda r: [away_from_zero(r, (6,))]),
    "sum_axis": (lambda a: _weighted(ad.tsum(a, axis=1)), lambda r: [r.normal(size=(3, 4))]),
    "mean": (lambda a: _weighted(ad.mean(a, axis=0, keepdims=True)), lambda r: [r.normal(size=(3, 4))]),
    "norm": (lambda a: _weighted(ad.norm(a, axis=-1)), lambda r: [r.normal(size=(3, 4))]),
    "softmax": (lambda a: _weighted(ad.softmax(a, axis=1)), lambda r: [r.normal(size=(2, 5))]),
    "reshape": (lambda a: _weighted(ad.reshape(a, (4, 3))), lambda r: [r.normal(size=(3, 4))]),
    "transpose": (lambda a: _weighted(ad.transpose(a, (1, 0, 2))), lambda r: [r.normal(size=(2, 3, 2))]),
    "getitem": (lambda a: _weighted(ad.getitem(a, (slice(None), [0, 2, 2]))), lambda r: [r.normal(size=(2, 4))]),
    "concat": (lambda a, b: _weighted(ad.concat([a, b], axis=1)), lambda r: [r.normal(size=(2, 2)), r.normal(size=(2, 3))]),
    "stack": (lambda a, b: _weighted(ad.stack([a, b], axis=0)), lambda r: [r.normal(size=(3,)), r.normal(size=(3,))]),
    "matmul": (lambda a, b: _weighted(ad.matmul(a, b)), lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
    "batched_matmul": (lambda a, b: _weighted(ad.matmul(a, b)),
                       lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 2))]),
    "conv2d": (lambda x, w, b: _weighted(ad.conv2d(x, w, b, stride=1, padding=1)),
               lambda r: [r.normal(size=(2, 2, 5, 5)), r.normal(size=(3, 2, 3, 3)), r.normal(size=(3,))]),
    "conv2d_stride2": (lambda x, w, b: _weighted(ad.conv2d(x, w, b, stride=2, padding=0)),
                       lambda r: [r.normal(size=(1, 2, 7, 7)), r.normal(size=(2, 2, 3, 3)), r.normal(size=(2,))]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    fn, make = PRIMITIVES[name]
    res = ad.gradient_check(fn, make(np.random.default_rng(7)), h=1e-5)
    assert res.max_rel_error < TOL


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_composite_gradients_property(seed):
    r = np.random.default_rng(seed)
    fn = lambda a, b: ad.mean(ad.square(ad.sigmoid(ad.matmul(a, b)) - 0.3)) + ad.tsum(ad.softmax(a, axis=0) * 2.0)
    res = ad.gradient_check(fn, [r.normal(size=(3, 4)), r.normal(size=(4, 2))])
    assert res.max_rel_error < TOL


def _coords_off_grid(rng, shape, lo, hi):
    c = rng.uniform(lo, hi, shape)
    frac = c - np.floor(c)
    return np.where(np.abs(frac - 0.5) > 0.4, np.floor(c) + 0.5, c)


def test_bilinear_image_gradient():
    r = np.random.default_rng(3)
    img = r.uniform(size=(1, 2, 6, 7))
    x = _coords_off_grid(r, (1, 4, 5), 0.2, 5.8)
    y = _coords_off_grid(r, (1, 4, 5), 0.2, 4.8)
    res = ad.gradient_check(lambda im: _weighted(ad.bilinear_sample_diff(im, x, y)), [img])
    assert res.max_rel_error < TOL


def test_bilinear_coordinate_gradient():
    # interior, at least 0.1 px from integer grid lines so +-h never crosses one
    r = np.random.default_rng(4)
    img = r.uniform(size=(1, 1, 8, 9))
    x = _coords_off_grid(r, (1, 5, 5), 0.2, 7.8)
    y = _coords_off_grid(r, (1, 5, 5), 0.2, 6.8)
    res = ad.gradient_check(lambda xx, yy: _weighted(ad.bilinear_sample_diff(img, xx, yy)), [x, y])
    assert res.max_rel_error < 1e-3


class TestExamples:
    def test_matmul_identity(self):
        x = np.array([[1.0], [2.0], [3.0]])
        np.testing.assert_array_equal(ad.matmul(np.eye(3), x).data, x)

    def test_uniform_softmax(self):
        np.testing.assert_array_equal(ad.softmax(np.zeros(4), axis=0).data, [0.25] * 4)

    def test_conv_mean_kernel(self):
        x = np.full((1, 1, 6, 6), 0.7)
        w = np.full((1, 1, 3, 3), 1.0 / 9.0)
        out = ad.conv2d(x, w, None, stride=1, padding=1).data
        np.testing.assert_allclose(out[0, 0, 1:-1, 1:-1], 0.7, atol=1e-15)

    def test_sum_of_squares(self):
        x = ad.Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.tsum(ad.mul(x, x))
        g = ad.backward(tape, loss)
        np.testing.assert_array_equal(g[x], [2.0, 4.0, 6.0])
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_sigmoid_at_zero(self):
        x = ad.Tensor(0.0, requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.sigmoid(x)
        assert ad.backward(tape, loss)[x] == 0.25

    def test_non_scalar_loss(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        with ad.Tape() as tape:
            y = ad.mul(x, 2.0)
        with pytest.raises(NonScalarLoss):
            ad.backward(tape, y)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.add(np.ones(3), np.ones(4))
        with pytest.raises(ShapeMismatch):
            ad.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_non_finite(self):
        with pytest.raises(NonFiniteValue):
            ad.log(np.array([0.0]))

    def test_three_layer_network_fd(self):
        # 20 parameters: 2->3 (9), 3->2 (8), 2->1 (3)
        r = np.random.default_rng(0)
        X = r.normal(size=(6, 2))
        params = [r.normal(size=(2, 3)), r.normal(size=(3,)), r.normal(size=(3, 2)), r.normal(size=(2,)),
                  r.normal(size=(2, 1)), r.normal(size=(1,))]
        assert sum(p.size for p in params) == 20

        def net(w1, b1, w2, b2, w3, b3):
            h = ad.sigmoid(ad.add(ad.matmul(X, w1), b1))
            h = ad.sigmoid(ad.add(ad.matmul(h, w2), b2))
            return ad.mean(ad.square(ad.add(ad.matmul(h, w3), b3)))

        assert ad.gradient_check(net, params).max_rel_error < TOL

    def test_backward_idempotent(self):
        r = np.random.default_rng(1)
        a = ad.Tensor(r.normal(size=(3, 3)), requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.tsum(ad.sigmoid(ad.matmul(a, a)))
        g1 = ad.backward(tape, loss)[a].copy()
        a.zero_grad()
        g2 = ad.backward(tape, loss)[a]
        assert np.array_equal(g1, g2) and np.array_equal(a.grad, g1)

    def test_unreached_leaf_gets_zero(self):
        a = ad.Tensor(np.ones(2), requires_grad=True)
        b = ad.Tensor(np.ones(2), requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.tsum(a)
            ad.mul(b, 3.0)
        g = ad.backward(tape, loss)
        np.testing.assert_array_equal(g[b], [0.0, 0.0])


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": np.array([1.0, -2.0])}
        out = ad.sgd_adam_step(p, {"w": np.zeros(2)}, ad.AdamState(), ad.AdamConfig(lr=0.1))
        np.testing.assert_array_equal(out["w"], p["w"])

    def test_first_step_magnitude(self):
        out = ad.sgd_adam_step({"w": np.array(0.0)}, {"w": np.array(1.0)}, ad.AdamState(), ad.AdamConfig(lr=0.1))
        # m_hat = 1, v_hat = 1: step = lr / (1 + eps)
        assert out["w"] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)

    def test_hand_computed_second_step(self):
        hp = ad.AdamConfig(lr=0.1)
        st_ = ad.AdamState()
        p = ad.sgd_adam_step({"w": np.array(0.0)}, {"w": np.array(1.0)}, st_, hp)
        p = ad.sgd_adam_step(p, {"w": np.array(-0.5)}, st_, hp)
        m = 0.9 * 0.1 + 0.1 * -0.5
        v = 0.999 * 0.001 + 0.001 * 0.25
        step = 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
        assert p["w"] == pytest.approx(-0.1 / (1 + 1e-8) - step, abs=1e-15)

    def test_deterministic(self):
        r = np.random.default_rng(2)
        p = {"a": r.normal(size=3), "b": r.normal(size=(2, 2))}
        g = {"a": r.normal(size=3), "b": r.normal(size=(2, 2))}
        o1 = ad.sgd_adam_step(dict(p), g, ad.AdamState())
        o2 = ad.sgd_adam_step(dict(reversed(list(p.items()))), g, ad.AdamState())
        for k in p:
            assert np.array_equal(o1[k], o2[k])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.sgd_adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, ad.AdamState())


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        r = np.random.default_rng(5)
        params = {"w": r.normal(size=(3, 4)), "b": np.array([np.pi, -0.0, 1e-300]), "s": np.array(2.5)}
        path = tmp_path / "ck.json"
        ad.save_checkpoint(path, params, {"note": "x"})
        back, meta = ad.load_checkpoint(path)
        assert meta == {"note": "x"}
        for k in params:
            assert back[k].shape == params[k].shape
            assert back[k].tobytes() == np.asarray(params[k], dtype="<f8").tobytes()

    def test_bad_file(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        with pytest.raises(CheckpointError):
            ad.load_checkpoint(p)
        p.write_text('{"format": "other", "version": 1}')
        with pytest.raises(CheckpointError):
            ad.load_checkpoint(p)


def test_init_uniform_bounds():
    w = ad.init_uniform(np.random.default_rng(0), (50, 40), fan_in=16)
    assert np.abs(w).max() <= 0.25 and np.abs(w).max() > 0.24
