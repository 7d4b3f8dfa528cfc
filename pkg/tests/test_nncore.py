import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from policygen.nncore import (
    Adam,
    DenseLayer,
    FlatParams,
    Mlp,
    backward,
    forward,
    gaussian_sample,
    init_params,
    make_rng,
    optimizer_step,
    softmax,
    split_rng,
)


def dense(w, b, act="identity"):
    return DenseLayer(np.asarray(w, dtype=float), np.asarray(b, dtype=float), act)


class TestForward:
    def test_zero_network(self):
        net = Mlp([dense(np.zeros((4, 3)), np.zeros(4), "relu"), dense(np.zeros((2, 4)), np.zeros(2))])
        out, _ = forward(net, [1.0, -2.0, 3.0])
        assert np.array_equal(out, np.zeros(2))

    def test_identity_layer(self):
        net = Mlp([dense(np.eye(3), np.zeros(3))])
        x = np.array([0.3, -1.2, 4.0])
        out, _ = forward(net, x)
        assert np.array_equal(out, x)

    def test_golden_two_layer(self):
        # hidden pre-activations: (1-2+0, 0.5+1+1.5-1) = (-1, 2) -> relu (0, 2)
        # output: (2*0 + 1*2 + 0.5, -1*0 + 3*2 + 0) = (2.5, 6)
        net = Mlp([
            dense([[1, -1, 0], [0.5, 0.5, 0.5]], [0, -1], "relu"),
            dense([[2, 1], [-1, 3]], [0.5, 0]),
        ])
        out, _ = forward(net, [1.0, 2.0, 3.0])
        np.testing.assert_allclose(out, [2.5, 6.0], rtol=0, atol=1e-15)

    def test_dimension_mismatch(self):
        net = Mlp([dense(np.eye(3), np.zeros(3))])
        with pytest.raises(ValueError):
            forward(net, [1.0, 2.0])

    def test_chain_check(self):
        with pytest.raises(ValueError):
            Mlp([dense(np.zeros((4, 3)), np.zeros(4)), dense(np.zeros((2, 5)), np.zeros(2))])


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax(np.zeros(100)), 0.01, rtol=0, atol=1e-15)

    def test_no_overflow(self):
        p = softmax([1000.0, 0.0])
        assert np.isfinite(p).all()
        assert p[0] == pytest.approx(1.0) and p[1] < 1e-300

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(1, 50), elements=st.floats(-50, 50)),
           st.floats(-100, 100))
    def test_sum_and_shift_invariance(self, z, c):
        p = softmax(z)
        assert abs(p.sum() - 1.0) <= 1e-12
        assert (p > 0).all()
        np.testing.assert_allclose(softmax(z + c), p, rtol=0, atol=1e-12)

    def test_nan(self):
        with pytest.raises(ValueError):
            softmax([0.0, np.nan])


def _numeric_grad(net, x, upstream, h=1e-5):
    """Central differences of sum(upstream * net(x)) over every weight and bias."""
    grads = []
    for layer in net.layers:
        pair = []
        for arr in (layer.weights, layer.biases):
            g = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                fp = float(np.sum(upstream * forward(net, x)[0]))
                arr[idx] = old - h
                fm = float(np.sum(upstream * forward(net, x)[0]))
                arr[idx] = old
                g[idx] = (fp - fm) / (2 * h)
            pair.append(g)
        grads.append(tuple(pair))
    return grads


class TestBackward:
    def test_zero_upstream(self):
        net = init_params(make_rng(0), [6, 8, 5])
        _, cache = forward(net, np.ones(6))
        grads, gin = backward(net, cache, np.zeros(5))
        assert all(not dW.any() and not db.any() for dW, db in grads)
        assert not gin.any()

    def test_identity_outer_product(self):
        net = Mlp([dense(np.eye(3), np.zeros(3))])
        x = np.array([1.0, -2.0, 0.5])
        g = np.array([0.1, 0.2, -0.3])
        _, cache = forward(net, x)
        (dW, db), gin = backward(net, cache, g)[0][0], backward(net, cache, g)[1]
        np.testing.assert_array_equal(dW, np.outer(g, x))
        np.testing.assert_array_equal(db, g)
        np.testing.assert_array_equal(gin, g)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_finite_differences(self, seed):
        rng = make_rng(seed)
        net = init_params(rng, [6, 8, 5])
        # move biases off zero so relu kinks are away from the evaluation point
        for layer in net.layers:
            layer.biases[...] = rng.normal(size=layer.biases.shape) * 0.3
        x = rng.normal(size=(4, 6))
        up = rng.normal(size=(4, 5))
        _, cache = forward(net, x)
        analytic, gin = backward(net, cache, up)
        numeric = _numeric_grad(net, x, up)
        a = np.concatenate([np.concatenate([dW.ravel(), db]) for dW, db in analytic])
        n = np.concatenate([np.concatenate([dW.ravel(), db]) for dW, db in numeric])
        assert a.size >= 100
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
        assert rel.max() <= 1e-4

        # input gradient too
        h = 1e-5
        num_in = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            num_in[idx] = (np.sum(up * forward(net, xp)[0]) - np.sum(up * forward(net, xm)[0])) / (2 * h)
        np.testing.assert_allclose(gin, num_in, rtol=1e-4, atol=1e-8)

    def test_stale_cache(self):
        a = init_params(make_rng(0), [3, 4, 2])
        b = init_params(make_rng(0), [3, 4, 2])
        _, cache = forward(a, np.ones(3))
        with pytest.raises(ValueError):
            backward(b, cache, np.ones(2))


class TestAdam:
    def test_zero_gradient_no_move(self):
        p = np.array([1.0, -2.0, 3.0])
        opt = Adam(3)
        optimizer_step(opt, p, np.zeros(3))
        np.testing.assert_array_equal(p, [1.0, -2.0, 3.0])

    def test_first_step_magnitude(self):
        p = np.zeros(4)
        g = np.array([0.5, -3.0, 1e-3, -1e-2])
        opt = Adam(4, lr=1e-3)
        opt.step(p, g)
        np.testing.assert_allclose(p, -1e-3 * np.sign(g), rtol=1e-4)

    def test_determinism(self):
        rng = make_rng(5)
        grads = [rng.normal(size=10) for _ in range(20)]
        p1, p2 = np.ones(10), np.ones(10)
        o1, o2 = Adam(10), Adam(10)
        for g in grads:
            o1.step(p1, g)
            o2.step(p2, g.copy())
        assert p1.tobytes() == p2.tobytes()

    def test_frozen_entries(self):
        p = np.ones(3)
        opt = Adam(3, mask=np.array([True, False, True]))
        for _ in range(5):
            opt.step(p, np.ones(3))
        assert p[1] == 1.0 and p[0] < 1.0

    def test_non_finite_names_block(self):
        store = FlatParams()
        store.add("cell0.layer0.weights", (2, 2))
        store.add("embedding", (1, 3))
        store.finalize()
        g = np.zeros(7)
        g[5] = np.nan
        with pytest.raises(FloatingPointError, match="embedding"):
            Adam(7).step(store.data, g, store)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            Adam(3).step(np.zeros(3), np.zeros(4))

    def test_state_round_trip(self):
        opt = Adam(3)
        opt.step(np.zeros(3), np.ones(3))
        other = Adam(3)
        other.load_state_dict(opt.state_dict())
        assert other.t == 1 and np.array_equal(other.m, opt.m)


class TestRandom:
    def test_reproducible(self):
        a = gaussian_sample(make_rng(11), 50)
        b = gaussian_sample(make_rng(11), 50)
        assert a.tobytes() == b.tobytes()

    def test_moments(self):
        x = gaussian_sample(make_rng(2024), 10**6)
        assert abs(x.mean()) < 0.01
        assert abs(x.var() - 1.0) < 0.01

    def test_seeds_differ(self):
        assert not np.array_equal(gaussian_sample(make_rng(1), 20), gaussian_sample(make_rng(2), 20))

    def test_split_streams_differ(self):
        r1, r2 = split_rng(7, 2)
        assert not np.array_equal(r1.standard_normal(10), r2.standard_normal(10))


class TestInit:
    def test_relu_variance(self):
        net = init_params(make_rng(0), [200, 128, 10])
        w = net.layers[0].weights
        assert w.size >= 10**4
        assert w.var() == pytest.approx(2 / 200, rel=0.05)
        assert net.layers[1].weights.var() == pytest.approx(1 / 128, rel=0.2)

    def test_biases_zero(self):
        net = init_params(make_rng(0), [5, 7, 3])
        assert all(not layer.biases.any() for layer in net.layers)

    def test_same_seed(self):
        a = init_params(make_rng(9), [5, 7, 3])
        b = init_params(make_rng(9), [5, 7, 3])
        assert all(np.array_equal(x.weights, y.weights) for x, y in zip(a.layers, b.layers))

    def test_bad_sizes(self):
        with pytest.raises(ValueError):
            init_params(make_rng(0), [5, 0, 3])
