"""Engine-level tests: op forwards against hand values, backwards against
central finite differences, replay/backward determinism, optimizer behavior."""

import numpy as np
import pytest

import drivestack.autodiff as ad


def fd_grad(value_fn, arr, step=1e-5):
    """Dense central-difference gradient of a scalar function of one array."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        up = value_fn()
        flat[i] = keep - step
        down = value_fn()
        flat[i] = keep
        gf[i] = (up - down) / (2 * step)
    return g


def rel_err(a, b):
    # 1e-6 floor: FD roundoff on exactly-zero gradients is ~1e-11, not error
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b) / denom))


class TestConv2d:
    def test_output_shape_stride4(self):
        g = ad.Graph(np.float64)
        x = g.tensor(np.zeros((128, 128, 3)))
        w = g.tensor(np.zeros((11, 11, 3, 24)), param=True)
        b = g.tensor(np.zeros(24), param=True)
        out = ad.conv2d(x, w, b, stride=4)
        assert out.shape == (30, 30, 24)

    def test_constant_input_unit_kernel(self):
        # 1x1 kernel of weight 2 on constant 3.0 image -> all 6.0
        g = ad.Graph(np.float64)
        x = g.tensor(np.full((5, 7, 1), 3.0))
        w = g.tensor(np.full((1, 1, 1, 1), 2.0), param=True)
        b = g.tensor(np.zeros(1), param=True)
        out = ad.conv2d(x, w, b, stride=1)
        assert out.shape == (5, 7, 1)
        assert np.all(out.data == 6.0)

    def test_matches_direct_convolution(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(9, 10, 2))
        w = rng.normal(size=(3, 3, 2, 4))
        b = rng.normal(size=4)
        g = ad.Graph(np.float64)
        out = ad.conv2d(g.tensor(x), g.tensor(w), g.tensor(b), stride=2).data
        # quadruple loop reference
        ho, wo = (9 - 3) // 2 + 1, (10 - 3) // 2 + 1
        ref = np.zeros((ho, wo, 4))
        for i in range(ho):
            for j in range(wo):
                patch = x[2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
                for co in range(4):
                    ref[i, j, co] = np.sum(patch * w[:, :, :, co]) + b[co]
        assert np.allclose(out, ref, atol=1e-12)

    @pytest.mark.parametrize("stride", [1, 2, 3])
    def test_gradients_fd(self, stride):
        rng = np.random.default_rng(7 + stride)
        xv = rng.normal(size=(8, 8, 2))
        wv = rng.normal(size=(3, 3, 2, 3)) * 0.5
        bv = rng.normal(size=3)
        cv = rng.normal(size=((8 - 3) // stride + 1, (8 - 3) // stride + 1, 3))

        def build():
            g = ad.Graph(np.float64)
            x = g.tensor(xv)
            w = g.tensor(wv, param=True)
            b = g.tensor(bv, param=True)
            out = ad.conv2d(x, w, b, stride=stride)
            # contract with a fixed random cotangent to get a scalar
            loss = ad.weighted_mae(ad.reshape(out, (out.data.size,)),
                                   cv.reshape(-1), np.ones(out.data.size))
            return g, x, w, b, loss

        g, x, w, b, loss = build()
        ad.backward(loss)
        for arr, tensor in [(xv, x), (wv, w), (bv, b)]:
            fd = fd_grad(lambda: float(build()[4].data), arr)
            assert rel_err(tensor.grad, fd) < 1e-4

    def test_batched_matches_single(self):
        rng = np.random.default_rng(11)
        xs = rng.normal(size=(4, 8, 8, 2))
        wv = rng.normal(size=(3, 3, 2, 3))
        bv = rng.normal(size=3)
        g = ad.Graph(np.float64)
        batched = ad.conv2d(g.tensor(xs), g.tensor(wv), g.tensor(bv), stride=2).data
        for n in range(4):
            g2 = ad.Graph(np.float64)
            single = ad.conv2d(g2.tensor(xs[n]), g2.tensor(wv), g2.tensor(bv), stride=2).data
            # BLAS blocking may differ between shapes; agreement to fp noise
            assert np.allclose(batched[n], single, rtol=1e-10, atol=1e-12)

    def test_kernel_larger_than_input_raises(self):
        g = ad.Graph(np.float64)
        with pytest.raises(ad.ShapeError):
            ad.conv2d(g.tensor(np.zeros((4, 4, 1))),
                      g.tensor(np.zeros((5, 5, 1, 1))), g.tensor(np.zeros(1)))

    def test_channel_mismatch_raises(self):
        g = ad.Graph(np.float64)
        with pytest.raises(ad.ShapeError):
            ad.conv2d(g.tensor(np.zeros((8, 8, 3))),
                      g.tensor(np.zeros((3, 3, 2, 4))), g.tensor(np.zeros(4)))


class TestAffineRelu:
    def test_affine_fd(self):
        rng = np.random.default_rng(5)
        xv = rng.normal(size=(4, 6))
        wv = rng.normal(size=(6, 3))
        bv = rng.normal(size=3)
        tv = rng.normal(size=(4, 3))

        def build():
            g = ad.Graph(np.float64)
            x = g.tensor(xv)
            w = g.tensor(wv, param=True)
            b = g.tensor(bv, param=True)
            out = ad.affine(x, w, b)
            loss = ad.weighted_mae(ad.reshape(out, (12,)), tv.reshape(-1), np.ones(12))
            return x, w, b, loss

        x, w, b, loss = build()
        ad.backward(loss)
        for arr, tensor in [(xv, x), (wv, w), (bv, b)]:
            fd = fd_grad(lambda: float(build()[3].data), arr)
            assert rel_err(tensor.grad, fd) < 1e-4

    def test_relu_kills_negative_grad(self):
        g = ad.Graph(np.float64)
        x = g.tensor(np.array([-2.0, -0.5, 0.5, 2.0]), param=True)
        out = ad.relu(x)
        loss = ad.weighted_mae(out, np.zeros(4), np.ones(4))
        ad.backward(loss)
        assert np.array_equal(out.data, [0.0, 0.0, 0.5, 2.0])
        assert x.grad[0] == 0.0 and x.grad[1] == 0.0
        assert x.grad[2] != 0.0 and x.grad[3] != 0.0

    def test_affine_shape_error_names_dims(self):
        g = ad.Graph(np.float64)
        with pytest.raises(ad.ShapeError, match="5"):
            ad.affine(g.tensor(np.zeros((2, 5))), g.tensor(np.zeros((4, 3))),
                      g.tensor(np.zeros(3)))


class TestLstmStep:
    def test_zero_params_halving(self):
        # all weights and bias zero: every gate is 0.5, candidate is 0
        #   c' = 0.5 * c,  h' = 0.5 * tanh(0.5 * c)
        rng = np.random.default_rng(2)
        cv = rng.normal(size=(3, 8))
        g = ad.Graph(np.float64)
        x = g.tensor(rng.normal(size=(3, 5)))
        h = g.tensor(rng.normal(size=(3, 8)))
        c = g.tensor(cv)
        wx = g.tensor(np.zeros((5, 32)), param=True)
        wh = g.tensor(np.zeros((8, 32)), param=True)
        b = g.tensor(np.zeros(32), param=True)
        hn, cn = ad.lstm_step(x, h, c, wx, wh, b)
        assert np.allclose(cn.data, 0.5 * cv, atol=1e-15)
        assert np.allclose(hn.data, 0.5 * np.tanh(0.5 * cv), atol=1e-15)

    def test_gradients_fd_through_two_steps(self):
        rng = np.random.default_rng(9)
        u, d, n = 4, 3, 2
        arrs = {
            "x0": rng.normal(size=(n, d)), "x1": rng.normal(size=(n, d)),
            "h0": rng.normal(size=(n, u)), "c0": rng.normal(size=(n, u)),
            "wx": rng.normal(size=(d, 4 * u)) * 0.5,
            "wh": rng.normal(size=(u, 4 * u)) * 0.5,
            "b": rng.normal(size=4 * u) * 0.5,
        }
        tv = rng.normal(size=n * u)

        def build():
            g = ad.Graph(np.float64)
            ts = {k: g.tensor(v, param=k in ("wx", "wh", "b")) for k, v in arrs.items()}
            h1, c1 = ad.lstm_step(ts["x0"], ts["h0"], ts["c0"], ts["wx"], ts["wh"], ts["b"])
            h2, _ = ad.lstm_step(ts["x1"], h1, c1, ts["wx"], ts["wh"], ts["b"])
            loss = ad.weighted_mae(ad.reshape(h2, (n * u,)), tv, np.ones(n * u))
            return ts, loss

        ts, loss = build()
        ad.backward(loss)
        for key in arrs:
            fd = fd_grad(lambda: float(build()[1].data), arrs[key])
            assert rel_err(ts[key].grad, fd) < 1e-4, key


class TestLosses:
    def test_cross_entropy_equal_logits_ln3(self):
        g = ad.Graph(np.float64)
        z = g.tensor(np.zeros(3), param=True)
        loss = ad.softmax_cross_entropy(z, np.array([0.0, 1.0, 0.0]))
        assert abs(float(loss.data) - np.log(3.0)) < 1e-12
        ad.backward(loss)
        p = np.full(3, 1.0 / 3.0)
        assert np.allclose(z.grad, p - np.array([0, 1, 0]), atol=1e-12)

    def test_cross_entropy_batch_mean_and_grad_fd(self):
        rng = np.random.default_rng(4)
        zv = rng.normal(size=(5, 3))
        tv = np.zeros((5, 3))
        tv[np.arange(5), rng.integers(0, 3, size=5)] = 1.0

        def build():
            g = ad.Graph(np.float64)
            z = g.tensor(zv, param=True)
            return z, ad.softmax_cross_entropy(z, tv)

        z, loss = build()
        ad.backward(loss)
        fd = fd_grad(lambda: float(build()[1].data), zv)
        assert rel_err(z.grad, fd) < 1e-4

    def test_cross_entropy_rejects_soft_targets(self):
        g = ad.Graph(np.float64)
        with pytest.raises(ValueError, match="one-hot"):
            ad.softmax_cross_entropy(g.tensor(np.zeros(3)), np.array([0.5, 0.5, 0.0]))

    def test_weighted_mae_hand_value(self):
        # errors [1, -2], weights [1, 2] -> (1*1 + 2*2) / 3 = 5/3
        g = ad.Graph(np.float64)
        p = g.tensor(np.array([2.0, 1.0]), param=True)
        loss = ad.weighted_mae(p, np.array([1.0, 3.0]), np.array([1.0, 2.0]))
        assert abs(float(loss.data) - 5.0 / 3.0) < 1e-15
        ad.backward(loss)
        assert np.allclose(p.grad, [1.0 / 3.0, -2.0 / 3.0], atol=1e-15)

    def test_weighted_mae_rejects_nonpositive_weights(self):
        g = ad.Graph(np.float64)
        with pytest.raises(ValueError, match="positive"):
            ad.weighted_mae(g.tensor(np.ones(2)), np.zeros(2), np.array([1.0, 0.0]))

    def test_weighted_equals_plain_under_unit_weights(self):
        rng = np.random.default_rng(8)
        p = rng.normal(size=32)
        t = rng.normal(size=32)
        g = ad.Graph(np.float64)
        loss = ad.weighted_mae(g.tensor(p), t, np.ones(32))
        assert abs(float(loss.data) - np.mean(np.abs(p - t))) < 1e-12


class TestGraphMechanics:
    def _small_net_loss(self, g, xv, wv, bv, tv):
        x = g.tensor(xv)
        w = g.tensor(wv, param=True, name="w")
        b = g.tensor(bv, param=True, name="b")
        h = ad.relu(ad.affine(x, w, b))
        return w, b, ad.weighted_mae(ad.reshape(h, (h.data.size,)),
                                     tv, np.ones(h.data.size))

    def test_replay_is_bit_identical(self):
        rng = np.random.default_rng(12)
        xv, wv, bv = rng.normal(size=(4, 5)), rng.normal(size=(5, 3)), rng.normal(size=3)
        tv = rng.normal(size=12)
        g = ad.Graph(np.float64)
        w, b, loss = self._small_net_loss(g, xv, wv, bv, tv)
        first = loss.data.copy()
        g.replay()
        assert loss.data.tobytes() == first.tobytes()

    def test_replay_after_param_update(self):
        rng = np.random.default_rng(13)
        xv, wv, bv = rng.normal(size=(4, 5)), rng.normal(size=(5, 3)), rng.normal(size=3)
        tv = rng.normal(size=12)
        g = ad.Graph(np.float64)
        w, b, loss = self._small_net_loss(g, xv, wv, bv, tv)
        w.data -= 0.1
        g.replay()
        g2 = ad.Graph(np.float64)
        _, _, loss2 = self._small_net_loss(g2, xv, wv - 0.1, bv, tv)
        assert loss.data.tobytes() == loss2.data.tobytes()

    def test_backward_twice_same_bytes(self):
        rng = np.random.default_rng(14)
        xv, wv, bv = rng.normal(size=(4, 5)), rng.normal(size=(5, 3)), rng.normal(size=3)
        tv = rng.normal(size=12)
        g = ad.Graph(np.float64)
        w, b, loss = self._small_net_loss(g, xv, wv, bv, tv)
        ad.backward(loss)
        gw = w.grad.tobytes()
        ad.backward(loss)
        assert w.grad.tobytes() == gw

    def test_unreachable_param_gets_zero_grad(self):
        g = ad.Graph(np.float64)
        w = g.tensor(np.ones((2, 2)), param=True)
        p = g.tensor(np.array([1.0, 2.0]), param=True)
        loss = ad.weighted_mae(p, np.zeros(2), np.ones(2))
        ad.backward(loss)
        assert np.array_equal(w.grad, np.zeros((2, 2)))
        assert np.any(p.grad != 0)

    def test_backward_rejects_nonscalar(self):
        g = ad.Graph(np.float64)
        v = g.tensor(np.ones(3))
        with pytest.raises(ad.ShapeError):
            ad.backward(v)

    def test_shared_param_grad_accumulates(self):
        # y = w*x applied twice in a chain: d/dw (w*w*x) = 2*w*x at w=3, x=1 -> 6
        g = ad.Graph(np.float64)
        w = g.tensor(np.array([[3.0]]), param=True)
        x = g.tensor(np.array([1.0]))
        zero_b = g.tensor(np.zeros(1))
        h = ad.affine(ad.affine(x, w, zero_b), w, zero_b)
        loss = ad.weighted_mae(h, np.zeros(1), np.ones(1))
        ad.backward(loss)
        assert abs(float(w.grad[0, 0]) - 6.0) < 1e-12

    def test_concat_slice_roundtrip_grads(self):
        rng = np.random.default_rng(15)
        av, bv = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
        tv = rng.normal(size=14)

        def build():
            g = ad.Graph(np.float64)
            a = g.tensor(av, param=True)
            b = g.tensor(bv, param=True)
            cat = ad.concat(a, b)
            loss = ad.weighted_mae(ad.reshape(cat, (14,)), tv, np.ones(14))
            return a, b, loss

        a, b, loss = build()
        ad.backward(loss)
        for arr, tensor in [(av, a), (bv, b)]:
            fd = fd_grad(lambda: float(build()[2].data), arr)
            assert rel_err(tensor.grad, fd) < 1e-4


class TestOptimizers:
    def test_sgd_matches_hand_update(self):
        p = {"w": np.array([1.0, -2.0])}
        ad.SGD(lr=0.1).step(p, {"w": np.array([0.5, 0.5])})
        assert np.allclose(p["w"], [0.95, -2.05], atol=1e-15)

    def test_adam_first_step_is_lr_sized(self):
        # bias correction makes the first step lr * g/|g| (for eps ~ 0)
        p = {"w": np.array([0.0])}
        ad.Adam(lr=0.01, eps=1e-12).step(p, {"w": np.array([42.0])})
        assert abs(p["w"][0] + 0.01) < 1e-9

    def test_adam_quadratic_bowl(self):
        # minimize 0.5*w^2 from w=1 with lr=0.05: inside 0.01 of 0 by 200 steps
        p = {"w": np.array([1.0])}
        opt = ad.Adam(lr=0.05)
        for _ in range(200):
            opt.step(p, {"w": p["w"].copy()})
        assert abs(p["w"][0]) < 0.01

    def test_adam_missing_grad_raises(self):
        with pytest.raises(ValueError, match="missing gradient"):
            ad.Adam(lr=0.1).step({"w": np.ones(2)}, {})

    def test_adam_state_roundtrip_resumes_identically(self):
        rng = np.random.default_rng(21)
        grads = [rng.normal(size=3) for _ in range(10)]
        p1 = {"w": np.zeros(3)}
        opt1 = ad.Adam(lr=0.02)
        for gr in grads:
            opt1.step(p1, {"w": gr})

        p2 = {"w": np.zeros(3)}
        opt2 = ad.Adam(lr=0.02)
        for gr in grads[:5]:
            opt2.step(p2, {"w": gr})
        state = {k: v.copy() for k, v in opt2.state_arrays().items()}
        opt3 = ad.Adam(lr=0.02)
        opt3.load_state_arrays(state)
        for gr in grads[5:]:
            opt3.step(p2, {"w": gr})
        assert p1["w"].tobytes() == p2["w"].tobytes()


class TestGradCheckHarness:
    def _quadratic_fns(self):
        a = np.array([[2.0, -1.0], [0.5, 3.0]])

        def value(params):
            w = params["w"]
            return float(0.5 * w @ a @ w)

        def grad(params):
            w = params["w"]
            return {"w": 0.5 * (a + a.T) @ w}

        return value, grad

    def test_passes_correct_gradient(self):
        value, grad = self._quadratic_fns()
        rep = ad.grad_check(value, grad, {"w": np.array([1.0, -2.0])}, tolerance=1e-4)
        assert rep.passed
        assert rep.max_rel_err < 1e-6

    def test_flags_corrupted_gradient(self):
        value, grad = self._quadratic_fns()

        def bad_grad(params):
            g = grad(params)
            g["w"] = -g["w"]  # sign flip
            return g

        rep = ad.grad_check(value, bad_grad, {"w": np.array([1.0, -2.0])}, tolerance=1e-4)
        assert not rep.passed

    def test_report_lines_render(self):
        value, grad = self._quadratic_fns()
        rep = ad.grad_check(value, grad, {"w": np.array([1.0, -2.0])})
        text = "\n".join(rep.lines())
        assert "overall" in text and "worst" in text
