import numpy as np
import pytest

from polarcod import tensor as T
from polarcod.gradcheck import check_grad, directional_check

from oracles import avg_pool_loops, bilinear_loops, conv2d_loops, max_pool_loops


def rand(shape, seed=0, scale=1.0):
    return scale * np.random.default_rng(seed).standard_normal(shape)


class TestConv2d:
    def test_identity_1x1(self):
        x = T.Tensor(rand((2, 3, 5, 5), 1))
        w = T.Tensor(np.eye(3).reshape(3, 3, 1, 1))
        b = T.Tensor(np.zeros(3))
        out = T.conv2d(x, w, b, stride=1, padding=0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_box_kernel_on_constant(self):
        x = T.Tensor(np.full((1, 1, 6, 6), 0.7))
        w = T.Tensor(np.full((1, 1, 3, 3), 1.0 / 9.0))
        out = T.conv2d(x, w, None, stride=1, padding=1)
        np.testing.assert_allclose(out.data[0, 0, 1:-1, 1:-1], 0.7, atol=1e-15)

    def test_matches_loop_oracle(self):
        x = rand((2, 3, 5, 5), 2)
        w = rand((4, 3, 3, 3), 3)
        b = rand((4,), 4)
        got = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=1, padding=1).data
        want = conv2d_loops(x, w, b, stride=1, padding=1)
        np.testing.assert_allclose(got, want, atol=1e-12)

    @pytest.mark.parametrize("stride,padding,dilation", [(1, 0, 1), (2, 1, 1), (1, 2, 2), (2, 2, 1)])
    def test_matches_loop_oracle_strided(self, stride, padding, dilation):
        x = rand((1, 2, 8, 7), 5)
        w = rand((3, 2, 3, 3), 6)
        got = T.conv2d(T.Tensor(x), T.Tensor(w), None, stride, padding, dilation).data
        want = conv2d_loops(x, w, None, stride=stride, padding=padding, dilation=dilation)
        assert got.shape == want.shape
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_channel_mismatch_raises(self):
        x = T.Tensor(rand((1, 3, 4, 4)))
        w = T.Tensor(rand((2, 4, 3, 3)))
        with pytest.raises(ValueError, match="channels"):
            T.conv2d(x, w)

    def test_gradients(self):
        x = T.Tensor(rand((1, 2, 5, 5), 7), requires_grad=True)
        w = T.Tensor(rand((3, 2, 3, 3), 8), requires_grad=True)
        b = T.Tensor(rand((3,), 9), requires_grad=True)

        def loss():
            y = T.conv2d(x, w, b, stride=2, padding=1)
            return T.reduce_sum(T.mul(y, y))

        for r in check_grad(loss, {"x": x, "w": w, "b": b}):
            assert r.passed, r


class TestElementwiseAndActivations:
    def test_sigmoid_at_zero(self):
        out = T.sigmoid(T.Tensor(np.zeros((1, 1, 3, 3))))
        np.testing.assert_array_equal(out.data, 0.5)

    def test_mul_add_identity(self):
        a = rand((2, 3, 4, 4), 10)
        out = T.add(T.mul(T.Tensor(a), T.Tensor(np.ones_like(a))), T.Tensor(np.zeros_like(a)))
        np.testing.assert_array_equal(out.data, a)

    def test_broadcast_grad_reduction(self):
        a = T.Tensor(rand((2, 4, 3, 3), 11), requires_grad=True)
        b = T.Tensor(rand((1, 4, 1, 1), 12), requires_grad=True)

        def loss():
            return T.reduce_sum(T.mul(T.add(a, b), T.add(a, b)))

        for r in check_grad(loss, {"a": a, "b": b}):
            assert r.passed, r

    def test_non_broadcastable_raises(self):
        with pytest.raises(ValueError, match="broadcastable"):
            T.add(T.Tensor(np.zeros((1, 2, 3, 3))), T.Tensor(np.zeros((1, 3, 3, 2))))

    def test_relu_sigmoid_grads(self):
        x = T.Tensor(rand((2, 2, 4, 4), 13) + 0.3, requires_grad=True)

        def loss():
            return T.reduce_sum(T.mul(T.relu(x), T.sigmoid(x)))

        for r in check_grad(loss, {"x": x}):
            assert r.passed, r


class TestBatchNorm:
    def _stats_buffers(self, c):
        return np.zeros(c), np.ones(c)

    def test_training_normalizes(self):
        x = rand((4, 3, 8, 8), 14, scale=3.0) + 5.0
        rm, rv = self._stats_buffers(3)
        scale = T.Tensor(np.ones(3))
        shift = T.Tensor(np.zeros(3))
        out = T.batch_norm(T.Tensor(x), scale, shift, rm, rv, training=True)
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-10)

    def test_running_stats_update(self):
        x = rand((4, 2, 4, 4), 15)
        rm, rv = self._stats_buffers(2)
        T.batch_norm(T.Tensor(x), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), rm, rv, training=True)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), atol=1e-12)
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)), atol=1e-12)

    @pytest.mark.parametrize("training", [True, False])
    def test_gradients(self, training):
        x = T.Tensor(rand((3, 2, 4, 4), 16), requires_grad=True)
        scale = T.Tensor(1.0 + 0.1 * rand((2,), 17), requires_grad=True)
        shift = T.Tensor(0.1 * rand((2,), 18), requires_grad=True)
        rm, rv = 0.2 * rand((2,), 19), 1.0 + 0.1 * np.abs(rand((2,), 20))

        def loss():
            y = T.batch_norm(x, scale, shift, rm.copy(), rv.copy(), training=training)
            return T.reduce_sum(T.mul(y, y))

        for r in check_grad(loss, {"x": x, "scale": scale, "shift": shift}):
            assert r.passed, r


class TestPooling:
    def test_max_pool_constant(self):
        x = T.Tensor(np.full((1, 2, 6, 6), 1.3))
        out = T.max_pool2d(x, window=2, stride=2)
        np.testing.assert_array_equal(out.data, np.full((1, 2, 3, 3), 1.3))

    def test_global_avg(self):
        x = T.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        out = T.global_avg_pool(x)
        assert out.data.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 2.5

    def test_avg_pool_matches_loop_oracle(self):
        x = rand((1, 1, 8, 8), 21)
        got = T.avg_pool2d(T.Tensor(x), window=3, stride=1).data
        np.testing.assert_allclose(got, avg_pool_loops(x, 3, 1), atol=1e-12)

    def test_padded_pools_match_loop_oracle(self):
        x = rand((2, 2, 7, 7), 22)
        np.testing.assert_allclose(T.avg_pool2d(T.Tensor(x), 3, 1, padding=1).data,
                                   avg_pool_loops(x, 3, 1, padding=1), atol=1e-12)
        np.testing.assert_allclose(T.max_pool2d(T.Tensor(x), 3, 1, padding=1).data,
                                   max_pool_loops(x, 3, 1, padding=1), atol=1e-12)

    def test_window_sentinel(self):
        x = rand((2, 3, 4, 4), 23)
        np.testing.assert_allclose(T.avg_pool2d(T.Tensor(x), window=-1).data,
                                   x.mean(axis=(2, 3), keepdims=True), atol=1e-15)

    def test_oversized_window_raises(self):
        with pytest.raises(ValueError, match="larger than"):
            T.avg_pool2d(T.Tensor(rand((1, 1, 4, 4))), window=9, stride=1)

    def test_gradients(self):
        x = T.Tensor(rand((1, 2, 6, 6), 24), requires_grad=True)

        def loss():
            a = T.avg_pool2d(x, 3, 2, padding=1)
            m = T.max_pool2d(x, 2, 2)
            g = T.global_avg_pool(x)
            return T.add(T.add(T.reduce_sum(T.mul(a, a)), T.reduce_sum(m)), T.reduce_sum(T.mul(g, g)))

        for r in check_grad(loss, {"x": x}):
            assert r.passed, r


class TestResampling:
    def test_constant_resize(self):
        x = T.Tensor(np.full((1, 2, 4, 6), 0.37))
        out = T.resize_bilinear(x, 9, 5)
        np.testing.assert_allclose(out.data, 0.37, atol=1e-14)

    def test_upsample2x_matches_loop_oracle(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        got = T.upsample2x(T.Tensor(x)).data
        np.testing.assert_allclose(got, bilinear_loops(x, 4, 4), atol=1e-12)

    def test_resize_matches_loop_oracle(self):
        x = rand((2, 3, 5, 7), 25)
        got = T.resize_bilinear(T.Tensor(x), 11, 4).data
        np.testing.assert_allclose(got, bilinear_loops(x, 11, 4), atol=1e-12)

    def test_identity_when_same_size(self):
        x = rand((1, 1, 6, 6), 26)
        np.testing.assert_allclose(T.resize_bilinear(T.Tensor(x), 6, 6).data, x, atol=1e-14)

    def test_gradients(self):
        x = T.Tensor(rand((1, 2, 4, 4), 27), requires_grad=True)

        def loss():
            y = T.resize_bilinear(x, 7, 3)
            return T.reduce_sum(T.mul(y, y))

        for r in check_grad(loss, {"x": x}):
            assert r.passed, r


class TestChannelOps:
    def test_chunk_concat_inverse(self):
        a = rand((2, 3, 4, 4), 28)
        b = rand((2, 3, 4, 4), 29)
        lo, hi = T.chunk2(T.concat([T.Tensor(a), T.Tensor(b)]))
        np.testing.assert_array_equal(lo.data, a)
        np.testing.assert_array_equal(hi.data, b)

    def test_chunk_odd_raises(self):
        with pytest.raises(ValueError, match="even"):
            T.chunk2(T.Tensor(rand((1, 3, 2, 2))))

    def test_gradients(self):
        a = T.Tensor(rand((1, 2, 3, 3), 30), requires_grad=True)
        b = T.Tensor(rand((1, 2, 3, 3), 31), requires_grad=True)

        def loss():
            lo, hi = T.chunk2(T.concat([a, b]))
            return T.add(T.reduce_sum(T.mul(lo, lo)), T.reduce_sum(T.mul(hi, T.Tensor(np.full(hi.shape, 2.0)))))

        for r in check_grad(loss, {"a": a, "b": b}):
            assert r.passed, r


class TestBackward:
    def test_sum_of_squares(self):
        x = T.Tensor(rand((2, 1, 3, 3), 32), requires_grad=True)
        T.backward(T.reduce_sum(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-14)

    def test_sigmoid_grad_at_zero(self):
        x = T.Tensor(np.zeros((1, 1, 4, 4)), requires_grad=True)
        T.backward(T.reduce_sum(T.sigmoid(x)))
        np.testing.assert_allclose(x.grad, 0.25, atol=1e-15)

    def test_non_scalar_loss_raises(self):
        x = T.Tensor(rand((1, 1, 2, 2)), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            T.backward(T.mul(x, x))

    def test_double_backward_raises(self):
        x = T.Tensor(rand((1, 1, 2, 2)), requires_grad=True)
        loss = T.reduce_sum(T.mul(x, x))
        T.backward(loss)
        with pytest.raises(RuntimeError, match="released"):
            T.backward(loss)

    def test_shared_subexpression_counted_once(self):
        x = T.Tensor(np.full((1, 1, 2, 2), 3.0), requires_grad=True)
        y = T.mul(x, x)
        T.backward(T.add(T.reduce_sum(y), T.reduce_sum(y)))
        np.testing.assert_allclose(x.grad, 2 * 2 * x.data, atol=1e-14)

    def test_directional_probe(self):
        x = T.Tensor(rand((1, 2, 4, 4), 33), requires_grad=True)
        w = T.Tensor(rand((2, 2, 3, 3), 34), requires_grad=True)

        def loss():
            return T.reduce_sum(T.sigmoid(T.conv2d(x, w, None, padding=1)))

        assert directional_check(loss, {"x": x, "w": w}).passed


class TestCheckedMode:
    def test_nonfinite_rejected(self):
        with T.checked():
            a = T.Tensor(np.array([[[[1e308]]]]))
            with pytest.raises(FloatingPointError):
                T.mul(a, a)

    def test_finite_passes(self):
        with T.checked():
            out = T.mul(T.Tensor(np.ones((1, 1, 2, 2))), 2.0)
        np.testing.assert_array_equal(out.data, 2.0)


class TestDeterminism:
    def test_bitwise_repeatability(self):
        def run():
            rng = np.random.default_rng(42)
            x = T.Tensor(rng.standard_normal((2, 3, 8, 8)))
            w = T.Tensor(rng.standard_normal((4, 3, 3, 3)))
            y = T.conv2d(x, w, None, stride=1, padding=1)
            return T.sigmoid(T.avg_pool2d(y, 2, 2)).data

        a, b = run(), run()
        assert a.tobytes() == b.tobytes()
