"""Gradient and shape checks for the autodiff engine.

Every primitive's analytic gradient is checked against central finite
differences on randomized float64 inputs with a fixed seed.
"""

import numpy as np
import pytest

import quantsep.tensor as tz
from quantsep.tensor import Tensor


def numeric_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar f at x, coordinate by coordinate."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def check_gradients(build, shapes, seed, rtol=1e-4, atol=1e-7, eps=1e-5):
    """build(*tensors) -> scalar Tensor; checks every input's gradient."""
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    loss = build(*tensors)
    loss.backward()
    for idx, (a, t) in enumerate(zip(arrays, tensors)):
        def f(x, idx=idx):
            args = [Tensor(arr, dtype=np.float64) for arr in arrays]
            args[idx] = Tensor(x, dtype=np.float64)
            return float(build(*args).data)

        num = numeric_grad(f, a.copy(), eps)
        assert t.grad is not None, f"input {idx} got no gradient"
        np.testing.assert_allclose(t.grad, num, rtol=rtol, atol=atol,
                                   err_msg=f"input {idx}")


class TestSpecExamples:
    def test_prelu_definition(self):
        y = tz.prelu(Tensor([-2.0, 3.0]), Tensor(0.25))
        np.testing.assert_allclose(y.data, [-0.5, 3.0])

    def test_dilated_conv_hand_sum(self):
        # kernel [1,1,1], dilation 2: the center output covers indices {0,2,4}
        x = Tensor(np.array([[1.0, 2.0, 3.0, 4.0, 5.0]]))
        w = Tensor(np.ones((1, 1, 3)))
        out = tz.conv1d(x, w, dilation=2)
        assert out.data[0, 2] == 9.0
        assert out.data.shape == (1, 5)

    def test_sigmoid_symmetry_point(self):
        assert tz.sigmoid(Tensor(0.0)).data == 0.5

    def test_square_gradient(self):
        x = Tensor(3.0, requires_grad=True)
        (x * x).backward()
        assert x.grad == 6.0

    def test_sigmoid_gradient_at_zero(self):
        x = Tensor(0.0, requires_grad=True)
        tz.sigmoid(x).backward()
        np.testing.assert_allclose(x.grad, 0.25)

    def test_toy_network_matches_finite_differences(self):
        # random 3-layer network: conv1x1 / tanh / conv1x1 / sigmoid / conv1x1
        def build(x, w1, w2, w3):
            h = tz.tanh(tz.conv1d(x, w1))
            h = tz.sigmoid(tz.conv1d(h, w2))
            return tz.tsum(tz.conv1d(h, w3))

        check_gradients(build, [(3, 7), (4, 3, 1), (4, 4, 1), (2, 4, 1)],
                        seed=11, rtol=1e-4, eps=1e-3)


class TestPrimitiveGradients:
    def test_elementwise(self):
        def build(a, b):
            return tz.tsum(a * b + a - b / (b * b + 2.5))

        check_gradients(build, [(4, 5), (4, 5)], seed=0)

    def test_scalar_broadcast(self):
        def build(a, s):
            return tz.tsum((a - s) * s + s)

        check_gradients(build, [(3, 4), ()], seed=1)

    def test_log_mean(self):
        def build(a):
            return tz.log(tz.tmean(a * a) + 1.0)

        check_gradients(build, [(6,)], seed=2)

    def test_sigmoid_tanh_prelu(self):
        def build(a, slope):
            return tz.tsum(tz.sigmoid(a) * tz.tanh(a) + tz.prelu(a, slope))

        check_gradients(build, [(5, 3), ()], seed=3)

    def test_conv1d_dense(self):
        def build(x, w, b):
            return tz.tsum(tz.conv1d(x, w, b))

        check_gradients(build, [(3, 8), (5, 3, 3), (5,)], seed=4)

    def test_conv1d_dilated(self):
        def build(x, w, b):
            return tz.tsum(tz.tanh(tz.conv1d(x, w, b, dilation=3)))

        check_gradients(build, [(2, 12), (3, 2, 3), (3,)], seed=5)

    def test_conv1d_depthwise(self):
        def build(x, w, b):
            return tz.tsum(tz.conv1d(x, w, b, dilation=2, groups=4) * x)

        check_gradients(build, [(4, 10), (4, 1, 3), (4,)], seed=6)

    def test_conv1d_grouped(self):
        def build(x, w, b):
            return tz.tsum(tz.conv1d(x, w, b, groups=2))

        check_gradients(build, [(4, 6), (6, 2, 3), (6,)], seed=7)

    def test_glob_layer_norm(self):
        def build(x, g, b):
            return tz.tsum(tz.sigmoid(tz.glob_layer_norm(x, g, b)))

        check_gradients(build, [(3, 9), (3,), (3,)], seed=8, rtol=2e-4)

    def test_concat_slice(self):
        def build(a, b):
            cat = tz.concat([a, b])
            return tz.tsum(tz.slice_rows(cat, 1, 4) * tz.slice_rows(cat, 0, 3))

        check_gradients(build, [(2, 4), (3, 4)], seed=9)


class TestGraphContracts:
    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(tz.GraphError):
            (x * x).backward()

    def test_shape_mismatch_names_primitive(self):
        with pytest.raises(tz.ShapeError, match="add"):
            Tensor(np.ones(3)) + Tensor(np.ones(4))
        with pytest.raises(tz.ShapeError, match="conv1d"):
            tz.conv1d(Tensor(np.ones((2, 5))), Tensor(np.ones((3, 4, 3))))
        with pytest.raises(tz.ShapeError, match="concat"):
            tz.concat([Tensor(np.ones((2, 5))), Tensor(np.ones((2, 6)))])

    def test_even_kernel_rejected(self):
        with pytest.raises(tz.ShapeError, match="odd"):
            tz.conv1d(Tensor(np.ones((2, 5))), Tensor(np.ones((2, 2, 4))))

    def test_grad_accumulates_over_uses(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * x + x * 3.0
        y.backward()
        np.testing.assert_allclose(x.grad, 7.0)

    def test_backward_linearity(self):
        # grad of (a*f + b*g) == a*grad(f) + b*grad(g)
        rng = np.random.default_rng(12)
        data = rng.standard_normal((3, 4))

        def grad_of(fn):
            x = Tensor(data, requires_grad=True, dtype=np.float64)
            fn(x).backward()
            return x.grad

        f = lambda x: tz.tsum(tz.sigmoid(x))
        g = lambda x: tz.tsum(x * x * x)
        a, b = 2.5, -1.25
        combined = grad_of(lambda x: a * f(x) + b * g(x))
        np.testing.assert_allclose(combined, a * grad_of(f) + b * grad_of(g),
                                   rtol=1e-12)

    def test_forward_backward_deterministic(self):
        def run():
            rng = np.random.default_rng(99)
            x = Tensor(rng.standard_normal((4, 6)).astype(np.float32), requires_grad=True)
            w = Tensor(rng.standard_normal((3, 4, 3)).astype(np.float32), requires_grad=True)
            loss = tz.tsum(tz.tanh(tz.conv1d(x, w)))
            loss.backward()
            return loss.data.copy(), x.grad.copy(), w.grad.copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert np.array_equal(l1, l2)
        assert np.array_equal(gx1, gx2)
        assert np.array_equal(gw1, gw2)

    def test_zero_lr_noop_is_possible(self):
        # parameters untouched unless an optimizer writes to them
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        before = x.data.copy()
        tz.tsum(x * x).backward()
        assert np.array_equal(x.data, before)
