import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvrec import tensor as tn
from mvrec.gradcheck import grad_check
from mvrec.optim import SGD, Adam, make_optimizer, optimizer_step
from mvrec.tensor import ShapeError, Tensor


def naive_conv3d(x, w, b, stride, pad):
    """Direct six-loop cross-correlation oracle on [C, D, H, W]."""
    xp = np.pad(x, ((0, 0),) + ((pad, pad),) * 3)
    co, ci, kd, kh, kw = w.shape
    D = (xp.shape[1] - kd) // stride + 1
    H = (xp.shape[2] - kh) // stride + 1
    W = (xp.shape[3] - kw) // stride + 1
    out = np.zeros((co, D, H, W))
    for o in range(co):
        for d in range(D):
            for h in range(H):
                for q in range(W):
                    acc = b[o] if b is not None else 0.0
                    for c in range(ci):
                        for i in range(kd):
                            for j in range(kh):
                                for k in range(kw):
                                    acc += w[o, c, i, j, k] * xp[c, d * stride + i, h * stride + j, q * stride + k]
                    out[o, d, h, q] = acc
    return out


def naive_maxpool(x, win, stride):
    C, D, H, W = x.shape
    Do, Ho, Wo = ((D - win[0]) // stride[0] + 1, (H - win[1]) // stride[1] + 1, (W - win[2]) // stride[2] + 1)
    out = np.empty((C, Do, Ho, Wo))
    for c in range(C):
        for d in range(Do):
            for h in range(Ho):
                for w in range(Wo):
                    out[c, d, h, w] = x[c, d * stride[0]:d * stride[0] + win[0],
                                        h * stride[1]:h * stride[1] + win[1],
                                        w * stride[2]:w * stride[2] + win[2]].max()
    return out


class TestCreation:
    def test_zeros(self):
        t = tn.tensor_new((2, 3), "zeros")
        assert t.shape == (2, 3) and np.all(t.data == 0) and t.size == 6

    def test_constant(self):
        np.testing.assert_array_equal(tn.tensor_new((2,), "constant", value=1.5).data, [1.5, 1.5])

    def test_glorot_bound(self):
        t = tn.tensor_new((4, 4), "glorot", rng=np.random.default_rng(0), fan_in=4, fan_out=4)
        bound = math.sqrt(0.75)
        assert all(-bound <= v <= bound for v in t.data.ravel().tolist())

    @pytest.mark.parametrize("shape", [(), (0,), (3, 0)])
    def test_bad_shape(self, shape):
        with pytest.raises(ShapeError):
            tn.tensor_new(shape)

    def test_unknown_init(self):
        with pytest.raises(ValueError):
            tn.tensor_new((2,), "normal")


class TestMatmul:
    def test_identity(self):
        b = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(tn.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)

    def test_hand_evaluated(self):
        out = tn.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_operator(self):
        a, b = Tensor(np.ones((2, 2))), Tensor(np.ones((2, 1)))
        np.testing.assert_array_equal((a @ b).data, [[2.0], [2.0]])


class TestElementwise:
    def test_mul_identity(self):
        v = np.array([1.5, -2.0, 3.0])
        np.testing.assert_array_equal(tn.elementwise("mul", Tensor(v), Tensor(np.ones(3))).data, v)

    def test_tanh_zero(self):
        assert tn.elementwise("tanh", Tensor(np.zeros(1))).data[0] == 0.0

    def test_relu(self):
        np.testing.assert_array_equal(tn.elementwise("relu", Tensor([-1.0, 2.0])).data, [0.0, 2.0])

    def test_relu_propagates_nan(self):
        assert np.isnan(tn.relu(Tensor([np.nan, 1.0])).data[0])

    def test_add(self):
        np.testing.assert_array_equal(tn.elementwise("add", Tensor([1.0]), Tensor([2.0])).data, [3.0])

    @pytest.mark.parametrize("op", ["add", "mul"])
    def test_shape_mismatch(self, op):
        with pytest.raises(ShapeError):
            tn.elementwise(op, Tensor(np.ones(2)), Tensor(np.ones(3)))

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            tn.elementwise("pow", Tensor(np.ones(2)))

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8),
           st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
    def test_hadamard_commutes(self, a, b):
        m = min(len(a), len(b))
        x, y = Tensor(a[:m]), Tensor(b[:m])
        np.testing.assert_array_equal(tn.mul(x, y).data, tn.mul(y, x).data)


class TestSoftmax:
    def test_half(self):
        np.testing.assert_array_equal(tn.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_constant_uniform(self):
        np.testing.assert_allclose(tn.softmax(Tensor([7.0] * 3)).data, [1 / 3] * 3, atol=1e-15)

    def test_hand_evaluated(self):
        e1, e2 = math.exp(1), math.exp(2)
        np.testing.assert_allclose(tn.softmax(Tensor([1.0, 2.0])).data, [e1 / (e1 + e2), e2 / (e1 + e2)],
                                   rtol=1e-14)
        np.testing.assert_allclose(tn.softmax(Tensor([1.0, 2.0])).data, [0.26894142, 0.73105858], atol=1e-8)

    def test_large_inputs_finite(self):
        out = tn.softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out)) and out[0] == 1.0

    @settings(max_examples=200)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=10), st.floats(-100, 100))
    def test_distribution_and_shift(self, xs, c):
        p = tn.softmax(Tensor(xs)).data
        assert np.all(p >= 0) and abs(p.sum() - 1) <= 1e-9
        q = tn.softmax(Tensor(np.asarray(xs) + c)).data
        np.testing.assert_allclose(p, q, atol=1e-12, rtol=0)

    def test_axis(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_allclose(tn.softmax(Tensor(x), axis=0).data.sum(axis=0), 1.0, atol=1e-12)


class TestCrossEntropy:
    def test_uniform(self):
        assert tn.cross_entropy(Tensor(np.zeros(4)), 2).item() == pytest.approx(math.log(4), abs=1e-12)

    def test_large_margin(self):
        z = np.zeros(5)
        z[3] = 50.0
        assert tn.cross_entropy(Tensor(z), 3).item() < 1e-20

    def test_hand_evaluated(self):
        want = -math.log(math.exp(1) / (math.exp(1) + math.exp(2)))
        assert tn.cross_entropy(Tensor([1.0, 2.0]), 0).item() == pytest.approx(want, rel=1e-14)
        assert want == pytest.approx(1.313261, abs=1e-6)

    @pytest.mark.parametrize("target", [-1, 2])
    def test_out_of_range(self, target):
        with pytest.raises(IndexError):
            tn.cross_entropy(Tensor([1.0, 2.0]), target)

    def test_batch_mean(self):
        z = np.random.default_rng(1).normal(size=(3, 5))
        t = np.array([0, 4, 2])
        per = [tn.cross_entropy(Tensor(z[i]), t[i]).item() for i in range(3)]
        assert tn.cross_entropy(Tensor(z), t).item() == pytest.approx(np.mean(per), rel=1e-14)


class TestConcat:
    def test_single(self):
        a = Tensor(np.arange(4.0))
        np.testing.assert_array_equal(tn.concat([a]).data, a.data)

    def test_extent_sum(self):
        assert tn.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 5)))], axis=1).shape == (2, 8)

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            tn.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 5)))], axis=1)


class TestConv3d:
    def test_identity_kernel(self):
        x = np.ones((1, 2, 2, 2))
        out = tn.conv3d(Tensor(x), Tensor(np.ones((1, 1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    def test_window_sum(self):
        out = tn.conv3d(Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones((1, 1, 2, 2, 2))))
        assert out.shape == (1, 1, 1, 1) and out.data.item() == 8.0

    def test_stride_shape(self):
        out = tn.conv3d(Tensor(np.ones((1, 4, 4, 4))), Tensor(np.ones((1, 1, 2, 2, 2))), stride=2)
        assert out.shape == (1, 2, 2, 2)

    def test_kernel_too_big(self):
        with pytest.raises(ShapeError):
            tn.conv3d(Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones((1, 1, 3, 3, 3))))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            tn.conv3d(Tensor(np.ones((2, 3, 3, 3))), Tensor(np.ones((1, 1, 2, 2, 2))))

    @pytest.mark.parametrize("ci,co,dhw,k,stride,pad", [
        (1, 1, (3, 3, 3), 2, 1, 0),
        (2, 3, (4, 3, 5), 3, 1, 1),
        (3, 2, (5, 5, 4), 2, 2, 0),
        (1, 2, (4, 4, 4), 3, 2, 1),
    ])
    def test_matches_naive(self, ci, co, dhw, k, stride, pad):
        rng = np.random.default_rng(ci * 10 + co)
        x, w, b = rng.normal(size=(ci, *dhw)), rng.normal(size=(co, ci, k, k, k)), rng.normal(size=co)
        out = tn.conv3d(Tensor(x), Tensor(w), Tensor(b), stride, pad)
        np.testing.assert_allclose(out.data, naive_conv3d(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)
        for n, o in zip(dhw, out.shape[1:]):
            assert o == tn.conv_out_extent(n, k, stride, pad)

    def test_batched_equals_single(self):
        rng = np.random.default_rng(5)
        x, w = rng.normal(size=(3, 2, 4, 4, 4)), rng.normal(size=(2, 2, 3, 3, 3))
        batched = tn.conv3d(Tensor(x), Tensor(w), padding=1).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], tn.conv3d(Tensor(x[i]), Tensor(w), padding=1).data, atol=1e-13)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
    def test_gradients(self, stride, pad):
        rng = np.random.default_rng(stride + pad)
        x = Tensor(rng.normal(size=(2, 4, 3, 4)))
        w = Tensor(rng.normal(size=(2, 2, 2, 2, 2)))
        b = Tensor(rng.normal(size=2))
        c = rng.normal(size=tn.conv3d(x, w, b, stride, pad).shape)
        err = grad_check(lambda: tn.sum_all(tn.mul(tn.conv3d(x, w, b, stride, pad), Tensor(c))), [x, w, b])
        assert err < 1e-7


class TestMaxPool3d:
    def test_constant(self):
        out = tn.maxpool3d(Tensor(np.full((1, 4, 4, 4), 2.5)), 2)
        assert out.shape == (1, 2, 2, 2) and np.all(out.data == 2.5)

    def test_enumeration(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])  # [C=1, D=1, H=2, W=2]
        out = tn.maxpool3d(Tensor(x), (1, 2, 1))
        np.testing.assert_array_equal(out.data, [[[[3.0, 4.0]]]])

    def test_tie_first_index(self):
        x = Tensor(np.array([[[[2.0, 2.0]]]]), requires_grad=True)
        tn.sum_all(tn.maxpool3d(x, (1, 1, 2))).backward()
        np.testing.assert_array_equal(x.grad, [[[[1.0, 0.0]]]])

    def test_window_too_big(self):
        with pytest.raises(ShapeError):
            tn.maxpool3d(Tensor(np.ones((1, 2, 2, 2))), 3)

    @pytest.mark.parametrize("shape,win,stride", [
        ((2, 4, 4, 4), (2, 2, 2), (2, 2, 2)),
        ((1, 5, 3, 4), (2, 3, 2), (1, 1, 2)),
        ((3, 3, 3, 3), (3, 3, 3), (1, 1, 1)),
    ])
    def test_matches_naive(self, shape, win, stride):
        x = np.random.default_rng(1).normal(size=shape)
        np.testing.assert_array_equal(tn.maxpool3d(Tensor(x), win, stride).data, naive_maxpool(x, win, stride))

    def test_gradient(self):
        x = Tensor(np.random.default_rng(2).normal(size=(2, 4, 4, 4)))
        c = np.random.default_rng(3).normal(size=(2, 2, 2, 2))
        assert grad_check(lambda t: tn.sum_all(tn.mul(tn.maxpool3d(t, 2), Tensor(c))), x) < 1e-8


class TestBackward:
    def test_sum_ones(self):
        w = Tensor(np.random.default_rng(0).normal(size=(3, 2)), requires_grad=True)
        tn.sum_all(w).backward()
        np.testing.assert_array_equal(w.grad, np.ones((3, 2)))

    def test_quadratic(self):
        v = np.random.default_rng(1).normal(size=5)
        w = Tensor(v.copy(), requires_grad=True)
        tn.sum_all(tn.mul(w, w)).backward()
        np.testing.assert_allclose(w.grad, 2 * v, rtol=1e-15)

    def test_shared_node_accumulates(self):
        w = Tensor(np.array([3.0]), requires_grad=True)
        y = tn.add(w, w)
        tn.sum_all(tn.mul(y, y)).backward()  # d/dw (2w)^2 = 8w
        np.testing.assert_allclose(w.grad, [24.0])

    def test_non_scalar_rejected(self):
        with pytest.raises(ValueError):
            tn.mul(Tensor(np.ones(2), requires_grad=True), Tensor(np.ones(2))).backward()

    def test_no_grad(self):
        w = Tensor(np.ones(2), requires_grad=True)
        with tn.no_grad():
            out = tn.mul(w, w)
        assert not out.requires_grad

    def test_mlp_against_finite_differences(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(4, 5)))
        W1, b1 = Tensor(rng.normal(size=(5, 6))), Tensor(rng.normal(size=6))
        W2, b2 = Tensor(rng.normal(size=(6, 3))), Tensor(rng.normal(size=3))
        t = np.array([0, 2, 1, 1])

        def loss():
            h = tn.tanh(tn.linear(x, W1, b1))
            return tn.cross_entropy(tn.linear(h, W2, b2), t)
        assert grad_check(loss, [W1, b1, W2, b2]) < 1e-4


class TestLayerGradients:
    rng = np.random.default_rng(7)

    @pytest.mark.parametrize("name,fn,shapes", [
        ("add", lambda a, b: tn.add(a, b), [(3, 2), (3, 2)]),
        ("sub", lambda a, b: tn.sub(a, b), [(3, 2), (3, 2)]),
        ("mul", lambda a, b: tn.mul(a, b), [(3, 2), (3, 2)]),
        ("tanh", lambda a: tn.tanh(a), [(4,)]),
        ("relu", lambda a: tn.relu(a), [(5,)]),
        ("matmul", lambda a, b: tn.matmul(a, b), [(2, 3, 4), (4, 2)]),
        ("linear", lambda x, w, b: tn.linear(x, w, b), [(3, 4), (4, 2), (2,)]),
        ("transpose", lambda a: tn.transpose(a), [(2, 3)]),
        ("reshape", lambda a: tn.reshape(a, (3, 2)), [(2, 3)]),
        ("concat", lambda a, b: tn.concat([a, b], axis=1), [(2, 3), (2, 1)]),
        ("stack", lambda a, b: tn.stack([a, b], axis=1), [(2, 3), (2, 3)]),
        ("select", lambda a: tn.select(a, 1, 1), [(2, 3)]),
        ("mean_axis", lambda a: tn.mean_axis(a, 1), [(2, 3)]),
        ("softmax", lambda a: tn.softmax(a, axis=-1), [(2, 4)]),
        ("scale", lambda a: tn.scale(a, -2.5), [(3,)]),
    ])
    def test_layer(self, name, fn, shapes):
        ts = [Tensor(self.rng.normal(size=s) + (0.3 if name == "relu" else 0.0)) for s in shapes]
        c = Tensor(self.rng.normal(size=fn(*ts).shape))
        assert grad_check(lambda: tn.sum_all(tn.mul(fn(*ts), c)), ts) < 1e-4, name

    def test_embedding(self):
        table = Tensor(self.rng.normal(size=(5, 3)))
        idx = np.array([[0, 4, -1], [2, 2, 1]])
        c = Tensor(self.rng.normal(size=(2, 3, 3)))
        assert grad_check(lambda: tn.sum_all(tn.mul(tn.embedding(table, idx), c)), [table]) < 1e-8
        np.testing.assert_array_equal(tn.embedding(table, idx).data[0, 2], 0.0)

    def test_sum_linear(self):
        assert grad_check(lambda t: tn.sum_all(t), np.random.default_rng(0).normal(size=7)) < 1e-9

    def test_tanh_at_zero(self):
        assert grad_check(lambda t: tn.sum_all(tn.tanh(t)), np.zeros(4)) < 1e-8


class TestOptimizers:
    def test_lr_zero(self):
        p = Tensor(np.array([1.0, 2.0]))
        for opt in (SGD([p], lr=0.0), Adam([p], lr=0.0)):
            optimizer_step(opt, [p], [np.ones(2)])
            np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_sgd_plain(self):
        p = Tensor(np.array([0.0]))
        optimizer_step(SGD([p], lr=1.0, momentum=0.0), [p], [np.array([1.0])])
        np.testing.assert_array_equal(p.data, [-1.0])

    @pytest.mark.parametrize("lr,mu", [(0.1, 0.9), (0.05, 0.5), (1.0, 0.0)])
    def test_two_momentum_steps(self, lr, mu):
        g = np.array([0.5, -2.0, 3.0])
        p = Tensor(np.zeros(3))
        opt = SGD([p], lr=lr, momentum=mu)
        opt.step([g])
        opt.step([g])
        np.testing.assert_allclose(p.data, -lr * (g + (1 + mu) * g), rtol=1e-15)

    def test_adam_first_step(self):
        # bias-corrected first step moves each coordinate by lr * sign(g)
        p = Tensor(np.zeros(3))
        opt = Adam([p], lr=0.01)
        opt.step([np.array([2.0, -0.5, 1e-3])])
        np.testing.assert_allclose(p.data, [-0.01, 0.01, -0.01], rtol=1e-4)

    def test_grads_from_tensors(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        tn.sum_all(tn.mul(p, p)).backward()
        opt = make_optimizer("sgd", [p], lr=0.5, momentum=0.0)
        opt.step()
        np.testing.assert_allclose(p.data, [0.0])
        opt.zero_grad()
        assert p.grad is None

    def test_misaligned(self):
        p = Tensor(np.zeros(2))
        with pytest.raises(ValueError):
            SGD([p]).step([np.zeros(3)])

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            make_optimizer("rmsprop", [], 0.1)
