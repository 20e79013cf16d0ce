import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from caselab import tensor as T
from caselab.gradcheck import check_gradients
from caselab.optim import Adam, LinearSchedule, MissingGradientError
from caselab.tensor import Tensor

from gradient_cases import GRAD_SEEDS, GRAD_TOL, PRIMITIVE_CASES


def naive_conv(x, w, b, stride, padding):
    """Six nested loops over batch, output channel, output row/col, input channel, kernel."""
    B, C, H, W = x.shape
    Co, _, K, _ = w.shape
    xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
    xp[:, :, padding:padding + H, padding:padding + W] = x
    Ho = (H + 2 * padding - K) // stride + 1
    Wo = (W + 2 * padding - K) // stride + 1
    out = np.zeros((B, Co, Ho, Wo))
    for n in range(B):
        for o in range(Co):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[o]
                    for c in range(C):
                        for ki in range(K):
                            for kj in range(K):
                                acc += xp[n, c, i * stride + ki, j * stride + kj] * w[o, c, ki, kj]
                    out[n, o, i, j] = acc
    return out


class TestConv2d:
    def test_sum_of_ones(self):
        out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        assert out.shape == (1, 1, 1, 1)
        assert out.data.item() == 9.0

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 1, 5, 6)).astype(np.float32)
        out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
    def test_matches_naive_loops(self, rng, stride, padding):
        x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
        w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        b = rng.normal(size=4).astype(np.float32)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
        ref = naive_conv(x.astype(np.float64), w.astype(np.float64), b.astype(np.float64), stride, padding)
        assert out.shape == ref.shape
        np.testing.assert_allclose(out.data, ref, atol=1e-5)

    def test_channel_mismatch_names_dimension(self):
        with pytest.raises(T.ShapeError, match="channel"):
            T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_kernel_larger_than_input(self):
        with pytest.raises(T.ShapeError, match="kernel"):
            T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_bad_stride(self):
        with pytest.raises(T.ShapeError, match="stride"):
            T.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)

    @settings(max_examples=30, deadline=None)
    @given(h=st.integers(1, 12), k=st.integers(1, 5), s=st.integers(1, 3), p=st.integers(0, 2))
    def test_output_size_formula(self, h, k, s, p):
        if k > h + 2 * p:
            return
        out = T.conv2d(Tensor(np.zeros((1, 1, h, h))), Tensor(np.zeros((1, 1, k, k))), stride=s, padding=p)
        assert out.shape[2] == (h + 2 * p - k) // s + 1


class TestGlobalAvgPool:
    def test_constant_planes(self):
        x = np.array([[[[1, 1], [1, 1]], [[2, 2], [2, 2]]]], dtype=np.float32)
        np.testing.assert_array_equal(T.global_avg_pool(Tensor(x)).data, [[1.0, 2.0]])

    def test_unit_spatial(self, rng):
        x = rng.normal(size=(3, 4, 1, 1)).astype(np.float32)
        np.testing.assert_array_equal(T.global_avg_pool(Tensor(x)).data, x[:, :, 0, 0])

    def test_summation_oracle(self, rng):
        x = rng.normal(size=(3, 5, 4, 4))
        ref = np.zeros((3, 5))
        for n in range(3):
            for c in range(5):
                total = 0.0
                for i in range(4):
                    for j in range(4):
                        total += x[n, c, i, j]
                ref[n, c] = total / 16
        np.testing.assert_allclose(T.global_avg_pool(Tensor(x)).data, ref, atol=1e-6)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_quadratic(self, rng):
        x = Tensor(rng.normal(size=(4,)), requires_grad=True)
        ((x * x).sum() / 2).backward()
        np.testing.assert_allclose(x.grad, x.data, rtol=1e-6)

    def test_fan_out_accumulates(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        (x.sum() + x.sum()).backward()
        np.testing.assert_array_equal(x.grad, 2 * np.ones(3))

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(T.ShapeError):
            (x * 2).backward()

    def test_detached_graph_leaves_zero_gradient(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = Tensor(np.ones(3), requires_grad=True)
        (x.detach() * y).sum().backward()
        assert x.grad is None
        np.testing.assert_array_equal(y.grad, np.ones(3))

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = (x * 2).sum()
        assert not y.requires_grad and T.graph_nodes(y) == [y]

    def test_forward_does_not_mutate_inputs(self, rng):
        a = rng.normal(size=(2, 3, 5, 5)).astype(np.float32)
        w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        a0, w0 = a.copy(), w.copy()
        x, wt = Tensor(a, requires_grad=True), Tensor(w, requires_grad=True)
        out = T.silu(T.conv2d(x, wt, padding=1))
        T.standardize(T.global_avg_pool(out)).sum().backward()
        np.testing.assert_array_equal(x.data, a0)
        np.testing.assert_array_equal(wt.data, w0)

    def test_nan_in_forward_raises(self):
        with pytest.raises(T.NonFiniteError):
            T.log(Tensor(np.array([-1.0])))

    def test_overflow_in_forward_raises(self):
        with pytest.raises(T.NonFiniteError):
            T.exp(Tensor(np.array([1000.0])))


class TestGradientSuite:
    @pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
    def test_finite_differences(self, name):
        worst = 0.0
        for seed in GRAD_SEEDS:
            fn, inputs = PRIMITIVE_CASES[name](np.random.default_rng(seed))
            worst = max(worst, *check_gradients(fn, inputs, h=1e-3, seed=seed))
        assert worst <= GRAD_TOL, f"{name}: worst relative error {worst:.2e}"


class TestDeterminism:
    def test_identical_ops_bitwise_equal(self, rng):
        x = rng.normal(size=(2, 3, 6, 6)).astype(np.float32)
        w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)

        def run():
            xt, wt = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
            loss = T.cross_entropy(T.global_avg_pool(T.silu(T.conv2d(xt, wt, padding=1))), [0, 3])
            loss.backward()
            return loss.data.copy(), wt.grad.copy()

        (l1, g1), (l2, g2) = run(), run()
        assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()

    def test_grad_state_is_thread_local(self):
        seen = {}

        def worker():
            seen["enabled"] = T.grad_enabled()

        with T.no_grad():
            t = threading.Thread(target=worker)
            t.start()
            t.join()
        assert seen["enabled"] is True


class TestCrossEntropy:
    def test_stable_for_large_logits(self):
        loss = T.cross_entropy(Tensor(np.array([[1000.0, 0.0], [0.0, 1000.0]])), [0, 1])
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_uniform_logits(self):
        loss = T.cross_entropy(Tensor(np.zeros((3, 5))), [0, 1, 4])
        assert loss.item() == pytest.approx(np.log(5), rel=1e-6)

    def test_label_out_of_range(self):
        with pytest.raises(T.ShapeError):
            T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


class TestStandardize:
    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, st.integers(2, 16), elements=st.floats(-5, 5)))
    def test_zero_mean_unit_std(self, v):
        if v.std() < 1e-2:
            return
        out = T.standardize(Tensor(v[None], dtype=np.float64)).data[0]
        assert abs(out.mean()) < 1e-9
        assert out.std() == pytest.approx(v.std() / (v.std() + 1e-5), rel=1e-9)

    def test_constant_vector_maps_to_zero(self):
        out = T.standardize(Tensor(np.full((1, 4), 3.0)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))


class TestBatchnorm:
    def test_frozen_statistics(self, rng):
        x = rng.normal(size=(2, 3, 2, 2))
        mean, var = rng.normal(size=3), rng.uniform(0.5, 2, 3)
        g, b = rng.normal(size=3), rng.normal(size=3)
        out = T.batchnorm(Tensor(x), Tensor(mean), Tensor(var), Tensor(g), Tensor(b), eps=1e-5)
        ref = (x - mean[None, :, None, None]) / np.sqrt(var[None, :, None, None] + 1e-5) * g[None, :, None, None] \
            + b[None, :, None, None]
        np.testing.assert_allclose(out.data, ref, rtol=1e-5, atol=1e-6)


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = Tensor(np.array([0.0]), requires_grad=True, dtype=np.float64)
        p.grad = np.array([1.0])
        Adam([p]).step(0.1)
        # m = 0.1, v = 0.001; bias-corrected both equal 1 -> p = -0.1 / (1 + 1e-8)
        assert p.data[0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)
        assert p.grad is None

    def test_zero_gradient_leaves_parameter(self):
        p = Tensor(np.array([2.5]), requires_grad=True)
        opt = Adam([p])
        p.grad = np.zeros(1)
        opt.step(0.1)
        assert p.data[0] == 2.5

    def test_converges_on_quadratic(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = Adam([p])
        for _ in range(100):
            ((p - 3.0) * (p - 3.0)).sum().backward()
            opt.step(0.1)
        assert abs(p.data[0] - 3.0) < 0.2

    def test_missing_gradient_names_parameter(self):
        p = Tensor(np.zeros(2), requires_grad=True, name="body.scale")
        with pytest.raises(MissingGradientError, match="body.scale"):
            Adam([p]).step(1e-3)

    def test_schedule_is_linear_and_non_increasing(self):
        s = LinearSchedule(1e-3, 1e-5, 500)
        values = [s(i) for i in range(500)]
        assert values[0] == pytest.approx(1e-3)
        assert values[-1] == pytest.approx(1e-5)
        assert all(a >= b for a, b in zip(values, values[1:]))


class TestMacCounter:
    def test_counts_conv_and_matmul(self, rng):
        with T.MacCounter() as mc:
            T.conv2d(Tensor(rng.normal(size=(2, 3, 8, 8))), Tensor(rng.normal(size=(5, 3, 3, 3))), padding=1)
            T.matmul(Tensor(rng.normal(size=(4, 6))), Tensor(rng.normal(size=(6, 7))))
        assert mc.by_op["conv2d"] == 2 * 5 * 8 * 8 * 3 * 9
        assert mc.by_op["matmul"] == 4 * 6 * 7
