"""Numerics core: forward contracts and gradient checks for every op."""

import numpy as np
import pytest

from aquascan.nn import (
    BatchNorm1d,
    BatchNorm2d,
    Conv1d,
    Conv2d,
    GraphError,
    Linear,
    ShapeError,
    Tensor,
    absolute,
    concat,
    conv1d,
    conv2d,
    exp,
    gather_rows,
    global_avg_pool1d,
    global_avg_pool2d,
    hardswish,
    log,
    matmul,
    power,
    relu,
    reshape,
    sigmoid,
    softmax,
    softplus,
    transpose,
    tsum,
)
from oracles import gradcheck, module_gradcheck


def away_from_zero(rng, shape, lo=0.2, hi=2.0):
    """Random values with |x| in [lo, hi] so kinked ops stay differentiable."""
    mag = rng.uniform(lo, hi, size=shape)
    sign = rng.choice([-1.0, 1.0], size=shape)
    return mag * sign


class TestForwardExamples:
    def test_conv2d_scaling_identity(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.full((1, 1, 1, 1), 2.0))
        out = conv2d(x, w)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))

    def test_conv2d_hand_summation(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        w = Tensor(np.ones((1, 1, 2, 2)))
        out = conv2d(x, w)
        assert out.data.shape == (1, 1, 1, 1)
        assert out.item() == 10.0

    def test_conv2d_output_extent_formula(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            h = int(rng.integers(4, 12))
            k = int(rng.integers(1, 4))
            s = int(rng.integers(1, 3))
            p = int(rng.integers(0, 3))
            if h + 2 * p < k:
                continue
            x = Tensor(rng.standard_normal((1, 1, h, h)))
            w = Tensor(rng.standard_normal((1, 1, k, k)))
            out = conv2d(x, w, stride=(s, s), padding=(p, p))
            expect = (h + 2 * p - k) // s + 1
            assert out.data.shape == (1, 1, expect, expect)

    def test_depthwise_channel_independence(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 2, 5, 5))
        w = Tensor(rng.standard_normal((2, 1, 3, 3)))
        base = conv2d(Tensor(x), w, groups=2).data
        poked = x.copy()
        poked[0, 0] += 1.0  # perturb channel 0 only
        out = conv2d(Tensor(poked), w, groups=2).data
        np.testing.assert_array_equal(out[0, 1], base[0, 1])
        assert not np.allclose(out[0, 0], base[0, 0])

    def test_conv1d_hand_summation(self):
        x = Tensor(np.ones((1, 1, 5)))
        w = Tensor(np.ones((1, 1, 3)))
        out = conv1d(x, w, padding=1)
        np.testing.assert_array_equal(out.data[0, 0], [2.0, 3.0, 3.0, 3.0, 2.0])

    def test_conv1d_identity_kernel(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 1, 9))
        w = Tensor(np.array([[[0.0, 1.0, 0.0]]]))
        out = conv1d(Tensor(x), w, padding=1)
        np.testing.assert_allclose(out.data, x)

    def test_conv1d_sensor_stem_shape(self):
        # 6 input channels, 64 filters, kernel 7, pad 3 keeps T=60
        x = Tensor(np.zeros((1, 6, 60)))
        w = Tensor(np.zeros((64, 6, 7)))
        out = conv1d(x, w, padding=3)
        assert out.data.shape == (1, 64, 60)

    def test_softmax_symmetry(self):
        out = softmax(Tensor(np.array([0.0, 0.0])), axis=-1)
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        for seed in range(10):
            x = np.random.default_rng(seed).standard_normal((4, 7)) * 10
            out = softmax(Tensor(x), axis=1).data
            assert np.all(out >= 0)
            np.testing.assert_allclose(out.sum(axis=1), np.ones(4), atol=1e-6)
        _ = rng

    def test_softmax_empty_axis_rejected(self):
        with pytest.raises(ShapeError):
            softmax(Tensor(np.zeros((3, 0))), axis=1)

    def test_sigmoid_at_zero(self):
        assert sigmoid(Tensor(np.array(0.0))).item() == 0.5

    def test_sigmoid_extreme_inputs_are_finite(self):
        out = sigmoid(Tensor(np.array([-1e4, 1e4]))).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [0.0, 1.0], atol=1e-12)

    def test_global_avg_pool1d_arithmetic_mean(self):
        x = Tensor(np.array([[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]]))
        out = global_avg_pool1d(x)
        np.testing.assert_allclose(out.data, [[2.0, 5.0]])

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((4, 3, 3, 3))
        a = conv2d(Tensor(x), Tensor(w), padding=(1, 1)).data
        b = conv2d(Tensor(x), Tensor(w), padding=(1, 1)).data
        assert np.array_equal(a, b)

    def test_conv2d_channel_mismatch_reports_dims(self):
        with pytest.raises(ShapeError) as exc:
            conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))))
        msg = str(exc.value)
        assert "3" in msg and "4" in msg


class TestBackwardExamples:
    def test_linear_map_gradient(self):
        x = np.array([1.0, -2.0, 3.0])
        w = Tensor(np.array([0.5, 0.5, 0.5]), requires_grad=True)
        loss = tsum(w * Tensor(x))
        loss.backward()
        np.testing.assert_allclose(w.grad, x)

    def test_sigmoid_gradient_at_zero(self):
        x = Tensor(np.array(0.0), requires_grad=True)
        sigmoid(x).backward()
        np.testing.assert_allclose(x.grad, 0.25)

    def test_nonparticipating_parameter_keeps_zero_grad(self):
        used = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones(3), requires_grad=True)
        used.zero_grad()
        unused.zero_grad()
        tsum(used * 2.0).backward()
        np.testing.assert_array_equal(unused.grad, np.zeros(3))
        np.testing.assert_array_equal(used.grad, np.full(3, 2.0))

    def test_backward_off_graph_rejected(self):
        with pytest.raises(GraphError):
            Tensor(np.array(1.0), requires_grad=True).backward()

    def test_backward_nonscalar_rejected(self):
        x = Tensor(np.ones(4), requires_grad=True)
        with pytest.raises(GraphError):
            (x * 2.0).backward()

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        y = x * x + x  # dy/dx = 2x + 1 = 7
        y.backward()
        np.testing.assert_allclose(x.grad, 7.0)

    def test_grad_accumulates_across_backward_calls(self):
        w = Tensor(np.ones(2), requires_grad=True)
        tsum(w * 3.0).backward()
        tsum(w * 3.0).backward()
        np.testing.assert_allclose(w.grad, [6.0, 6.0])


SEEDS = [0, 1, 2]


class TestGradientsAgainstFiniteDifferences:
    """Every op kind, randomized shapes, analytic vs central differences."""

    @pytest.mark.parametrize("seed", SEEDS)
    def test_arithmetic_with_broadcast(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((3, 4))
        b = away_from_zero(rng, (4,))
        gradcheck(lambda t, u: (t + u) * t - u, [a, b], rng)
        gradcheck(lambda t, u: t / u, [a, b], rng)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matmul_2d(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        gradcheck(matmul, [a, b], rng)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matmul_batched(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((2, 4, 2))
        gradcheck(matmul, [a, b], rng)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_elementwise_nonlinearities(self, seed):
        rng = np.random.default_rng(seed)
        x = away_from_zero(rng, (3, 5))
        gradcheck(relu, [x], rng)
        gradcheck(sigmoid, [x], rng)
        gradcheck(softplus, [x], rng)
        gradcheck(exp, [x], rng)
        gradcheck(absolute, [x], rng)
        gradcheck(lambda t: power(t, 3.0), [x], rng)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_log_positive_domain(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.5, 3.0, size=(4, 3))
        gradcheck(log, [x], rng)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_hardswish_inner_and_outer_pieces(self, seed):
        rng = np.random.default_rng(seed)
        inner = away_from_zero(rng, (6,), lo=0.2, hi=2.5)  # |x| < 3
        outer = away_from_zero(rng, (6,), lo=3.5, hi=6.0)  # |x| > 3
        gradcheck(hardswish, [inner], rng)
        gradcheck(hardswish, [outer], rng)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_softmax_axes(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((3, 5))
        gradcheck(lambda t: softmax(t, axis=1), [x], rng)
        gradcheck(lambda t: softmax(t, axis=0), [x], rng)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_reductions_and_shape_ops(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((3, 4, 2))
        gradcheck(lambda t: tsum(t, axis=1), [x], rng)
        gradcheck(lambda t: t.mean(axis=(0, 2)), [x], rng)
        gradcheck(lambda t: reshape(t, (6, 4)), [x], rng)
        gradcheck(lambda t: transpose(t, (2, 0, 1)), [x], rng)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_concat_and_gather(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((2, 3))
        b = rng.standard_normal((4, 3))
        gradcheck(lambda t, u: concat([t, u], axis=0), [a, b], rng)
        idx = np.array([0, 2, 2, 1])  # repeated row: scatter must accumulate
        m = rng.standard_normal((3, 4))
        gradcheck(lambda t: gather_rows(t, idx), [m], rng)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_conv2d_stride_pad(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3)) * 0.5
        b = rng.standard_normal(3)
        gradcheck(
            lambda t, u, v: conv2d(t, u, v, stride=(2, 2), padding=(1, 1)),
            [x, w, b],
            rng,
        )

    @pytest.mark.parametrize("seed", SEEDS)
    def test_conv2d_grouped_and_depthwise(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 4, 4, 4))
        wg = rng.standard_normal((4, 2, 3, 3)) * 0.5
        gradcheck(lambda t, u: conv2d(t, u, padding=(1, 1), groups=2), [x, wg], rng)
        wd = rng.standard_normal((4, 1, 3, 3)) * 0.5
        gradcheck(lambda t, u: conv2d(t, u, padding=(1, 1), groups=4), [x, wd], rng)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_conv1d(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 3, 8))
        w = rng.standard_normal((4, 3, 3)) * 0.5
        b = rng.standard_normal(4)
        gradcheck(lambda t, u, v: conv1d(t, u, v, stride=2, padding=1), [x, w, b], rng)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_global_pools(self, seed):
        rng = np.random.default_rng(seed)
        gradcheck(global_avg_pool2d, [rng.standard_normal((2, 3, 4, 4))], rng)
        gradcheck(global_avg_pool1d, [rng.standard_normal((2, 3, 6))], rng)


class TestLayerModules:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_linear_layer(self, seed):
        rng = np.random.default_rng(seed)
        layer = Linear(5, 3, rng=rng)
        module_gradcheck(layer, rng.standard_normal((4, 5)), rng)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_conv_layers(self, seed):
        rng = np.random.default_rng(seed)
        module_gradcheck(
            Conv2d(2, 3, 3, stride=2, padding=1, rng=rng),
            rng.standard_normal((2, 2, 5, 5)),
            rng,
        )
        module_gradcheck(
            Conv1d(2, 3, 3, padding=1, rng=rng), rng.standard_normal((2, 2, 6)), rng
        )

    @pytest.mark.parametrize("seed", SEEDS)
    def test_batchnorm_training_mode(self, seed):
        rng = np.random.default_rng(seed)
        bn2 = BatchNorm2d(3)
        bn2.train()
        module_gradcheck(bn2, rng.standard_normal((4, 3, 2, 2)), rng, tol=5e-4)
        bn1 = BatchNorm1d(3)
        bn1.train()
        module_gradcheck(bn1, rng.standard_normal((4, 3, 5)), rng, tol=5e-4)

    def test_batchnorm_eval_uses_running_stats(self):
        rng = np.random.default_rng(9)
        bn = BatchNorm2d(2)
        bn.train()
        for _ in range(30):
            bn.forward(Tensor(rng.standard_normal((8, 2, 3, 3)) * 2.0 + 1.0))
        bn.eval()
        x = np.zeros((1, 2, 1, 1))
        out = bn.forward(Tensor(x)).data
        # normalizing a zero input by mean~1, var~4 should land near -0.5
        assert np.all(np.abs(out + 0.5) < 0.2)

    def test_batchnorm_normalizes_batch_in_training(self):
        rng = np.random.default_rng(13)
        bn = BatchNorm2d(3)
        bn.train()
        x = rng.standard_normal((16, 3, 4, 4)) * 5.0 + 2.0
        out = bn.forward(Tensor(x)).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.std(axis=(0, 2, 3)), 1.0, atol=1e-3)

    def test_named_parameters_paths_are_stable(self):
        layer = Conv2d(1, 2, 3)
        names = [n for n, _ in layer.named_parameters()]
        assert names == ["weight", "bias"]

    def test_param_replacement_reregisters(self):
        # pruning swaps parameter tensors in place; the registry must follow
        layer = Linear(4, 2)
        layer.weight = Tensor(np.zeros((1, 4)), requires_grad=True)
        names = dict(layer.named_parameters())
        assert names["weight"].shape == (1, 4)
