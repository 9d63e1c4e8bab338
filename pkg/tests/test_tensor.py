import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dflow.tensor import (
    GradTape,
    Tensor,
    add,
    backward,
    clamp,
    conv2d_same,
    conv3d_same,
    hadamard,
    log,
    mean_all,
    power,
    scale,
    sigmoid,
    stack_steps,
    sub_from_one,
    sum_all,
    tanh,
    time_slice,
    zeros,
)

from oracles import conv2d_naive, conv3d_naive, finite_difference, rel_err


def rand(rng, *shape):
    return Tensor(rng.uniform(-1.0, 1.0, size=shape))


class TestTensorBasics:
    def test_rank_limit(self):
        Tensor(np.zeros((2, 2, 2, 2, 2)))
        with pytest.raises(ValueError):
            Tensor(np.zeros((2, 2, 2, 2, 2, 2)))

    def test_value_count_matches_shape(self):
        t = Tensor(np.arange(12.0).reshape(3, 4))
        assert t.data.size == 12 and t.shape == (3, 4)

    def test_is_finite_flags_nan_and_inf(self):
        assert Tensor([1.0, 2.0]).is_finite()
        assert not Tensor([1.0, np.nan]).is_finite()
        assert not Tensor([np.inf, 0.0]).is_finite()

    def test_float32_inference_path_preserves_dtype(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.uniform(-1, 1, size=(2, 5, 5)).astype(np.float32))
        k = Tensor(rng.uniform(-1, 1, size=(3, 2, 3, 3)).astype(np.float32))
        out = sigmoid(conv2d_same(x, k))
        assert out.data.dtype == np.float32
        exact = sigmoid(conv2d_same(Tensor(x.data.astype(np.float64)),
                                    Tensor(k.data.astype(np.float64))))
        npt.assert_allclose(out.data, exact.data, atol=1e-5)

    def test_integer_input_becomes_float64(self):
        assert Tensor([1, 2, 3]).data.dtype == np.float64


class TestElementwise:
    def test_sigmoid_at_zero(self):
        out = sigmoid(zeros((3, 4, 4)))
        npt.assert_array_equal(out.data, 0.5)

    def test_sigmoid_extreme_arguments_stay_finite(self):
        out = sigmoid(Tensor([-1000.0, 1000.0]))
        npt.assert_allclose(out.data, [0.0, 1.0])

    def test_partition_of_unity(self):
        rng = np.random.default_rng(0)
        f = rand(rng, 2, 5, 5)
        total = add(sub_from_one(f), f)
        npt.assert_array_equal(total.data, np.ones((2, 5, 5)))

    def test_hadamard_identity_element(self):
        rng = np.random.default_rng(1)
        a = rand(rng, 3, 4)
        out = hadamard(a, Tensor(np.ones((3, 4))))
        npt.assert_array_equal(out.data, a.data)

    def test_binary_ops_reject_shape_mismatch(self):
        a, b = zeros((2, 3)), zeros((3, 2))
        with pytest.raises(ValueError):
            add(a, b)
        with pytest.raises(ValueError):
            hadamard(a, b)

    @given(st.floats(min_value=-30.0, max_value=30.0))
    def test_sigmoid_tanh_ranges(self, x):
        s = sigmoid(Tensor(np.array(x))).data
        t = tanh(Tensor(np.array(x))).data
        assert 0.0 < s < 1.0
        assert -1.0 <= t <= 1.0


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.ones((1, 5, 5)))
        k = Tensor(np.ones((1, 1, 1, 1)))
        out = conv2d_same(x, k, zeros((1,)))
        npt.assert_array_equal(out.data, np.ones((1, 5, 5)))

    def test_zero_padding_arithmetic(self):
        x = Tensor(np.ones((1, 5, 5)))
        k = Tensor(np.ones((1, 1, 3, 3)))
        out = conv2d_same(x, k, zeros((1,))).data[0]
        assert out[2, 2] == 9.0
        assert out[0, 2] == 6.0 and out[2, 0] == 6.0
        assert out[0, 0] == 4.0 and out[4, 4] == 4.0

    def test_matches_naive_loop_oracle(self):
        rng = np.random.default_rng(42)
        x = rng.uniform(-1, 1, size=(4, 7, 7))
        k = rng.uniform(-1, 1, size=(8, 4, 3, 3))
        b = rng.uniform(-1, 1, size=8)
        out = conv2d_same(Tensor(x), Tensor(k), Tensor(b))
        npt.assert_allclose(out.data, conv2d_naive(x, k, b), atol=1e-12)

    def test_rejects_even_kernel(self):
        with pytest.raises(ValueError):
            conv2d_same(zeros((1, 4, 4)), zeros((1, 1, 2, 2)))

    def test_rejects_channel_mismatch(self):
        with pytest.raises(ValueError):
            conv2d_same(zeros((2, 4, 4)), zeros((1, 3, 3, 3)))

    def test_linear_in_input_and_kernel(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            a, b = (rand(rng, 3, 6, 6) for _ in range(2))
            k1, k2 = (rand(rng, 2, 3, 3, 3) for _ in range(2))
            lhs = conv2d_same(Tensor(a.data + b.data), k1).data
            rhs = conv2d_same(a, k1).data + conv2d_same(b, k1).data
            npt.assert_allclose(lhs, rhs, atol=1e-10)
            lhs = conv2d_same(a, Tensor(k1.data + k2.data)).data
            rhs = conv2d_same(a, k1).data + conv2d_same(a, k2).data
            npt.assert_allclose(lhs, rhs, atol=1e-10)


class TestConv3d:
    def test_zero_kernel_annihilates(self):
        x = Tensor(np.ones((2, 3, 4, 4)))
        out = conv3d_same(x, zeros((3, 2, 3, 3, 3)), zeros((3,)))
        npt.assert_array_equal(out.data, 0.0)

    def test_single_frame_collapses_to_central_time_slice(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(-1, 1, size=(2, 4, 4))
        k = np.zeros((3, 2, 3, 3, 3))
        k[:, :, 1] = rng.uniform(-1, 1, size=(3, 2, 3, 3))
        b = rng.uniform(-1, 1, size=3)
        out3d = conv3d_same(Tensor(x[:, None]), Tensor(k), Tensor(b))
        out2d = conv2d_same(Tensor(x), Tensor(k[:, :, 1]), Tensor(b))
        npt.assert_allclose(out3d.data[:, 0], out2d.data, atol=1e-12)

    def test_matches_naive_loop_oracle(self):
        rng = np.random.default_rng(9)
        x = rng.uniform(-1, 1, size=(3, 4, 5, 5))
        k = rng.uniform(-1, 1, size=(2, 3, 3, 3, 3))
        b = rng.uniform(-1, 1, size=2)
        out = conv3d_same(Tensor(x), Tensor(k), Tensor(b))
        npt.assert_allclose(out.data, conv3d_naive(x, k, b), atol=1e-12)

    def test_linear_in_input_and_kernel(self):
        rng = np.random.default_rng(10)
        a = Tensor(rng.uniform(-1, 1, size=(2, 3, 4, 4)))
        b = Tensor(rng.uniform(-1, 1, size=(2, 3, 4, 4)))
        k1 = Tensor(rng.uniform(-1, 1, size=(2, 2, 3, 3, 3)))
        k2 = Tensor(rng.uniform(-1, 1, size=(2, 2, 3, 3, 3)))
        npt.assert_allclose(
            conv3d_same(Tensor(a.data + b.data), k1).data,
            conv3d_same(a, k1).data + conv3d_same(b, k1).data, atol=1e-10)
        npt.assert_allclose(
            conv3d_same(a, Tensor(k1.data + k2.data)).data,
            conv3d_same(a, k1).data + conv3d_same(a, k2).data, atol=1e-10)


class TestBackward:
    def test_quadratic_gradient(self):
        rng = np.random.default_rng(5)
        w = Tensor(rng.uniform(-1, 1, size=(3, 4)), requires_grad=True)
        with GradTape() as tape:
            loss = sum_all(hadamard(w, w))
        backward(tape, loss)
        npt.assert_allclose(w.grad, 2.0 * w.data, atol=1e-12)

    def test_conv_gradients_match_finite_differences(self):
        rng = np.random.default_rng(11)
        x = Tensor(np.ones((2, 5, 5)))
        w = Tensor(rng.uniform(-1, 1, size=(3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, size=3), requires_grad=True)

        def loss_value():
            return float(conv2d_same(x, w, b).data.sum())

        with GradTape() as tape:
            loss = sum_all(conv2d_same(x, w, b))
        backward(tape, loss)
        for t in (w, b):
            fd = finite_difference(loss_value, t.data)
            assert rel_err(t.grad, fd).max() < 1e-5

    def test_detached_tensor_gets_no_gradient(self):
        w = Tensor(np.ones((2, 2)), requires_grad=True)
        frozen = w.detach()
        with GradTape() as tape:
            loss = sum_all(hadamard(frozen, frozen))
        with pytest.raises(ValueError):
            backward(tape, loss)  # nothing was recorded: tape is empty
        assert frozen.grad is None and w.grad is None

    def test_loss_must_be_scalar(self):
        w = Tensor(np.ones((2, 2)), requires_grad=True)
        with GradTape() as tape:
            out = hadamard(w, w)
        with pytest.raises(ValueError):
            backward(tape, out)

    def test_gradients_accumulate_over_consumers(self):
        w = Tensor(np.full((3,), 2.0), requires_grad=True)
        with GradTape() as tape:
            loss = sum_all(add(hadamard(w, w), w))  # d/dw = 2w + 1
        backward(tape, loss)
        npt.assert_allclose(w.grad, 2.0 * w.data + 1.0, atol=1e-12)

    def test_unused_registered_parameter_gets_zero_gradient(self):
        used = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones(3), requires_grad=True)
        with GradTape() as tape:
            _dead_end = hadamard(unused, Tensor(np.zeros(3)))
            loss = sum_all(hadamard(used, used))
        backward(tape, loss)
        npt.assert_array_equal(unused.grad, np.zeros(3))

    def test_replaying_tape_twice_is_bit_identical(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.uniform(-1, 1, size=(2, 6, 6)))
        w = Tensor(rng.uniform(-1, 1, size=(2, 2, 3, 3)), requires_grad=True)
        with GradTape() as tape:
            loss = mean_all(tanh(conv2d_same(x, w)))
        backward(tape, loss)
        first = w.grad.copy()
        backward(tape, loss)
        npt.assert_array_equal(w.grad, first)

    @pytest.mark.parametrize("op,dfun", [
        (sigmoid, None), (tanh, None), (log, None),
        (lambda t: power(t, 2.5), None),
        (lambda t: clamp(t, 0.05, 0.95), None),
        (lambda t: scale(t, -1.7), None),
        (sub_from_one, None),
    ])
    def test_unary_gradients_match_finite_differences(self, op, dfun):
        rng = np.random.default_rng(17)
        w = Tensor(rng.uniform(0.2, 0.8, size=(4, 4)), requires_grad=True)

        def loss_value():
            return float(op(Tensor(w.data)).data.sum())

        with GradTape() as tape:
            loss = sum_all(op(w))
        backward(tape, loss)
        fd = finite_difference(loss_value, w.data)
        assert rel_err(w.grad, fd).max() < 1e-4

    def test_stack_and_slice_gradients(self):
        rng = np.random.default_rng(19)
        a = Tensor(rng.uniform(-1, 1, size=(2, 3, 3)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, size=(2, 3, 3)), requires_grad=True)
        r = Tensor(rng.uniform(-1, 1, size=(2, 2, 3, 3)), requires_grad=True)

        def loss_value():
            stacked = np.stack([a.data, b.data], axis=0)
            picked = r.data[:, 1]
            return float((stacked ** 2).sum() + (picked ** 2).sum())

        with GradTape() as tape:
            stacked = stack_steps([a, b])
            picked = time_slice(r, 1)
            loss = add(sum_all(hadamard(stacked, stacked)),
                       sum_all(hadamard(picked, picked)))
        backward(tape, loss)
        for t in (a, b, r):
            fd = finite_difference(loss_value, t.data)
            assert rel_err(t.grad, fd).max() < 1e-5


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_conv2d_gradcheck_random_inputs(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(-1, 1, size=(2, 4, 4)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, size=(2, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.uniform(-1, 1, size=2), requires_grad=True)

    def loss_value():
        return float(np.tanh(conv2d_naive(x.data, w.data, b.data)).mean())

    with GradTape() as tape:
        loss = mean_all(tanh(conv2d_same(x, w, b)))
    backward(tape, loss)
    for t in (x, w, b):
        fd = finite_difference(loss_value, t.data)
        assert rel_err(t.grad, fd).max() < 1e-4
