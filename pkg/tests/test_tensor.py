"""Forward examples and gradient checks for the autodiff substrate."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from navmem import tensor as T
from navmem.tensor import (
    ConfigError,
    GradTape,
    ShapeError,
    Tensor,
    add,
    channel_dropout,
    conv2d,
    dense,
    finite_diff_grad,
    global_avg_pool,
    group_norm,
    hadamard,
    mean_all,
    pointwise,
    relative_error,
    rows_l2norm,
    sigmoid,
    sub,
    sum_all,
    tanh,
)

RNG = np.random.default_rng(0)


def randt(*shape, requires_grad=True):
    return Tensor(RNG.uniform(-1.0, 1.0, shape), requires_grad=requires_grad)


def check_grads(build, params, tol=1e-4, h=1e-5):
    """Compare tape gradients of build() against central differences."""
    with GradTape() as tape:
        loss = build()
        tape.backward(loss)
    for p in params:
        analytic = p.grad.copy()
        p.zero_grad()
        numeric = finite_diff_grad(lambda _: build().item(), p, h=h)
        err = relative_error(analytic, numeric)
        assert err <= tol, f"gradient mismatch {err:.2e} for tensor of shape {p.shape}"


# ---------------------------------------------------------------------------
# conv2d

class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(RNG.uniform(-1, 1, (1, 4, 4)))
        k = Tensor(np.ones((1, 1, 1, 1)))
        b = Tensor(np.zeros(1))
        out = conv2d(x, k, b)
        np.testing.assert_allclose(out.data, x.data)

    def test_all_ones_sum(self):
        x = Tensor(np.arange(1.0, 10.0).reshape(1, 3, 3))
        k = Tensor(np.ones((1, 1, 3, 3)))
        b = Tensor(np.zeros(1))
        out = conv2d(x, k, b, stride=1, padding=0)
        assert out.shape == (1, 1, 1)
        assert out.item() == pytest.approx(45.0)

    def test_strided_shape(self):
        x = Tensor(np.zeros((8, 112, 112)))
        k = Tensor(np.zeros((16, 8, 3, 3)))
        b = Tensor(np.zeros(16))
        assert conv2d(x, k, b, stride=2, padding=1).shape == (16, 56, 56)

    def test_channel_mismatch_names_dimension(self):
        x = Tensor(np.zeros((5, 4, 4)))
        k = Tensor(np.zeros((2, 8, 3, 3)))
        with pytest.raises(ShapeError, match="channels 5"):
            conv2d(x, k, None, padding=1)

    def test_kernel_too_large(self):
        x = Tensor(np.zeros((1, 2, 2)))
        k = Tensor(np.zeros((1, 1, 5, 5)))
        with pytest.raises(ShapeError, match="larger than padded"):
            conv2d(x, k, None)

    def test_linearity(self):
        k = randt(3, 2, 3, 3, requires_grad=False)
        x = Tensor(RNG.uniform(-1, 1, (2, 6, 6)))
        y = Tensor(RNG.uniform(-1, 1, (2, 6, 6)))
        a, b = 1.7, -0.4
        mix = Tensor(a * x.data + b * y.data)
        lhs = conv2d(mix, k, None, padding=1).data
        rhs = a * conv2d(x, k, None, padding=1).data + b * conv2d(y, k, None, padding=1).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_batched_matches_loop(self):
        k = randt(4, 3, 3, 3, requires_grad=False)
        b = randt(4, requires_grad=False)
        xs = RNG.uniform(-1, 1, (5, 3, 8, 8))
        batched = conv2d(Tensor(xs), k, b, stride=2, padding=1).data
        for i in range(5):
            single = conv2d(Tensor(xs[i]), k, b, stride=2, padding=1).data
            np.testing.assert_allclose(batched[i], single, atol=1e-12)

    def test_gradients(self):
        x = randt(2, 5, 5)
        k = randt(3, 2, 3, 3)
        b = randt(3)
        check_grads(lambda: sum_all(tanh(conv2d(x, k, b, stride=2, padding=1))), [x, k, b])


# ---------------------------------------------------------------------------
# group_norm

class TestGroupNorm:
    def test_constant_input_zeros(self):
        x = Tensor(np.full((4, 3, 3), 2.5))
        g = Tensor(np.ones(4))
        b = Tensor(np.zeros(4))
        out = group_norm(x, 2, g, b)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-8)

    def test_two_element_hand_case(self):
        x = Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1))
        out = group_norm(x, 1, Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-5)
        np.testing.assert_allclose(out.data.ravel(), [-0.999995, 0.999995], atol=1e-6)

    def test_affine_override(self):
        x = randt(6, 2, 2, requires_grad=False)
        out = group_norm(x, 3, Tensor(np.zeros(6)), Tensor(np.full(6, 5.0)))
        np.testing.assert_allclose(out.data, 5.0)

    def test_indivisible_groups_rejected(self):
        x = Tensor(np.zeros((5, 2, 2)))
        with pytest.raises(ConfigError, match="not divisible"):
            group_norm(x, 2, Tensor(np.ones(5)), Tensor(np.zeros(5)))

    def test_normalized_statistics(self):
        x = Tensor(RNG.normal(0, 2.0, (8, 6, 6)))
        out = group_norm(x, 4, Tensor(np.ones(8)), Tensor(np.zeros(8)))
        per_group = out.data.reshape(4, -1)
        assert np.all(np.abs(per_group.mean(axis=1)) <= 1e-6)
        assert np.all(np.abs(per_group.var(axis=1) - 1.0) <= 1e-5)

    def test_gradients(self):
        x = randt(4, 3, 3)
        g = randt(4)
        b = randt(4)
        check_grads(lambda: sum_all(sigmoid(group_norm(x, 2, g, b))), [x, g, b])


# ---------------------------------------------------------------------------
# channel_dropout

class TestChannelDropout:
    def test_rate_zero_noop(self):
        x = randt(3, 4, 4, requires_grad=False)
        out = channel_dropout(x, 0.0, np.ones(3))
        np.testing.assert_array_equal(out.data, x.data)

    def test_keep_one_of_two(self):
        x = Tensor(np.ones((2, 2, 2)))
        out = channel_dropout(x, 0.5, np.array([0.0, 1.0]))
        np.testing.assert_allclose(out.data[0], 0.0)
        np.testing.assert_allclose(out.data[1], 2.0)

    def test_deterministic_given_mask(self):
        x = randt(4, 3, 3, requires_grad=False)
        mask = np.array([1.0, 0.0, 1.0, 0.0])
        a = channel_dropout(x, 0.25, mask).data
        b = channel_dropout(x, 0.25, mask).data
        np.testing.assert_array_equal(a, b)

    def test_rate_one_rejected(self):
        with pytest.raises(ConfigError):
            channel_dropout(Tensor(np.zeros((1, 1, 1))), 1.0, np.ones(1))

    def test_preserves_expectation(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.uniform(0.5, 1.5, (3, 2, 2)))
        rate = 0.3
        n = 4000
        acc = np.zeros_like(x.data)
        for _ in range(n):
            mask = (rng.random(3) >= rate).astype(float)
            acc += channel_dropout(x, rate, mask).data
        mean = acc / n
        # per-channel MC std of the scaled Bernoulli estimate
        sigma = x.data * np.sqrt(rate / (1 - rate)) / np.sqrt(n)
        assert np.all(np.abs(mean - x.data) <= 3 * sigma + 1e-12)

    def test_gradients(self):
        x = randt(4, 3, 3)
        mask = np.array([1.0, 0.0, 1.0, 1.0])
        check_grads(lambda: sum_all(hadamard(channel_dropout(x, 0.3, mask),
                                             channel_dropout(x, 0.3, mask))), [x])


# ---------------------------------------------------------------------------
# pointwise

class TestPointwise:
    def test_sigmoid_zero(self):
        out = pointwise(Tensor(np.zeros((2, 3))), "sigmoid")
        np.testing.assert_allclose(out.data, 0.5)

    def test_tanh_zero(self):
        out = pointwise(Tensor(np.zeros(5)), "tanh")
        np.testing.assert_allclose(out.data, 0.0)

    def test_hadamard_hand(self):
        out = pointwise(Tensor(np.array([1.0, 2.0])), "hadamard", Tensor(np.array([3.0, -1.0])))
        np.testing.assert_allclose(out.data, [3.0, -2.0])

    def test_binary_shape_mismatch(self):
        with pytest.raises(ShapeError):
            add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))

    def test_sigmoid_extreme_inputs_finite(self):
        out = sigmoid(Tensor(np.array([-1e4, 1e4])))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [0.0, 1.0], atol=1e-12)

    @given(st.floats(-5, 5), st.floats(-5, 5))
    def test_add_commutes(self, a, b):
        x, y = Tensor(np.array([a])), Tensor(np.array([b]))
        np.testing.assert_array_equal(add(x, y).data, add(y, x).data)

    def test_gradients(self):
        x = randt(6)
        y = randt(6)
        check_grads(lambda: sum_all(hadamard(sigmoid(x), tanh(sub(x, y)))), [x, y])


# ---------------------------------------------------------------------------
# pooling / dense / reductions

class TestPoolDense:
    def test_pool_constant(self):
        out = global_avg_pool(Tensor(np.full((3, 4, 5), 1.25)))
        np.testing.assert_allclose(out.data, 1.25)

    def test_pool_hand_mean(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2))
        np.testing.assert_allclose(global_avg_pool(x).data, [2.5])

    def test_pool_shape(self):
        assert global_avg_pool(Tensor(np.zeros((1024, 2, 3)))).shape == (1024,)

    def test_dense_identity(self):
        x = randt(4, requires_grad=False)
        out = dense(x, Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, x.data)

    def test_dense_hand_matvec(self):
        out = dense(Tensor(np.array([2.0, 3.0])), Tensor(np.array([[1.0, 1.0]])),
                    Tensor(np.array([1.0])))
        np.testing.assert_allclose(out.data, [6.0])

    def test_dense_zero_weight_gives_bias(self):
        b = Tensor(np.array([1.0, -2.0]))
        out = dense(Tensor(np.array([5.0, 6.0, 7.0])), Tensor(np.zeros((2, 3))), b)
        np.testing.assert_allclose(out.data, b.data)

    def test_gradients(self):
        x = randt(2, 3, 4)
        w = randt(3, 2)
        b = randt(3)

        def build():
            pooled = global_avg_pool(x)
            return sum_all(tanh(dense(pooled, w, b)))

        check_grads(build, [x, w, b])

    def test_rows_l2norm(self):
        x = Tensor(np.array([[3.0, 4.0], [0.0, 0.0]]))
        np.testing.assert_allclose(rows_l2norm(x).data, [5.0, 0.0])

    def test_rows_l2norm_gradients(self):
        x = randt(4, 2)
        check_grads(lambda: mean_all(rows_l2norm(x)), [x])


# ---------------------------------------------------------------------------
# structural ops

class TestStructural:
    def test_concat_slice_roundtrip(self):
        a, b = randt(2, 3, 2, 2, requires_grad=False), randt(2, 5, 2, 2, requires_grad=False)
        cat = T.concat([a, b], axis=1)
        np.testing.assert_array_equal(T.slice_axis(cat, 1, 3, 8).data, b.data)

    def test_concat_gradients(self):
        a, b = randt(2, 2, 3, 3), randt(2, 3, 3, 3)
        k = randt(4, 5, 3, 3)
        check_grads(lambda: sum_all(conv2d(T.concat([a, b], axis=1), k, None, padding=1)),
                    [a, b, k])

    def test_gather_merge_rows(self):
        base = randt(4, 2, requires_grad=False)
        new = Tensor(np.full((2, 2), 9.0))
        merged = T.merge_rows(base, new, np.array([1, 3]))
        np.testing.assert_array_equal(merged.data[[0, 2]], base.data[[0, 2]])
        np.testing.assert_array_equal(merged.data[[1, 3]], 9.0)
        np.testing.assert_array_equal(T.gather_rows(merged, np.array([1, 3])).data, new.data)

    def test_gather_merge_gradients(self):
        base = randt(4, 3)
        new = randt(2, 3)
        rows = np.array([0, 2])
        check_grads(lambda: sum_all(hadamard(T.merge_rows(base, new, rows),
                                             T.merge_rows(base, new, rows))), [base, new])

    def test_gather_repeated_rows_accumulate(self):
        x = randt(3, 2)
        rows = np.array([1, 1, 2])
        check_grads(lambda: sum_all(T.gather_rows(x, rows)), [x])


# ---------------------------------------------------------------------------
# tape semantics

class TestTape:
    def test_sum_grad_is_ones(self):
        x = randt(3, 4)
        with GradTape() as tape:
            loss = sum_all(x)
            tape.backward(loss)
        np.testing.assert_allclose(x.grad, 1.0)

    def test_sum_of_squares_grad(self):
        x = randt(5)
        with GradTape() as tape:
            tape.backward(sum_all(hadamard(x, x)))
        np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-12)

    def test_fanout_accumulates(self):
        x = randt(3)
        with GradTape() as tape:
            a = add(x, x)
            tape.backward(sum_all(a))
        np.testing.assert_allclose(x.grad, 2.0)

    def test_joint_loss_equals_separate_sum(self):
        x = randt(4)
        y = randt(4)

        def l1():
            return sum_all(hadamard(x, x))

        def l2():
            return sum_all(hadamard(x, y))

        with GradTape() as tape:
            tape.backward(add(l1(), l2()))
        joint = x.grad.copy()
        x.zero_grad()
        with GradTape() as tape:
            tape.backward(l1())
        with GradTape() as tape:
            tape.backward(l2())
        np.testing.assert_allclose(joint, x.grad, atol=1e-10)

    def test_non_scalar_loss_rejected(self):
        x = randt(3)
        with GradTape() as tape:
            y = add(x, x)
            with pytest.raises(ShapeError, match="scalar"):
                tape.backward(y)

    def test_untracked_loss_rejected(self):
        x = randt(3)
        with GradTape() as tape:
            sum_all(x)  # recorded
            foreign = Tensor(np.asarray(1.0))
            with pytest.raises(ValueError, match="not produced"):
                tape.backward(foreign)

    def test_no_tape_no_recording(self):
        x = randt(3)
        out = sum_all(x)
        assert out.requires_grad is False

    def test_detach_blocks_flow(self):
        x = randt(3)
        with GradTape() as tape:
            mid = hadamard(x, x).detach()
            tape.backward(sum_all(hadamard(mid, Tensor(np.ones(3), requires_grad=True))))
        assert x.grad is None


# ---------------------------------------------------------------------------
# finite differences

class TestFiniteDiff:
    def test_sum_all_ones(self):
        x = randt(4)
        g = finite_diff_grad(lambda t: sum_all(t).item(), x)
        np.testing.assert_allclose(g, 1.0, atol=1e-9)

    def test_sum_of_squares(self):
        x = Tensor(np.array([3.0]))
        g = finite_diff_grad(lambda t: sum_all(hadamard(t, t)).item(), x)
        np.testing.assert_allclose(g, [6.0], atol=1e-9)

    def test_composite_network_fragment(self):
        x = randt(2, 4, 4)
        k = randt(2, 2, 3, 3)
        gam, bet = randt(2), randt(2)
        mask = np.array([1.0, 1.0])

        def build():
            h = conv2d(x, k, None, padding=1)
            h = group_norm(h, 1, gam, bet)
            h = channel_dropout(h, 0.2, mask)
            return sum_all(sigmoid(h))

        check_grads(build, [x, k, gam, bet])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31 - 1))
def test_conv_groupnorm_grad_property(c_out, c_in, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(-1, 1, (c_in, 4, 4)), requires_grad=True)
    k = Tensor(rng.uniform(-1, 1, (c_out, c_in, 3, 3)), requires_grad=True)

    def build():
        return sum_all(tanh(conv2d(x, k, None, padding=1)))

    with GradTape() as tape:
        tape.backward(build())
    analytic = k.grad.copy()
    k.zero_grad()
    numeric = finite_diff_grad(lambda _: build().item(), k)
    assert relative_error(analytic, numeric) <= 1e-4
