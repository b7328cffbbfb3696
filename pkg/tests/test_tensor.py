import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ihf_harmony.optim import grad_check
from ihf_harmony.tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    add,
    backward,
    channel_stats,
    clamp,
    concat,
    conv2d,
    div,
    extract_patches,
    global_avg_pool,
    l1_norm,
    l2_norm,
    leaky_relu,
    linear,
    matmul,
    mean,
    mul,
    narrow,
    no_tape,
    relu,
    reshape,
    sigmoid,
    split,
    sqrt,
    sub,
    tabs,
    take,
    take_along,
    tanh,
    transpose,
    tsum,
)


def param(rng, *shape, scale=1.0, name=None):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, name=name)


def away_from_kinks(rng, *shape):
    """Values bounded away from 0 so relu/abs kinks never sit inside the FD stencil."""
    v = rng.uniform(0.1, 1.0, shape) * rng.choice([-1.0, 1.0], shape)
    return Tensor(v, requires_grad=True)


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------

class TestConv2d:
    def test_identity_kernel_is_identity(self, rng):
        x = Tensor(rng.standard_normal((4, 7, 5)).astype(np.float32))
        w = Tensor(np.eye(4, dtype=np.float32).reshape(4, 4, 1, 1))
        out = conv2d(x, w, Tensor(np.zeros(4, dtype=np.float32)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_box_filter_preserves_constant_interior(self):
        x = Tensor(np.full((1, 6, 6), 2.5))
        w = Tensor(np.full((1, 1, 3, 3), 1.0 / 9.0))
        out = conv2d(x, w, padding=1).data
        np.testing.assert_allclose(out[0, 1:-1, 1:-1], 2.5, rtol=1e-12)

    def test_all_ones_kernel_sums_window(self):
        x = Tensor(np.arange(1.0, 10.0).reshape(1, 3, 3))
        out = conv2d(x, Tensor(np.ones((1, 1, 3, 3))), stride=1, padding=0)
        assert out.shape == (1, 1, 1)
        assert out.data.item() == 45.0

    @pytest.mark.parametrize("h,k,s,p", [(8, 3, 1, 1), (8, 3, 2, 1), (9, 3, 2, 0), (7, 5, 1, 2), (6, 1, 3, 0)])
    def test_output_size(self, h, k, s, p):
        x = Tensor(np.zeros((2, 3, h, h)))
        out = conv2d(x, Tensor(np.zeros((4, 3, k, k))), stride=s, padding=p)
        assert out.shape == (2, 4, (h + 2 * p - k) // s + 1, (h + 2 * p - k) // s + 1)

    def test_matches_direct_cross_correlation(self, rng):
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(out)
        for n in range(2):
            for o in range(4):
                for i in range(out.shape[2]):
                    for j in range(out.shape[3]):
                        ref[n, o, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]) + b[o]
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_channel_mismatch_names_dimensions(self):
        with pytest.raises(ShapeError, match="channels"):
            conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))))

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))


class TestChannelStats:
    def test_constant_channel(self):
        mu, sigma = channel_stats(Tensor(np.full((1, 4, 4), 2.0)), eps=0.0)
        assert mu.data[0] == 2.0 and sigma.data[0] == 0.0

    def test_constant_channel_default_eps(self):
        _, sigma = channel_stats(Tensor(np.full((1, 4, 4), 2.0)))
        assert sigma.data[0] == pytest.approx(np.sqrt(1e-5))

    def test_two_values(self):
        mu, sigma = channel_stats(Tensor(np.array([[[1.0, 3.0]]])), eps=0.0)
        assert mu.data[0] == 2.0 and sigma.data[0] == 1.0

    def test_channels_independent(self, rng):
        x = rng.standard_normal((2, 5, 5))
        mu, sigma = channel_stats(Tensor(x), eps=0.0)
        for c in range(2):
            assert mu.data[c] == pytest.approx(x[c].mean())
            assert sigma.data[c] == pytest.approx(x[c].std())

    def test_batched_shape(self):
        mu, sigma = channel_stats(Tensor(np.zeros((3, 4, 2, 2))))
        assert mu.shape == sigma.shape == (3, 4)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (2, 4, 4), elements=st.floats(-10, 10)),
           st.floats(-5, 5).filter(lambda a: abs(a) > 1e-3), st.floats(-5, 5))
    def test_affine_equivariance(self, x, a, b):
        mu, sigma = channel_stats(Tensor(x), eps=0.0)
        mu2, sigma2 = channel_stats(Tensor(a * x + b), eps=0.0)
        np.testing.assert_allclose(mu2.data, a * mu.data + b, atol=1e-6 * (1 + abs(a) * 10 + abs(b)))
        np.testing.assert_allclose(sigma2.data, abs(a) * sigma.data, atol=1e-6 * (1 + abs(a) * 10))


class TestElementwise:
    def test_broadcast_add_gradient_unbroadcasts(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = tsum(add(a, b))
        g = backward(tape, loss)
        np.testing.assert_array_equal(g[b], [2.0, 2.0, 2.0])
        np.testing.assert_array_equal(g[a], np.ones((2, 3)))

    def test_leaky_relu_slope(self):
        out = leaky_relu(Tensor(np.array([-1.0, 2.0])))
        np.testing.assert_allclose(out.data, [-0.2, 2.0])

    def test_clamp_bounds(self):
        np.testing.assert_array_equal(clamp(Tensor(np.array([-3.0, 0.5, 3.0])), -1, 1).data, [-1, 0.5, 1])

    def test_scalar_operators(self):
        x = Tensor(np.array([2.0]))
        np.testing.assert_allclose((1.0 - x * 3 + x / 4).data, [-4.5])
        np.testing.assert_allclose((-x).data, [-2.0])

    def test_nan_is_error(self):
        with np.errstate(invalid="ignore"):
            with pytest.raises(NonFiniteError):
                sqrt(Tensor(np.array([-1.0])))

    def test_division_by_zero_is_error(self):
        with np.errstate(divide="ignore"):
            with pytest.raises(NonFiniteError):
                div(Tensor(np.array([1.0])), Tensor(np.array([0.0])))

    def test_float32_preserved(self):
        x = Tensor(np.ones(3, dtype=np.float32))
        assert (x * 2.0 + 1.0).dtype == np.float32


class TestShapeOps:
    def test_split_concat_roundtrip(self, rng):
        x = Tensor(rng.standard_normal((2, 6, 3, 3)))
        parts = split(x, 3, axis=1)
        assert [p.shape for p in parts] == [(2, 2, 3, 3)] * 3
        np.testing.assert_array_equal(concat(parts, axis=1).data, x.data)

    def test_split_indivisible(self):
        with pytest.raises(ShapeError):
            split(Tensor(np.zeros((5, 2))), 2, axis=0)

    def test_extract_patches_layout(self):
        x = Tensor(np.arange(2 * 6 * 6, dtype=np.float64).reshape(1, 2, 6, 6))
        p = extract_patches(x, [1, 3], [0, 2], 2)
        assert p.shape == (1, 2, 2, 4)
        np.testing.assert_array_equal(p.data[0, 1, 1], x.data[0, 1, 3:5, 2:4].ravel())

    def test_extract_patches_out_of_bounds(self):
        with pytest.raises(ShapeError):
            extract_patches(Tensor(np.zeros((1, 1, 4, 4))), [3], [0], 2)


class TestBackward:
    def test_sum_gradient_is_ones(self, rng):
        x = param(rng, 2, 3, 4)
        with Tape() as tape:
            loss = tsum(x)
        np.testing.assert_array_equal(backward(tape, loss)[x], np.ones((2, 3, 4)))

    def test_square_gradient(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        with Tape() as tape:
            loss = tsum(x * x)
        np.testing.assert_array_equal(backward(tape, loss)[x], [6.0])

    def test_non_scalar_loss_rejected(self, rng):
        x = param(rng, 3)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ShapeError, match="scalar"):
            backward(tape, y)

    def test_reused_node_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        with Tape() as tape:
            y = x * 3.0
            loss = tsum(y * y + y)
        np.testing.assert_allclose(backward(tape, loss)[x], [2 * 6 * 3 + 3])

    def test_no_tape_records_nothing(self, rng):
        x = param(rng, 3)
        with Tape() as tape:
            with no_tape():
                tsum(x * x)
        assert len(tape.nodes) == 0

    def test_untracked_inputs_not_recorded(self):
        with Tape() as tape:
            tsum(Tensor(np.ones(3)) * 2.0)
        assert len(tape.nodes) == 0

    def test_composite_conv_stats_norm(self, rng):
        x = param(rng, 1, 2, 6, 6)
        w = param(rng, 3, 2, 3, 3, scale=0.5)
        b = param(rng, 3)

        def f():
            h = conv2d(x, w, b, padding=1)
            mu, sd = channel_stats(h)
            shape = mu.shape + (1, 1)
            return tsum(tanh((h - reshape(mu, shape)) / reshape(sd, shape)))

        # the bias is removed by the normalization, so its gradient is exactly zero
        assert grad_check(f, [x, w], tol=1e-4, max_coords=None).passed

    def test_tapes_are_thread_local(self, rng):
        x = param(rng, 3)
        other = {}

        def worker():
            other["y"] = tsum(x * x)

        with Tape() as tape:
            t = threading.Thread(target=worker)
            t.start()
            t.join()
        assert len(tape) == 0


# ---------------------------------------------------------------------------
# gradient checks: every primitive, 20 seeds
# ---------------------------------------------------------------------------

def _case_conv(rng):
    x, w, b = param(rng, 2, 2, 5, 5), param(rng, 3, 2, 3, 3), param(rng, 3)
    return (lambda: tsum(tanh(conv2d(x, w, b, stride=2, padding=1)))), [x, w, b]


def _case_conv3d_input(rng):
    x, w = param(rng, 2, 4, 4), param(rng, 2, 2, 3, 3)
    return (lambda: tsum(conv2d(x, w, padding=1) * conv2d(x, w, padding=1))), [x, w]


def _case_linear(rng):
    x, w, b = param(rng, 3, 4), param(rng, 5, 4), param(rng, 5)
    return (lambda: tsum(tanh(linear(x, w, b)))), [x, w, b]


def _case_relu(rng):
    x = away_from_kinks(rng, 3, 4)
    return (lambda: tsum(relu(x) * x)), [x]


def _case_leaky(rng):
    x = away_from_kinks(rng, 3, 4)
    return (lambda: tsum(leaky_relu(x) * x)), [x]


def _case_tanh_sigmoid(rng):
    x = param(rng, 6)
    return (lambda: tsum(tanh(x) * sigmoid(x))), [x]


def _case_arith(rng):
    a, b = param(rng, 2, 3), Tensor(rng.uniform(0.5, 2.0, (3,)), requires_grad=True)
    return (lambda: tsum(mul(sub(a, b), add(a, b)) / b)), [a, b]


def _case_sqrt_abs(rng):
    x = away_from_kinks(rng, 5)
    return (lambda: tsum(sqrt(tabs(x) + 0.1))), [x]


def _case_clamp(rng):
    x = Tensor(rng.uniform(-0.8, 0.8, (6,)) * 2.0, requires_grad=True)
    x.data[np.abs(np.abs(x.data) - 1.0) < 0.05] = 0.3
    return (lambda: tsum(clamp(x, -1.0, 1.0) * x)), [x]


def _case_reductions(rng):
    x = param(rng, 2, 3, 4)
    return (lambda: tsum(mean(x, axis=(1, 2)) * tsum(x * x, axis=0).mean())), [x]


def _case_concat_split_narrow(rng):
    a, b = param(rng, 2, 2, 3), param(rng, 2, 4, 3)
    def f():
        c = concat([a, b], axis=1)
        p, q, r = split(c, 3, axis=1)
        return tsum(p * r) + tsum(narrow(c, 1, 1, 4) * narrow(c, 1, 2, 5)) + tsum(q)
    return f, [a, b]


def _case_reshape_transpose_matmul(rng):
    a, b = param(rng, 2, 3, 4), param(rng, 2, 4, 3)
    return (lambda: tsum(tanh(matmul(transpose(reshape(a, (2, 4, 3)), (0, 2, 1)), b)))), [a, b]


def _case_take(rng):
    x = param(rng, 3, 5)
    idx = np.array([[0, 2], [1, 4], [3, 3]])
    return (lambda: tsum(take_along(x, idx, axis=1) * tsum(take(x, np.array([4, 0]), axis=1)))), [x]


def _case_stats_pool(rng):
    x = param(rng, 2, 3, 4, 4)
    def f():
        mu, sd = channel_stats(x)
        return tsum(mu * sd) + tsum(global_avg_pool(x) * global_avg_pool(x))
    return f, [x]


def _case_norms(rng):
    x = away_from_kinks(rng, 3, 4)
    return (lambda: l1_norm(x) + tsum(l2_norm(x, axis=1))), [x]


def _case_patches(rng):
    x = param(rng, 1, 2, 6, 6)
    return (lambda: tsum(tanh(extract_patches(x, [0, 2], [1, 3], 3)))), [x]


PRIMITIVE_CASES = {f.__name__[6:]: f for f in [
    _case_conv, _case_conv3d_input, _case_linear, _case_relu, _case_leaky, _case_tanh_sigmoid,
    _case_arith, _case_sqrt_abs, _case_clamp, _case_reductions, _case_concat_split_narrow,
    _case_reshape_transpose_matmul, _case_take, _case_stats_pool, _case_norms, _case_patches]}


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("case", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(case, seed):
    fn, params = PRIMITIVE_CASES[case](np.random.default_rng(seed))
    report = grad_check(fn, params, tol=1e-4, max_coords=None, seed=seed)
    assert report.passed, str(report)
