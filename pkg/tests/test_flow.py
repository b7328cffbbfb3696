import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ihf_harmony.flow import (
    FlowConfig,
    aan,
    aan_apply,
    coupling_forward,
    coupling_reverse,
    harmonize,
    ihf_forward,
    ihf_reverse,
    init_params,
    level_alpha,
    model_forward,
    model_reverse,
    squeeze,
    unsqueeze,
)
from ihf_harmony.optim import grad_check
from ihf_harmony.tensor import ShapeError, Tape, Tensor, backward, no_tape, tsum
from ihf_harmony.verify import random_params


def scalar(v):
    return Tensor(np.array([[[float(v)]]]))


class TestSqueeze:
    def test_ordering(self):
        out = squeeze(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2)
        assert out.shape == (4, 1, 1)
        np.testing.assert_array_equal(out.data.ravel(), [1, 2, 3, 4])

    def test_unsqueeze_ordering(self):
        out = unsqueeze(np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1), 2)
        np.testing.assert_array_equal(out.data, [[[1, 2], [3, 4]]])

    def test_shape(self):
        assert squeeze(np.zeros((2, 4, 4)), 2).shape == (8, 2, 2)

    def test_channel_definition(self):
        x = np.random.default_rng(0).standard_normal((3, 6, 9))
        r = 3
        out = squeeze(x, r).data
        for c, dy, dx in itertools.product(range(3), range(r), range(r)):
            np.testing.assert_array_equal(out[c * r * r + dy * r + dx], x[c, dy::r, dx::r])

    def test_r1_identity(self):
        x = np.random.default_rng(1).standard_normal((2, 3, 3))
        np.testing.assert_array_equal(unsqueeze(x, 1).data, x)
        np.testing.assert_array_equal(squeeze(x, 1).data, x)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 4), st.sampled_from([1, 2, 3]), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31))
    def test_roundtrip_bit_exact(self, c, r, hb, wb, seed):
        x = np.random.default_rng(seed).standard_normal((c, r * hb, r * wb)).astype(np.float32)
        np.testing.assert_array_equal(unsqueeze(squeeze(x, r), r).data, x)
        z = np.random.default_rng(seed + 1).standard_normal((c * r * r, hb, wb)).astype(np.float32)
        np.testing.assert_array_equal(squeeze(unsqueeze(z, r), r).data, z)

    def test_batched(self):
        x = np.random.default_rng(2).standard_normal((2, 3, 4, 4))
        out = squeeze(x, 2)
        assert out.shape == (2, 12, 2, 2)
        np.testing.assert_array_equal(out.data[1], squeeze(x[1], 2).data)

    def test_indivisible(self):
        with pytest.raises(ShapeError):
            squeeze(np.zeros((1, 5, 4)), 2)
        with pytest.raises(ShapeError):
            unsqueeze(np.zeros((3, 2, 2)), 2)

    def test_gradient_is_permutation(self):
        x = Tensor(np.random.default_rng(3).standard_normal((2, 4, 4)), requires_grad=True)
        w = np.random.default_rng(4).standard_normal((8, 2, 2))
        with Tape() as tape:
            loss = tsum(squeeze(x, 2) * w)
        np.testing.assert_array_equal(backward(tape, loss)[x], unsqueeze(w, 2).data)


class TestCoupling:
    def test_zero_affine_gives_copies(self):
        cfg = FlowConfig(levels=1, splits=3)
        params = init_params(cfg)
        x = np.random.default_rng(0).standard_normal((12, 4, 4)).astype(np.float32)
        z, affines = ihf_forward(x, params, 0, 3)
        assert z.shape == (36, 4, 4)
        for i in range(3):
            np.testing.assert_array_equal(z.data[12 * i:12 * (i + 1)], x)

    def test_scalar_toy_forward(self):
        z = coupling_forward(scalar(5), [scalar(1), scalar(2), scalar(3)])
        np.testing.assert_array_equal(z.data.ravel(), [4, 2, -1])

    def test_scalar_toy_reverse(self):
        out = coupling_reverse(Tensor(np.array([4.0, 2.0, -1.0]).reshape(3, 1, 1)),
                               [scalar(1), scalar(2), scalar(3)], 1.0)
        assert out.data.item() == 5.0

    @pytest.mark.parametrize("alpha", [0.0, 0.3, 0.95, 1.0])
    def test_zero_affine_reverse_any_alpha(self, alpha):
        x = Tensor(np.random.default_rng(1).standard_normal((2, 3, 3)))
        zeros = [Tensor(np.zeros((2, 3, 3))) for _ in range(4)]
        out = ihf_reverse(coupling_forward(x, zeros), zeros, alpha)
        np.testing.assert_allclose(out.data, x.data, rtol=0, atol=1e-15)

    def test_alpha_one_collapses(self):
        rng = np.random.default_rng(2)
        affines = [Tensor(rng.standard_normal((2, 2, 2))) for _ in range(3)]
        b = Tensor(rng.standard_normal((6, 2, 2)))
        out = coupling_reverse(b, affines, 1.0)
        np.testing.assert_array_equal(out.data, affines[0].data + b.data[:2])

    def test_telescoping(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((2, 3, 3)))
        affines = [Tensor(rng.standard_normal((2, 3, 3))) for _ in range(4)]
        z = coupling_forward(x, affines).data
        for i in range(4):
            expected = x.data - sum(a.data for a in affines[:i + 1])
            np.testing.assert_allclose(z[2 * i:2 * i + 2], expected, rtol=1e-12, atol=1e-12)

    def test_cache_mismatch(self):
        affines = [Tensor(np.zeros((2, 2, 2)))] * 2
        with pytest.raises(ShapeError):
            coupling_reverse(Tensor(np.zeros((6, 2, 2))), affines, 1.0)


class TestConfig:
    def test_single_split_rejected(self):
        with pytest.raises(ValueError, match="splits"):
            FlowConfig(splits=1).validate()

    def test_alpha_forced_one_exact(self):
        cfg = FlowConfig(alpha_mode="forced_one")
        assert level_alpha(init_params(cfg), cfg, 0) == 1.0

    def test_alpha_learnable_in_open_interval(self):
        cfg = FlowConfig()
        a = level_alpha(init_params(cfg), cfg, 1)
        assert 0.0 < a.data.item() < 1.0
        assert a.data.item() == pytest.approx(1 / (1 + np.exp(-3.0)), rel=1e-6)

    def test_unknown_alpha_mode(self):
        with pytest.raises(ValueError):
            FlowConfig(alpha_mode="fixed").validate()


class TestModel:
    def test_shapes_one_level(self):
        cfg = FlowConfig(levels=1, splits=2)
        z, cache = model_forward(np.zeros((3, 8, 8), np.float32), init_params(cfg), cfg)
        assert z.shape == (24, 4, 4)
        assert len(cache) == 1

    def test_shapes_two_levels(self):
        cfg = FlowConfig(levels=2, splits=3)
        z, cache = model_forward(np.zeros((3, 16, 16), np.float32), init_params(cfg), cfg)
        assert z.shape == (432, 4, 4)
        assert [a[0].shape[0] * 3 for a in cache.affines] == [36, 432]
        assert cache.affines[0][0].shape == (12, 8, 8)

    def test_zero_affine_latent_is_stacked_squeezes(self):
        cfg = FlowConfig(levels=2, splits=2)
        x = np.random.default_rng(0).standard_normal((3, 8, 8)).astype(np.float32)
        z, _ = model_forward(x, init_params(cfg), cfg)
        level1 = np.concatenate([squeeze(x, 2).data] * 2)
        expected = np.concatenate([squeeze(level1, 2).data] * 2)
        np.testing.assert_array_equal(z.data, expected)

    def test_indivisible_input(self):
        cfg = FlowConfig(levels=2)
        with pytest.raises(ShapeError, match="divisible"):
            model_forward(np.zeros((3, 10, 10), np.float32), init_params(cfg), cfg)

    def test_wrong_cache_rejected(self):
        cfg1, cfg2 = FlowConfig(levels=1), FlowConfig(levels=2)
        z, cache = model_forward(np.zeros((3, 8, 8), np.float32), init_params(cfg1), cfg1)
        with pytest.raises(ShapeError):
            model_reverse(z, cache, init_params(cfg2), cfg2)

    @pytest.mark.parametrize("levels,splits", list(itertools.product((1, 2), (2, 3, 4))))
    def test_bijective_float32(self, levels, splits):
        cfg = FlowConfig(levels=levels, splits=splits, alpha_mode="forced_one")
        params = random_params(cfg, seed=levels + 10 * splits)
        x = np.random.default_rng(splits).uniform(-1, 1, (4, 3, 16, 16)).astype(np.float32)
        with no_tape():
            z, cache = model_forward(x, params, cfg)
            z0, _ = model_forward(x, init_params(cfg), cfg)
            assert np.abs(z.data - z0.data).max() > 1e-3  # couplings are non-trivial
            back = model_reverse(aan(z, None, params, cfg, bypass=True), cache, params, cfg)
        assert np.abs(back.data - x).max() <= 1e-4

    @pytest.mark.parametrize("levels,splits", list(itertools.product((1, 2), (2, 3, 4))))
    def test_bijective_float64(self, levels, splits):
        cfg = FlowConfig(levels=levels, splits=splits, alpha_mode="forced_one")
        params = random_params(cfg, seed=levels + 10 * splits, dtype=np.float64)
        x = np.random.default_rng(splits).uniform(-1, 1, (2, 3, 16, 16))
        with no_tape():
            z, cache = model_forward(x, params, cfg)
            back = model_reverse(z, cache, params, cfg)
        assert np.abs(back.data - x).max() <= 1e-10

    def test_learnable_alpha_is_not_exact_inverse(self):
        cfg = FlowConfig(levels=1, splits=3)
        params = random_params(cfg, seed=0, dtype=np.float64)
        x = np.random.default_rng(0).uniform(-1, 1, (3, 8, 8))
        with no_tape():
            z, cache = model_forward(x, params, cfg)
            back = model_reverse(z, cache, params, cfg)
        assert np.abs(back.data - x).max() > 1e-6

    def test_zero_affine_any_alpha_exact(self):
        cfg = FlowConfig(levels=2, splits=3)
        params = init_params(cfg, dtype=np.float64)
        x = np.random.default_rng(1).uniform(-1, 1, (3, 8, 8))
        z, cache = model_forward(x, params, cfg)
        for alpha in (None, 0.2, 0.7):
            back = model_reverse(z, cache, params, cfg, alpha_override=alpha)
            np.testing.assert_allclose(back.data, x, atol=1e-14)


class TestAAN:
    def test_bypass_exact(self):
        cfg = FlowConfig(levels=1, splits=2)
        z = Tensor(np.random.default_rng(0).standard_normal((24, 4, 4)).astype(np.float32))
        assert np.array_equal(aan(z, np.zeros(480), init_params(cfg), cfg, bypass=True).data, z.data)

    def test_zero_heads_near_identity(self):
        cfg = FlowConfig(levels=1, splits=2)
        rng = np.random.default_rng(1)
        z = Tensor((rng.standard_normal((2, 24, 4, 4)) * rng.uniform(0.1, 2.0, (2, 24, 1, 1))
                    + rng.standard_normal((2, 24, 1, 1))).astype(np.float32))
        out = aan(z, rng.standard_normal((2, 480)), init_params(cfg), cfg).data
        assert np.abs(out - z.data).max() / np.abs(z.data).max() <= 1e-3

    def test_forced_affine_example(self):
        one = Tensor(np.ones((1, 1)))
        z = Tensor(np.full((1, 1, 1, 1), 3.0))
        out = aan_apply(z, one, one * 2.0, one * 3.0, one * 5.0, eps=0.0)
        assert out.data.item() == 8.0

    def test_embedding_changes_output_when_heads_nonzero(self):
        cfg = FlowConfig(levels=1, splits=2)
        params = random_params(cfg, seed=3)
        rng = np.random.default_rng(3)
        z = Tensor(rng.standard_normal((24, 4, 4)).astype(np.float32))
        a = aan(z, rng.standard_normal(480), params, cfg).data
        b = aan(z, rng.standard_normal(480), params, cfg).data
        assert np.linalg.norm(a - b) > 0

    def test_batch_mismatch(self):
        cfg = FlowConfig(levels=1, splits=2)
        z = Tensor(np.ones((2, 24, 2, 2), np.float32))
        with pytest.raises(ShapeError):
            aan(z, np.zeros((3, 480)), init_params(cfg), cfg)


class TestHarmonize:
    def test_bypass_alpha_one_identity(self):
        cfg = FlowConfig()
        params = random_params(cfg, seed=5)
        x = np.random.default_rng(5).uniform(-1, 1, (2, 3, 16, 16)).astype(np.float32)
        out = harmonize(x, np.zeros(480), params, cfg, bypass_aan=True, alpha_override=1.0)
        assert out.shape == x.shape
        assert np.abs(out.data - x).max() <= 1e-4

    def test_output_clamped(self):
        cfg = FlowConfig(levels=1, splits=2)
        params = random_params(cfg, seed=6, scale=2.0)
        x = np.random.default_rng(6).uniform(-1, 1, (3, 8, 8)).astype(np.float32)
        out = harmonize(x, np.random.default_rng(7).standard_normal(480) * 10, params, cfg).data
        assert out.min() >= -1.0 and out.max() <= 1.0

    @pytest.mark.parametrize("seed", range(3))
    def test_gradients_all_params(self, seed):
        cfg = FlowConfig(levels=2, splits=2, affine_hidden=4, aan_hidden=4)
        params = random_params(cfg, seed=seed, scale=0.1, dtype=np.float64)
        rng = np.random.default_rng(seed)
        x = rng.uniform(-0.5, 0.5, (1, 3, 8, 8))
        z_s = rng.standard_normal(480) * 0.1
        w = rng.standard_normal(x.shape)

        def fn():
            return tsum(harmonize(x, z_s, params, cfg) * w)

        rep = grad_check(fn, list(params.values()), tol=1e-3, max_coords=6, seed=seed)
        assert rep.passed, str(rep)
