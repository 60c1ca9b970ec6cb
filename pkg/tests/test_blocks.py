import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lwdet import blocks as B
from lwdet import tensor as T
from lwdet.model import count_params, count_running_stats
from lwdet.tensor import ShapeError

from conftest import identity_bn, random_weights


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


class TestStem:
    @pytest.mark.parametrize("size, out", [(640, 160), (64, 16)])
    def test_shape(self, size, out):
        blk = B.StemBlock()
        w = random_weights(blk.param_shapes())
        x = rand((1, 3, size, size)) if size < 640 else np.zeros((1, 3, size, size), np.float32)
        assert B.stem_block(x, w).shape == (1, 24, out, out)

    def test_param_count_hand_sum(self):
        shapes = B.StemBlock().param_shapes()
        conv = 24 * 3 * 9 + 12 * 24 + 24 * 12 * 9 + 24 * 48
        bn_trainable = 2 * (24 + 12 + 24 + 24)
        assert count_params(shapes) == conv + bn_trainable == 4848
        assert count_running_stats(shapes) == bn_trainable

    def test_indivisible(self):
        w = random_weights(B.StemBlock().param_shapes())
        with pytest.raises(ShapeError):
            B.stem_block(np.zeros((1, 3, 30, 32)), w)


class TestShuffleS1:
    def test_shape_preserved(self):
        blk = B.ShuffleUnitS1(116)
        x = rand((1, 116, 20, 20))
        assert blk(x, random_weights(blk.param_shapes())).shape == x.shape

    def test_zero_right_branch_isolates_shuffle(self):
        blk = B.ShuffleUnitS1(8)
        shapes = blk.param_shapes()
        w = identity_bn(shapes, random_weights(shapes))
        w["pw2.conv.weight"] = np.zeros(shapes["pw2.conv.weight"], np.float32)
        x = rand((2, 8, 5, 5))
        expected = T.channel_shuffle(T.concat_channels([x[:, :4], np.zeros((2, 4, 5, 5), np.float32)]), 2)
        np.testing.assert_array_equal(blk(x, w), expected)

    def test_left_half_traced_through_shuffle(self):
        blk = B.ShuffleUnitS1(12)
        x = rand((1, 12, 4, 4), 3)
        out = blk(x, random_weights(blk.param_shapes(), 5))
        for i in range(6):
            assert out[:, 2 * i].tobytes() == x[:, i].tobytes()

    def test_odd_channels(self):
        with pytest.raises(ShapeError):
            B.ShuffleUnitS1(7)


class TestShuffleS2:
    @pytest.mark.parametrize(
        "c_in, size, c_out", [(24, 160, 116), (116, 80, 232), (232, 40, 464)]
    )
    def test_shapes(self, c_in, size, c_out):
        blk = B.ShuffleUnitS2(c_in, c_out)
        out = blk(np.zeros((1, c_in, size, size), np.float32), random_weights(blk.param_shapes()))
        assert out.shape == (1, c_out, size // 2, size // 2)

    def test_odd_spatial_rounds_up(self):
        blk = B.ShuffleUnitS2(4, 8)
        assert blk(rand((1, 4, 7, 5)), random_weights(blk.param_shapes())).shape == (1, 8, 4, 3)

    def test_odd_c_out(self):
        with pytest.raises(ShapeError):
            B.ShuffleUnitS2(4, 9)


class TestSPPF:
    def test_shape(self):
        blk = B.SPPF(464)
        x = rand((1, 464, 20, 20))
        assert B.sppf(x, random_weights(blk.param_shapes())).shape == x.shape

    @pytest.mark.parametrize("seed", range(4))
    def test_cascade_is_spp(self, seed):
        blk = B.SPPF(8)
        w = random_weights(blk.param_shapes(), seed)
        x0, p1, p2, p3 = blk.pyramid(rand((2, 8, 12, 12), seed), w)
        assert p1.tobytes() == T.maxpool2d(x0, 5, 1, 2).tobytes()
        assert p2.tobytes() == T.maxpool2d(x0, 9, 1, 4).tobytes()
        assert p3.tobytes() == T.maxpool2d(x0, 13, 1, 6).tobytes()

    def test_constant_pyramid(self):
        blk = B.SPPF(4)
        x0, *pools = blk.pyramid(np.full((1, 4, 6, 6), 0.7, np.float32), random_weights(blk.param_shapes()))
        for p in pools:
            np.testing.assert_array_equal(p, x0)


class TestEca:
    @pytest.mark.parametrize("c, k", [(464, 5), (2, 1), (256, 5), (116, 5), (232, 5), (16, 3)])
    def test_kernel_size(self, c, k):
        assert B.eca_kernel_size(c) == k

    def test_zero_kernel_halves(self):
        x = rand((2, 6, 3, 3))
        np.testing.assert_allclose(B.eca(x, B.EcaParams(np.zeros(3))), 0.5 * x, rtol=0, atol=0)

    def test_constant_input_unit_kernel(self):
        vals = np.array([0.5, -1.0, 2.0], np.float32)
        x = np.broadcast_to(vals.reshape(1, 3, 1, 1), (1, 3, 4, 4)).copy()
        out = B.eca(x, B.EcaParams(np.ones(1)))
        sig = 1 / (1 + np.exp(-vals.astype(np.float64)))
        np.testing.assert_allclose(out[0, :, 0, 0], vals * sig, rtol=1e-6)

    @given(st.integers(1, 3), st.integers(1, 40), st.integers(1, 6), st.sampled_from([1, 3, 5]))
    @settings(max_examples=40, deadline=None)
    def test_shape_and_gate_range(self, n, c, s, k):
        x = np.abs(rand((n, c, s, s), c)) + 0.1
        out = B.eca(x, B.EcaParams(rand((k,), k)))
        assert out.shape == x.shape
        ratio = out / x
        assert np.all(ratio > 0) and np.all(ratio < 1)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            B.EcaParams(np.zeros(2))


class TestFusion:
    def test_equal_weights_mean(self):
        a, b = rand((1, 2, 3, 3), 1), rand((1, 2, 3, 3), 2)
        coef = B.fusion_coefficients([1, 1], eps=0)
        np.testing.assert_allclose(B.weighted_sum([a, b], coef), (a + b) / 2, atol=1e-7)

    def test_ratio(self):
        np.testing.assert_array_equal(B.fusion_coefficients([3, 1], eps=0), [0.75, 0.25])

    def test_default_eps_value(self):
        coef = B.fusion_coefficients([1, 1])
        np.testing.assert_allclose(coef, [1 / 2.0001] * 2, rtol=1e-15)
        assert round(coef[0], 8) == 0.499975

    def test_negative_weights_clamped(self):
        np.testing.assert_array_equal(B.fusion_coefficients([-5, 2], eps=0), [0.0, 1.0])

    def test_all_zero_weights(self):
        node = B.FusionNode(2, 4)
        w = random_weights(node.param_shapes())
        w["w"] = np.zeros(2, np.float32)
        assert not np.any(B.weighted_sum([rand((1, 4, 2, 2))] * 2, node.coefficients(w)))
        assert node([rand((1, 4, 2, 2))] * 2, w).shape == (1, 4, 2, 2)

    @given(st.lists(st.floats(0, 100), min_size=2, max_size=5), st.sampled_from([1e-4, 1e-2, 1.0]))
    def test_coefficient_bounds(self, w, eps):
        coef = B.fusion_coefficients(w, eps)
        assert np.all((coef >= 0) & (coef <= 1))
        assert coef.sum() < 1

    def test_limit_sum_one(self):
        assert abs(B.fusion_coefficients([0.3, 0.9, 2.0], eps=1e-12).sum() - 1) <= 1e-9

    @given(st.lists(st.integers(0, 1000), min_size=2, max_size=4).filter(any), st.integers(1, 1000))
    def test_scale_invariance_integer(self, w, c):
        a = B.fusion_coefficients(w, eps=0)
        b = B.fusion_coefficients([c * v for v in w], eps=0)
        assert a.tobytes() == b.tobytes()

    def test_shape_mismatch(self):
        node = B.FusionNode(2, 2)
        with pytest.raises(ShapeError):
            node([np.zeros((1, 2, 2, 2)), np.zeros((1, 2, 4, 4))], random_weights(node.param_shapes()))

    def test_input_count_mismatch(self):
        node = B.FusionNode(3, 2)
        with pytest.raises(ShapeError):
            node([np.zeros((1, 2, 2, 2))] * 2, random_weights(node.param_shapes()))

    def test_node_validation(self):
        with pytest.raises(ValueError):
            B.FusionNode(1, 4)
        with pytest.raises(ValueError):
            B.FusionNode(2, 4, eps=0)


class TestConvBnAct:
    def test_spatial_rules(self):
        x = rand((1, 3, 8, 8))
        for k, s, size in [(1, 1, 8), (3, 2, 4)]:
            blk = B.ConvBnAct(3, 5, k, s)
            assert blk(x, random_weights(blk.param_shapes())).shape == (1, 5, size, size)

    def test_identity_config_is_silu(self):
        blk = B.ConvBnAct(3, 3, 3, 1)
        shapes = blk.param_shapes()
        w = identity_bn(shapes, {})
        k = np.zeros(shapes["conv.weight"], np.float32)
        for i in range(3):
            k[i, i, 1, 1] = 1
        w["conv.weight"] = k
        x = rand((1, 3, 5, 5))
        out = B.conv_bn_act(x, w, 3, 1)
        z = x.astype(np.float64) / np.sqrt(1 + B.BN_EPS)
        np.testing.assert_allclose(out, z / (1 + np.exp(-z)), atol=1e-6)
