"""Forward contracts of the five layer primitives against loop oracles."""

import numpy as np
import pytest

from efld.errors import ShapeError, UsageError
from efld.ops import concat_channels, conv2d, depthwise_conv2d, linear, relu, separable_conv2d
from efld.tensor import LayerParams, Tensor

from conftest import ref_conv2d, ref_depthwise_conv2d


def conv_params(w, b=None, kind="conv"):
    w = np.asarray(w, dtype=np.float64)
    if b is None:
        b = np.zeros(w.shape[-1])
    return LayerParams(kind, Tensor(w), Tensor(np.asarray(b, dtype=np.float64)))


class TestConv2d:
    def test_box_sum_of_ones(self):
        x = Tensor(np.ones((1, 3, 3, 1)))
        p = conv_params(np.ones((3, 3, 1, 1)))
        out = conv2d(x, p, stride=1, padding="same").data[0, :, :, 0]
        assert out[1, 1] == 9.0
        assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0
        assert out[0, 1] == out[1, 0] == out[1, 2] == out[2, 1] == 6.0

    def test_stride2_same_output_size(self):
        x = Tensor(np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1))
        p = conv_params(np.ones((3, 3, 1, 1)))
        assert conv2d(x, p, stride=2, padding="same").shape == (1, 2, 2, 1)

    def test_matches_loop_oracle(self, rng):
        x = rng.standard_normal((1, 5, 5, 2))
        w = rng.standard_normal((3, 3, 2, 3))
        b = rng.standard_normal(3)
        out = conv2d(Tensor(x), conv_params(w, b), stride=1, padding="same").data
        np.testing.assert_allclose(out, ref_conv2d(x, w, b, 1, "same"), atol=1e-12, rtol=0)

    @pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "same"), (1, "valid"), (2, "valid")])
    def test_oracle_all_modes(self, rng, stride, padding):
        x = rng.standard_normal((2, 7, 6, 3))
        w = rng.standard_normal((3, 3, 3, 4))
        b = rng.standard_normal(4)
        out = conv2d(Tensor(x), conv_params(w, b), stride=stride, padding=padding).data
        np.testing.assert_allclose(out, ref_conv2d(x, w, b, stride, padding), atol=1e-12, rtol=0)

    def test_one_by_one_kernel_is_per_pixel_linear(self, rng):
        x = rng.standard_normal((1, 4, 4, 5))
        w = rng.standard_normal((1, 1, 5, 3))
        b = rng.standard_normal(3)
        out = conv2d(Tensor(x), conv_params(w, b), stride=1, padding="same").data
        expected = x.reshape(-1, 5) @ w[0, 0] + b
        np.testing.assert_array_equal(out.reshape(-1, 3), expected)

    def test_channel_mismatch_names_op_and_dims(self):
        x = Tensor(np.zeros((1, 4, 4, 3)))
        p = conv_params(np.zeros((3, 3, 2, 4)))
        with pytest.raises(ShapeError, match=r"conv2d.*3.*2"):
            conv2d(x, p)

    def test_bad_stride_rejected(self):
        x = Tensor(np.zeros((1, 4, 4, 1)))
        p = conv_params(np.zeros((3, 3, 1, 1)))
        with pytest.raises(UsageError, match="stride"):
            conv2d(x, p, stride=3)

    def test_deterministic(self, rng):
        x = rng.standard_normal((1, 6, 6, 2))
        w = rng.standard_normal((3, 3, 2, 2))
        p = conv_params(w)
        a = conv2d(Tensor(x), p).data
        b = conv2d(Tensor(x), p).data
        np.testing.assert_array_equal(a, b)


class TestDepthwiseConv2d:
    def test_full_extent_kernel_gives_one_by_one(self, rng):
        x = Tensor(rng.standard_normal((1, 8, 8, 256)))
        p = conv_params(rng.standard_normal((8, 8, 256)), kind="depthwise-conv")
        out = depthwise_conv2d(x, p, stride=1, padding="valid")
        assert out.shape == (1, 1, 1, 256)

    def test_delta_kernel_is_identity(self, rng):
        x = rng.standard_normal((1, 5, 5, 4))
        w = np.zeros((3, 3, 4))
        w[1, 1, :] = 1.0
        out = depthwise_conv2d(Tensor(x), conv_params(w, kind="depthwise-conv")).data
        np.testing.assert_array_equal(out, x)

    def test_matches_loop_oracle_stride2(self, rng):
        x = rng.standard_normal((1, 6, 6, 3))
        w = rng.standard_normal((3, 3, 3))
        b = rng.standard_normal(3)
        out = depthwise_conv2d(Tensor(x), conv_params(w, b, kind="depthwise-conv"), stride=2).data
        np.testing.assert_allclose(out, ref_depthwise_conv2d(x, w, b, 2, "same"), atol=1e-12, rtol=0)

    def test_channel_mismatch(self):
        x = Tensor(np.zeros((1, 4, 4, 3)))
        p = conv_params(np.zeros((3, 3, 5)), kind="depthwise-conv")
        with pytest.raises(ShapeError, match="depthwise_conv2d"):
            depthwise_conv2d(x, p)

    def test_kernel_larger_than_input_valid_padding(self):
        x = Tensor(np.zeros((1, 4, 4, 2)))
        p = conv_params(np.zeros((8, 8, 2)), kind="depthwise-conv")
        with pytest.raises(ShapeError):
            depthwise_conv2d(x, p, padding="valid")


class TestSeparableConv2d:
    def test_double_identity(self, rng):
        x = rng.standard_normal((1, 6, 6, 4))
        dw = np.zeros((3, 3, 4))
        dw[1, 1, :] = 1.0
        pw = np.eye(4).reshape(1, 1, 4, 4)
        out = separable_conv2d(
            Tensor(x),
            conv_params(dw, kind="depthwise-conv"),
            conv_params(pw),
        ).data
        np.testing.assert_array_equal(out, x)

    def test_shape_16_to_8(self, rng):
        x = Tensor(rng.standard_normal((1, 32, 32, 16)))
        dw = conv_params(rng.standard_normal((3, 3, 16)), kind="depthwise-conv")
        pw = conv_params(rng.standard_normal((1, 1, 16, 8)))
        assert separable_conv2d(x, dw, pw, stride=1).shape == (1, 32, 32, 8)

    def test_equals_composition(self, rng):
        x = rng.standard_normal((1, 9, 9, 3))
        dw = conv_params(rng.standard_normal((3, 3, 3)), kind="depthwise-conv")
        pw = conv_params(rng.standard_normal((1, 1, 3, 5)), rng.standard_normal(5))
        got = separable_conv2d(Tensor(x), dw, pw, stride=2).data
        mid = ref_depthwise_conv2d(x, dw.weights.data, dw.bias.data, 2, "same")
        expected = ref_conv2d(mid, pw.weights.data, pw.bias.data, 1, "same")
        np.testing.assert_allclose(got, expected, atol=1e-12, rtol=0)

    def test_channel_mismatch_between_stages(self):
        dw = conv_params(np.zeros((3, 3, 4)), kind="depthwise-conv")
        pw = conv_params(np.zeros((1, 1, 5, 2)))
        with pytest.raises(ShapeError, match="separable"):
            separable_conv2d(Tensor(np.zeros((1, 4, 4, 4))), dw, pw)


class TestLinear:
    def test_identity(self):
        x = np.array([[1.0, -2.0, 3.0]])
        p = conv_params(np.eye(3), kind="linear")
        np.testing.assert_array_equal(linear(Tensor(x), p).data, x)

    def test_hand_case(self):
        p = conv_params(np.array([[1.0, 0.0], [0.0, 2.0]]), np.array([1.0, 1.0]), kind="linear")
        out = linear(Tensor(np.array([[1.0, 2.0]])), p).data
        np.testing.assert_array_equal(out, [[2.0, 5.0]])

    def test_batch_512_rows_independent(self, rng):
        x = rng.standard_normal((512, 8))
        p = conv_params(rng.standard_normal((8, 4)), rng.standard_normal(4), kind="linear")
        full = linear(Tensor(x), p).data
        one = linear(Tensor(x[100:101]), p).data
        # same affine map per row; batched and single-row kernels may differ
        # in the last ulp, so compare within float64 roundoff
        np.testing.assert_allclose(full[100:101], one, rtol=0, atol=1e-12)
        assert full.shape == (512, 4)
        perm = rng.permutation(512)
        permuted = linear(Tensor(x[perm]), p).data
        np.testing.assert_array_equal(permuted, full[perm])

    def test_width_mismatch(self):
        p = conv_params(np.zeros((3, 2)), kind="linear")
        with pytest.raises(ShapeError, match="linear"):
            linear(Tensor(np.zeros((1, 4))), p)


class TestReluConcat:
    def test_relu(self):
        out = relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data
        np.testing.assert_array_equal(out, [0.0, 0.0, 2.0])

    def test_concat_channel_addition(self, rng):
        a = Tensor(rng.standard_normal((1, 8, 8, 16)))
        b = Tensor(rng.standard_normal((1, 8, 8, 8)))
        assert concat_channels(a, b).shape == (1, 8, 8, 24)

    def test_concat_then_split_recovers_operands(self, rng):
        a = rng.standard_normal((2, 4, 4, 3))
        b = rng.standard_normal((2, 4, 4, 5))
        out = concat_channels(Tensor(a), Tensor(b)).data
        np.testing.assert_array_equal(out[..., :3], a)
        np.testing.assert_array_equal(out[..., 3:], b)

    def test_concat_vector_axis(self, rng):
        a = rng.standard_normal((3, 10))
        b = rng.standard_normal((3, 4))
        out = concat_channels(Tensor(a), Tensor(b)).data
        np.testing.assert_array_equal(out[:, :10], a)

    def test_concat_shape_error(self):
        with pytest.raises(ShapeError, match="concat"):
            concat_channels(Tensor(np.zeros((1, 4, 4, 2))), Tensor(np.zeros((1, 5, 4, 2))))


class TestInvariants:
    """Forward ops agree with the naive references on random inputs."""

    @pytest.mark.parametrize("seed", range(5))
    def test_conv_oracle_random_shapes(self, seed):
        rng = np.random.default_rng(seed)
        h, w = rng.integers(3, 9, size=2)
        cin, cout = rng.integers(1, 9, size=2)
        stride = int(rng.integers(1, 3))
        x = rng.standard_normal((2, h, w, cin))
        wt = rng.standard_normal((3, 3, cin, cout))
        b = rng.standard_normal(cout)
        got = conv2d(Tensor(x), conv_params(wt, b), stride=stride).data
        np.testing.assert_allclose(got, ref_conv2d(x, wt, b, stride, "same"), atol=1e-12, rtol=0)

    @pytest.mark.parametrize("seed", range(5))
    def test_depthwise_oracle_random_shapes(self, seed):
        rng = np.random.default_rng(100 + seed)
        h, w = rng.integers(3, 9, size=2)
        c = int(rng.integers(1, 9))
        stride = int(rng.integers(1, 3))
        x = rng.standard_normal((2, h, w, c))
        wt = rng.standard_normal((3, 3, c))
        b = rng.standard_normal(c)
        got = depthwise_conv2d(Tensor(x), conv_params(wt, b, kind="depthwise-conv"), stride=stride).data
        np.testing.assert_allclose(got, ref_depthwise_conv2d(x, wt, b, stride, "same"), atol=1e-12, rtol=0)

    def test_outputs_stay_finite(self, rng):
        x = Tensor(rng.standard_normal((1, 8, 8, 8)) * 1e3)
        p = conv_params(rng.standard_normal((3, 3, 8, 8)) * 1e3)
        out = conv2d(x, p).data
        assert np.all(np.isfinite(out))
