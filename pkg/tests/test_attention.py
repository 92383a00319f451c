"""Attention gate tests against straight-line numpy oracles."""

import numpy as np
import pytest

from tce.attention import (
    AttnBlockOutput,
    ChannelAttnParams,
    SpatialAttnParams,
    attention_block,
    channel_attention,
    spatial_attention,
)
from tce.tensor import ShapeError, Tensor, backward, finite_diff_check, sum_all

RNG = np.random.default_rng(2024)


def zero_channel_params(c, r=4):
    mk = lambda s: Tensor(np.zeros(s), requires_grad=True)
    return ChannelAttnParams(mk((c // r, c)), mk((c // r,)), mk((c, c // r)), mk((c,)), r)


def zero_spatial_params():
    return SpatialAttnParams(Tensor(np.zeros((1, 2, 3, 3)), requires_grad=True),
                             Tensor(np.zeros(1), requires_grad=True))


def random_channel_params(c, r, rng):
    return ChannelAttnParams.init(c, r, rng, dtype=np.float64)


def random_spatial_params(rng):
    return SpatialAttnParams.init(rng, dtype=np.float64)


# --- straight-line oracles (pure numpy, no autodiff) -------------------------

def _sig(v):
    return 1.0 / (1.0 + np.exp(-v))


def channel_attention_oracle(f, p):
    n, c = f.shape[:2]
    avg = f.mean(axis=(2, 3))
    mx = f.max(axis=(2, 3))

    def mlp(v):
        h = np.maximum(v @ p.fc1_weight.data.T + p.fc1_bias.data, 0)
        return h @ p.fc2_weight.data.T + p.fc2_bias.data

    return _sig(mlp(avg) + mlp(mx)).reshape(n, c, 1, 1)


def spatial_attention_oracle(f_c, p):
    n, c, h, w = f_c.shape
    stacked = np.stack([f_c.mean(axis=1), f_c.max(axis=1)], axis=1)
    padded = np.zeros((n, 2, h + 2, w + 2))
    padded[:, :, 1:h + 1, 1:w + 1] = stacked
    out = np.zeros((n, 1, h, w))
    for ni in range(n):
        for yi in range(h):
            for xi in range(w):
                acc = 0.0
                for ci in range(2):
                    for i in range(3):
                        for j in range(3):
                            acc += padded[ni, ci, yi + i, xi + j] * p.conv_weight.data[0, ci, i, j]
                out[ni, 0, yi, xi] = acc + p.conv_bias.data[0]
    return _sig(out)


def attention_block_oracle(f, cp, sp):
    attn_c = channel_attention_oracle(f, cp)
    f_c = attn_c * f
    attn_s = spatial_attention_oracle(f_c, sp)
    return f + attn_s * f_c


# --- channel attention --------------------------------------------------------

class TestChannelAttention:
    def test_zero_params_give_half(self):
        f = Tensor(RNG.standard_normal((2, 8, 3, 4)))
        attn = channel_attention(f, zero_channel_params(8))
        np.testing.assert_array_equal(attn.data, np.full((2, 8, 1, 1), 0.5))

    def test_constant_map_equalizes_branches(self):
        # avg pool == max pool on a constant map, so the gate is
        # sigmoid(2 * MLP(v))
        p = random_channel_params(4, 2, np.random.default_rng(3))
        f = Tensor(np.full((1, 4, 5, 5), 0.7))
        attn = channel_attention(f, p)
        v = np.full((1, 4), 0.7)
        h = np.maximum(v @ p.fc1_weight.data.T + p.fc1_bias.data, 0)
        mlp = h @ p.fc2_weight.data.T + p.fc2_bias.data
        np.testing.assert_allclose(attn.data.reshape(1, 4), _sig(2 * mlp), rtol=1e-12)

    def test_matches_straight_line_oracle(self):
        rng = np.random.default_rng(4)
        p = random_channel_params(8, 4, rng)
        f = rng.standard_normal((2, 8, 4, 6))
        attn = channel_attention(Tensor(f), p)
        np.testing.assert_allclose(attn.data, channel_attention_oracle(f, p), rtol=1e-6)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            channel_attention(Tensor(np.zeros((1, 6, 2, 2))), zero_channel_params(8))

    def test_spatial_equivariance(self):
        # permuting H*W positions leaves the channel gate unchanged and
        # permutes the gated map identically
        rng = np.random.default_rng(5)
        p = random_channel_params(4, 2, rng)
        f = rng.standard_normal((1, 4, 3, 4))
        perm = rng.permutation(12)
        fp = f.reshape(1, 4, 12)[:, :, perm].reshape(1, 4, 3, 4)
        a1 = channel_attention(Tensor(f), p).data
        a2 = channel_attention(Tensor(fp), p).data
        np.testing.assert_allclose(a1, a2, rtol=1e-12, atol=1e-14)
        gated1 = (a1 * f).reshape(1, 4, 12)[:, :, perm]
        gated2 = (a2 * fp).reshape(1, 4, 12)
        np.testing.assert_allclose(gated1, gated2, rtol=1e-12, atol=1e-14)


# --- spatial attention ----------------------------------------------------------

class TestSpatialAttention:
    def test_zero_params_give_half(self):
        f = Tensor(RNG.standard_normal((2, 3, 4, 5)))
        attn = spatial_attention(f, zero_spatial_params())
        np.testing.assert_array_equal(attn.data, np.full((2, 1, 4, 5), 0.5))

    def test_single_channel_branches_coincide(self):
        # with one channel both pooled maps equal the input itself, so the
        # conv effectively sees the kernel's two channel slices summed
        rng = np.random.default_rng(6)
        p = random_spatial_params(rng)
        f = rng.standard_normal((1, 1, 4, 4))
        attn = spatial_attention(Tensor(f), p)
        wsum = p.conv_weight.data[0, 0] + p.conv_weight.data[0, 1]
        padded = np.zeros((6, 6))
        padded[1:5, 1:5] = f[0, 0]
        expected = np.zeros((4, 4))
        for yi in range(4):
            for xi in range(4):
                expected[yi, xi] = (padded[yi:yi + 3, xi:xi + 3] * wsum).sum() + p.conv_bias.data[0]
        np.testing.assert_allclose(attn.data[0, 0], _sig(expected), rtol=1e-9)

    def test_matches_straight_line_oracle(self):
        rng = np.random.default_rng(7)
        p = random_spatial_params(rng)
        f = rng.standard_normal((2, 5, 3, 4))
        attn = spatial_attention(Tensor(f), p)
        np.testing.assert_allclose(attn.data, spatial_attention_oracle(f, p), rtol=1e-6)

    def test_channel_permutation_invariance(self):
        rng = np.random.default_rng(8)
        p = random_spatial_params(rng)
        f = rng.standard_normal((1, 6, 3, 3))
        perm = rng.permutation(6)
        a1 = spatial_attention(Tensor(f), p).data
        a2 = spatial_attention(Tensor(f[:, perm]), p).data
        np.testing.assert_allclose(a1, a2, rtol=1e-12, atol=1e-14)


# --- full block -----------------------------------------------------------------

class TestAttentionBlock:
    def test_zero_params_scale_input_by_1p25(self):
        f = RNG.standard_normal((2, 4, 3, 5))
        out = attention_block(Tensor(f), zero_channel_params(4), zero_spatial_params())
        assert isinstance(out, AttnBlockOutput)
        np.testing.assert_array_equal(out.attn_c.data, np.full((2, 4, 1, 1), 0.5))
        np.testing.assert_array_equal(out.attn_s.data, np.full((2, 1, 3, 5), 0.5))
        # bitwise: f + 0.25*f where 0.25 is exact in binary
        np.testing.assert_array_equal(out.f_prime.data, f + 0.25 * f)

    def test_zero_input_stays_zero(self):
        rng = np.random.default_rng(9)
        out = attention_block(Tensor(np.zeros((1, 4, 3, 3))),
                              random_channel_params(4, 2, rng),
                              random_spatial_params(rng))
        np.testing.assert_array_equal(out.f_prime.data, np.zeros((1, 4, 3, 3)))

    def test_matches_composed_oracle(self):
        rng = np.random.default_rng(10)
        cp = random_channel_params(8, 4, rng)
        sp = random_spatial_params(rng)
        f = rng.standard_normal((2, 8, 3, 4))
        out = attention_block(Tensor(f), cp, sp)
        np.testing.assert_allclose(out.f_prime.data, attention_block_oracle(f, cp, sp), rtol=1e-6)

    def test_gate_ranges_open_interval(self):
        rng = np.random.default_rng(11)
        f = rng.standard_normal((2, 4, 5, 5)) * 5
        out = attention_block(Tensor(f), random_channel_params(4, 2, rng),
                              random_spatial_params(rng))
        for gate in (out.attn_c.data, out.attn_s.data):
            assert np.all(gate > 0.0) and np.all(gate < 1.0)

    def test_output_shape_preserved(self):
        rng = np.random.default_rng(12)
        f = rng.standard_normal((3, 8, 2, 7))
        out = attention_block(Tensor(f), random_channel_params(8, 4, rng),
                              random_spatial_params(rng))
        assert out.f_prime.shape == f.shape

    def test_gradients_pass_finite_differences(self):
        rng = np.random.default_rng(13)
        cp = random_channel_params(4, 2, rng)
        sp = random_spatial_params(rng)

        def f(x):
            return sum_all(attention_block(x, cp, sp).f_prime)

        for seed in range(5):
            x = Tensor(np.random.default_rng(seed).standard_normal((1, 4, 3, 4)))
            assert finite_diff_check(f, x) < 1e-5

    def test_parameter_gradients_flow(self):
        rng = np.random.default_rng(14)
        cp = random_channel_params(4, 2, rng)
        sp = random_spatial_params(rng)
        x = Tensor(rng.standard_normal((1, 4, 3, 4)))
        backward(sum_all(attention_block(x, cp, sp).f_prime))
        for t in (cp.fc1_weight, cp.fc2_weight, sp.conv_weight, sp.conv_bias):
            assert t.grad is not None and np.any(t.grad != 0)
