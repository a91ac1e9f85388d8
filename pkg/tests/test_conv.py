"""Convolution ops: dense, depthwise, transpose, patch embed/expand.

Independent oracles live at the top: a literal nested-loop correlation for
rank 2 and rank 3, written from the definition (no shared code with the
implementation). Everything else is checked against those loops, against
closed-form hand cases, or against algebraic identities (adjoint pairing,
block-diagonal equivalence, translation equivariance).
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlka import (
    Conv,
    PatchEmbed,
    PatchExpand,
    Tensor,
    ValidationError,
    backward,
    conv_dense,
    conv_depthwise,
    conv_transpose,
    kernel_span,
    output_extent,
    same_padding,
)


# ---------------------------------------------------------------- oracles


def naive_conv2d(x, w, b=None, stride=(1, 1), dilation=(1, 1), pads=((0, 0), (0, 0))):
    """Direct nested-loop cross-correlation for (N, Ci, H, W) input."""
    n, ci, h, wd = x.shape
    co = w.shape[0]
    xp = np.zeros((n, ci, h + pads[0][0] + pads[0][1], wd + pads[1][0] + pads[1][1]))
    xp[:, :, pads[0][0]:pads[0][0] + h, pads[1][0]:pads[1][0] + wd] = x
    ky, kx = w.shape[2:]
    oh = (xp.shape[2] - ((ky - 1) * dilation[0] + 1)) // stride[0] + 1
    ow = (xp.shape[3] - ((kx - 1) * dilation[1] + 1)) // stride[1] + 1
    out = np.zeros((n, co, oh, ow))
    for bi in range(n):
        for o in range(co):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for c in range(ci):
                        for ty in range(ky):
                            for tx in range(kx):
                                iy = oy * stride[0] + ty * dilation[0]
                                ix = ox * stride[1] + tx * dilation[1]
                                acc += xp[bi, c, iy, ix] * w[o, c, ty, tx]
                    out[bi, o, oy, ox] = acc + (0.0 if b is None else b[o])
    return out


def naive_conv3d(x, w, stride=(1, 1, 1), pads=((0, 0),) * 3):
    """Direct nested-loop cross-correlation for (N, Ci, H, W, D) input."""
    n, ci = x.shape[:2]
    co = w.shape[0]
    sp = x.shape[2:]
    xp = np.zeros((n, ci) + tuple(s + lo + hi for s, (lo, hi) in zip(sp, pads)))
    xp[(slice(None), slice(None),
        *(slice(lo, lo + s) for s, (lo, _) in zip(sp, pads)))] = x
    k = w.shape[2:]
    osp = tuple((xp.shape[2 + a] - k[a]) // stride[a] + 1 for a in range(3))
    out = np.zeros((n, co) + osp)
    for bi in range(n):
        for o in range(co):
            for pos in np.ndindex(*osp):
                acc = 0.0
                for c in range(ci):
                    for tap in np.ndindex(*k):
                        idx = tuple(pos[a] * stride[a] + tap[a] for a in range(3))
                        acc += xp[(bi, c, *idx)] * w[(o, c, *tap)]
                out[(bi, o, *pos)] = acc
    return out


# ---------------------------------------------------------------- dense


class TestConvDense:
    def test_one_by_one_identity_permutation(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 4, 5))
        perm = (2, 0, 1)
        w = np.zeros((3, 3, 1, 1))
        for co, ci in enumerate(perm):
            w[co, ci, 0, 0] = 1.0
        out = conv_dense(Tensor(x), Tensor(w), padding=0)
        assert np.array_equal(out.data, x[:, perm])

    def test_all_ones_constant_input_interior_nine(self):
        x = Tensor(np.ones((1, 1, 5, 5)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = conv_dense(x, w, padding="same").data
        assert out.shape == (1, 1, 5, 5)
        assert np.array_equal(out[0, 0, 1:-1, 1:-1], np.full((3, 3), 9.0))
        # zero-padded borders: corners see 4 taps, edge centers 6
        assert out[0, 0, 0, 0] == 4.0
        assert out[0, 0, 0, 2] == 6.0

    def test_matches_naive_loop_2d(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 2, 6, 6))
        w = rng.normal(size=(2, 2, 3, 3))
        b = rng.normal(size=2)
        for pads in (((0, 0), (0, 0)), ((1, 1), (1, 1)), ((0, 2), (1, 0))):
            got = conv_dense(Tensor(x), Tensor(w), Tensor(b), padding=pads).data
            want = naive_conv2d(x, w, b, pads=pads)
            assert got.shape == want.shape
            assert np.max(np.abs(got - want)) <= 1e-12

    def test_matches_naive_loop_strided_dilated(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 3, 9, 8))
        w = rng.normal(size=(2, 3, 3, 2))
        got = conv_dense(Tensor(x), Tensor(w), stride=(2, 1), dilation=(2, 3),
                         padding=((1, 0), (2, 2))).data
        want = naive_conv2d(x, w, stride=(2, 1), dilation=(2, 3),
                            pads=((1, 0), (2, 2)))
        assert got.shape == want.shape
        assert np.max(np.abs(got - want)) <= 1e-12

    def test_matches_naive_loop_3d(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 2, 5, 4, 6))
        w = rng.normal(size=(3, 2, 2, 3, 2))
        got = conv_dense(Tensor(x), Tensor(w), stride=(1, 1, 2),
                         padding=((0, 0), (1, 1), (0, 1))).data
        want = naive_conv3d(x, w, stride=(1, 1, 2), pads=((0, 0), (1, 1), (0, 1)))
        assert got.shape == want.shape
        assert np.max(np.abs(got - want)) <= 1e-12

    def test_channel_mismatch_rejected(self):
        x = Tensor.zeros((1, 3, 4, 4))
        w = Tensor.zeros((2, 2, 3, 3))
        with pytest.raises(ValidationError):
            conv_dense(x, w)

    def test_kernel_span_exceeding_input_rejected(self):
        x = Tensor.zeros((1, 1, 4, 4))
        w = Tensor.zeros((1, 1, 3, 3))
        with pytest.raises(ValidationError):
            conv_dense(x, w, dilation=2, padding=0)  # span 5 > 4

    def test_bias_shape_rejected(self):
        x = Tensor.zeros((1, 1, 4, 4))
        w = Tensor.zeros((2, 1, 3, 3))
        with pytest.raises(ValidationError):
            conv_dense(x, w, Tensor.zeros((3,)))


# ---------------------------------------------------------------- depthwise


class TestConvDepthwise:
    @pytest.mark.parametrize("dilation", [1, 2, 3])
    def test_delta_kernel_is_identity(self, dilation):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 3, 9, 9))
        w = np.zeros((3, 3, 3))
        w[:, 1, 1] = 1.0
        out = conv_depthwise(Tensor(x), Tensor(w), dilation=dilation,
                             padding="same")
        assert np.array_equal(out.data, x)

    def test_dilated_7x7_shape_and_gradient_support(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(1, 1, 32, 32)), requires_grad=True)
        w = Tensor(rng.uniform(0.5, 1.5, size=(1, 7, 7)))
        out = conv_depthwise(x, w, dilation=3, padding="same")
        assert out.shape == (1, 1, 32, 32)
        # pick the single centre output; its input support must span
        # (7-1)*3 + 1 = 19 per axis
        mask = np.zeros(out.shape)
        mask[0, 0, 16, 16] = 1.0
        backward((out * Tensor(mask)).sum())
        nz = np.nonzero(x.grad[0, 0])
        for axis in (0, 1):
            assert nz[axis].max() - nz[axis].min() + 1 == 19

    def test_block_diagonal_dense_equivalence_rank2_and_rank3(self):
        rng = np.random.default_rng(6)
        for rank in (2, 3):
            for _ in range(50):
                c = int(rng.integers(1, 5))
                k = int(rng.choice([1, 2, 3]))
                dil = int(rng.integers(1, 3))
                stride = int(rng.integers(1, 3))
                sp = tuple(int(rng.integers(6, 10)) for _ in range(rank))
                x = rng.normal(size=(2, c) + sp)
                wdw = rng.normal(size=(c,) + (k,) * rank)
                wdense = np.zeros((c, c) + (k,) * rank)
                for ch in range(c):
                    wdense[ch, ch] = wdw[ch]
                got = conv_depthwise(Tensor(x), Tensor(wdw), stride=stride,
                                     dilation=dil, padding="same").data
                want = conv_dense(Tensor(x), Tensor(wdense), stride=stride,
                                  dilation=dil, padding="same").data
                assert np.max(np.abs(got - want)) <= 1e-12

    def test_channel_count_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            conv_depthwise(Tensor.zeros((1, 3, 5, 5)), Tensor.zeros((2, 3, 3)))


# ---------------------------------------------------------------- transpose


class TestConvTranspose:
    def test_stride1_1x1_is_scalar_scaling(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 1, 4, 5))
        w = np.full((1, 1, 1, 1), 2.5)
        out = conv_transpose(Tensor(x), Tensor(w))
        assert np.array_equal(out.data, 2.5 * x)

    def test_stride2_2x2_ones_broadcasts_value(self):
        c = 3.7
        x = Tensor(np.full((1, 1, 1, 1), c))
        w = Tensor(np.ones((1, 1, 2, 2)))
        out = conv_transpose(x, w, stride=2)
        assert out.shape == (1, 1, 2, 2)
        assert np.array_equal(out.data, np.full((1, 1, 2, 2), c))

    def test_stride2_doubles_spatial_extent(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.normal(size=(1, 4, 5, 7)))
        w = Tensor(rng.normal(size=(4, 2, 2, 2)))
        assert conv_transpose(x, w, stride=2).shape == (1, 2, 10, 14)
        x3 = Tensor(rng.normal(size=(1, 4, 3, 4, 5)))
        w3 = Tensor(rng.normal(size=(4, 2, 2, 2, 2)))
        assert conv_transpose(x3, w3, stride=2).shape == (1, 2, 6, 8, 10)

    @pytest.mark.parametrize(
        "rank,sp,ci,co,k,stride,pad",
        [
            (2, (6, 7), 2, 3, 3, 1, (1, 1)),
            (2, (6, 7), 2, 3, 3, 1, (0, 2)),
            (2, (8, 6), 3, 2, 2, 2, (0, 0)),
            (2, (8, 8), 1, 1, 4, 2, (1, 1)),
            (3, (4, 5, 6), 2, 2, 3, 1, (1, 1)),
            (3, (4, 6, 4), 1, 2, 2, 2, (0, 0)),
        ],
    )
    def test_adjoint_identity(self, rank, sp, ci, co, k, stride, pad):
        rng = np.random.default_rng(hash((rank, sp, k, stride)) % 2**32)
        x = rng.normal(size=(2, ci) + sp)
        w = rng.normal(size=(co, ci) + (k,) * rank)
        pads = (pad,) * rank
        fwd = conv_dense(Tensor(x), Tensor(w), stride=stride, padding=pads)
        y = rng.normal(size=fwd.shape)
        # conv_transpose expects weights as (Ci, Co, *k) where Ci is the
        # channel count of its own input, i.e. exactly conv_dense's layout
        back = conv_transpose(Tensor(y), Tensor(w), stride=stride, padding=pads)
        assert back.shape == x.shape
        lhs = float(np.sum(fwd.data * y))
        rhs = float(np.sum(x * back.data))
        assert abs(lhs - rhs) <= 1e-10 * (1.0 + abs(lhs))

    def test_transpose_equals_input_gradient_of_conv(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        y = rng.normal(size=(1, 3, 6, 6))
        out = conv_dense(x, w, padding=((1, 1), (1, 1)))
        backward((out * Tensor(y)).sum())
        via_transpose = conv_transpose(Tensor(y), w, padding=((1, 1), (1, 1)))
        assert np.max(np.abs(x.grad - via_transpose.data)) <= 1e-12

    @settings(max_examples=25, deadline=None)
    @given(
        st.integers(5, 9), st.integers(5, 9),
        st.integers(1, 3), st.integers(1, 3),
        st.sampled_from([1, 2, 3]),
        st.integers(0, 42),
    )
    def test_adjoint_identity_property(self, h, wd, ci, co, k, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(1, ci, h, wd))
        w = rng.normal(size=(co, ci, k, k))
        fwd = conv_dense(Tensor(x), Tensor(w), padding=0)
        y = rng.normal(size=fwd.shape)
        back = conv_transpose(Tensor(y), Tensor(w), padding=0)
        lhs = float(np.sum(fwd.data * y))
        rhs = float(np.sum(x * back.data))
        assert abs(lhs - rhs) <= 1e-10 * (1.0 + abs(lhs))

    def test_same_padding_rejected(self):
        with pytest.raises(ValidationError):
            conv_transpose(Tensor.zeros((1, 1, 3, 3)), Tensor.zeros((1, 1, 2, 2)),
                           padding="same")


# ------------------------------------------------------- shared properties


class TestTranslationEquivariance:
    def test_dense_valid_region_shift(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(1, 2, 10, 10))
        w = rng.normal(size=(3, 2, 3, 3))
        full = conv_dense(Tensor(x), Tensor(w), padding=0).data
        shifted = conv_dense(Tensor(x[:, :, 1:, 1:].copy()), Tensor(w),
                             padding=0).data
        assert np.array_equal(shifted, full[:, :, 1:, 1:])

    def test_depthwise_valid_region_shift(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(1, 3, 9, 12))
        w = rng.normal(size=(3, 3, 3))
        full = conv_depthwise(Tensor(x), Tensor(w), padding=0).data
        shifted = conv_depthwise(Tensor(x[:, :, 1:, 1:].copy()), Tensor(w),
                                 padding=0).data
        assert np.array_equal(shifted, full[:, :, 1:, 1:])


class TestOutputExtent:
    def test_formula_matches_enumeration(self):
        rng = np.random.default_rng(12)
        for k in (1, 3, 5, 7):
            for dil in (1, 2, 3):
                for stride in (1, 2):
                    for n in (7, 12, 16):
                        for lo, hi in ((0, 0), (2, 1), (3, 3)):
                            span = (k - 1) * dil + 1
                            if n + lo + hi < span:
                                continue
                            want = (n + lo + hi - span) // stride + 1
                            assert output_extent(n, k, stride, dil, lo, hi) == want
                            x = Tensor(rng.normal(size=(1, 1, n, n)))
                            w = Tensor(rng.normal(size=(1, 1, k, k)))
                            out = conv_dense(x, w, stride=stride, dilation=dil,
                                             padding=((lo, hi), (lo, hi)))
                            assert out.shape[2:] == (want, want)

    def test_kernel_span_helper(self):
        assert kernel_span(7, 3) == 19
        assert kernel_span(1, 5) == 1

    def test_same_padding_output_is_ceil_n_over_s(self):
        for n in (5, 6, 7, 32):
            for k in (1, 2, 3, 5):
                for s in (1, 2, 3):
                    for d in (1, 2):
                        lo, hi = same_padding(n, k, s, d)
                        assert output_extent(n, k, s, d, lo, hi) == math.ceil(n / s)

    def test_same_padding_extra_on_high_side(self):
        lo, hi = same_padding(6, 4, 1, 1)
        assert (lo, hi) == (1, 2)
        lo, hi = same_padding(5, 2, 1, 1)
        assert (lo, hi) == (0, 1)


# --------------------------------------------------- patch embed / expand


class TestPatchEmbed:
    def test_2d_downsamples_by_four(self):
        rng = np.random.default_rng(13)
        pe = PatchEmbed(2, 1, 8, rng)
        out = pe(Tensor(rng.normal(size=(2, 1, 64, 64))))
        assert out.shape == (2, 8, 16, 16)

    def test_3d_downsamples_four_four_two(self):
        rng = np.random.default_rng(14)
        pe = PatchEmbed(3, 1, 16, rng)
        out = pe(Tensor(rng.normal(size=(1, 1, 32, 32, 16))))
        assert out.shape == (1, 16, 8, 8, 8)

    def test_zero_input_zero_output(self):
        rng = np.random.default_rng(15)
        for rank, sp in ((2, (8, 8)), (3, (8, 8, 4))):
            pe = PatchEmbed(rank, 2, 4, rng)
            out = pe(Tensor(np.zeros((1, 2) + sp)))
            assert np.array_equal(out.data, np.zeros_like(out.data))

    def test_indivisible_extent_rejected(self):
        rng = np.random.default_rng(16)
        pe = PatchEmbed(2, 1, 4, rng)
        with pytest.raises(ValidationError):
            pe(Tensor.zeros((1, 1, 10, 8)))
        pe3 = PatchEmbed(3, 1, 4, rng)
        with pytest.raises(ValidationError):
            pe3(Tensor.zeros((1, 1, 8, 8, 5)))


class TestPatchExpand:
    def test_doubles_spatial_halves_channels(self):
        rng = np.random.default_rng(17)
        px = PatchExpand(2, 64, rng)
        out = px(Tensor(rng.normal(size=(1, 64, 8, 8))))
        assert out.shape == (1, 32, 16, 16)
        px3 = PatchExpand(3, 8, rng)
        out3 = px3(Tensor(rng.normal(size=(2, 8, 4, 4, 2))))
        assert out3.shape == (2, 4, 8, 8, 4)

    def test_shape_round_trip_with_downsample(self):
        rng = np.random.default_rng(18)
        down = Conv(2, 16, 32, 3, rng, stride=2, bias=True)
        up = PatchExpand(2, 32, rng)
        x = Tensor(rng.normal(size=(1, 16, 8, 8)))
        assert up(down(x)).shape == x.shape

    def test_odd_channels_rejected(self):
        with pytest.raises(ValidationError):
            PatchExpand(2, 7, np.random.default_rng(19))

    def test_zero_input_zero_output(self):
        rng = np.random.default_rng(20)
        px = PatchExpand(3, 6, rng)
        out = px(Tensor(np.zeros((1, 6, 2, 2, 2))))
        assert np.array_equal(out.data, np.zeros_like(out.data))
