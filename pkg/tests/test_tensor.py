"""Tensor construction, elementwise ops, padding, and moment reductions."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlka import (
    SpatialShape,
    Tensor,
    ValidationError,
    crop,
    elementwise,
    pad_constant,
    reduce_moments,
)


class TestConstruction:
    def test_shape_strides_size(self):
        t = Tensor(np.arange(24.0).reshape(2, 3, 4))
        assert t.shape == (2, 3, 4)
        assert t.size == 24
        # strides are in element units, row-major
        assert t.strides == (12, 4, 1)

    def test_default_dtype_is_float64(self):
        assert Tensor.zeros((2, 2)).dtype == np.float64

    def test_negative_extent_rejected(self):
        with pytest.raises(ValidationError):
            Tensor.zeros((2, -1))

    def test_zero_extent_allowed_and_propagates(self):
        t = Tensor.zeros((2, 0, 3))
        assert t.size == 0
        out = t * 2.0 + 1.0
        assert out.shape == (2, 0, 3)
        assert pad_constant(t, ((0, 0), (1, 1), (0, 0)), 5.0).shape == (2, 2, 3)

    def test_spatial_shape_rank_must_match_dims(self):
        s = SpatialShape(rank=2, dims=(4, 5), channels=3)
        assert s.volume == 20
        with pytest.raises(ValidationError):
            SpatialShape(rank=3, dims=(4, 5), channels=3)


class TestElementwise:
    def test_mul_definition(self):
        out = elementwise(Tensor(np.array([1.0, 2.0, 3.0])),
                          Tensor(np.array([4.0, 5.0, 6.0])), "mul")
        np.testing.assert_array_equal(out.numpy(), [4.0, 10.0, 18.0])

    def test_add_zeros_identity(self):
        x = Tensor(np.random.default_rng(0).standard_normal((3, 4)))
        out = elementwise(x, Tensor.zeros((3, 4)), "add")
        np.testing.assert_array_equal(out.numpy(), x.numpy())

    def test_mul_ones_broadcast_over_channels_identity(self):
        x = Tensor(np.random.default_rng(1).standard_normal((2, 3, 4, 4)))
        ones = Tensor.ones((1, 3, 1, 1))
        np.testing.assert_array_equal(elementwise(x, ones, "mul").numpy(), x.numpy())

    def test_incompatible_shapes_rejected(self):
        with pytest.raises(ValidationError):
            elementwise(Tensor.zeros((2, 3)), Tensor.zeros((2, 4)), "add")

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_add_commutative_bitwise(self, seed):
        rng = np.random.default_rng(seed)
        a = Tensor(rng.standard_normal((3, 5)))
        b = Tensor(rng.standard_normal((3, 5)))
        ab = elementwise(a, b, "add").numpy()
        ba = elementwise(b, a, "add").numpy()
        np.testing.assert_array_equal(ab, ba)


class TestPadCrop:
    def test_pad_value_centered(self):
        t = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        out = pad_constant(t, ((0, 0), (0, 0), (1, 1), (1, 1)), 0.0)
        assert out.shape == (1, 1, 4, 4)
        np.testing.assert_array_equal(out.numpy()[0, 0, 1:3, 1:3], t.numpy()[0, 0])
        assert out.numpy()[0, 0, 0].sum() == 0.0

    def test_pad_zero_identity(self):
        t = Tensor(np.random.default_rng(2).standard_normal((2, 3)))
        out = pad_constant(t, ((0, 0), (0, 0)), 7.0)
        np.testing.assert_array_equal(out.numpy(), t.numpy())

    def test_pad_low_side_value(self):
        t = Tensor(np.array([5.0, 6.0, 7.0]).reshape(1, 1, 1, 3))
        out = pad_constant(t, ((0, 0), (0, 0), (0, 0), (2, 0)), -1.0)
        np.testing.assert_array_equal(out.numpy()[0, 0, 0], [-1.0, -1.0, 5.0, 6.0, 7.0])

    def test_negative_pad_rejected(self):
        with pytest.raises(ValidationError):
            pad_constant(Tensor.zeros((2, 2)), ((-1, 0), (0, 0)), 0.0)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_pad_then_crop_round_trip_bit_exact(self, seed):
        rng = np.random.default_rng(seed)
        t = Tensor(rng.standard_normal((2, 3, 4)))
        pads = tuple((int(a), int(b)) for a, b in rng.integers(0, 3, (3, 2)))
        out = crop(pad_constant(t, pads, rng.standard_normal()), pads)
        np.testing.assert_array_equal(out.numpy(), t.numpy())


class TestReduceMoments:
    def test_hand_arithmetic(self):
        mean, var = reduce_moments(Tensor(np.array([1.0, 2.0, 3.0, 4.0])), (0,))
        assert mean.item() == 2.5
        assert var.item() == 1.25

    def test_constant_variance_exactly_zero(self):
        mean, var = reduce_moments(Tensor.full((3, 5), 3.7), (1,))
        np.testing.assert_array_equal(var.numpy(), np.zeros((3, 1)))
        np.testing.assert_allclose(mean.numpy(), np.full((3, 1), 3.7), rtol=0, atol=0)

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 8))
        mean, var = reduce_moments(Tensor(x), (1,))
        # independent two-pass sums: mean first, then centered squares
        m = x.sum(axis=1, keepdims=True) / 8.0
        v = ((x - m) ** 2).sum(axis=1, keepdims=True) / 8.0
        np.testing.assert_allclose(mean.numpy(), m, rtol=0, atol=1e-15)
        np.testing.assert_allclose(var.numpy(), v, rtol=0, atol=1e-15)

    def test_population_not_sample_variance(self):
        _, var = reduce_moments(Tensor(np.array([0.0, 2.0])), (0,))
        assert var.item() == 1.0  # divide by n, not n-1

    def test_reduced_axes_kept_as_singletons(self):
        mean, var = reduce_moments(Tensor.zeros((2, 3, 4)), (1,))
        assert mean.shape == (2, 1, 4)
        assert var.shape == (2, 1, 4)

    def test_empty_axis_set_rejected(self):
        with pytest.raises(ValidationError):
            reduce_moments(Tensor.zeros((2, 2)), ())

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_variance_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((4, 6)) * rng.uniform(0, 100)
        _, var = reduce_moments(Tensor(x), (0, 1))
        assert (var.numpy() >= 0).all()
