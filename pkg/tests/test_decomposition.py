import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowcast.decomposition import decompose
from flowcast.errors import DimensionError
from flowcast.gradcheck import check_gradients
from flowcast.tensor import Tape, Tensor, backward, tensor
from flowcast.tensor import sum_ as tsum


def rand(shape, seed, low=-3.0, high=3.0):
    return np.random.default_rng(seed).uniform(low, high, shape)


class TestDecompose:
    def test_unit_mask_all_trend(self):
        h = Tensor(rand((2, 3, 4), 0))
        parts = decompose(h, Tensor(np.ones((2, 3, 4))))
        np.testing.assert_array_equal(parts.trend.data, h.data)
        np.testing.assert_array_equal(parts.seasonal.data, np.zeros((2, 3, 4)))

    def test_zero_mask_all_seasonal(self):
        h = Tensor(rand((2, 3, 4), 1))
        parts = decompose(h, Tensor(np.zeros((2, 3, 4))))
        np.testing.assert_array_equal(parts.trend.data, np.zeros((2, 3, 4)))
        np.testing.assert_array_equal(parts.seasonal.data, h.data)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            decompose(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_reconstruction_bitwise_for_unit_interval_masks(self, seed):
        rng = np.random.default_rng(seed)
        h = rng.uniform(-100.0, 100.0, (3, 4, 5))
        m = rng.uniform(0.0, 1.0, (3, 4, 5))
        parts = decompose(Tensor(h), Tensor(m))
        total = parts.trend.data + parts.seasonal.data
        assert np.array_equal(total, h)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_reconstruction_tight_for_arbitrary_masks(self, seed):
        rng = np.random.default_rng(seed)
        h = rng.normal(0, 10, (3, 4, 5))
        m = rng.normal(0, 10, (3, 4, 5))
        parts = decompose(Tensor(h), Tensor(m))
        total = parts.trend.data + parts.seasonal.data
        np.testing.assert_allclose(total, h, rtol=1e-12, atol=1e-12)

    def test_node_constant_mask_gives_node_constant_ratio(self):
        rng = np.random.default_rng(3)
        h = rng.uniform(1.0, 2.0, (2, 4, 3))
        m = np.broadcast_to(rng.uniform(0.1, 0.9, (2, 1, 3)), (2, 4, 3)).copy()
        parts = decompose(Tensor(h), Tensor(m))
        ratio = parts.trend.data / h
        assert np.allclose(ratio, ratio[:, :1, :])

    def test_gradients_reach_both_inputs(self):
        h = tensor(rand((2, 2, 3), 4), requires_grad=True)
        m = tensor(rand((2, 2, 3), 5, low=0.0, high=1.0), requires_grad=True)
        with Tape():
            parts = decompose(h, m)
            loss = tsum(parts.trend * parts.trend) + tsum(parts.seasonal)
        backward(loss)
        assert h.grad is not None and m.grad is not None
        # d(trend)/dM = H elementwise, visible through the linear seasonal term
        np.testing.assert_allclose(
            m.grad, 2.0 * parts.trend.data * h.data - h.data, atol=1e-12)

    def test_gradcheck_matches_finite_differences(self):
        h = tensor(rand((2, 2, 2), 6), requires_grad=True)
        m = tensor(rand((2, 2, 2), 7, low=0.0, high=1.0), requires_grad=True)

        def loss(_):
            parts = decompose(h, m)
            return tsum(parts.trend * parts.trend + parts.seasonal * parts.trend)

        assert check_gradients(loss, [h, m]) < 1e-6
