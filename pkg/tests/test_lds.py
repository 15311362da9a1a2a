import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from routecloud.circuit_io import LabelGrid
from routecloud.errors import ContractError
from routecloud.gradcheck import grad_check
from routecloud.lds import (LdsWeightTable, bin_index, build_histogram, gaussian_kernel, smooth_density,
                            weighted_mse)
from routecloud.tensor import Tensor, backward

BW = 0.001


def sort_and_count(values, n_bins=1000):
    """Independent histogram: sort, then walk runs of equal bin ids."""
    bins = sorted(min(int(math.floor(v * n_bins)), n_bins - 1) for v in values)
    counts = [0] * n_bins
    for b in bins:
        counts[b] += 1
    return np.array(counts) / (len(values) * (1.0 / n_bins))


def direct_convolution(p, size=5, sigma=2.0):
    """Per-bin sum over kernel taps with mirrored indices."""
    half = size // 2
    taps = [math.exp(-(r * r) / (2 * sigma * sigma)) for r in range(-half, half + 1)]
    z = sum(taps)
    n = len(p)
    out = []
    for i in range(n):
        acc = 0.0
        for t, r in enumerate(range(-half, half + 1)):
            j = i + r
            if j < 0:
                j = -j - 1
            elif j >= n:
                j = 2 * n - j - 1
            acc += taps[t] / z * p[j]
        out.append(acc)
    return np.array(out)


class TestHistogram:
    def test_constant_half(self):
        p = build_histogram([np.full((4, 4), 0.5)])
        assert np.flatnonzero(p).tolist() == [500]
        assert p[500] * BW == pytest.approx(1.0)

    def test_one_goes_to_last_bin(self):
        assert bin_index([1.0, 0.0, 0.9995], 1000).tolist() == [999, 0, 999]

    def test_normalized(self, rng):
        p = build_histogram([rng.uniform(size=(8, 8)) for _ in range(5)])
        assert abs(p.sum() * BW - 1.0) < 1e-12

    def test_uniform_is_near_flat(self, rng):
        p = build_histogram([rng.uniform(size=1_000_000)])
        assert np.abs(p - 1.0).max() < 0.15  # per-bin
        assert abs(p.mean() - 1.0) < 0.05

    def test_matches_sort_and_count(self, rng):
        labels = [rng.beta(0.3, 2.0, size=(7, 9)) for _ in range(4)] + [np.array([[0.0, 1.0, 0.999]])]
        expected = sort_and_count(np.concatenate([l.ravel() for l in labels]).tolist())
        np.testing.assert_array_equal(build_histogram(labels), expected)

    def test_accepts_label_grids(self):
        p = build_histogram([LabelGrid(np.full((2, 2), 0.25))])
        assert np.flatnonzero(p).tolist() == [250]

    def test_empty_stream(self):
        with pytest.raises(ContractError):
            build_histogram([])


class TestSmoothing:
    def test_kernel_normalized_and_symmetric(self):
        k = gaussian_kernel(5, 2.0)
        assert k.sum() == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_array_equal(k, k[::-1])

    def test_delta_gives_kernel(self):
        p = np.zeros(50)
        p[20] = 1.0
        np.testing.assert_allclose(smooth_density(p)[18:23], gaussian_kernel(5, 2.0), atol=1e-15)

    def test_uniform_unchanged(self):
        p = np.full(1000, 1.0)
        np.testing.assert_allclose(smooth_density(p), p, atol=1e-12)

    def test_two_deltas_match_direct_convolution(self):
        p = np.zeros(1000)
        p[1], p[600] = 700.0, 300.0
        np.testing.assert_allclose(smooth_density(p), direct_convolution(p.tolist()), rtol=0, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0, 100), min_size=3, max_size=80))
    def test_mass_conserved(self, values):
        p = np.array(values)
        assert abs(smooth_density(p).sum() - p.sum()) <= 1e-9 * max(1.0, p.sum())

    def test_even_kernel(self):
        with pytest.raises(ContractError):
            smooth_density(np.ones(10), kernel_size=4)


class TestWeights:
    def test_uniform_labels_equal_weights(self):
        labels = [(np.arange(1000) + 0.5) / 1000.0]
        t = LdsWeightTable.from_labels(labels)
        np.testing.assert_allclose(t.weights, 1.0, atol=1e-12)

    def test_nine_to_one_skew(self):
        label = np.array([0.2005] * 9 + [0.8005])
        t = LdsWeightTable.from_labels([label])
        ratio = t.raw_weights[800] / t.raw_weights[200]
        assert abs(ratio - 3.0) / 3.0 < 0.01
        assert t.weight_of([0.8005])[0] / t.weight_of([0.2005])[0] == pytest.approx(ratio)

    def test_mean_normalized_over_observed(self, rng):
        t = LdsWeightTable.from_labels([rng.beta(0.5, 4.0, size=(20, 20))])
        assert t.weights[t.p > 0].mean() == pytest.approx(1.0, abs=1e-12)
        assert np.all(np.isfinite(t.weights))

    def test_unobserved_bins_take_nearest_observed(self):
        t = LdsWeightTable.from_labels([np.array([0.1005, 0.1005, 0.9005])])
        assert t.weights[0] == t.weights[100]
        assert t.weights[400] == t.weights[100]
        assert t.weights[700] == t.weights[900]
        assert t.weights[999] == t.weights[900]

    def test_round_trip_arrays(self, rng):
        t = LdsWeightTable.from_labels([rng.uniform(size=50)])
        u = LdsWeightTable.from_arrays(t.to_arrays())
        np.testing.assert_array_equal(u.weights, t.weights)
        assert u.bin_width == t.bin_width


class TestWeightedMse:
    def test_single_cell(self):
        assert weighted_mse(Tensor([[0.5]]), np.array([[0.0]])).item() == 0.25

    def test_uniform_weights_equal_plain_mse_bitwise(self, rng):
        pred, label = rng.uniform(size=(6, 6)), rng.uniform(size=(6, 6))
        a = weighted_mse(Tensor(pred), label, LdsWeightTable.uniform()).item()
        b = weighted_mse(Tensor(pred), label).item()
        assert a == b

    def test_matches_formula(self, rng):
        pred, label = rng.uniform(size=(5, 5)), rng.beta(0.5, 2, size=(5, 5))
        t = LdsWeightTable.from_labels([label])
        expected = np.mean(t.weight_of(label) * (pred - label) ** 2)
        assert weighted_mse(Tensor(pred), label, t).item() == pytest.approx(expected, rel=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            weighted_mse(Tensor(np.zeros((2, 2))), np.zeros((2, 3)))

    def test_gradient(self, rng):
        label = rng.beta(0.5, 2, size=(4, 4))
        t = LdsWeightTable.from_labels([label])
        rep = grad_check(lambda p: weighted_mse(p, label, t), [rng.uniform(size=(4, 4))], tol=1e-6)
        assert rep.passed, rep.line()

    def test_weights_change_gradients_on_skewed_labels(self, rng):
        label = np.where(rng.uniform(size=(8, 8)) < 0.9, 0.0105, 0.7505)
        t = LdsWeightTable.from_labels([label])
        pred = rng.uniform(size=(8, 8))
        grads = []
        for table in (None, t):
            p = Tensor(pred, requires_grad=True)
            backward(weighted_mse(p, label, table))
            grads.append(p.grad)
        assert not np.allclose(grads[0], grads[1])
