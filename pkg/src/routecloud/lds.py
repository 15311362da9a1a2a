"""Label distribution smoothing and the reweighted MSE objective.

Labels in [0, 1] are binned at width 0.001. The empirical density is
convolved with a normalized Gaussian kernel to get the effective density;
each label is weighted by the inverse square root of the effective density
of its bin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ContractError
from .tensor import Tensor, as_tensor


def n_bins_for(bin_width):
    return int(round(1.0 / bin_width))


def bin_index(values, n_bins):
    """Bin of each value in [0, 1]; 1.0 falls in the last bin."""
    v = np.asarray(values, dtype=np.float64)
    return np.clip(np.floor(v * n_bins).astype(np.int64), 0, n_bins - 1)


def _label_values(label):
    return np.asarray(getattr(label, "values", label), dtype=np.float64).reshape(-1)


def build_histogram(labels, bin_width=0.001):
    """Empirical label density per bin, normalized so ``sum(p) * bin_width == 1``."""
    n_bins = n_bins_for(bin_width)
    counts = np.zeros(n_bins, dtype=np.int64)
    total = 0
    for label in labels:
        v = _label_values(label)
        counts += np.bincount(bin_index(v, n_bins), minlength=n_bins)
        total += v.size
    if total == 0:
        raise ContractError("cannot build a label histogram from an empty label stream")
    return counts / (total * bin_width)


def gaussian_kernel(kernel_size=5, sigma=2.0):
    if kernel_size % 2 == 0:
        raise ContractError(f"kernel_size must be odd, got {kernel_size}")
    r = np.arange(kernel_size) - kernel_size // 2
    k = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def smooth_density(p, kernel_size=5, sigma=2.0):
    """Convolve a binned density with a normalized Gaussian kernel.

    Edges are mirrored (half-sample symmetric). With a symmetric kernel the
    resulting operator is a symmetric matrix whose rows sum to one, so it
    conserves total mass and leaves a uniform density unchanged.
    """
    p = np.asarray(p, dtype=np.float64)
    k = gaussian_kernel(kernel_size, sigma)
    half = kernel_size // 2
    if half == 0:
        return p.copy()
    if half > p.size:
        raise ContractError("kernel wider than the histogram")
    padded = np.pad(p, half, mode="symmetric")
    out = np.zeros_like(p)
    for t in range(kernel_size):
        out += k[t] * padded[t:t + p.size]
    return out


@dataclass
class LdsWeightTable:
    bin_width: float
    p: np.ndarray  # empirical density per bin
    p_smooth: np.ndarray  # effective density
    raw_weights: np.ndarray  # 1 / sqrt(p_smooth), unobserved bins filled from nearest observed
    weights: np.ndarray  # raw_weights scaled so the mean over observed bins is 1

    @property
    def n_bins(self):
        return self.p.size

    @classmethod
    def from_labels(cls, labels, bin_width=0.001, kernel_size=5, sigma=2.0, floor=1e-12):
        p = build_histogram(labels, bin_width)
        return cls.from_density(p, bin_width, kernel_size, sigma, floor)

    @classmethod
    def from_density(cls, p, bin_width=0.001, kernel_size=5, sigma=2.0, floor=1e-12):
        p = np.asarray(p, dtype=np.float64)
        p_smooth = smooth_density(p, kernel_size, sigma)
        observed = p > 0
        if not observed.any():
            raise ContractError("density has no observed bins")
        raw = 1.0 / np.sqrt(np.maximum(p_smooth, floor))
        obs_idx = np.flatnonzero(observed)
        # every bin takes the weight of its nearest observed bin (ties -> lower bin)
        pos = np.searchsorted(obs_idx, np.arange(p.size))
        lo = obs_idx[np.clip(pos - 1, 0, obs_idx.size - 1)]
        hi = obs_idx[np.clip(pos, 0, obs_idx.size - 1)]
        nearest = np.where(np.abs(np.arange(p.size) - lo) <= np.abs(hi - np.arange(p.size)), lo, hi)
        raw = np.where(observed, raw, raw[nearest])
        weights = raw / raw[observed].mean()
        return cls(float(bin_width), p, p_smooth, raw, weights)

    @classmethod
    def uniform(cls, bin_width=0.001):
        n = n_bins_for(bin_width)
        p = np.full(n, 1.0)
        return cls(float(bin_width), p, p.copy(), np.ones(n), np.ones(n))

    def weight_of(self, values):
        return self.weights[bin_index(values, self.n_bins)]

    def to_arrays(self):
        return {
            "bin_width": np.array([self.bin_width]),
            "p": self.p,
            "p_smooth": self.p_smooth,
            "raw_weights": self.raw_weights,
            "weights": self.weights,
        }

    @classmethod
    def from_arrays(cls, arrays):
        return cls(float(arrays["bin_width"][0]), arrays["p"], arrays["p_smooth"],
                   arrays["raw_weights"], arrays["weights"])


def weighted_mse(pred, label, table=None):
    """Mean of ``w(label) * (pred - label)**2``; weights are constants.

    With ``table=None`` this is the plain MSE.
    """
    pred = as_tensor(pred)
    target = np.asarray(getattr(label, "values", label), dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ContractError(f"weighted_mse: prediction {pred.shape} vs label {target.shape}")
    diff = ops.sub(pred, Tensor(target))
    sq = ops.mul(diff, diff)
    if table is not None:
        sq = ops.mul(sq, Tensor(table.weight_of(target).astype(pred.dtype)))
    return ops.mean(sq)
