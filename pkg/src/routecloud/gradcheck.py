"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    name: str
    errors: list  # max relative error per input
    tol: float
    checked: list = field(default_factory=list)  # coordinates compared per input

    @property
    def max_error(self):
        return max(self.errors, default=0.0)

    @property
    def passed(self):
        return all(np.isfinite(e) and e < self.tol for e in self.errors)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<32s} max_rel_err={self.max_error:.3e}  tol={self.tol:.0e}"


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps coordinates whose true gradient is ~0 from dividing
    round-off noise by round-off noise.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(f, inputs, step=1e-5, tol=1e-5, name="f", max_checks=None, seed=0, floor=1e-6):
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    Parameters
    ----------
    f : callable
        Maps Tensors to a scalar Tensor. Must be deterministic.
    inputs : sequence of array-like
        Differentiated inputs, converted to 64-bit.
    max_checks : int, optional
        If given, compare at most this many randomly chosen coordinates per
        input (the full analytic gradient is still computed).

    Returns
    -------
    GradCheckReport
        Per-input max relative error; NaN counts as failure.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    backward(f(*leaves))
    analytic = [
        leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves
    ]

    rng = np.random.default_rng(seed)
    errors, checked = [], []
    for i, base in enumerate(arrays):
        flat_idx = np.arange(base.size)
        if max_checks is not None and base.size > max_checks:
            flat_idx = np.sort(rng.choice(base.size, size=max_checks, replace=False))
        numeric = np.empty(flat_idx.size)
        for j, idx in enumerate(flat_idx):
            numeric[j] = _central_difference(f, arrays, i, idx, step)
        a = analytic[i].reshape(-1)[flat_idx]
        if a.size == 0:
            errors.append(0.0)
        else:
            err = relative_error(a, numeric, floor)
            errors.append(float(np.nan if np.isnan(err).any() else err.max()))
        checked.append(int(flat_idx.size))
    return GradCheckReport(name=name, errors=errors, tol=tol, checked=checked)


def _central_difference(f, arrays, which, flat_index, step):
    vals = []
    for sign in (1.0, -1.0):
        trial = [a if k != which else a.copy() for k, a in enumerate(arrays)]
        trial[which].reshape(-1)[flat_index] += sign * step
        with no_grad():
            vals.append(f(*[Tensor(t) for t in trial]).data.item())
    return (vals[0] - vals[1]) / (2.0 * step)
