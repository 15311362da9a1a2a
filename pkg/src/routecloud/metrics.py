"""Pearson, Spearman and Kendall tau-b correlations plus dataset aggregation."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError

METRICS = ("pearson", "spearman", "kendall")


class UndefinedCorrelationWarning(RuntimeWarning):
    """A correlation was requested for constant input."""


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ContractError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ContractError("need at least two values")
    return a, b


def _undefined(name):
    warnings.warn(f"{name}: constant input, correlation undefined", UndefinedCorrelationWarning, stacklevel=3)
    return float("nan")


def pearson(a, b):
    """Product-moment correlation (two-pass: center, then sum products)."""
    a, b = _pair(a, b)
    da = a - a.mean()
    db = b - b.mean()
    saa = float(np.dot(da, da))
    sbb = float(np.dot(db, db))
    if saa == 0.0 or sbb == 0.0:
        return _undefined("pearson")
    r = float(np.dot(da, db)) / math.sqrt(saa * sbb)
    # rounding in the norms can leave a perfect correlation a few ulps off
    if abs(abs(r) - 1.0) < 8 * np.finfo(float).eps:
        return math.copysign(1.0, r)
    return r


def spearman(a, b):
    """Pearson correlation of midranks."""
    a, b = _pair(a, b)
    if np.all(a == a[0]) or np.all(b == b[0]):
        return _undefined("spearman")
    return pearson(rankdata(a, method="average"), rankdata(b, method="average"))


def _count_inversions(seq):
    """Number of pairs i < j with seq[i] > seq[j] (merge sort, O(n log n))."""
    seq = list(seq)
    n = len(seq)
    buf = [0] * n
    inv = 0
    width = 1
    while width < n:
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                if seq[j] < seq[i]:
                    buf[k] = seq[j]
                    inv += mid - i
                    j += 1
                else:
                    buf[k] = seq[i]
                    i += 1
                k += 1
            buf[k:hi] = seq[i:mid] if i < mid else seq[j:hi]
        seq, buf = buf, seq
        width *= 2
    return inv


def _tie_pairs(sorted_vals):
    """Pairs tied within runs of equal values of an already sorted array."""
    if sorted_vals.size == 0:
        return 0
    edges = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1], True])
    runs = np.diff(edges).astype(np.int64)
    return int((runs * (runs - 1) // 2).sum())


def kendall_counts(a, b):
    """Integer pair counts ``(n0, n1, n2, S)`` with ``S = concordant - discordant``.

    ``n1``/``n2`` count pairs tied in ``a``/``b``. Uses Knight's algorithm.
    """
    a, b = _pair(a, b)
    n = a.size
    n0 = n * (n - 1) // 2
    order = np.lexsort((b, a))
    a_s, b_s = a[order], b[order]
    n1 = _tie_pairs(a_s)
    # pairs tied in both: runs of equal (a, b)
    joint = np.flatnonzero(np.r_[True, (a_s[1:] != a_s[:-1]) | (b_s[1:] != b_s[:-1]), True])
    runs = np.diff(joint).astype(np.int64)
    n3 = int((runs * (runs - 1) // 2).sum())
    # discordant pairs = inversions of b in (a, b)-sorted order, ties excluded
    b_rank = rankdata(b_s, method="dense").astype(np.int64)
    swaps = _count_inversions(b_rank.tolist())
    n2 = _tie_pairs(np.sort(b))
    S = n0 - n1 - n2 + n3 - 2 * swaps
    return n0, n1, n2, S


def kendall(a, b, variant="b"):
    """Kendall rank correlation, tau-b by default (``variant="a"`` ignores ties)."""
    n0, n1, n2, S = kendall_counts(a, b)
    if variant == "a":
        return S / n0
    if variant != "b":
        raise ContractError(f"unknown Kendall variant {variant!r}")
    if n1 == n0 or n2 == n0:
        return _undefined("kendall")
    return S / math.sqrt((n0 - n1) * (n0 - n2))


@dataclass
class EvalReport:
    """Per-sample correlations and their unweighted means (NaNs excluded)."""

    per_sample: list  # dicts: name + metric values
    means: dict
    excluded: dict  # metric -> number of undefined samples
    pooled: bool = False
    meta: dict = field(default_factory=dict)

    def to_json(self, indent=2):
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        doc = {
            "means": {k: clean(v) for k, v in self.means.items()},
            "excluded": self.excluded,
            "pooled": self.pooled,
            "samples": [{k: clean(v) for k, v in s.items()} for s in self.per_sample],
        }
        doc.update(self.meta)
        return json.dumps(doc, indent=indent)

    def to_table(self):
        names = [str(s.get("name", i)) for i, s in enumerate(self.per_sample)]
        width = max([len(n) for n in names] + [6])
        lines = [f"{'sample':<{width}}  " + "  ".join(f"{m:>9s}" for m in METRICS)]
        for name, s in zip(names, self.per_sample):
            lines.append(f"{name:<{width}}  " + "  ".join(f"{s[m]:9.4f}" for m in METRICS))
        lines.append(f"{'mean':<{width}}  " + "  ".join(f"{self.means[m]:9.4f}" for m in METRICS))
        if any(self.excluded.values()):
            lines.append("excluded (undefined): " + ", ".join(f"{m}={c}" for m, c in self.excluded.items()))
        return "\n".join(lines)


def evaluate_dataset(preds, labels, names=None, pooled=False, kendall_variant="b"):
    """Correlate each prediction raster with its label over all cells.

    With ``pooled=True`` all cells of all samples are concatenated into a
    single correlation instead of averaging per-sample values.
    """
    preds = [np.asarray(getattr(p, "values", p), dtype=np.float64) for p in preds]
    labels = [np.asarray(getattr(l, "values", l), dtype=np.float64) for l in labels]
    if not preds:
        raise ContractError("empty dataset")
    if len(preds) != len(labels):
        raise ContractError(f"{len(preds)} predictions but {len(labels)} labels")
    for p, l in zip(preds, labels):
        if p.shape != l.shape:
            raise ContractError(f"shape mismatch {p.shape} vs {l.shape}")
    names = list(names) if names is not None else [str(i) for i in range(len(preds))]

    def score(p, l):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UndefinedCorrelationWarning)
            return {
                "pearson": pearson(p, l),
                "spearman": spearman(p, l),
                "kendall": kendall(p, l, kendall_variant),
            }

    if pooled:
        s = score(np.concatenate([p.ravel() for p in preds]), np.concatenate([l.ravel() for l in labels]))
        excluded = {m: int(math.isnan(s[m])) for m in METRICS}
        return EvalReport([dict(name="pooled", **s)], dict(s), excluded, pooled=True)

    per = [dict(name=n, **score(p, l)) for n, p, l in zip(names, preds, labels)]
    means, excluded = {}, {}
    for m in METRICS:
        vals = [s[m] for s in per if not math.isnan(s[m])]
        excluded[m] = len(per) - len(vals)
        means[m] = float(np.mean(vals)) if vals else float("nan")
    if any(excluded.values()):
        warnings.warn(f"samples with undefined correlation excluded: {excluded}", UndefinedCorrelationWarning,
                      stacklevel=2)
    return EvalReport(per, means, excluded)
