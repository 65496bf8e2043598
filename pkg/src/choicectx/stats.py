"""Likelihood-ratio and Wilcoxon tests, relative-rank evaluation and binned MNLs."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .data import ChoiceDataset
from .models import ModelKind, log_probabilities
from .optimize import TrainConfig, TrainingError, fit_mle

_EPS = 1e-16
_MAX_ITER = 100_000


def _gamma_prefactor(a: float, x: float) -> float:
    return math.exp(-x + a * math.log(x) - math.lgamma(a))


def _lower_series(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x) by its power series."""
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * _gamma_prefactor(a, x)


def _upper_continued_fraction(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x) by modified Lentz."""
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    dd = 1.0 / b
    h = dd
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        dd = an * dd + b
        if abs(dd) < tiny:
            dd = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        dd = 1.0 / dd
        delta = dd * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return _gamma_prefactor(a, x) * h


def gamma_q(a: float, x: float) -> float:
    """Regularized upper incomplete gamma function Q(a, x)."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x < 0:
        raise ValueError("x must be nonnegative")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return max(0.0, 1.0 - _lower_series(a, x))
    return min(1.0, _upper_continued_fraction(a, x))


def chi2_sf(x: float, dof: int) -> float:
    """Upper tail probability of a chi-squared variable with ``dof`` degrees of freedom."""
    if int(dof) != dof or dof < 1:
        raise ValueError(f"degrees of freedom must be a positive integer, got {dof}")
    if x < 0:
        raise ValueError("chi2_sf needs x >= 0")
    return gamma_q(dof / 2.0, x / 2.0)


@dataclass
class LRTResult:
    statistic: float
    dof: int
    p_value: float

    def to_json(self):
        return {"statistic": self.statistic, "dof": self.dof, "p_value": self.p_value}


def likelihood_ratio_test(nll_null: float, nll_full: float, dof: int) -> LRTResult:
    """Nested-model LRT. A negative statistic (under-trained full model) is kept as-is, with p = 1."""
    if int(dof) != dof or dof < 1:
        raise ValueError(f"degrees of freedom must be a positive integer, got {dof}")
    stat = 2.0 * (nll_null - nll_full)
    return LRTResult(stat, int(dof), chi2_sf(max(stat, 0.0), dof))


# --------------------------------------------------------------------------
# Wilcoxon signed-rank


@dataclass
class WilcoxonResult:
    T: float
    n_effective: int
    p_value: float
    method: str

    def to_json(self):
        return {"T": self.T, "n_effective": self.n_effective, "p_value": self.p_value, "method": self.method}


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_two_sided(doubled_ranks: np.ndarray, doubled_t: int) -> float:
    """P(min(W+, W-) <= T) under random signs, by counting sign patterns.

    Ranks are doubled so that average ranks of ties become integers.
    """
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    w = np.arange(total + 1)
    hit = (w <= doubled_t) | (w >= total - doubled_t)
    return min(1.0, float(sum(counts[hit])) / 2.0 ** len(doubled_ranks))


def wilcoxon_signed_rank(differences, exact_threshold: int = 20) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test.

    Zero differences are discarded. Below ``exact_threshold`` nonzero
    differences the null distribution is counted exactly; otherwise a normal
    approximation with tie and continuity corrections is used.
    """
    d = np.asarray(differences, dtype=float).ravel()
    if d.size == 0:
        raise ValueError("need at least one difference")
    d = d[d != 0]
    n = d.size
    if n == 0:
        return WilcoxonResult(0.0, 0, 1.0, "exact")
    ranks = _average_ranks(np.abs(d))
    w_plus = ranks[d > 0].sum()
    w_minus = ranks[d < 0].sum()
    T = float(min(w_plus, w_minus))
    if n < exact_threshold:
        p = _exact_two_sided(np.rint(2 * ranks).astype(np.int64), int(round(2 * T)))
        return WilcoxonResult(T, n, p, "exact")
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts ** 3 - tie_counts).sum() / 48.0
    if var <= 0:
        return WilcoxonResult(T, n, 1.0, "normal_approx")
    z = (T - mean + 0.5) / math.sqrt(var)
    z = min(z, 0.0)
    p = min(1.0, math.erfc(-z / math.sqrt(2.0)))
    return WilcoxonResult(T, n, p, "normal_approx")


# --------------------------------------------------------------------------
# relative rank


def relative_ranks(params, data: ChoiceDataset) -> np.ndarray:
    """Position of the chosen item when each set is sorted by descending probability,
    divided by ``|C| - 1``; tied items share the mean of the positions they occupy."""
    if np.any(data.sizes < 2):
        raise ValueError("relative rank needs choice sets of size >= 2")
    lp = log_probabilities(params, data)
    chosen = lp[np.arange(data.n), data.chosen][:, None]
    mask = data.mask
    greater = ((lp > chosen) & mask).sum(axis=1)
    tied = ((lp == chosen) & mask).sum(axis=1)
    return (greater + (tied - 1) / 2.0) / (data.sizes - 1)


def mean_relative_rank(params, data: ChoiceDataset) -> tuple[float, np.ndarray]:
    ranks = relative_ranks(params, data)
    return float(ranks.mean()), ranks


# --------------------------------------------------------------------------
# weighted least squares and binned MNLs


@dataclass
class WLSFit:
    slope: float
    intercept: float
    r2: float
    slope_se: float


def weighted_least_squares(xs, ys, weights) -> WLSFit:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    w = np.asarray(weights, dtype=float)
    if not (x.shape == y.shape == w.shape) or x.ndim != 1:
        raise ValueError("xs, ys and weights must be equal-length vectors")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    if len(np.unique(x)) < 2:
        raise ValueError("need at least two distinct x values")
    sw = w.sum()
    xbar = (w * x).sum() / sw
    ybar = (w * y).sum() / sw
    sxx = (w * (x - xbar) ** 2).sum()
    sxy = (w * (x - xbar) * (y - ybar)).sum()
    slope = sxy / sxx
    intercept = ybar - slope * xbar
    resid = y - intercept - slope * x
    ss_res = (w * resid ** 2).sum()
    ss_tot = (w * (y - ybar) ** 2).sum()
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    se = math.sqrt(ss_res / (len(x) - 2) / sxx) if len(x) > 2 else float("nan")
    return WLSFit(float(slope), float(intercept), float(r2), float(se))


@dataclass
class BinRecord:
    center: float
    coefficient: float
    count: int


@dataclass
class BinnedFit:
    bins: list[BinRecord]
    slope: float
    intercept: float
    r2: float
    slope_se: float
    context_feature: int
    target_feature: int
    skipped_observations: int

    def to_json(self):
        return {
            "context_feature": self.context_feature,
            "target_feature": self.target_feature,
            "slope": self.slope,
            "intercept": self.intercept,
            "r2": self.r2,
            "slope_se": self.slope_se,
            "skipped_observations": self.skipped_observations,
            "bins": [{"center": b.center, "coefficient": b.coefficient, "count": b.count} for b in self.bins],
        }

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_center", "coefficient", "count"])
            for b in self.bins:
                writer.writerow([b.center, b.coefficient, b.count])


def binned_mnl(data: ChoiceDataset, context_feature: int, target_feature: int, n_bins: int = 100,
               config: TrainConfig = TrainConfig(epochs=100), min_count: int = 50,
               binning: str = "width", weighting: str = "count") -> BinnedFit:
    """Fit a separate MNL in each bin of the choice-set mean of one feature and
    regress another feature's coefficient on the bin centers."""
    q, p = context_feature, target_feature
    if not (0 <= p < data.d and 0 <= q < data.d):
        raise IndexError("feature index out of range")
    if n_bins < 2:
        raise ValueError("need at least two bins")
    x = data.set_means[:, q]
    if binning == "width":
        edges = np.linspace(x.min(), x.max(), n_bins + 1)
    elif binning == "quantile":
        edges = np.quantile(x, np.linspace(0, 1, n_bins + 1))
    else:
        raise ValueError(f"unknown binning {binning!r}")
    idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, n_bins - 1)
    records = []
    skipped = 0
    for b in range(n_bins):
        members = np.flatnonzero(idx == b)
        if len(members) < min_count:
            skipped += len(members)
            continue
        try:
            fit = fit_mle(ModelKind.MNL, data.subset(members), replace(config, seed=config.seed + b))
        except TrainingError:
            skipped += len(members)
            continue
        records.append(BinRecord(float((edges[b] + edges[b + 1]) / 2), float(fit.params.theta[p]), len(members)))
    if len(records) < 2:
        raise ValueError(f"fewer than two bins have at least {min_count} observations")
    counts = np.array([r.count for r in records], dtype=float)
    weights = counts if weighting == "count" else np.sqrt(counts)
    wls = weighted_least_squares([r.center for r in records], [r.coefficient for r in records], weights)
    return BinnedFit(records, wls.slope, wls.intercept, wls.r2, wls.slope_se, q, p, skipped)
