"""LCL identifiability checks.

An LCL is identifiable from a dataset exactly when the rows
``[x_C; 1] kron (x_i - x_C)``, one per item of every distinct choice set,
span all ``d*d + d`` dimensions.  A weaker necessary condition is that the
choice-set means contain ``d + 1`` affinely independent vectors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import ChoiceDataset

logger = logging.getLogger(__name__)

MAX_ROWS = 1_000_000


def context_row(x_C, x_i) -> np.ndarray:
    x_C = np.asarray(x_C, dtype=float)
    x_i = np.asarray(x_i, dtype=float)
    if x_C.shape != x_i.shape or x_C.ndim != 1:
        raise ValueError("x_C and x_i must be vectors of the same length")
    return np.kron(np.append(x_C, 1.0), x_i - x_C)


def numerical_rank(matrix: np.ndarray) -> tuple[int, float]:
    """SVD rank with tolerance ``max(shape) * eps * sigma_max``; returns ``(rank, tol)``."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if matrix.size == 0:
        return 0, 0.0
    s = np.linalg.svd(matrix, compute_uv=False)
    tol = max(matrix.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    return int((s > tol).sum()), float(tol)


def affinely_independent_count(vectors) -> int:
    """Size of the largest affinely independent subset (rank of the lifted ``[x; 1]``)."""
    arr = np.asarray(vectors, dtype=float)
    if arr.ndim != 2 or len(arr) == 0:
        raise ValueError("need a non-empty list of equal-length vectors")
    lifted = np.hstack([arr, np.ones((len(arr), 1))])
    return numerical_rank(np.unique(lifted, axis=0))[0]


def unique_choice_sets(data: ChoiceDataset, decimals: int | None = None) -> list[int]:
    """Indices of one representative observation per distinct choice set.

    Sets are compared as multisets of feature vectors; exactly by default,
    or after rounding to ``decimals`` places for noisy data.
    """
    seen = {}
    for h in range(data.n):
        items = data.features[h, : data.sizes[h]]
        if decimals is not None:
            items = np.round(items, decimals) + 0.0
        order = np.lexsort(items.T[::-1])
        key = (items.shape, items[order].tobytes())
        seen.setdefault(key, h)
    return sorted(seen.values())


@dataclass
class IdentifiabilityReport:
    d: int
    span_dim: int
    required: int
    identifiable: bool
    affine_count: int
    affine_required: int
    necessary_ok: bool
    rank_tolerance: float
    unique_sets: int
    rows: int
    subsampled: bool = False

    def to_json(self) -> dict:
        return {
            "span": f"{self.span_dim}/{self.required}",
            "affine": f"{self.affine_count}/{self.affine_required}",
            "identifiable": self.identifiable,
            "necessary_ok": self.necessary_ok,
            "d": self.d,
            "span_dim": self.span_dim,
            "required": self.required,
            "affine_count": self.affine_count,
            "affine_required": self.affine_required,
            "rank_tolerance": self.rank_tolerance,
            "unique_choice_sets": self.unique_sets,
            "rows": self.rows,
            "subsampled": self.subsampled,
        }


def lcl_identifiable(data: ChoiceDataset, decimals: int | None = None, max_rows: int = MAX_ROWS,
                     seed: int = 0) -> IdentifiabilityReport:
    reps = unique_choice_sets(data, decimals)
    sub = data.subset(reps)
    d = data.d
    means = sub.set_means
    diffs = sub.features - means[:, None, :]
    lifted = np.hstack([means, np.ones((sub.n, 1))])
    # row for (h, j): kron(lifted[h], diffs[h, j])
    rows = (lifted[:, None, :, None] * diffs[:, :, None, :]).reshape(sub.n, sub.features.shape[1], -1)
    rows = rows[sub.mask]
    subsampled = False
    if len(rows) > max_rows:
        keep = np.sort(np.random.default_rng(seed).choice(len(rows), max_rows, replace=False))
        rows = rows[keep]
        subsampled = True
        logger.warning("identifiability rows subsampled to %d; a deficient verdict may be pessimistic", max_rows)
    span_dim, tol = numerical_rank(rows)
    affine = affinely_independent_count(means)
    required = d * d + d
    report = IdentifiabilityReport(d, span_dim, required, span_dim == required, affine, d + 1,
                                   affine >= d + 1, tol, sub.n, len(rows), subsampled)
    if report.identifiable and not report.necessary_ok:
        raise AssertionError("full span without affinely independent means; rank computation is inconsistent")
    return report
