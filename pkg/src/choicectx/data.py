"""Choice datasets, JSONL I/O, feature standardization and splitting.

Choice sets have varying sizes, so a dataset stores its items in a
zero-padded ``(n, max_size, d)`` array together with the true size of every
set.  All model code works on this layout directly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_FRACTIONS = (0.6, 0.2, 0.2)


class DatasetError(ValueError):
    """Raised for malformed choice data."""


class Observation(NamedTuple):
    choice_set: np.ndarray  # (k, d)
    chosen: int


@dataclass(frozen=True, eq=False)
class ChoiceDataset:
    """An immutable collection of ``(choice set, chosen item)`` observations.

    ``features[h, j]`` is the feature vector of item ``j`` in observation
    ``h``; rows with ``j >= sizes[h]`` are zero padding.
    """

    features: np.ndarray
    sizes: np.ndarray
    chosen: np.ndarray
    feature_names: tuple[str, ...] | None = None

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float)
        sizes = np.asarray(self.sizes, dtype=np.int64)
        chosen = np.asarray(self.chosen, dtype=np.int64)
        if features.ndim != 3:
            raise DatasetError("features must have shape (n, max_size, d)")
        n = features.shape[0]
        if n == 0:
            raise DatasetError("dataset is empty")
        if sizes.shape != (n,) or chosen.shape != (n,):
            raise DatasetError("sizes and chosen must have one entry per observation")
        if np.any(sizes < 1) or np.any(sizes > features.shape[1]):
            raise DatasetError("choice set sizes out of range")
        if np.any(chosen < 0) or np.any(chosen >= sizes):
            raise DatasetError("chosen index out of range")
        if not np.all(np.isfinite(features)):
            raise DatasetError("features must be finite")
        if self.feature_names is not None and len(self.feature_names) != features.shape[2]:
            raise DatasetError("feature_names length does not match d")
        features = features * self._mask_of(sizes, features.shape[1])[:, :, None]
        features.setflags(write=False)
        sizes.setflags(write=False)
        chosen.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "chosen", chosen)
        if self.feature_names is not None:
            object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @classmethod
    def _trusted(cls, features, sizes, chosen, feature_names=None) -> ChoiceDataset:
        """Build without validation; for slices of an already-validated dataset."""
        obj = object.__new__(cls)
        object.__setattr__(obj, "features", features)
        object.__setattr__(obj, "sizes", sizes)
        object.__setattr__(obj, "chosen", chosen)
        object.__setattr__(obj, "feature_names", feature_names)
        return obj

    @staticmethod
    def _mask_of(sizes, width):
        return np.arange(width)[None, :] < sizes[:, None]

    @classmethod
    def from_observations(
        cls,
        observations: Iterable[tuple[Sequence[Sequence[float]], int]],
        feature_names: Sequence[str] | None = None,
        d: int | None = None,
    ) -> ChoiceDataset:
        sets = []
        chosen = []
        for choice_set, idx in observations:
            arr = np.asarray(choice_set, dtype=float)
            if arr.ndim != 2:
                raise DatasetError("each choice set must be a 2-d array of item features")
            sets.append(arr)
            chosen.append(int(idx))
        if not sets:
            raise DatasetError("dataset is empty")
        dims = {s.shape[1] for s in sets}
        if len(dims) != 1:
            raise DatasetError(f"inconsistent feature dimensions {sorted(dims)}")
        d = dims.pop()
        width = max(len(s) for s in sets)
        features = np.zeros((len(sets), width, d))
        for h, s in enumerate(sets):
            features[h, : len(s)] = s
        return cls(features, np.array([len(s) for s in sets]), np.array(chosen),
                   None if feature_names is None else tuple(feature_names))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[2]

    def __len__(self) -> int:
        return self.n

    @cached_property
    def mask(self) -> np.ndarray:
        """Boolean ``(n, max_size)`` array marking real items."""
        return self._mask_of(self.sizes, self.features.shape[1])

    @cached_property
    def set_means(self) -> np.ndarray:
        """Mean feature vector of every choice set, shape ``(n, d)``."""
        return self.features.sum(axis=1) / self.sizes[:, None]

    @cached_property
    def chosen_features(self) -> np.ndarray:
        return self.features[np.arange(self.n), self.chosen]

    def observation(self, h: int) -> Observation:
        return Observation(self.features[h, : self.sizes[h]], int(self.chosen[h]))

    @property
    def observations(self) -> Iterator[Observation]:
        for h in range(self.n):
            yield self.observation(h)

    def subset(self, indices) -> ChoiceDataset:
        idx = np.asarray(indices, dtype=np.int64)
        sizes = self.sizes[idx]
        width = int(sizes.max()) if len(idx) else 1
        return ChoiceDataset(self.features[idx, :width], sizes, self.chosen[idx], self.feature_names)

    def with_features(self, features: np.ndarray) -> ChoiceDataset:
        return ChoiceDataset(features, self.sizes, self.chosen, self.feature_names)

    def equals(self, other: ChoiceDataset) -> bool:
        if self.n != other.n or self.d != other.d or self.feature_names != other.feature_names:
            return False
        if not (np.array_equal(self.sizes, other.sizes) and np.array_equal(self.chosen, other.chosen)):
            return False
        w = min(self.features.shape[1], other.features.shape[1])
        if self.features.shape[1] != other.features.shape[1] and int(self.sizes.max()) > w:
            return False
        return np.array_equal(self.features[:, :w], other.features[:, :w])


def mean_feature_vector(choice_set) -> np.ndarray:
    """Componentwise mean of the items in one choice set."""
    arr = np.asarray(choice_set, dtype=float)
    if arr.ndim != 2 or len(arr) == 0:
        raise DatasetError("mean of an empty choice set")
    return arr.mean(axis=0)


# --------------------------------------------------------------------------
# JSONL


def load_dataset(path, format: str = "jsonl") -> ChoiceDataset:
    """Read a JSONL choice file.

    Singleton choice sets carry no information and are dropped with a
    warning; :func:`read_dataset` also returns how many were dropped.
    """
    return read_dataset(path, format)[0]


def read_dataset(path, format: str = "jsonl") -> tuple[ChoiceDataset, int]:
    if format != "jsonl":
        raise DatasetError(f"unsupported dataset format {format!r}")
    feature_names = None
    observations = []
    dropped = 0
    d = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if lineno == 1 and isinstance(rec, dict) and "feature_names" in rec and "choice_set" not in rec:
                feature_names = [str(x) for x in rec["feature_names"]]
                continue
            if not isinstance(rec, dict) or "choice_set" not in rec or "chosen" not in rec:
                raise DatasetError(f"line {lineno}: expected keys 'choice_set' and 'chosen'")
            try:
                items = np.asarray(rec["choice_set"], dtype=float)
            except (TypeError, ValueError):
                raise DatasetError(f"line {lineno}: choice_set is not a numeric matrix") from None
            if items.ndim != 2 or len(items) == 0:
                raise DatasetError(f"line {lineno}: choice_set must be a non-empty list of vectors")
            if d is None:
                d = items.shape[1]
            elif items.shape[1] != d:
                raise DatasetError(
                    f"line {lineno}: feature dimension {items.shape[1]} does not match {d}")
            chosen = rec["chosen"]
            if not isinstance(chosen, int) or isinstance(chosen, bool) or not 0 <= chosen < len(items):
                raise DatasetError(f"line {lineno}: chosen index {chosen!r} out of range")
            if not np.all(np.isfinite(items)):
                raise DatasetError(f"line {lineno}: non-finite feature value")
            if len(items) < 2:
                dropped += 1
                continue
            observations.append((items, chosen))
    if dropped:
        logger.warning("dropped %d singleton choice set(s) from %s", dropped, path)
    if feature_names is not None and d is not None and len(feature_names) != d:
        raise DatasetError("header feature_names length does not match feature dimension")
    if not observations:
        raise DatasetError(f"{path}: no usable observations")
    return ChoiceDataset.from_observations(observations, feature_names), dropped


def write_dataset(dataset: ChoiceDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if dataset.feature_names is not None:
            fh.write(json.dumps({"feature_names": list(dataset.feature_names)}) + "\n")
        for obs in dataset.observations:
            fh.write(json.dumps({"choice_set": obs.choice_set.tolist(), "chosen": obs.chosen}) + "\n")


# --------------------------------------------------------------------------
# Standardization


@dataclass(frozen=True)
class Standardizer:
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        stds = np.asarray(self.stds, dtype=float)
        if means.shape != stds.shape or means.ndim != 1:
            raise DatasetError("means and stds must be vectors of equal length")
        if np.any(stds <= 0):
            raise DatasetError("stds must be strictly positive")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", stds)

    @property
    def d(self) -> int:
        return len(self.means)

    def transform(self, x):
        return (np.asarray(x, dtype=float) - self.means) / self.stds

    def inverse(self, z):
        return np.asarray(z, dtype=float) * self.stds + self.means

    def to_json(self) -> dict:
        return {"means": self.means.tolist(), "stds": self.stds.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> Standardizer:
        return cls(np.array(obj["means"]), np.array(obj["stds"]))


def fit_standardizer(dataset: ChoiceDataset) -> Standardizer:
    """Per-feature mean and population std over every item occurrence.

    Constant features get std 1 so they map to 0 instead of dividing by zero.
    """
    items = dataset.features[dataset.mask]
    if len(items) == 0:
        raise DatasetError("cannot standardize an empty dataset")
    means = items.mean(axis=0)
    stds = items.std(axis=0)
    stds = np.where(stds > 0, stds, 1.0)
    return Standardizer(means, stds)


def apply_standardizer(standardizer: Standardizer, dataset: ChoiceDataset) -> ChoiceDataset:
    if standardizer.d != dataset.d:
        raise DatasetError(f"standardizer has d={standardizer.d}, dataset has d={dataset.d}")
    return dataset.with_features(standardizer.transform(dataset.features))


# --------------------------------------------------------------------------
# Splitting


@dataclass(frozen=True)
class DatasetSplit:
    train: ChoiceDataset
    validation: ChoiceDataset
    test: ChoiceDataset
    mode: str
    fractions: tuple[float, float, float]
    seed: int
    indices: tuple[np.ndarray, np.ndarray, np.ndarray]

    def manifest(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "fractions": list(self.fractions),
            "train": self.indices[0].tolist(),
            "validation": self.indices[1].tolist(),
            "test": self.indices[2].tolist(),
        }


def split_indices(n: int, mode: str = "random", fractions=DEFAULT_FRACTIONS, seed: int = 0):
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"split fractions must be three positive numbers summing to 1, got {fractions}")
    if mode == "random":
        order = np.random.default_rng(seed).permutation(n)
    elif mode == "temporal":
        order = np.arange(n)
    else:
        raise DatasetError(f"unknown split mode {mode!r}")
    n_train = int(np.floor(n * fractions[0]))
    n_val = int(np.floor(n * fractions[1]))
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:], fractions


def split_dataset(dataset: ChoiceDataset, mode: str = "random", fractions=DEFAULT_FRACTIONS,
                  seed: int = 0) -> DatasetSplit:
    """Partition into train/validation/test; the remainder after flooring goes to test."""
    train, val, test, fractions = split_indices(dataset.n, mode, fractions, seed)
    for name, part in (("train", train), ("validation", val), ("test", test)):
        if len(part) == 0:
            raise DatasetError(f"{name} split is empty for n={dataset.n}")
    return DatasetSplit(dataset.subset(train), dataset.subset(val), dataset.subset(test),
                        mode, fractions, seed, (train, val, test))


def save_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
