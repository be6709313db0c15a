"""Datasets with a group attribute: CSV ingestion, synthetic generation,
train/validation/test partitioning and minibatch samplers."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from subpopdro.errors import ConfigError, DataError

N_FOLDS = 5
TRAIN_FRACTION = 0.625
VAL_FRACTION = 0.125


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    group_names: tuple[str, ...]
    feature_names: tuple[str, ...]

    def __post_init__(self):
        X = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels).astype(np.int64)
        g = np.asarray(self.groups).astype(np.int64)
        if X.ndim != 2:
            raise DataError(f"features must be 2-d, got shape {X.shape}")
        n = X.shape[0]
        if n < 1 or y.shape != (n,) or g.shape != (n,):
            raise DataError("features, labels and groups must share a length N >= 1")
        if X.shape[1] != len(self.feature_names):
            raise DataError("feature_names does not match the feature column count")
        if not np.all(np.isfinite(X)):
            raise DataError("features contain non-finite values")
        if not np.all((y == 0) | (y == 1)):
            raise DataError("labels must be 0 or 1")
        k = len(self.group_names)
        if g.min() < 0 or g.max() >= k:
            raise DataError(f"group indices must lie in [0, {k})")
        missing = np.flatnonzero(np.bincount(g, minlength=k) == 0)
        if missing.size:
            raise DataError(f"groups with no rows: {[self.group_names[i] for i in missing]}")
        for name, arr in (("features", X), ("labels", y), ("groups", g)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "group_names", tuple(self.group_names))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def m(self) -> int:
        return self.features.shape[1]

    @property
    def k(self) -> int:
        return len(self.group_names)

    def group_counts(self, indices=None) -> np.ndarray:
        g = self.groups if indices is None else self.groups[np.asarray(indices)]
        return np.bincount(g, minlength=self.k)

    def with_features(self, features: np.ndarray) -> "Dataset":
        return Dataset(features, self.labels, self.groups, self.group_names, self.feature_names)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.group_names == other.group_names
            and self.feature_names == other.feature_names
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.groups, other.groups)
        )


def load_csv(path, label_col: str, group_col: str) -> Dataset:
    """Read a CSV with one label column, one group column and numeric features.

    Feature columns keep header order; group names are sorted
    lexicographically and indexed from zero.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = list(reader)
    header = [h.strip() for h in header]
    for col in (label_col, group_col):
        if col not in header:
            raise ConfigError(f"{path}: missing column {col!r}")
    li, gi = header.index(label_col), header.index(group_col)
    feat_cols = [j for j in range(len(header)) if j not in (li, gi)]
    if not rows:
        raise DataError(f"{path}: no data rows")

    X = np.empty((len(rows), len(feat_cols)))
    y = np.empty(len(rows), dtype=np.int64)
    raw_groups = []
    for r, row in enumerate(rows):
        line = r + 2  # 1-based, after the header
        if len(row) != len(header):
            raise DataError(f"{path}: row {line} has {len(row)} fields, expected {len(header)}")
        label = row[li].strip()
        if label not in ("0", "1", "0.0", "1.0"):
            raise DataError(f"{path}: row {line}, column {label_col!r}: label {label!r} is not 0/1")
        y[r] = int(float(label))
        raw_groups.append(row[gi].strip())
        for c, j in enumerate(feat_cols):
            try:
                v = float(row[j])
            except ValueError:
                raise DataError(
                    f"{path}: row {line}, column {header[j]!r}: non-numeric value {row[j]!r}"
                ) from None
            if not math.isfinite(v):
                raise DataError(f"{path}: row {line}, column {header[j]!r}: non-finite value")
            X[r, c] = v

    names = sorted(set(raw_groups))
    lookup = {name: i for i, name in enumerate(names)}
    g = np.array([lookup[s] for s in raw_groups], dtype=np.int64)
    return Dataset(X, y, g, tuple(names), tuple(header[j] for j in feat_cols))


def write_csv(ds: Dataset, path, label_col: str = "label", group_col: str = "group") -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([*ds.feature_names, label_col, group_col])
        for x, y, g in zip(ds.features, ds.labels, ds.groups):
            w.writerow([*(repr(float(v)) for v in x), int(y), ds.group_names[g]])


@dataclass
class SyntheticSpec:
    """Group-conditional Gaussian features with a per-group logistic outcome model."""

    group_proportions: Sequence[float]
    means: Sequence[Sequence[float]]
    coefs: Sequence[Sequence[float]]
    intercepts: Sequence[float]
    n: int
    seed: int = 0
    cov_scale: float = 1.0
    group_names: Sequence[str] | None = None

    def __post_init__(self):
        p = np.asarray(self.group_proportions, dtype=float)
        if p.ndim != 1 or p.size < 1:
            raise ConfigError("group_proportions must be a non-empty vector")
        if abs(p.sum() - 1.0) > 1e-12 or np.any(p <= 0):
            raise ConfigError("group_proportions must be positive and sum to 1")
        k = p.size
        means = np.asarray(self.means, dtype=float)
        coefs = np.asarray(self.coefs, dtype=float)
        if means.ndim != 2 or means.shape[0] != k or coefs.shape != means.shape:
            raise ConfigError("means and coefs must both be K x m")
        if len(self.intercepts) != k:
            raise ConfigError("intercepts must have length K")
        if self.n < 1 or self.cov_scale <= 0:
            raise ConfigError("n must be >= 1 and cov_scale > 0")
        if self.group_names is not None and len(self.group_names) != k:
            raise ConfigError("group_names must have length K")

    @property
    def k(self) -> int:
        return len(self.group_proportions)

    def names(self) -> tuple[str, ...]:
        if self.group_names is not None:
            return tuple(self.group_names)
        return tuple(f"g{i}" for i in range(self.k))

    def to_dict(self) -> dict:
        return {
            "group_proportions": [float(v) for v in self.group_proportions],
            "means": [[float(v) for v in row] for row in self.means],
            "coefs": [[float(v) for v in row] for row in self.coefs],
            "intercepts": [float(v) for v in self.intercepts],
            "n": int(self.n),
            "seed": int(self.seed),
            "cov_scale": float(self.cov_scale),
            "group_names": list(self.names()),
        }


def true_probabilities(spec: SyntheticSpec, X: np.ndarray, groups: np.ndarray) -> np.ndarray:
    coefs = np.asarray(spec.coefs, dtype=float)
    b = np.asarray(spec.intercepts, dtype=float)
    return expit(np.einsum("ij,ij->i", X, coefs[groups]) + b[groups])


def synthesize(spec: SyntheticSpec) -> Dataset:
    p = np.asarray(spec.group_proportions, dtype=float)
    p = p / p.sum()
    for attempt in range(100):
        rng = np.random.default_rng([spec.seed, attempt])
        g = rng.choice(spec.k, size=spec.n, p=p)
        if np.all(np.bincount(g, minlength=spec.k) > 0):
            break
    else:
        raise DataError("some group received zero draws after 100 attempts; increase n")
    means = np.asarray(spec.means, dtype=float)
    X = means[g] + spec.cov_scale * rng.standard_normal((spec.n, means.shape[1]))
    y = (rng.random(spec.n) < true_probabilities(spec, X, g)).astype(np.int64)
    names = tuple(f"x{j}" for j in range(means.shape[1]))
    return Dataset(X, y, g, spec.names(), names)


@dataclass(frozen=True)
class Partition:
    train_idx: tuple[int, ...]
    val_idx: tuple[int, ...]
    test_idx: tuple[int, ...]
    folds: tuple[tuple[int, ...], ...]
    seed: int

    def fold_split(self, fold_id: int) -> tuple[np.ndarray, np.ndarray]:
        """Return (training pool, development set) for a fold."""
        if not 0 <= fold_id < len(self.folds):
            raise ConfigError(f"fold_id must be in [0, {len(self.folds)})")
        pool = [i for f, fold in enumerate(self.folds) if f != fold_id for i in fold]
        return np.sort(np.array(pool, dtype=np.int64)), np.array(self.folds[fold_id], dtype=np.int64)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "train_idx": list(self.train_idx),
            "val_idx": list(self.val_idx),
            "test_idx": list(self.test_idx),
            "folds": [list(f) for f in self.folds],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Partition":
        return cls(
            tuple(d["train_idx"]),
            tuple(d["val_idx"]),
            tuple(d["test_idx"]),
            tuple(tuple(f) for f in d["folds"]),
            int(d["seed"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Partition":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = _round_half_up(TRAIN_FRACTION * n)
    n_val = _round_half_up(VAL_FRACTION * n)
    return n_train, n_val, n - n_train - n_val


def partition(ds_or_n, seed: int) -> Partition:
    n = ds_or_n if isinstance(ds_or_n, int) else ds_or_n.n
    if n < 16:
        raise ConfigError(f"partition needs N >= 16, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train, n_val, _ = split_sizes(n)
    train = perm[:n_train]
    folds = tuple(tuple(int(i) for i in train[f::N_FOLDS]) for f in range(N_FOLDS))
    return Partition(
        tuple(int(i) for i in train),
        tuple(int(i) for i in perm[n_train : n_train + n_val]),
        tuple(int(i) for i in perm[n_train + n_val :]),
        folds,
        int(seed),
    )


def standardize(ds: Dataset, train_idx) -> Dataset:
    """Z-score features with statistics from the training rows only."""
    Xt = ds.features[np.asarray(train_idx)]
    mu = Xt.mean(axis=0)
    sd = Xt.std(axis=0)
    sd[sd == 0] = 1.0
    return ds.with_features((ds.features - mu) / sd)


class BalancedSampler:
    """Equal per-group minibatch composition over a fixed index pool."""

    def __init__(self, ds: Dataset, indices):
        indices = np.asarray(indices, dtype=np.int64)
        g = ds.groups[indices]
        self.k = ds.k
        self.pools = [indices[g == j] for j in range(ds.k)]
        for j, pool in enumerate(self.pools):
            if pool.size == 0:
                raise DataError(f"group {ds.group_names[j]!r} has no members in the sampling pool")

    def sample(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if batch_size < self.k:
            raise ConfigError(f"balanced batches need batch_size >= K={self.k}")
        counts = np.full(self.k, batch_size // self.k)
        extra = batch_size % self.k
        if extra:
            counts[rng.choice(self.k, size=extra, replace=False)] += 1
        return np.concatenate(
            [pool[rng.integers(pool.size, size=c)] for pool, c in zip(self.pools, counts)]
        )


def minibatch_standard(ds: Dataset, indices, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise DataError("cannot sample from an empty index pool")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    return indices[rng.integers(indices.size, size=batch_size)]


def minibatch_balanced(ds: Dataset, indices, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    return BalancedSampler(ds, indices).sample(batch_size, rng)
