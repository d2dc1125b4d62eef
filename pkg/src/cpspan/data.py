"""Incomplete multi-view data model, mask generation and CSV I/O.

A dataset is a list of per-view feature matrices plus a binary N x V
observation mask.  Rows of a view that are not observed may hold any value
(a sentinel); nothing downstream reads them.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .exceptions import (
    DimensionMismatchError,
    InvalidArgumentError,
    NonBinaryMaskError,
    ParseError,
    UnreadableFileError,
)

SENTINEL = 0.0


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MultiViewDataset:
    """Per-view features, observation mask, optional labels and cluster count."""

    views: tuple
    mask: np.ndarray
    labels: Optional[np.ndarray] = None
    n_clusters: Optional[int] = None

    def __post_init__(self):
        views = tuple(_frozen(np.asarray(x, dtype=np.float64)) for x in self.views)
        mask = np.asarray(self.mask)
        if len(views) < 1:
            raise InvalidArgumentError("dataset needs at least one view")
        for v, x in enumerate(views):
            if x.ndim != 2:
                raise InvalidArgumentError(f"view {v} must be 2-D, got shape {x.shape}")
        n = views[0].shape[0]
        if any(x.shape[0] != n for x in views):
            raise InvalidArgumentError(
                f"views disagree on row count: {[x.shape[0] for x in views]}")
        if mask.shape != (n, len(views)):
            raise InvalidArgumentError(
                f"mask shape {mask.shape} does not match ({n}, {len(views)})")
        if not np.isin(mask, (0, 1)).all():
            raise InvalidArgumentError("mask entries must be 0 or 1")
        mask = mask.astype(np.int8)
        empty = np.flatnonzero(mask.sum(axis=1) == 0)
        if empty.size:
            raise InvalidArgumentError(
                f"sample {int(empty[0])} is not observed in any view")
        labels = self.labels
        if labels is not None:
            labels = np.asarray(labels)
            if labels.shape != (n,):
                raise InvalidArgumentError(
                    f"labels shape {labels.shape} does not match ({n},)")
            labels = _frozen(labels.astype(np.int64))
        k = self.n_clusters
        if k is None and labels is not None:
            k = int(np.unique(labels).size)
        if k is not None and int(k) < 1:
            raise InvalidArgumentError("n_clusters must be positive")
        object.__setattr__(self, "views", views)
        object.__setattr__(self, "mask", _frozen(mask))
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "n_clusters", None if k is None else int(k))

    @property
    def n_samples(self) -> int:
        return self.views[0].shape[0]

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def dims(self) -> list:
        return [x.shape[1] for x in self.views]

    def observed(self, v: int) -> np.ndarray:
        """Sorted global indices of rows observed in view ``v``."""
        return np.flatnonzero(self.mask[:, v])

    def with_mask(self, mask: np.ndarray, sentinel: float = SENTINEL) -> "MultiViewDataset":
        """Copy with a new mask; newly unobserved rows are overwritten by ``sentinel``."""
        mask = np.asarray(mask)
        views = []
        for v, x in enumerate(self.views):
            x = np.array(x, copy=True)
            x[np.asarray(mask)[:, v] == 0] = sentinel
            views.append(x)
        return MultiViewDataset(views, mask, self.labels, self.n_clusters)

    def with_sentinel(self, sentinel: float) -> "MultiViewDataset":
        return self.with_mask(self.mask, sentinel)

    def equals(self, other: "MultiViewDataset") -> bool:
        if self.n_views != other.n_views or self.n_clusters != other.n_clusters:
            return False
        if not np.array_equal(self.mask, other.mask):
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        if self.labels is not None and not np.array_equal(self.labels, other.labels):
            return False
        return all(a.shape == b.shape and np.array_equal(a, b)
                   for a, b in zip(self.views, other.views))


@dataclass(frozen=True)
class PairObservedIndex:
    """Samples observed in both ``view_i`` and ``view_j``."""

    view_i: int
    view_j: int
    rows: np.ndarray = field(repr=False)

    @property
    def count(self) -> int:
        return int(self.rows.size)


@dataclass(frozen=True)
class MaskSpec:
    missing_rate: float
    seed: int = 0
    scheme: str = "uniform-cell"


def generate_mask(n: int, v: int, spec: MaskSpec) -> np.ndarray:
    """Random N x V observation mask with a given fraction of missing cells.

    Exactly ``round(missing_rate * n * v)`` cells are removed.  Cells are
    visited in a uniformly random order and a cell is dropped only if its
    row keeps at least one observed view, so no sample disappears.
    """
    rate = float(spec.missing_rate)
    if n < 1 or v < 2:
        raise InvalidArgumentError(f"need n >= 1 and v >= 2, got n={n}, v={v}")
    if spec.scheme != "uniform-cell":
        raise InvalidArgumentError(f"unknown missing scheme {spec.scheme!r}")
    if not 0.0 <= rate < (v - 1) / v:
        raise InvalidArgumentError(
            f"missing rate {rate} must lie in [0, {(v - 1) / v:.4g}) for {v} views")
    mask = np.ones((n, v), dtype=np.int8)
    n_remove = int(round(rate * n * v))
    if n_remove == 0:
        return mask
    rng = np.random.default_rng(spec.seed)
    observed_per_row = np.full(n, v)
    removed = 0
    for cell in rng.permutation(n * v):
        r, c = divmod(int(cell), v)
        if observed_per_row[r] > 1:
            mask[r, c] = 0
            observed_per_row[r] -= 1
            removed += 1
            if removed == n_remove:
                break
    return mask


def pair_observed(ds: MultiViewDataset, i: int, j: int) -> PairObservedIndex:
    if i == j or not (0 <= i < ds.n_views and 0 <= j < ds.n_views):
        raise InvalidArgumentError(f"invalid view pair ({i}, {j})")
    rows = np.flatnonzero((ds.mask[:, i] == 1) & (ds.mask[:, j] == 1))
    return PairObservedIndex(i, j, rows)


def all_pairs(ds: MultiViewDataset) -> dict:
    """``{(i, j): PairObservedIndex}`` for every i < j."""
    return {(i, j): pair_observed(ds, i, j)
            for i in range(ds.n_views) for j in range(i + 1, ds.n_views)}


def resample_complete(ds: MultiViewDataset, v: int, seed) -> np.ndarray:
    """Row index that completes view ``v`` by sampling observed rows.

    Observed rows map to themselves; each missing row maps to an observed row
    drawn uniformly with replacement.
    """
    observed = ds.observed(v)
    if observed.size == 0:
        raise InvalidArgumentError(f"view {v} has no observed rows")
    index = np.arange(ds.n_samples)
    missing = np.flatnonzero(ds.mask[:, v] == 0)
    if missing.size:
        rng = np.random.default_rng(seed)
        index[missing] = observed[rng.integers(0, observed.size, size=missing.size)]
    return index


def synth_gaussian(n: int, v: int, k: int, dims: Sequence[int], separation: float,
                   seed: int) -> MultiViewDataset:
    """Gaussian clusters, independent per view, with balanced labels.

    Each cluster mean in each view lies on a sphere of radius ``separation``;
    samples add unit-variance isotropic noise.  The mask is all ones.
    """
    dims = list(dims)
    if not n >= k >= 2:
        raise InvalidArgumentError(f"need n >= k >= 2, got n={n}, k={k}")
    if len(dims) != v or any(d < 2 for d in dims):
        raise InvalidArgumentError(f"need {v} dims, each >= 2, got {dims}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % k)
    views = []
    for d in dims:
        directions = rng.standard_normal((k, d))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        means = separation * directions
        views.append(means[labels] + rng.standard_normal((n, d)))
    return MultiViewDataset(views, np.ones((n, v), dtype=np.int8), labels, k)


# --------------------------------------------------------------------------
# CSV

def _read_rows(path):
    try:
        with open(path, newline="") as fh:
            return [row for row in csv.reader(fh)]
    except OSError as exc:
        raise UnreadableFileError(f"cannot read file ({exc.strerror})", path) from exc
    except (UnicodeDecodeError, csv.Error) as exc:
        raise UnreadableFileError(f"cannot parse file ({exc})", path) from exc


def _read_matrix(path) -> np.ndarray:
    rows = _read_rows(path)
    if not rows:
        raise DimensionMismatchError("file is empty", path)
    width = len(rows[0])
    out = np.empty((len(rows), width))
    for r, row in enumerate(rows, start=1):
        if len(row) != width:
            raise DimensionMismatchError(
                f"expected {width} columns, found {len(row)}", path, r)
        try:
            out[r - 1] = [float(x) for x in row]
        except ValueError as exc:
            raise ParseError(f"non-numeric entry ({exc})", path, r) from exc
    return out


def _read_mask(path) -> np.ndarray:
    rows = _read_rows(path)
    if not rows:
        raise DimensionMismatchError("file is empty", path)
    width = len(rows[0])
    out = np.empty((len(rows), width), dtype=np.int8)
    for r, row in enumerate(rows, start=1):
        if len(row) != width:
            raise DimensionMismatchError(
                f"expected {width} columns, found {len(row)}", path, r)
        for c, cell in enumerate(row):
            cell = cell.strip()
            if cell not in ("0", "1"):
                raise NonBinaryMaskError(
                    f"mask entry {cell!r} in column {c + 1} is not 0 or 1", path, r)
            out[r - 1, c] = int(cell)
    return out


def _read_labels(path) -> np.ndarray:
    try:
        with open(path) as fh:
            lines = [ln.strip() for ln in fh]
    except OSError as exc:
        raise UnreadableFileError(f"cannot read file ({exc.strerror})", path) from exc
    while lines and lines[-1] == "":
        lines.pop()
    out = np.empty(len(lines), dtype=np.int64)
    for r, line in enumerate(lines, start=1):
        try:
            out[r - 1] = int(line)
        except ValueError as exc:
            raise ParseError(f"label {line!r} is not an integer", path, r) from exc
    return out


def load_csv(view_paths: Sequence, mask_path, labels_path=None,
             n_clusters: Optional[int] = None) -> MultiViewDataset:
    """Read a dataset from headerless comma-separated files.

    One file per view (row = sample), a 0/1 mask file with one column per
    view, and optionally a labels file holding one integer per line.
    """
    views = [_read_matrix(p) for p in view_paths]
    n = views[0].shape[0]
    for p, x in zip(view_paths, views):
        if x.shape[0] != n:
            raise DimensionMismatchError(
                f"has {x.shape[0]} rows but {view_paths[0]} has {n}", p)
    mask = _read_mask(mask_path)
    if mask.shape[0] != n:
        raise DimensionMismatchError(
            f"has {mask.shape[0]} rows but the views have {n}", mask_path)
    if mask.shape[1] != len(views):
        raise DimensionMismatchError(
            f"has {mask.shape[1]} columns but {len(views)} views were given", mask_path)
    empty = np.flatnonzero(mask.sum(axis=1) == 0)
    if empty.size:
        raise ParseError("sample observed in no view", mask_path, int(empty[0]) + 1)
    labels = None
    if labels_path is not None:
        labels = _read_labels(labels_path)
        if labels.shape[0] != n:
            raise DimensionMismatchError(
                f"has {labels.shape[0]} labels but the views have {n} rows", labels_path)
    return MultiViewDataset(views, mask, labels, n_clusters)


def write_matrix(path, x: np.ndarray) -> None:
    # %.17g round-trips every float64
    np.savetxt(path, np.asarray(x, dtype=np.float64), delimiter=",", fmt="%.17g")


def save_csv(ds: MultiViewDataset, directory) -> dict:
    """Write ``view_<v>.csv``, ``mask.csv`` and (if present) ``labels.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {"views": []}
    for v, x in enumerate(ds.views):
        p = directory / f"view_{v}.csv"
        write_matrix(p, x)
        paths["views"].append(p)
    paths["mask"] = directory / "mask.csv"
    np.savetxt(paths["mask"], ds.mask, delimiter=",", fmt="%d")
    paths["labels"] = None
    if ds.labels is not None:
        paths["labels"] = directory / "labels.csv"
        np.savetxt(paths["labels"], ds.labels, fmt="%d")
    return paths


def load_csv_dir(directory, n_clusters: Optional[int] = None) -> MultiViewDataset:
    """Inverse of :func:`save_csv`."""
    directory = Path(directory)
    views = []
    v = 0
    while (directory / f"view_{v}.csv").exists():
        views.append(directory / f"view_{v}.csv")
        v += 1
    if not views:
        raise UnreadableFileError("no view_<v>.csv files found", directory)
    labels = directory / "labels.csv"
    return load_csv(views, directory / "mask.csv",
                    labels if os.path.exists(labels) else None, n_clusters)
