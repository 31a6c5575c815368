"""First-order intensity features and diverse initial-dataset selection.

Features (mean, median, entropy, energy) are computed over the voxels where
a mask is active, z-scored per column across the dataset, and the initial
training set is built by greedy farthest-point selection: each new pick
maximizes its minimum Euclidean distance to the already-selected set.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .selection import SelectionResult, SelectionStrategy, _check_seed, _seed_pick
from .volume import SegmentationMask, VoxelGrid

DEFAULT_BINS = 32
FEATURE_COLUMNS = ("mean", "median", "entropy", "energy")


@dataclass(frozen=True)
class FirstOrderFeatures:
    item_id: str
    mean: float
    median: float
    entropy: float  # bits
    energy: float  # sum of squared intensities

    def __post_init__(self):
        if self.entropy < 0.0:
            raise ValueError("entropy must be non-negative")
        if self.energy < 0.0:
            raise ValueError("energy must be non-negative")

    def as_row(self) -> np.ndarray:
        return np.array([self.mean, self.median, self.entropy, self.energy])


def extract_first_order(
    volume: VoxelGrid,
    mask: SegmentationMask,
    bins: int = DEFAULT_BINS,
    item_id: str = "",
) -> FirstOrderFeatures:
    """First-order features over the masked voxels.

    Entropy uses a fixed-bin-count histogram spanning [min, max] of the
    masked values (0 * log 0 := 0); a constant region has entropy 0. The
    even-count median is the mean of the two central values.
    """
    if volume.dims != mask.dims:
        raise ValueError(f"dims mismatch: volume {volume.dims} vs mask {mask.dims}")
    if bins < 1:
        raise ValueError("bins must be positive")
    active = mask.as_bool()
    if not active.any():
        raise ValueError("mask has no active voxels")
    vals = volume.values[active]
    mean = float(np.mean(vals))
    median = float(np.median(vals))
    energy = float(np.dot(vals, vals))
    vmin, vmax = float(vals.min()), float(vals.max())
    if vmin == vmax:
        entropy = 0.0
    else:
        counts, _ = np.histogram(vals, bins=bins, range=(vmin, vmax))
        p = counts[counts > 0] / vals.size
        entropy = -math.fsum(pi * math.log2(pi) for pi in p)
        entropy = max(0.0, entropy)
    return FirstOrderFeatures(item_id, mean, median, entropy, energy)


def zscore_columns(matrix: np.ndarray) -> np.ndarray:
    """Per-column z-score with population std; zero-variance columns -> 0."""
    matrix = np.asarray(matrix, dtype=np.float64)
    mu = matrix.mean(axis=0)
    sd = matrix.std(axis=0)
    out = np.zeros_like(matrix)
    nz = sd > 0.0
    out[:, nz] = (matrix[:, nz] - mu[nz]) / sd[nz]
    return out


class NormalizedFeatureMatrix:
    """Per-item feature rows, z-scored per column across all items."""

    __slots__ = ("item_ids", "_rows")

    def __init__(self, item_ids: Sequence[str], rows):
        rows = np.array(rows, dtype=np.float64, copy=True)
        if rows.ndim != 2 or rows.shape[0] != len(item_ids):
            raise ValueError("rows must be a 2D array with one row per item id")
        if len(set(item_ids)) != len(item_ids):
            raise ValueError("duplicate item ids")
        col_mean = rows.mean(axis=0)
        if np.abs(col_mean).max() >= 1e-9:
            raise ValueError("columns must have zero mean")
        sd = rows.std(axis=0)
        live = np.abs(rows).max(axis=0) > 0.0
        if live.any() and np.abs(sd[live] - 1.0).max() >= 1e-9:
            raise ValueError("non-degenerate columns must have unit standard deviation")
        rows.setflags(write=False)
        self.item_ids = tuple(item_ids)
        self._rows = rows

    @property
    def rows(self) -> np.ndarray:
        return self._rows

    def __len__(self) -> int:
        return len(self.item_ids)


def normalize_features(raw: Sequence[FirstOrderFeatures]) -> NormalizedFeatureMatrix:
    """Z-score each feature column across all items (population std)."""
    if len(raw) < 2:
        raise ValueError(f"need at least 2 items to normalize, got {len(raw)}")
    ids = [f.item_id for f in raw]
    matrix = np.stack([f.as_row() for f in raw])
    return NormalizedFeatureMatrix(ids, zscore_columns(matrix))


def select_diverse_initial(
    matrix: NormalizedFeatureMatrix, n: int, seed: int
) -> SelectionResult:
    """Greedy farthest-point selection of n items.

    Starts with one seeded random item; each subsequent pick maximizes its
    minimum Euclidean distance to the already-selected set, with exact ties
    broken by ascending item identifier. Diagnostic scores hold each item's
    min-distance at selection (0 for the seeded first pick).
    """
    _check_seed(seed)
    total = len(matrix)
    if n < 1:
        raise ValueError("n must be positive")
    if n > total:
        raise ValueError(f"n ({n}) exceeds item count ({total})")
    ids = matrix.item_ids
    rows = matrix.rows

    first = _seed_pick(total, seed)
    selected = [first]
    remaining = [i for i in range(total) if i != first]
    min_dist = np.linalg.norm(rows - rows[first], axis=1)
    scores: dict[str, float] = {ids[first]: 0.0}

    while len(selected) < n:
        best_i = None
        best_d = -math.inf
        for i in remaining:
            d = min_dist[i]
            if d > best_d or (d == best_d and ids[i] < ids[best_i]):
                best_d = d
                best_i = i
        selected.append(best_i)
        remaining.remove(best_i)
        scores[ids[best_i]] = float(best_d)
        np.minimum(min_dist, np.linalg.norm(rows - rows[best_i], axis=1), out=min_dist)

    chosen = tuple(ids[i] for i in selected)
    return SelectionResult(chosen, scores, SelectionStrategy.DIVERSE, seed)


def write_first_order_csv(rows: Sequence[FirstOrderFeatures], path) -> None:
    """CSV with header item_id,mean,median,entropy,energy at 17 significant digits."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["item_id", *FEATURE_COLUMNS])
        for f in rows:
            writer.writerow(
                [f.item_id] + [format(x, ".17g") for x in (f.mean, f.median, f.entropy, f.energy)]
            )
    os.replace(tmp, path)


def write_normalized_csv(matrix: NormalizedFeatureMatrix, path) -> None:
    """Normalized matrix CSV, same columns as the raw feature CSV."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["item_id", *FEATURE_COLUMNS])
        for item_id, row in zip(matrix.item_ids, matrix.rows):
            writer.writerow([item_id] + [format(x, ".17g") for x in row])
    os.replace(tmp, path)


def read_first_order_csv(path) -> list[FirstOrderFeatures]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"item_id", *FEATURE_COLUMNS}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"feature CSV must have columns {sorted(required)}")
        out = [
            FirstOrderFeatures(
                row["item_id"],
                float(row["mean"]),
                float(row["median"]),
                float(row["entropy"]),
                float(row["energy"]),
            )
            for row in reader
        ]
    if not out:
        raise ValueError(f"no feature rows in {path}")
    return out
