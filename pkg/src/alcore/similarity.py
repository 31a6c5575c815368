"""Feature flattening and cosine-similarity based representativeness.

A 4D encoder feature block (x, y, z, c) is flattened to a length-c vector by
taking the per-channel mean over the spatial axes. Pairwise similarity is
cosine similarity; set-level coverage is the sum over a universe of each
item's best similarity to the cover.
"""

from __future__ import annotations

import csv
import math
import os
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_CHANNELS = 512


class FeatureBlock:
    """Dense 4D feature array of shape (x, y, z, c); all values finite."""

    __slots__ = ("_values",)

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64, order="C", copy=True)
        if arr.ndim != 4:
            raise ValueError(f"expected a 4D array, got ndim={arr.ndim}")
        if min(arr.shape) < 1:
            raise ValueError(f"dims must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("feature block values must be finite")
        arr.setflags(write=False)
        self._values = arr

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self._values.shape

    @property
    def channels(self) -> int:
        return self._values.shape[3]


class FeatureVector:
    """Length-c real vector with an item identifier.

    All-zero vectors are rejected at construction: cosine similarity is
    undefined for them.
    """

    __slots__ = ("item_id", "_values")

    def __init__(self, item_id: str, values):
        arr = np.array(values, dtype=np.float64, copy=True)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("feature vector must be a non-empty 1D array")
        if not np.isfinite(arr).all():
            raise ValueError("feature vector values must be finite")
        if not arr.any():
            raise ValueError("feature vector must not be all-zero")
        arr.setflags(write=False)
        self.item_id = item_id
        self._values = arr

    @property
    def values(self) -> np.ndarray:
        return self._values

    def __len__(self) -> int:
        return self._values.size

    def __repr__(self) -> str:
        return f"FeatureVector({self.item_id!r}, len={len(self)})"


def flatten_features(block: FeatureBlock, item_id: str = "") -> FeatureVector:
    """Per-channel mean over the spatial axes: (x, y, z, c) -> length c."""
    return FeatureVector(item_id, block.values.mean(axis=(0, 1, 2)))


def cosine_similarity(a: FeatureVector, b: FeatureVector) -> float:
    """dot(a, b) / (|a| * |b|), computed in double precision, clamped to [-1, 1]."""
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    na = float(np.linalg.norm(a.values))
    nb = float(np.linalg.norm(b.values))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm vectors")
    raw = float(np.dot(a.values, b.values)) / (na * nb)
    return min(1.0, max(-1.0, raw))


def represented_by(candidate: FeatureVector, cover: Sequence[FeatureVector]) -> float:
    """Best similarity of the candidate to any member of the cover set."""
    if not cover:
        raise ValueError("cover set must not be empty")
    return max(cosine_similarity(member, candidate) for member in cover)


def set_representativeness(
    cover: Sequence[FeatureVector], universe: Sequence[FeatureVector]
) -> float:
    """Sum over the universe of each item's best similarity to the cover.

    Monotone in the cover: enlarging the cover never decreases the result.
    Summation uses math.fsum so the value is independent of universe order.
    """
    if not cover:
        raise ValueError("cover set must not be empty")
    return math.fsum(represented_by(u, cover) for u in universe)


def similarity_matrix(vectors: Sequence[FeatureVector]) -> np.ndarray:
    """Pairwise cosine similarities, entry for entry as cosine_similarity gives.

    Selection loops reuse this cache heavily; entries are computed with the
    exact same arithmetic as the scalar function so cached and uncached
    selection results are identical.
    """
    n = len(vectors)
    out = np.empty((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i, n):
            s = cosine_similarity(vectors[i], vectors[j])
            out[i, j] = s
            out[j, i] = s
    return out


def write_feature_csv(vectors: Sequence[FeatureVector], path) -> None:
    """CSV with header item_id,f0,...,f{c-1}; reals at 17 significant digits."""
    if not vectors:
        raise ValueError("nothing to write")
    c = len(vectors[0])
    for v in vectors:
        if len(v) != c:
            raise ValueError("all feature vectors must share one length")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["item_id"] + [f"f{k}" for k in range(c)])
        for v in vectors:
            writer.writerow([v.item_id] + [format(x, ".17g") for x in v.values])
    os.replace(tmp, path)


def read_feature_csv(path) -> list[FeatureVector]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "item_id":
            raise ValueError("feature CSV must start with an item_id column")
        out = []
        for row in reader:
            if not row:
                continue
            out.append(FeatureVector(row[0], [float(x) for x in row[1:]]))
    if not out:
        raise ValueError(f"no feature rows in {path}")
    return out
