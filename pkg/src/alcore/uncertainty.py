"""Uncertainty scores over probability maps.

Three methods: margins (one prediction; voxel probabilities near 0.5 are
uncertain), bootstrap ensemble variance (whole-grid mean of the per-voxel
variance), and dropout top-fraction variance (mean of the largest per-voxel
variances, default top 0.1%). Higher score always means more uncertain.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .volume import ProbabilityMap, voxelwise_variance

DEFAULT_TOP_FRACTION = 0.001


class UncertaintyMethod(str, Enum):
    MARGINS = "margins"
    BOOTSTRAP = "bootstrap"
    DROPOUT = "dropout"


@dataclass(frozen=True)
class UncertaintyScore:
    item_id: str
    score: float
    method: UncertaintyMethod
    n_predictions: int

    def __post_init__(self):
        if self.n_predictions < 1:
            raise ValueError("n_predictions must be positive")
        if self.method is UncertaintyMethod.MARGINS and self.n_predictions != 1:
            raise ValueError("margins scores come from a single prediction")


def margins_score(pmap: ProbabilityMap, item_id: str = "") -> UncertaintyScore:
    """Negated mean distance of voxel probabilities from 0.5.

    Scores lie in [-0.5, 0]; 0 (all voxels at 0.5) is maximally uncertain.
    """
    v = pmap.grid.values
    score = -float(np.mean(np.abs(v - 0.5)))
    return UncertaintyScore(item_id, score, UncertaintyMethod.MARGINS, 1)


def bootstrap_score(maps: list[ProbabilityMap], item_id: str = "") -> UncertaintyScore:
    """Mean over all voxels of the ensemble's per-voxel variance.

    One map per bootstrapped model; scores lie in [0, 0.25].
    """
    var = voxelwise_variance(maps)
    score = float(np.mean(var.values))
    return UncertaintyScore(item_id, score, UncertaintyMethod.BOOTSTRAP, len(maps))


def dropout_topfraction_score(
    maps: list[ProbabilityMap],
    top_fraction: float = DEFAULT_TOP_FRACTION,
    item_id: str = "",
) -> UncertaintyScore:
    """Mean of the k largest per-voxel variances of the ensemble.

    k = max(1, ceil(top_fraction * voxel_count)), so the score is defined
    even on tiny grids. top_fraction = 1.0 reduces to bootstrap_score.
    """
    if not 0.0 < top_fraction <= 1.0:
        raise ValueError(f"top_fraction must be in (0, 1], got {top_fraction}")
    var = voxelwise_variance(maps)
    flat = var.values.ravel()
    k = max(1, math.ceil(top_fraction * flat.size))
    top = np.partition(flat, flat.size - k)[flat.size - k:]
    score = float(np.mean(top))
    return UncertaintyScore(item_id, score, UncertaintyMethod.DROPOUT, len(maps))


def _ranked(scores: list[UncertaintyScore]) -> list[UncertaintyScore]:
    methods = {s.method for s in scores}
    if len(methods) > 1:
        raise ValueError(f"cannot rank scores of mixed methods: {sorted(m.value for m in methods)}")
    return sorted(scores, key=lambda s: (-s.score, s.item_id))


def rank_by_uncertainty(scores: list[UncertaintyScore]) -> list[str]:
    """Item ids sorted by descending score; ties broken by ascending id."""
    return [s.item_id for s in _ranked(scores)]


def write_scores_csv(scores: list[UncertaintyScore], path) -> None:
    """Write scores as CSV, rows in rank order, reals at 17 significant digits."""
    ordered = _ranked(scores)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["item_id", "method", "score", "n_predictions"])
        for s in ordered:
            writer.writerow([s.item_id, s.method.value, format(s.score, ".17g"), s.n_predictions])
    os.replace(tmp, path)


def read_scores_csv(path) -> list[UncertaintyScore]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"item_id", "method", "score", "n_predictions"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"score CSV must have columns {sorted(required)}")
        return [
            UncertaintyScore(
                row["item_id"],
                float(row["score"]),
                UncertaintyMethod(row["method"]),
                int(row["n_predictions"]),
            )
            for row in reader
        ]
