"""Volumetric overlap evaluation and learning-curve summaries."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .volume import SegmentationMask


@dataclass(frozen=True)
class DiceScore:
    item_id: str
    value: float

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"dice value must lie in [0, 1], got {self.value}")


@dataclass(frozen=True)
class CurvePoint:
    """One evaluation point of a learning curve."""

    iteration: int
    annotated_count: int
    fraction_of_pool: float
    mean_dice: float
    median_dice: float
    std_dice: float

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "annotated_count": self.annotated_count,
            "fraction_of_pool": self.fraction_of_pool,
            "mean_dice": self.mean_dice,
            "median_dice": self.median_dice,
            "std_dice": self.std_dice,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CurvePoint":
        return cls(
            iteration=int(d["iteration"]),
            annotated_count=int(d["annotated_count"]),
            fraction_of_pool=float(d["fraction_of_pool"]),
            mean_dice=float(d["mean_dice"]),
            median_dice=float(d["median_dice"]),
            std_dice=float(d["std_dice"]),
        )


def dice(pred: SegmentationMask, truth: SegmentationMask, item_id: str = "") -> DiceScore:
    """2 * |pred & truth| / (|pred| + |truth|); both-empty counts as 1.0."""
    if pred.dims != truth.dims:
        raise ValueError(f"dims mismatch: pred {pred.dims} vs truth {truth.dims}")
    a = pred.as_bool()
    b = truth.as_bool()
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return DiceScore(item_id, 1.0)
    inter = int(np.logical_and(a, b).sum())
    return DiceScore(item_id, 2.0 * inter / denom)


def summarize(
    dices: Sequence[DiceScore],
    iteration: int,
    annotated_count: int,
    pool_total: int,
) -> CurvePoint:
    """Mean/median/population-std of per-item Dice at one curve point."""
    if not dices:
        raise ValueError("cannot summarize an empty score list")
    if annotated_count < 1 or annotated_count > pool_total:
        raise ValueError("annotated_count must lie in [1, pool_total]")
    values = np.array([d.value for d in dices], dtype=np.float64)
    return CurvePoint(
        iteration=iteration,
        annotated_count=annotated_count,
        fraction_of_pool=annotated_count / pool_total,
        mean_dice=float(values.mean()),
        median_dice=float(np.median(values)),
        std_dice=float(values.std()),
    )


def write_curve_jsonl(points: Sequence[CurvePoint], path) -> None:
    """One CurvePoint per JSON line."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        for p in points:
            fh.write(json.dumps(p.to_dict()) + "\n")
    os.replace(tmp, path)


def write_curve_csv(points: Sequence[CurvePoint], path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["iteration", "annotated_count", "fraction", "mean_dice", "median_dice", "std_dice"]
        )
        for p in points:
            writer.writerow(
                [
                    p.iteration,
                    p.annotated_count,
                    format(p.fraction_of_pool, ".17g"),
                    format(p.mean_dice, ".17g"),
                    format(p.median_dice, ".17g"),
                    format(p.std_dice, ".17g"),
                ]
            )
    os.replace(tmp, path)
