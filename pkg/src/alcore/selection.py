"""Query strategies over an unannotated pool.

Four strategies: seeded random query, top-k by uncertainty, greedy
representative max cover over an uncertain shortlist, and greedy selection
of items least similar to already-annotated data. The two greedy strategies
start from one seeded random pick and from then on are fully deterministic,
with exact ties broken by ascending item identifier.

Greedy objective sums use math.fsum, so candidate comparisons are exact and
independent of evaluation order; cached and uncached similarity lookups give
identical selections.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .similarity import FeatureVector, similarity_matrix
from .uncertainty import UncertaintyScore, _ranked

MAX_SEED = 2**64 - 1


class SelectionStrategy(str, Enum):
    RANDOM = "random"
    TOP_K = "topk"
    REPRESENTATIVE = "representative"
    NON_SIMILAR = "nonsimilar"
    DIVERSE = "diverse"  # farthest-point initialization, see alcore.initialization


@dataclass(frozen=True)
class SelectionRequest:
    """Shortlist size k and batch size m for one query round."""

    strategy: SelectionStrategy
    pool_size_k: int
    batch_size_m: int
    seed: int = 0

    def __post_init__(self):
        if self.batch_size_m < 1 or self.pool_size_k < 1:
            raise ValueError("pool_size_k and batch_size_m must be positive")
        if self.batch_size_m > self.pool_size_k:
            raise ValueError(
                f"batch_size_m ({self.batch_size_m}) exceeds pool_size_k ({self.pool_size_k})"
            )
        _check_seed(self.seed)


@dataclass(frozen=True)
class SelectionResult:
    """Ordered chosen ids plus per-item diagnostic scores."""

    chosen: tuple[str, ...]
    scores: dict[str, float]
    strategy: SelectionStrategy
    seed: int

    def __post_init__(self):
        if len(set(self.chosen)) != len(self.chosen):
            raise ValueError("chosen ids must be unique")

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "seed": self.seed,
            "chosen": list(self.chosen),
            "scores": {i: self.scores[i] for i in self.chosen},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_id_lines(self) -> str:
        """Plain-text one-id-per-line form for scripting."""
        return "".join(f"{i}\n" for i in self.chosen)

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionResult":
        return cls(
            chosen=tuple(d["chosen"]),
            scores={k: float(v) for k, v in d["scores"].items()},
            strategy=SelectionStrategy(d["strategy"]),
            seed=int(d["seed"]),
        )

    def write_json(self, path) -> None:
        _atomic_write(path, self.to_json())

    def write_id_lines(self, path) -> None:
        _atomic_write(path, self.to_id_lines())


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _check_seed(seed: int) -> None:
    if not 0 <= seed <= MAX_SEED:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")


def _check_unique(ids: Sequence[str], what: str) -> None:
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate item ids in {what}")


def select_random(pool: Sequence[str], m: int, seed: int) -> SelectionResult:
    """Uniform sample of m ids without replacement, fully determined by seed.

    Diagnostic scores record each item's draw position.
    """
    _check_seed(seed)
    _check_unique(pool, "pool")
    if m < 1:
        raise ValueError("m must be positive")
    if m > len(pool):
        raise ValueError(f"m ({m}) exceeds pool size ({len(pool)})")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pool), size=m, replace=False)
    chosen = tuple(pool[i] for i in idx)
    scores = {item: float(pos) for pos, item in enumerate(chosen)}
    return SelectionResult(chosen, scores, SelectionStrategy.RANDOM, seed)


def select_topk_uncertain(scores: Sequence[UncertaintyScore], m: int) -> SelectionResult:
    """The m highest-uncertainty items (ties by ascending id)."""
    if m < 1:
        raise ValueError("m must be positive")
    if m > len(scores):
        raise ValueError(f"m ({m}) exceeds number of scored items ({len(scores)})")
    _check_unique([s.item_id for s in scores], "scores")
    ranked = _ranked(list(scores))[:m]
    chosen = tuple(s.item_id for s in ranked)
    return SelectionResult(
        chosen, {s.item_id: s.score for s in ranked}, SelectionStrategy.TOP_K, 0
    )


def _seed_pick(n: int, seed: int) -> int:
    return int(np.random.default_rng(seed).integers(n))


def select_representative(
    shortlist: Sequence[FeatureVector],
    m: int,
    seed: int,
    fixed_universe: bool = False,
) -> SelectionResult:
    """Greedy max-cover subset of an uncertain shortlist.

    Starts with one seeded random member, then repeatedly moves over the
    shortlist element whose addition maximizes the coverage objective
    (sum over the not-yet-moved shortlist of each item's best similarity to
    the chosen set). Following the pseudocode literally, the universe of the
    objective shrinks as items move; fixed_universe=True instead keeps the
    objective over the full original shortlist. Both variants choose the
    same ids (the objectives differ by a constant per step); the recorded
    scores differ.

    Diagnostic scores hold each element's objective value at the moment of
    its selection, including the seeded first pick.
    """
    _check_seed(seed)
    ids = [v.item_id for v in shortlist]
    _check_unique(ids, "shortlist")
    if m < 1:
        raise ValueError("m must be positive")
    if m > len(shortlist):
        raise ValueError(f"m ({m}) exceeds shortlist size ({len(shortlist)})")

    sim = similarity_matrix(shortlist)
    n = len(shortlist)
    first = _seed_pick(n, seed)
    selected = [first]
    remaining = [i for i in range(n) if i != first]
    # best_cover[j]: best similarity of shortlist[j] to the chosen set so far
    best_cover = sim[:, first].copy()

    def objective(cand: int) -> float:
        if fixed_universe:
            terms = (max(best_cover[j], sim[j, cand]) for j in range(n))
        else:
            terms = (max(best_cover[j], sim[j, cand]) for j in remaining if j != cand)
        return math.fsum(terms)

    scores: dict[str, float] = {}
    if fixed_universe:
        scores[ids[first]] = math.fsum(sim[j, first] for j in range(n))
    else:
        scores[ids[first]] = math.fsum(sim[j, first] for j in remaining)

    while len(selected) < m:
        best_i = None
        best_f = -math.inf
        for i in remaining:
            f = objective(i)
            if f > best_f or (f == best_f and ids[i] < ids[best_i]):
                best_f = f
                best_i = i
        selected.append(best_i)
        remaining.remove(best_i)
        np.maximum(best_cover, sim[:, best_i], out=best_cover)
        scores[ids[best_i]] = best_f

    chosen = tuple(ids[i] for i in selected)
    return SelectionResult(chosen, scores, SelectionStrategy.REPRESENTATIVE, seed)


def select_nonsimilar(
    shortlist: Sequence[FeatureVector],
    annotated: Sequence[FeatureVector],
    m: int,
    seed: int,
) -> SelectionResult:
    """Greedy picks of shortlist items least similar to annotated data.

    Starts with one seeded random member, then repeatedly moves over the
    shortlist element with the smallest total similarity to the annotated
    set plus the items already chosen. Diagnostic scores hold each element's
    similarity sum at the moment of its selection (the seeded pick's sum is
    against the annotated set alone, 0 if it is empty).
    """
    _check_seed(seed)
    ids = [v.item_id for v in shortlist]
    _check_unique(ids, "shortlist")
    ann_ids = [v.item_id for v in annotated]
    _check_unique(ann_ids, "annotated")
    overlap = set(ids) & set(ann_ids)
    if overlap:
        raise ValueError(f"shortlist and annotated sets overlap: {sorted(overlap)}")
    if m < 1:
        raise ValueError("m must be positive")
    if m > len(shortlist):
        raise ValueError(f"m ({m}) exceeds shortlist size ({len(shortlist)})")

    combined = list(shortlist) + list(annotated)
    sim = similarity_matrix(combined)
    n = len(shortlist)
    ann_idx = list(range(n, n + len(annotated)))

    first = _seed_pick(n, seed)
    selected = [first]
    remaining = [i for i in range(n) if i != first]
    scores: dict[str, float] = {
        ids[first]: math.fsum(sim[first, j] for j in ann_idx)
    }

    while len(selected) < m:
        best_i = None
        best_s = math.inf
        for i in remaining:
            s = math.fsum(sim[i, j] for j in ann_idx + selected)
            if s < best_s or (s == best_s and ids[i] < ids[best_i]):
                best_s = s
                best_i = i
        selected.append(best_i)
        remaining.remove(best_i)
        scores[ids[best_i]] = best_s

    chosen = tuple(ids[i] for i in selected)
    return SelectionResult(chosen, scores, SelectionStrategy.NON_SIMILAR, seed)
