"""Seeded active-learning loop over a synthetic phantom pool.

The harness iterates: score the unannotated pool with the configured
uncertainty method, select a batch with the configured query strategy, flip
the batch to annotated, resplit a validation fraction off the annotated set,
and evaluate test Dice with the predictor at the new training snapshot.

Any predictor honoring the Predictor protocol can be attached. The reference
PhantomOracle stands in for a trained segmentation model: its prediction for
an item is the item's true mask blurred by a fixed kernel plus Gaussian
noise whose amplitude shrinks as the item's features get closer (max cosine
similarity) to the training snapshot. Familiar items therefore get
low-variance, high-Dice predictions, which is the causal structure query
strategies exploit.

Every random decision derives from the config seed through tagged
SeedSequences, so a run is a pure function of its config and replays
byte-identically at any parallelism level.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from ._threads import parallel_map
from .initialization import (
    DEFAULT_BINS,
    extract_first_order,
    normalize_features,
    select_diverse_initial,
    zscore_columns,
)
from .metrics import CurvePoint, DiceScore, dice, summarize
from .selection import (
    SelectionResult,
    SelectionStrategy,
    select_nonsimilar,
    select_random,
    select_representative,
    select_topk_uncertain,
)
from .similarity import FeatureVector, cosine_similarity
from .uncertainty import (
    DEFAULT_TOP_FRACTION,
    UncertaintyMethod,
    UncertaintyScore,
    bootstrap_score,
    dropout_topfraction_score,
    margins_score,
    rank_by_uncertainty,
)
from .volume import ProbabilityMap, SegmentationMask, VoxelGrid, binarize

# Initial-dataset sizes explored by the harness presets.
INITIAL_DATASET_PRESETS = (20, 40, 80)

# Dice level the comparison report uses to locate each strategy's
# smallest sufficient annotation count; tuned for the default oracle.
DEFAULT_DICE_TARGET = 0.90


class ItemState(str, Enum):
    UNANNOTATED = "unannotated"
    ANNOTATED = "annotated"
    TEST = "test"


class InitMode(str, Enum):
    RANDOM = "random"
    RADIOMICS_DIVERSE = "diverse"


class ContractViolationError(RuntimeError):
    """A predictor broke its determinism or typing contract."""


class PoolExhaustedError(RuntimeError):
    """Not enough unannotated items left for the requested batch/shortlist."""


@dataclass
class PoolItem:
    """One image of the pool with its annotation state."""

    item_id: str
    volume: VoxelGrid
    truth: SegmentationMask
    features: FeatureVector
    state: ItemState = ItemState.UNANNOTATED

    def mark_annotated(self) -> None:
        if self.state is not ItemState.UNANNOTATED:
            raise ValueError(f"{self.item_id}: cannot annotate from state {self.state.value}")
        self.state = ItemState.ANNOTATED

    def mark_test(self) -> None:
        if self.state is not ItemState.UNANNOTATED:
            raise ValueError(f"{self.item_id}: cannot assign test from state {self.state.value}")
        self.state = ItemState.TEST


class Predictor(Protocol):
    """Behavioral stand-in for the trained segmentation model."""

    def predict(
        self,
        item: PoolItem,
        n_predictions: int,
        training_snapshot: Sequence[PoolItem],
        seed: int,
    ) -> list[ProbabilityMap]: ...

    def features(self, item: PoolItem) -> FeatureVector: ...


# ---------------------------------------------------------------------------
# Seeding: every random decision gets its own tagged child stream.

def _tag_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        if tag < 0:
            raise ValueError("seed tags must be non-negative")
        return int(tag)
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def child_rng(seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed] + [_tag_int(t) for t in tags]))


def derive_seed(seed: int, *tags) -> int:
    """A stable unsigned 64-bit child seed for (seed, tags)."""
    ss = np.random.SeedSequence([seed] + [_tag_int(t) for t in tags])
    return int(ss.generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# Configuration

class ConfigError(ValueError):
    """Config schema violations, one message per offending field."""

    def __init__(self, errors: Sequence[str]):
        super().__init__("invalid config: " + "; ".join(errors))
        self.errors = list(errors)


@dataclass(frozen=True)
class PhantomParams:
    """Synthetic pool geometry: one ellipsoidal lesion per intensity volume.

    Lesions are drawn from a seeded set of latent families (prototype
    center/radii/contrast plus per-item jitter) with imbalanced family
    sizes, the way a clinical cohort mixes lesion types. cluster_count = 0
    draws every lesion independently instead.
    """

    grid_size: int = 32
    radius_range: tuple[float, float] = (3.0, 8.0)
    contrast_range: tuple[float, float] = (0.4, 1.0)
    background_level: float = 0.1
    background_noise: float = 0.05
    cluster_count: int = 25
    cluster_jitter: float = 0.1

    def __post_init__(self):
        if self.grid_size < 4:
            raise ValueError("grid_size must be at least 4")
        lo, hi = self.radius_range
        if not 0.0 < lo <= hi:
            raise ValueError("radius_range must satisfy 0 < lo <= hi")
        if lo < 1.0:
            raise ValueError("lesion radii below 1 voxel are degenerate")
        if 2.0 * hi >= self.grid_size - 1:
            raise ValueError(
                f"lesion diameter {2 * hi} does not fit a {self.grid_size}^3 grid"
            )
        clo, chi = self.contrast_range
        if not 0.0 < clo <= chi:
            raise ValueError("contrast_range must satisfy 0 < lo <= hi")
        if self.background_noise < 0.0:
            raise ValueError("background_noise must be non-negative")
        if self.cluster_count < 0:
            raise ValueError("cluster_count must be non-negative")
        if self.cluster_jitter < 0.0:
            raise ValueError("cluster_jitter must be non-negative")


@dataclass(frozen=True)
class OracleParams:
    """Reference-oracle behavior: blur kernel, noise amplitudes, threshold."""

    blur_radius: int = 1
    sigma_min: float = 0.02
    sigma_max: float = 1.0
    threshold: float = 0.5

    def __post_init__(self):
        if self.blur_radius < 0:
            raise ValueError("blur_radius must be non-negative")
        if self.sigma_min < 0.0 or self.sigma_max < 0.0:
            raise ValueError("noise amplitudes must be non-negative")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")


@dataclass(frozen=True)
class SimulationConfig:
    """Full protocol of one active-learning run."""

    pool_size: int = 200
    test_fraction: float = 0.20
    validation_fraction: float = 0.20
    initial_n: int = 40
    batch_m: int = 50
    shortlist_k: int = 100
    n_predictions: int = 5
    strategy: SelectionStrategy = SelectionStrategy.TOP_K
    uncertainty_method: UncertaintyMethod = UncertaintyMethod.DROPOUT
    top_fraction: float = DEFAULT_TOP_FRACTION
    init_mode: InitMode = InitMode.RANDOM
    iterations: int = 0
    seed: int = 0
    score_subsample: int | None = None
    strict: bool = False
    phantom: PhantomParams = field(default_factory=PhantomParams)
    oracle: OracleParams = field(default_factory=OracleParams)

    def __post_init__(self):
        if self.pool_size < 2:
            raise ValueError("pool_size must be at least 2")
        for name in ("test_fraction", "validation_fraction"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.initial_n < 1:
            raise ValueError("initial_n must be positive")
        if self.batch_m < 1:
            raise ValueError("batch_m must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if not 0 <= self.seed <= 2**64 - 1:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if not 0.0 < self.top_fraction <= 1.0:
            raise ValueError("top_fraction must lie in (0, 1]")
        if self.strategy is SelectionStrategy.DIVERSE:
            raise ValueError("diverse is an initialization mode, not a query strategy")
        if self.uncertainty_method is UncertaintyMethod.MARGINS:
            if self.n_predictions != 1:
                raise ValueError("margins scoring uses exactly 1 prediction")
        elif self.n_predictions < 2:
            raise ValueError("variance-based scoring needs n_predictions >= 2")
        if self.score_subsample is not None and self.score_subsample < 1:
            raise ValueError("score_subsample must be positive when set")

        train_pool = self.pool_size - self.test_count
        if self.initial_n + self.iterations * self.batch_m > train_pool:
            raise ValueError(
                f"initial_n + iterations*batch_m = "
                f"{self.initial_n + self.iterations * self.batch_m} exceeds the "
                f"training pool of {train_pool}"
            )
        if self.strategy in (SelectionStrategy.REPRESENTATIVE, SelectionStrategy.NON_SIMILAR):
            if self.batch_m > self.shortlist_k:
                raise ValueError("batch_m must not exceed shortlist_k")
            last_unannotated = train_pool - self.initial_n - (self.iterations - 1) * self.batch_m
            if self.iterations > 0 and self.shortlist_k > last_unannotated:
                raise ValueError(
                    f"shortlist_k ({self.shortlist_k}) exceeds the unannotated pool "
                    f"at the last iteration ({last_unannotated})"
                )

    @property
    def test_count(self) -> int:
        return round(self.pool_size * self.test_fraction)

    @property
    def train_pool_size(self) -> int:
        return self.pool_size - self.test_count

    def to_dict(self) -> dict:
        return {
            "pool_size": self.pool_size,
            "test_fraction": self.test_fraction,
            "validation_fraction": self.validation_fraction,
            "initial_n": self.initial_n,
            "batch_m": self.batch_m,
            "shortlist_k": self.shortlist_k,
            "n_predictions": self.n_predictions,
            "strategy": self.strategy.value,
            "uncertainty_method": self.uncertainty_method.value,
            "top_fraction": self.top_fraction,
            "init_mode": self.init_mode.value,
            "iterations": self.iterations,
            "seed": self.seed,
            "score_subsample": self.score_subsample,
            "strict": self.strict,
            "phantom": {
                "grid_size": self.phantom.grid_size,
                "radius_range": list(self.phantom.radius_range),
                "contrast_range": list(self.phantom.contrast_range),
                "background_level": self.phantom.background_level,
                "background_noise": self.phantom.background_noise,
                "cluster_count": self.phantom.cluster_count,
                "cluster_jitter": self.phantom.cluster_jitter,
            },
            "oracle": {
                "blur_radius": self.oracle.blur_radius,
                "sigma_min": self.oracle.sigma_min,
                "sigma_max": self.oracle.sigma_max,
                "threshold": self.oracle.threshold,
            },
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "SimulationConfig":
        """Parse and validate, reporting every offending field at once."""
        if not isinstance(raw, dict):
            raise ConfigError(["config must be a JSON object"])
        errors: list[str] = []
        known = {
            "pool_size": int,
            "test_fraction": float,
            "validation_fraction": float,
            "initial_n": int,
            "batch_m": int,
            "shortlist_k": int,
            "n_predictions": int,
            "strategy": lambda v: SelectionStrategy(v),
            "uncertainty_method": lambda v: UncertaintyMethod(v),
            "top_fraction": float,
            "init_mode": lambda v: InitMode(v),
            "iterations": int,
            "seed": int,
            "score_subsample": lambda v: None if v is None else int(v),
            "strict": bool,
            "phantom": None,
            "oracle": None,
        }
        unknown = sorted(set(raw) - set(known))
        for key in unknown:
            errors.append(f"{key}: unknown field")

        kwargs: dict = {}
        for key, conv in known.items():
            if key not in raw or conv is None:
                continue
            try:
                kwargs[key] = conv(raw[key])
            except (TypeError, ValueError) as exc:
                errors.append(f"{key}: {exc}")

        for key, sub_cls in (("phantom", PhantomParams), ("oracle", OracleParams)):
            if key not in raw:
                continue
            sub = raw[key]
            if not isinstance(sub, dict):
                errors.append(f"{key}: must be an object")
                continue
            sub_fields = {f.name for f in sub_cls.__dataclass_fields__.values()}
            bad = sorted(set(sub) - sub_fields)
            for b in bad:
                errors.append(f"{key}.{b}: unknown field")
            try:
                clean = {
                    k: tuple(v) if isinstance(v, list) else v
                    for k, v in sub.items()
                    if k in sub_fields
                }
                kwargs[key] = sub_cls(**clean)
            except (TypeError, ValueError) as exc:
                errors.append(f"{key}: {exc}")

        if errors:
            raise ConfigError(errors)
        try:
            return cls(**kwargs)
        except ValueError as exc:
            raise ConfigError([str(exc)]) from None

    @classmethod
    def from_json(cls, text: str) -> "SimulationConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"not valid JSON: {exc}"]) from None
        return cls.from_dict(raw)


# ---------------------------------------------------------------------------
# Phantom pool

def generate_phantom_pool(config: SimulationConfig) -> list[PoolItem]:
    """Seeded pool of intensity phantoms, one ellipsoidal lesion each.

    Truth is the voxelized ellipsoid; the feature vector is the item's
    z-scored first-order intensity features joined with z-scored lesion
    shape descriptors (center, radii, contrast), giving every item a
    well-defined position in feature space.
    """
    p = config.phantom
    g = p.grid_size
    axes = np.arange(g, dtype=np.float64)
    xs = axes[:, None, None]
    ys = axes[None, :, None]
    zs = axes[None, None, :]

    prototypes = None
    if p.cluster_count > 0:
        proto_rng = child_rng(config.seed, "phantom-families")
        radii_p = proto_rng.uniform(*p.radius_range, size=(p.cluster_count, 3))
        center_p = np.column_stack(
            [
                proto_rng.uniform(radii_p[:, a], g - 1 - radii_p[:, a])
                for a in range(3)
            ]
        )
        contrast_p = proto_rng.uniform(*p.contrast_range, size=p.cluster_count)
        # imbalanced family sizes, the way cohorts mix lesion types, with a
        # uniform floor so every family stays large enough to be coverable
        raw = proto_rng.exponential(1.0, size=p.cluster_count)
        weights = 0.5 / p.cluster_count + 0.5 * raw / raw.sum()
        weights /= weights.sum()
        prototypes = (radii_p, center_p, contrast_p, weights)

    volumes: list[VoxelGrid] = []
    truths: list[SegmentationMask] = []
    shape_rows = np.empty((config.pool_size, 7))
    for i in range(config.pool_size):
        rng = child_rng(config.seed, "phantom", i)
        if prototypes is None:
            radii = rng.uniform(p.radius_range[0], p.radius_range[1], size=3)
            center = np.array(
                [rng.uniform(radii[a], g - 1 - radii[a]) for a in range(3)]
            )
            contrast = rng.uniform(p.contrast_range[0], p.contrast_range[1])
        else:
            radii_p, center_p, contrast_p, weights = prototypes
            c = rng.choice(p.cluster_count, p=weights)
            jit = p.cluster_jitter
            radii = np.clip(
                radii_p[c] * (1.0 + jit * rng.normal(size=3)), *p.radius_range
            )
            center = np.clip(
                center_p[c] + jit * g * rng.normal(size=3), radii, g - 1 - radii
            )
            contrast = float(
                np.clip(contrast_p[c] * (1.0 + jit * rng.normal()), *p.contrast_range)
            )
        lesion = (
            ((xs - center[0]) / radii[0]) ** 2
            + ((ys - center[1]) / radii[1]) ** 2
            + ((zs - center[2]) / radii[2]) ** 2
        ) <= 1.0
        intensity = (
            p.background_level
            + contrast * lesion
            + rng.normal(0.0, p.background_noise, size=(g, g, g))
            if p.background_noise > 0.0
            else p.background_level + contrast * lesion
        )
        volumes.append(VoxelGrid(intensity))
        truths.append(SegmentationMask(VoxelGrid(lesion.astype(np.float64))))
        shape_rows[i] = (*center, *radii, contrast)

    full_mask = SegmentationMask(VoxelGrid(np.ones((g, g, g))))
    ids = [f"item_{i:04d}" for i in range(config.pool_size)]
    first_order = np.stack(
        [
            extract_first_order(volumes[i], full_mask, DEFAULT_BINS, ids[i]).as_row()
            for i in range(config.pool_size)
        ]
    )
    feature_rows = zscore_columns(np.hstack([first_order, shape_rows]))
    return [
        PoolItem(ids[i], volumes[i], truths[i], FeatureVector(ids[i], feature_rows[i]))
        for i in range(config.pool_size)
    ]


# ---------------------------------------------------------------------------
# Reference predictor oracle

class PhantomOracle:
    """Reference Predictor: blurred truth plus familiarity-scaled noise.

    familiarity(item) is the best cosine similarity between the item's
    features and the training snapshot's (0 for an empty snapshot). Each of
    the n requested maps is clamp(base + noise) with noise amplitude
    sigma_max * (1 - familiarity) + sigma_min and a per-draw child seed, so
    familiar items produce low-variance, high-Dice predictions.

    Blurred base maps are cached per item id; an oracle instance must not
    be shared across pools that reuse ids.
    """

    def __init__(self, params: OracleParams | None = None):
        self.params = params or OracleParams()
        self._base_cache: dict[str, np.ndarray] = {}

    def features(self, item: PoolItem) -> FeatureVector:
        return item.features

    def familiarity(self, item: PoolItem, training_snapshot: Sequence[PoolItem]) -> float:
        if not training_snapshot:
            return 0.0
        feats = self.features(item)
        return max(cosine_similarity(feats, self.features(s)) for s in training_snapshot)

    def _base_map(self, item: PoolItem) -> np.ndarray:
        cached = self._base_cache.get(item.item_id)
        if cached is None:
            t = item.truth.grid.values
            r = self.params.blur_radius
            if r > 0:
                # Center-weighted blur: half the kernel mass on the voxel
                # itself, half box-averaged. Keeps every in-lesion voxel at
                # or above 0.5, so the noiseless thresholded map recovers
                # the truth exactly while the boundary stays soft.
                box = uniform_filter(t, size=2 * r + 1, mode="constant", cval=0.0)
                cached = 0.5 * t + 0.5 * box
                np.clip(cached, 0.0, 1.0, out=cached)
            else:
                cached = t
            self._base_cache[item.item_id] = cached
        return cached

    def predict(
        self,
        item: PoolItem,
        n_predictions: int,
        training_snapshot: Sequence[PoolItem],
        seed: int,
    ) -> list[ProbabilityMap]:
        if n_predictions < 1:
            raise ValueError("n_predictions must be positive")
        phi = self.familiarity(item, training_snapshot)
        sigma = self.params.sigma_max * (1.0 - phi) + self.params.sigma_min
        base = self._base_map(item)
        maps = []
        for j in range(n_predictions):
            rng = child_rng(seed, "draw", j)
            noisy = base + rng.normal(0.0, sigma, size=base.shape) if sigma > 0.0 else base.copy()
            np.clip(noisy, 0.0, 1.0, out=noisy)
            maps.append(ProbabilityMap(VoxelGrid(noisy)))
        return maps


# ---------------------------------------------------------------------------
# Run log

@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    selection: SelectionResult
    curve: CurvePoint
    wall_time_s: float

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "iteration": self.iteration,
            "selection": self.selection.to_dict(),
            "curve": self.curve.to_dict(),
        }
        if include_timing:
            d["wall_time_s"] = self.wall_time_s
        return d


@dataclass(frozen=True)
class RunLog:
    """Replayable record of one run: config echo plus per-iteration records.

    The canonical JSONL serialization omits wall time so identical configs
    reproduce byte-identical logs.
    """

    config: SimulationConfig
    records: tuple[IterationRecord, ...]

    def curve(self) -> list[CurvePoint]:
        return [r.curve for r in self.records]

    def to_jsonl(self, include_timing: bool = False) -> str:
        lines = [json.dumps({"config": self.config.to_dict()})]
        lines += [json.dumps(r.to_dict(include_timing)) for r in self.records]
        return "".join(line + "\n" for line in lines)

    def write_jsonl(self, path, include_timing: bool = False) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_jsonl(include_timing))
        os.replace(tmp, path)

    @classmethod
    def from_jsonl(cls, text: str) -> "RunLog":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty run log")
        head = json.loads(lines[0])
        config = SimulationConfig.from_dict(head["config"])
        records = []
        for ln in lines[1:]:
            d = json.loads(ln)
            records.append(
                IterationRecord(
                    iteration=int(d["iteration"]),
                    selection=SelectionResult.from_dict(d["selection"]),
                    curve=CurvePoint.from_dict(d["curve"]),
                    wall_time_s=float(d.get("wall_time_s", 0.0)),
                )
            )
        return cls(config, tuple(records))


# ---------------------------------------------------------------------------
# The loop

def _checked_predict(
    predictor: Predictor,
    strict: bool,
    item: PoolItem,
    n: int,
    snapshot: Sequence[PoolItem],
    seed: int,
) -> list[ProbabilityMap]:
    maps = predictor.predict(item, n, snapshot, seed)
    if len(maps) != n:
        raise ContractViolationError(
            f"predictor returned {len(maps)} maps, requested {n}"
        )
    if strict:
        again = predictor.predict(item, n, snapshot, seed)
        same = len(again) == len(maps) and all(
            np.array_equal(a.grid.values, b.grid.values) for a, b in zip(maps, again)
        )
        if not same:
            raise ContractViolationError(
                f"predictor output for {item.item_id} is not deterministic"
            )
    return maps


def _training_snapshot(
    annotated: list[PoolItem], iteration: int, seed: int, fraction: float
) -> list[PoolItem]:
    """Annotated items minus a per-iteration seeded validation split."""
    rng = child_rng(seed, "val-split", iteration)
    n = len(annotated)
    val_count = min(round(n * fraction), n - 1)
    if val_count <= 0:
        return list(annotated)
    held_out = set(rng.choice(n, size=val_count, replace=False).tolist())
    return [it for i, it in enumerate(annotated) if i not in held_out]


def _score_pool(
    config: SimulationConfig,
    predictor: Predictor,
    items: list[PoolItem],
    snapshot: list[PoolItem],
    iteration: int,
) -> list[UncertaintyScore]:
    method = config.uncertainty_method
    seed = config.seed

    if method is UncertaintyMethod.BOOTSTRAP:
        # n resampled snapshots per iteration, shared by all items: each
        # stands in for one model trained on a bootstrapped dataset.
        resamples = []
        for j in range(config.n_predictions):
            rng = child_rng(seed, "bootstrap-resample", iteration, j)
            idx = rng.integers(0, len(snapshot), size=len(snapshot))
            resamples.append([snapshot[i] for i in idx])

        def score_one(item: PoolItem) -> UncertaintyScore:
            maps = [
                _checked_predict(
                    predictor,
                    config.strict,
                    item,
                    1,
                    resamples[j],
                    derive_seed(seed, "score", iteration, item.item_id, j),
                )[0]
                for j in range(config.n_predictions)
            ]
            return bootstrap_score(maps, item_id=item.item_id)

    elif method is UncertaintyMethod.MARGINS:

        def score_one(item: PoolItem) -> UncertaintyScore:
            pmap = _checked_predict(
                predictor,
                config.strict,
                item,
                1,
                snapshot,
                derive_seed(seed, "score", iteration, item.item_id),
            )[0]
            return margins_score(pmap, item_id=item.item_id)

    else:

        def score_one(item: PoolItem) -> UncertaintyScore:
            maps = _checked_predict(
                predictor,
                config.strict,
                item,
                config.n_predictions,
                snapshot,
                derive_seed(seed, "score", iteration, item.item_id),
            )
            return dropout_topfraction_score(maps, config.top_fraction, item_id=item.item_id)

    return parallel_map(score_one, items)


def _item_features(predictor: Predictor, item: PoolItem) -> FeatureVector:
    f = predictor.features(item)
    if f.item_id != item.item_id:
        raise ContractViolationError(
            f"predictor.features returned id {f.item_id!r} for item {item.item_id!r}"
        )
    return f


def _evaluate(
    config: SimulationConfig,
    predictor: Predictor,
    test_items: list[PoolItem],
    snapshot: list[PoolItem],
) -> list[DiceScore]:
    # Evaluation seeds are fixed per item (not per iteration), so curve
    # movement reflects the shrinking noise amplitude, not fresh draws.
    def eval_one(item: PoolItem) -> DiceScore:
        pmap = _checked_predict(
            predictor,
            config.strict,
            item,
            1,
            snapshot,
            derive_seed(config.seed, "eval", item.item_id),
        )[0]
        return dice(binarize(pmap, config.oracle.threshold), item.truth, item_id=item.item_id)

    return parallel_map(eval_one, test_items)


def run_active_learning(
    config: SimulationConfig,
    predictor: Predictor | None = None,
    pool: Sequence[PoolItem] | None = None,
) -> RunLog:
    """Run the full loop and return its replayable log.

    The phantom pool and reference oracle are built from the config when not
    supplied. A supplied pool is not mutated (items are copied) and must be
    entirely unannotated.
    """
    if pool is None:
        pool = generate_phantom_pool(config)
    else:
        if len(pool) != config.pool_size:
            raise ValueError(
                f"pool has {len(pool)} items, config.pool_size is {config.pool_size}"
            )
        if any(it.state is not ItemState.UNANNOTATED for it in pool):
            raise ValueError("supplied pool must be entirely unannotated")
    if predictor is None:
        predictor = PhantomOracle(config.oracle)

    items = [PoolItem(it.item_id, it.volume, it.truth, it.features) for it in pool]
    if len({it.item_id for it in items}) != len(items):
        raise ValueError("pool item ids must be unique")
    by_id = {it.item_id: it for it in items}
    seed = config.seed

    # Test split.
    test_rng = child_rng(seed, "test-split")
    test_idx = set(test_rng.choice(len(items), size=config.test_count, replace=False).tolist())
    for i in sorted(test_idx):
        items[i].mark_test()
    test_items = [it for it in items if it.state is ItemState.TEST]
    pool_total = config.train_pool_size

    def unannotated() -> list[PoolItem]:
        return [it for it in items if it.state is ItemState.UNANNOTATED]

    def annotated() -> list[PoolItem]:
        return [it for it in items if it.state is ItemState.ANNOTATED]

    # Initial training set.
    t_start = time.perf_counter()
    init_seed = derive_seed(seed, "init")
    candidates = unannotated()
    if config.init_mode is InitMode.RANDOM:
        init_sel = select_random([it.item_id for it in candidates], config.initial_n, init_seed)
    else:
        g = candidates[0].volume.dims
        full_mask = SegmentationMask(VoxelGrid(np.ones(g)))
        raw = [
            extract_first_order(it.volume, full_mask, DEFAULT_BINS, it.item_id)
            for it in candidates
        ]
        init_sel = select_diverse_initial(normalize_features(raw), config.initial_n, init_seed)
    for item_id in init_sel.chosen:
        by_id[item_id].mark_annotated()

    snapshot = _training_snapshot(annotated(), 0, seed, config.validation_fraction)
    dices = _evaluate(config, predictor, test_items, snapshot)
    point = summarize(dices, 0, len(annotated()), pool_total)
    records = [IterationRecord(0, init_sel, point, time.perf_counter() - t_start)]

    for t in range(1, config.iterations + 1):
        t_start = time.perf_counter()
        avail = unannotated()
        if config.batch_m > len(avail):
            raise PoolExhaustedError(
                f"iteration {t}: batch_m ({config.batch_m}) exceeds the "
                f"unannotated pool ({len(avail)})"
            )
        sel_seed = derive_seed(seed, "select", t)

        if config.strategy is SelectionStrategy.RANDOM:
            sel = select_random([it.item_id for it in avail], config.batch_m, sel_seed)
        else:
            to_score = avail
            if config.score_subsample is not None and config.score_subsample < len(avail):
                sub_rng = child_rng(seed, "subsample", t)
                keep = sorted(
                    sub_rng.choice(len(avail), size=config.score_subsample, replace=False).tolist()
                )
                to_score = [avail[i] for i in keep]
            scores = _score_pool(config, predictor, to_score, snapshot, t)

            if config.strategy is SelectionStrategy.TOP_K:
                sel = select_topk_uncertain(scores, config.batch_m)
            else:
                if config.shortlist_k > len(scores):
                    raise PoolExhaustedError(
                        f"iteration {t}: shortlist_k ({config.shortlist_k}) exceeds "
                        f"the scored pool ({len(scores)})"
                    )
                shortlist_ids = rank_by_uncertainty(scores)[: config.shortlist_k]
                shortlist = [_item_features(predictor, by_id[i]) for i in shortlist_ids]
                if config.strategy is SelectionStrategy.REPRESENTATIVE:
                    sel = select_representative(shortlist, config.batch_m, sel_seed)
                else:
                    annotated_feats = [_item_features(predictor, it) for it in annotated()]
                    sel = select_nonsimilar(shortlist, annotated_feats, config.batch_m, sel_seed)

        for item_id in sel.chosen:
            by_id[item_id].mark_annotated()

        snapshot = _training_snapshot(annotated(), t, seed, config.validation_fraction)
        dices = _evaluate(config, predictor, test_items, snapshot)
        point = summarize(dices, t, len(annotated()), pool_total)
        records.append(IterationRecord(t, sel, point, time.perf_counter() - t_start))

    return RunLog(config, tuple(records))


# ---------------------------------------------------------------------------
# Strategy comparison

_VARIABLE_FIELDS = ("strategy", "init_mode", "seed")


@dataclass(frozen=True)
class ComparisonReport:
    """Across-repeat learning curves plus each strategy's count-to-target."""

    dice_target: float
    repeats: int
    labels: tuple[str, ...]
    pool_total: int
    curves: dict[str, tuple[dict, ...]]
    counts_to_target: dict[str, tuple[int | None, ...]]

    def mean_count_to_target(self, label: str) -> float | None:
        reached = [c for c in self.counts_to_target[label] if c is not None]
        if not reached:
            return None
        return sum(reached) / len(reached)

    def fraction_to_target(self, label: str) -> float | None:
        mean = self.mean_count_to_target(label)
        return None if mean is None else mean / self.pool_total

    def to_dict(self) -> dict:
        return {
            "dice_target": self.dice_target,
            "repeats": self.repeats,
            "pool_total": self.pool_total,
            "labels": list(self.labels),
            "curves": {lb: list(self.curves[lb]) for lb in self.labels},
            "counts_to_target": {lb: list(self.counts_to_target[lb]) for lb in self.labels},
            "mean_count_to_target": {lb: self.mean_count_to_target(lb) for lb in self.labels},
            "fraction_to_target": {lb: self.fraction_to_target(lb) for lb in self.labels},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def curves_csv(self) -> str:
        lines = ["label,iteration,annotated_count,fraction,mean_dice,std_dice"]
        for lb in self.labels:
            for p in self.curves[lb]:
                lines.append(
                    f"{lb},{p['iteration']},{p['annotated_count']},"
                    f"{format(p['fraction'], '.17g')},{format(p['mean_dice'], '.17g')},"
                    f"{format(p['std_dice'], '.17g')}"
                )
        return "".join(line + "\n" for line in lines)

    def summary_csv(self) -> str:
        lines = ["label,repeats_reached,mean_count_to_target,fraction_to_target"]
        for lb in self.labels:
            reached = sum(1 for c in self.counts_to_target[lb] if c is not None)
            mean = self.mean_count_to_target(lb)
            frac = self.fraction_to_target(lb)
            lines.append(
                f"{lb},{reached},"
                f"{'' if mean is None else format(mean, '.17g')},"
                f"{'' if frac is None else format(frac, '.17g')}"
            )
        return "".join(line + "\n" for line in lines)


def _config_label(config: SimulationConfig) -> str:
    label = config.strategy.value
    if config.init_mode is not InitMode.RANDOM:
        label += f"+{config.init_mode.value}-init"
    return label


def count_to_target(points: Sequence[CurvePoint], target: float) -> int | None:
    """Smallest annotated count whose mean Dice first reaches the target."""
    for p in points:
        if p.mean_dice >= target:
            return p.annotated_count
    return None


def compare_strategies(
    configs: Sequence[SimulationConfig],
    repeats: int = 1,
    dice_target: float = DEFAULT_DICE_TARGET,
) -> ComparisonReport:
    """Run each config `repeats` times and aggregate learning curves.

    Configs may differ only in strategy, init_mode, and seed. Repeat r of
    every config runs with a child seed derived from (config.seed, r), so
    configs sharing a base seed see identical pools, test splits, and
    initial sets in repeat r and are paired.
    """
    if not configs:
        raise ValueError("need at least one config")
    if repeats < 1:
        raise ValueError("repeats must be positive")
    base = None
    for cfg in configs:
        d = cfg.to_dict()
        for f in _VARIABLE_FIELDS:
            d.pop(f)
        if base is None:
            base = d
        elif d != base:
            raise ValueError(
                "configs may differ only in strategy, init_mode, and seed"
            )

    labels = []
    for i, cfg in enumerate(configs):
        label = _config_label(cfg)
        if label in labels:
            label = f"{label}#{i}"
        labels.append(label)

    pool_cache: dict[int, list[PoolItem]] = {}
    curves: dict[str, tuple[dict, ...]] = {}
    counts: dict[str, tuple[int | None, ...]] = {}
    pool_total = configs[0].train_pool_size

    for label, cfg in zip(labels, configs):
        runs: list[list[CurvePoint]] = []
        run_counts: list[int | None] = []
        for r in range(repeats):
            run_seed = derive_seed(cfg.seed, "repeat", r)
            run_cfg = replace(cfg, seed=run_seed)
            if run_seed not in pool_cache:
                pool_cache[run_seed] = generate_phantom_pool(run_cfg)
            log = run_active_learning(run_cfg, pool=pool_cache[run_seed])
            points = log.curve()
            runs.append(points)
            run_counts.append(count_to_target(points, dice_target))

        n_points = len(runs[0])
        agg = []
        for k in range(n_points):
            col = np.array([run[k].mean_dice for run in runs])
            first = runs[0][k]
            agg.append(
                {
                    "iteration": first.iteration,
                    "annotated_count": first.annotated_count,
                    "fraction": first.fraction_of_pool,
                    "mean_dice": float(col.mean()),
                    "std_dice": float(col.std()),
                }
            )
        curves[label] = tuple(agg)
        counts[label] = tuple(run_counts)

    return ComparisonReport(
        dice_target=dice_target,
        repeats=repeats,
        labels=tuple(labels),
        pool_total=pool_total,
        curves=curves,
        counts_to_target=counts,
    )
