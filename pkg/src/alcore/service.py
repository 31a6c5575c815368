"""HTTP API wrapping the core operations for long-running, multi-client use.

Request/response bodies are pydantic models; volumes travel as flat
row-major value lists with explicit dims (the JSON twin of the VOL1 file
format). Domain errors from the core map to HTTP 400 with the core's
message; malformed bodies are FastAPI's usual 422.

Run with `alcore serve` or any ASGI server via `alcore.service:create_app`.
"""

from __future__ import annotations

from typing import Literal

import numpy as np
from fastapi import FastAPI
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import __version__
from .initialization import (
    DEFAULT_BINS,
    FirstOrderFeatures,
    extract_first_order,
    normalize_features,
    select_diverse_initial,
)
from .metrics import dice
from .selection import (
    select_nonsimilar,
    select_random,
    select_representative,
    select_topk_uncertain,
    SelectionResult,
    SelectionStrategy,
)
from .similarity import FeatureVector
from .simulation import (
    DEFAULT_DICE_TARGET,
    SimulationConfig,
    compare_strategies,
    run_active_learning,
)
from .uncertainty import (
    DEFAULT_TOP_FRACTION,
    UncertaintyMethod,
    UncertaintyScore,
    bootstrap_score,
    dropout_topfraction_score,
    margins_score,
    rank_by_uncertainty,
)
from .volume import ProbabilityMap, SegmentationMask, VoxelGrid


class VolumePayload(BaseModel):
    """Dense 3D grid: dims plus row-major values (x slowest, z fastest)."""

    dims: tuple[int, int, int]
    values: list[float]

    def to_grid(self) -> VoxelGrid:
        nx, ny, nz = self.dims
        if len(self.values) != nx * ny * nz:
            raise ValueError(
                f"expected {nx * ny * nz} values for dims {self.dims}, got {len(self.values)}"
            )
        return VoxelGrid(np.array(self.values, dtype=np.float64).reshape(self.dims))


class ItemMaps(BaseModel):
    item_id: str
    maps: list[VolumePayload] = Field(min_length=1)


class ScoreRequest(BaseModel):
    method: Literal["margins", "bootstrap", "dropout"]
    items: list[ItemMaps] = Field(min_length=1)
    top_fraction: float = DEFAULT_TOP_FRACTION


class ScoreEntry(BaseModel):
    item_id: str
    method: str
    score: float
    n_predictions: int


class ScoreResponse(BaseModel):
    scores: list[ScoreEntry]
    ranking: list[str]


class FeatureRow(BaseModel):
    item_id: str
    values: list[float] = Field(min_length=1)

    def to_vector(self) -> FeatureVector:
        return FeatureVector(self.item_id, self.values)


class SelectRequest(BaseModel):
    strategy: Literal["random", "topk", "representative", "nonsimilar"]
    m: int
    seed: int = 0
    k: int | None = None
    scores: list[ScoreEntry] | None = None
    features: list[FeatureRow] | None = None
    annotated: list[FeatureRow] | None = None


class SelectionResponse(BaseModel):
    strategy: str
    seed: int
    chosen: list[str]
    scores: dict[str, float]

    @classmethod
    def from_result(cls, sel: SelectionResult) -> "SelectionResponse":
        return cls(**sel.to_dict())


class FirstOrderRow(BaseModel):
    item_id: str
    mean: float
    median: float
    entropy: float
    energy: float

    def to_features(self) -> FirstOrderFeatures:
        return FirstOrderFeatures(self.item_id, self.mean, self.median, self.entropy, self.energy)


class InitRequest(BaseModel):
    mode: Literal["random", "diverse"] = "diverse"
    n: int
    seed: int = 0
    features: list[FirstOrderRow] = Field(min_length=1)


class FeatureItem(BaseModel):
    item_id: str
    volume: VolumePayload
    mask: VolumePayload | None = None


class FeaturesRequest(BaseModel):
    items: list[FeatureItem] = Field(min_length=1)
    bins: int = DEFAULT_BINS
    normalize: bool = False


class FeaturesResponse(BaseModel):
    rows: list[FirstOrderRow]
    normalized: bool


class DicePair(BaseModel):
    item_id: str
    pred: VolumePayload
    truth: VolumePayload


class DiceRequest(BaseModel):
    pairs: list[DicePair] = Field(min_length=1)


class DiceEntry(BaseModel):
    item_id: str
    value: float


class DiceResponse(BaseModel):
    scores: list[DiceEntry]
    mean: float


class SimulateRequest(BaseModel):
    config: dict


class IterationOut(BaseModel):
    iteration: int
    selection: SelectionResponse
    curve: dict


class RunLogResponse(BaseModel):
    config: dict
    records: list[IterationOut]


class CompareRequest(BaseModel):
    configs: list[dict] = Field(min_length=1)
    repeats: int = 1
    dice_target: float = DEFAULT_DICE_TARGET


class HealthResponse(BaseModel):
    status: str
    version: str


def _score_items(req: ScoreRequest) -> list[UncertaintyScore]:
    method = UncertaintyMethod(req.method)
    out = []
    for item in req.items:
        maps = [ProbabilityMap(m.to_grid()) for m in item.maps]
        if method is UncertaintyMethod.MARGINS:
            if len(maps) != 1:
                raise ValueError(f"{item.item_id}: margins needs exactly one map")
            out.append(margins_score(maps[0], item_id=item.item_id))
        elif method is UncertaintyMethod.BOOTSTRAP:
            out.append(bootstrap_score(maps, item_id=item.item_id))
        else:
            out.append(dropout_topfraction_score(maps, req.top_fraction, item_id=item.item_id))
    return out


def create_app() -> FastAPI:
    app = FastAPI(
        title="alcore",
        version=__version__,
        description="Active-learning query strategies over 3D probability maps and feature vectors.",
    )

    @app.exception_handler(ValueError)
    async def _domain_error(request, exc: ValueError):
        detail = getattr(exc, "errors", None) or str(exc)
        return JSONResponse(status_code=400, content={"detail": detail})

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok", version=__version__)

    @app.post("/score", response_model=ScoreResponse)
    def score(req: ScoreRequest):
        scores = _score_items(req)
        ranking = rank_by_uncertainty(scores)
        by_id = {s.item_id: s for s in scores}
        return ScoreResponse(
            scores=[
                ScoreEntry(
                    item_id=i,
                    method=by_id[i].method.value,
                    score=by_id[i].score,
                    n_predictions=by_id[i].n_predictions,
                )
                for i in ranking
            ],
            ranking=ranking,
        )

    @app.post("/select", response_model=SelectionResponse)
    def select(req: SelectRequest):
        strategy = SelectionStrategy(req.strategy)
        scores = (
            [
                UncertaintyScore(s.item_id, s.score, UncertaintyMethod(s.method), s.n_predictions)
                for s in req.scores
            ]
            if req.scores is not None
            else None
        )
        features = [f.to_vector() for f in req.features] if req.features is not None else None

        if strategy is SelectionStrategy.RANDOM:
            if scores is not None:
                pool = [s.item_id for s in scores]
            elif features is not None:
                pool = [f.item_id for f in features]
            else:
                raise ValueError("random selection needs scores or features for the pool")
            sel = select_random(pool, req.m, req.seed)
        elif strategy is SelectionStrategy.TOP_K:
            if scores is None:
                raise ValueError("topk selection needs scores")
            sel = select_topk_uncertain(scores, req.m)
        else:
            if scores is None or features is None or req.k is None:
                raise ValueError(f"{strategy.value} selection needs scores, features, and k")
            ranked = rank_by_uncertainty(scores)
            if req.k > len(ranked):
                raise ValueError(f"k ({req.k}) exceeds the scored pool ({len(ranked)})")
            by_id = {f.item_id: f for f in features}
            missing = [i for i in ranked[: req.k] if i not in by_id]
            if missing:
                raise ValueError(f"feature rows missing for shortlisted ids: {missing}")
            shortlist = [by_id[i] for i in ranked[: req.k]]
            if strategy is SelectionStrategy.REPRESENTATIVE:
                sel = select_representative(shortlist, req.m, req.seed)
            else:
                annotated = [f.to_vector() for f in (req.annotated or [])]
                sel = select_nonsimilar(shortlist, annotated, req.m, req.seed)
        return SelectionResponse.from_result(sel)

    @app.post("/init", response_model=SelectionResponse)
    def init(req: InitRequest):
        raw = [r.to_features() for r in req.features]
        if req.mode == "random":
            sel = select_random([f.item_id for f in raw], req.n, req.seed)
        else:
            sel = select_diverse_initial(normalize_features(raw), req.n, req.seed)
        return SelectionResponse.from_result(sel)

    @app.post("/features", response_model=FeaturesResponse)
    def features(req: FeaturesRequest):
        rows = []
        for item in req.items:
            vol = item.volume.to_grid()
            if item.mask is not None:
                mask = SegmentationMask(item.mask.to_grid())
            else:
                mask = SegmentationMask(VoxelGrid(np.ones(vol.dims)))
            rows.append(extract_first_order(vol, mask, req.bins, item.item_id))
        if req.normalize:
            matrix = normalize_features(rows)
            out = [
                FirstOrderRow(
                    item_id=item_id, mean=row[0], median=row[1], entropy=row[2], energy=row[3]
                )
                for item_id, row in zip(matrix.item_ids, matrix.rows)
            ]
        else:
            out = [
                FirstOrderRow(
                    item_id=r.item_id,
                    mean=r.mean,
                    median=r.median,
                    entropy=r.entropy,
                    energy=r.energy,
                )
                for r in rows
            ]
        return FeaturesResponse(rows=out, normalized=req.normalize)

    @app.post("/dice", response_model=DiceResponse)
    def dice_endpoint(req: DiceRequest):
        scores = [
            dice(
                SegmentationMask(p.pred.to_grid()),
                SegmentationMask(p.truth.to_grid()),
                item_id=p.item_id,
            )
            for p in req.pairs
        ]
        mean = sum(s.value for s in scores) / len(scores)
        return DiceResponse(
            scores=[DiceEntry(item_id=s.item_id, value=s.value) for s in scores],
            mean=mean,
        )

    @app.post("/simulate", response_model=RunLogResponse)
    def simulate(req: SimulateRequest):
        config = SimulationConfig.from_dict(req.config)
        log = run_active_learning(config)
        return RunLogResponse(
            config=log.config.to_dict(),
            records=[
                IterationOut(
                    iteration=r.iteration,
                    selection=SelectionResponse(**r.selection.to_dict()),
                    curve=r.curve.to_dict(),
                )
                for r in log.records
            ],
        )

    @app.post("/compare")
    def compare(req: CompareRequest):
        configs = [SimulationConfig.from_dict(c) for c in req.configs]
        report = compare_strategies(configs, repeats=req.repeats, dice_target=req.dice_target)
        return report.to_dict()

    return app


app = create_app()
