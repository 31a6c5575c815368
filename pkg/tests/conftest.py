import numpy as np
import pytest

from alcore.similarity import FeatureVector
from alcore.volume import ProbabilityMap, SegmentationMask, VoxelGrid


def make_grid(values) -> VoxelGrid:
    return VoxelGrid(np.asarray(values, dtype=np.float64))


def const_grid(dims, value) -> VoxelGrid:
    return VoxelGrid(np.full(dims, value, dtype=np.float64))


def pmap(values) -> ProbabilityMap:
    return ProbabilityMap(make_grid(values))


def random_pmap(rng, dims) -> ProbabilityMap:
    return ProbabilityMap(VoxelGrid(rng.random(dims)))


def random_mask(rng, dims, p=0.5) -> SegmentationMask:
    return SegmentationMask(VoxelGrid((rng.random(dims) < p).astype(np.float64)))


def random_vectors(rng, count, dim, prefix="v") -> list[FeatureVector]:
    return [
        FeatureVector(f"{prefix}{i:03d}", rng.normal(size=dim)) for i in range(count)
    ]


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
