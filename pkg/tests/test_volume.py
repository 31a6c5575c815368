import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alcore.volume import (
    ProbabilityMap,
    SegmentationMask,
    VolumeFormatError,
    VoxelGrid,
    binarize,
    load_volume,
    save_volume,
    voxelwise_variance,
)
from conftest import const_grid, make_grid, pmap

import oracles


# --- VoxelGrid construction --------------------------------------------------

def test_grid_rejects_nan():
    values = np.zeros((2, 2, 2))
    values[0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="finite"):
        VoxelGrid(values)


def test_grid_rejects_inf():
    values = np.zeros((2, 2, 2))
    values[1, 1, 1] = np.inf
    with pytest.raises(ValueError):
        VoxelGrid(values)


def test_grid_rejects_wrong_rank():
    with pytest.raises(ValueError, match="3D"):
        VoxelGrid(np.zeros((2, 2)))


def test_grid_is_immutable():
    g = const_grid((2, 2, 2), 0.5)
    with pytest.raises(ValueError):
        g.values[0, 0, 0] = 1.0


def test_grid_copies_input():
    src = np.zeros((2, 2, 2))
    g = VoxelGrid(src)
    src[0, 0, 0] = 7.0
    assert g.values[0, 0, 0] == 0.0


def test_probability_map_bounds():
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        ProbabilityMap(const_grid((2, 2, 2), 1.5))
    ProbabilityMap(const_grid((2, 2, 2), 1.0))  # boundary ok


def test_mask_requires_binary_values():
    with pytest.raises(ValueError, match="0 or 1"):
        SegmentationMask(const_grid((2, 2, 2), 0.5))


# --- VOL1 round-trip ---------------------------------------------------------

def test_load_constant_half(tmp_path):
    path = tmp_path / "half.vol"
    payload = struct.pack("<8f", *([0.5] * 8))
    path.write_bytes(b"VOL1" + struct.pack("<III", 2, 2, 2) + payload)
    g = load_volume(path)
    assert g.dims == (2, 2, 2)
    assert np.all(g.values == 0.5)


def test_round_trip_random_grid(tmp_path, rng):
    g = VoxelGrid(rng.random((4, 5, 6)).astype(np.float32))
    path = tmp_path / "g.vol"
    save_volume(g, path)
    assert load_volume(path) == g


def test_save_is_deterministic(tmp_path, rng):
    g = VoxelGrid(rng.random((3, 3, 3)).astype(np.float32))
    save_volume(g, tmp_path / "a.vol")
    save_volume(g, tmp_path / "b.vol")
    assert (tmp_path / "a.vol").read_bytes() == (tmp_path / "b.vol").read_bytes()


def test_save_rejects_corrupted_nan_grid(tmp_path):
    g = const_grid((2, 2, 2), 0.5)
    bad = g.values.copy()
    bad[0, 0, 0] = np.nan
    object.__setattr__(g, "_values", bad)  # simulate corruption past the constructor
    with pytest.raises(ValueError, match="non-finite"):
        save_volume(g, tmp_path / "bad.vol")
    assert not (tmp_path / "bad.vol").exists()


def test_row_major_layout_on_disk(tmp_path):
    # x slowest, z fastest: the value at [1,0,0] is the 5th float of a 2x2x2 payload
    values = np.arange(8, dtype=np.float64).reshape(2, 2, 2)
    path = tmp_path / "order.vol"
    save_volume(VoxelGrid(values), path)
    raw = np.frombuffer(path.read_bytes()[16:], dtype="<f4")
    assert raw[4] == values[1, 0, 0]
    assert raw[1] == values[0, 0, 1]


# --- VOL1 errors name byte offsets -------------------------------------------

def test_bad_magic_offset_zero(tmp_path):
    path = tmp_path / "bad.vol"
    path.write_bytes(b"NOPE" + struct.pack("<III", 1, 1, 1) + struct.pack("<f", 0.0))
    with pytest.raises(VolumeFormatError) as err:
        load_volume(path)
    assert err.value.offset == 0


def test_zero_dimension_offset(tmp_path):
    path = tmp_path / "bad.vol"
    path.write_bytes(b"VOL1" + struct.pack("<III", 2, 0, 2))
    with pytest.raises(VolumeFormatError) as err:
        load_volume(path)
    assert err.value.offset == 8


def test_truncated_payload(tmp_path):
    # dims say 2x2x2 but only 7 values present
    path = tmp_path / "short.vol"
    path.write_bytes(b"VOL1" + struct.pack("<III", 2, 2, 2) + struct.pack("<7f", *range(7)))
    with pytest.raises(VolumeFormatError, match="truncated") as err:
        load_volume(path)
    assert err.value.offset == 16 + 7 * 4


def test_truncated_header(tmp_path):
    path = tmp_path / "short.vol"
    path.write_bytes(b"VOL1" + struct.pack("<II", 2, 2))
    with pytest.raises(VolumeFormatError, match="header") as err:
        load_volume(path)
    assert err.value.offset == 12


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "long.vol"
    path.write_bytes(
        b"VOL1" + struct.pack("<III", 1, 1, 1) + struct.pack("<f", 0.5) + b"xx"
    )
    with pytest.raises(VolumeFormatError, match="trailing") as err:
        load_volume(path)
    assert err.value.offset == 20


def test_nonfinite_payload_offset(tmp_path):
    path = tmp_path / "nan.vol"
    vals = [0.0, float("nan"), 0.0, 0.0]
    path.write_bytes(b"VOL1" + struct.pack("<III", 1, 2, 2) + struct.pack("<4f", *vals))
    with pytest.raises(VolumeFormatError, match="non-finite") as err:
        load_volume(path)
    assert err.value.offset == 16 + 4


@settings(max_examples=50, deadline=None)
@given(
    dims=st.tuples(
        st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)
    ),
    seed=st.integers(0, 2**32 - 1),
)
def test_round_trip_property(tmp_path_factory, dims, seed):
    # float32-representable values, the domain of disk storage
    rng = np.random.default_rng(seed)
    g = VoxelGrid(rng.random(dims).astype(np.float32))
    path = tmp_path_factory.mktemp("vol") / "g.vol"
    save_volume(g, path)
    assert load_volume(path) == g


# --- voxelwise variance ------------------------------------------------------

def test_variance_identical_maps_is_zero():
    maps = [pmap(np.full((2, 2, 2), 0.3)) for _ in range(4)]
    assert np.all(voxelwise_variance(maps).values == 0.0)


def test_variance_of_zero_one_pair():
    a = pmap([[[0.0]]])
    b = pmap([[[1.0]]])
    assert voxelwise_variance([a, b]).values[0, 0, 0] == 0.25


def test_variance_hand_computed():
    # {0.2, 0.4, 0.6, 0.8} -> population variance 0.05
    maps = [pmap([[[v]]]) for v in (0.2, 0.4, 0.6, 0.8)]
    got = voxelwise_variance(maps).values[0, 0, 0]
    assert got == pytest.approx(0.05, abs=1e-15)
    assert got == pytest.approx(
        oracles.population_variance([0.2, 0.4, 0.6, 0.8]), abs=1e-15
    )


def test_variance_matches_two_pass_oracle(rng):
    dims = (3, 4, 2)
    maps = [ProbabilityMap(VoxelGrid(rng.random(dims))) for _ in range(5)]
    got = voxelwise_variance(maps).values
    flat_maps = [m.grid.values.ravel().tolist() for m in maps]
    expected = oracles.voxelwise_variance_grid(flat_maps)
    np.testing.assert_allclose(got.ravel(), expected, atol=1e-12, rtol=0)


def test_variance_rejects_single_map():
    with pytest.raises(ValueError, match="at least 2"):
        voxelwise_variance([pmap([[[0.5]]])])


def test_variance_rejects_dim_mismatch():
    a = pmap(np.zeros((2, 2, 2)))
    b = pmap(np.zeros((2, 2, 3)))
    with pytest.raises(ValueError, match="dims"):
        voxelwise_variance([a, b])


def test_variance_permutation_invariant(rng):
    dims = (2, 3, 2)
    maps = [ProbabilityMap(VoxelGrid(rng.random(dims))) for _ in range(4)]
    forward = voxelwise_variance(maps).values
    backward = voxelwise_variance(maps[::-1]).values
    np.testing.assert_array_equal(forward, backward)


def test_variance_bounded_by_quarter(rng):
    dims = (4, 4, 4)
    for _ in range(20):
        maps = [ProbabilityMap(VoxelGrid(rng.random(dims))) for _ in range(3)]
        assert voxelwise_variance(maps).values.max() <= 0.25


# --- binarize ----------------------------------------------------------------

def test_binarize_threshold_is_inclusive():
    m = binarize(pmap([[[0.5, 0.49]]]), threshold=0.5)
    assert m.grid.values[0, 0, 0] == 1.0
    assert m.grid.values[0, 0, 1] == 0.0
