import dataclasses
import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

import numpy as np
import pytest

import physics
from coarse_mesh import coarsen, map_fine_to_coarse, remap_coarse_to_fine, save_coarse_map
from geometry import GeometryError, GridSpec, Label, ParticleSpec, PhaseGrid, generate_particle
from precision import PrecisionMode, round_b32

DH = 10e-9


@pytest.fixture(scope="module")
def grid():
    return generate_particle(GridSpec(24, 24, 24, DH), ParticleSpec(6.0, 3, (2.0, 3.0), 7))


def test_groups_partition_near_field(grid):
    cmap = coarsen(grid)
    assert cmap.n_liquid == grid.n_liquid
    assert sorted(cmap.order.tolist()) == list(range(grid.n_liquid))
    assert cmap.group_size.sum() == grid.n_liquid
    assert cmap.group_size.max() <= 125
    assert np.all(cmap.group_size > 0)
    assert np.all(np.diff(cmap.block_of) > 0)


def test_members_share_a_block(grid):
    cmap = coarsen(grid, 4)
    topo = grid.topology
    z, y, x = np.unravel_index(topo.active[topo.near], grid.spec.shape)
    for members in cmap.group_members[:20]:
        assert len({(a // 4, b // 4, c // 4) for a, b, c in zip(z[members], y[members], x[members])}) == 1
        assert np.all(np.diff(members) > 0)


def test_factor_one_is_fine_mesh(grid):
    cmap = coarsen(grid, 1)
    assert cmap.N == grid.n_liquid
    assert np.all(cmap.group_size == 1)


def test_constant_field_maps_to_constant(grid):
    cmap = coarsen(grid)
    C = map_fine_to_coarse(np.full(grid.n_liquid, 2.12e-3), cmap)
    np.testing.assert_allclose(C, 2.12e-3, rtol=1e-14)


def test_remap_then_map_is_identity(grid):
    cmap = coarsen(grid)
    rng = np.random.default_rng(4)
    C = rng.uniform(0, 1e-3, size=cmap.N)
    np.testing.assert_allclose(map_fine_to_coarse(remap_coarse_to_fine(C, cmap), cmap), C, rtol=1e-14)


def test_map_accepts_active_field_and_columns(grid):
    cmap = coarsen(grid)
    rng = np.random.default_rng(5)
    c = rng.uniform(size=grid.n_active)
    from_active = map_fine_to_coarse(c, cmap)
    from_near = map_fine_to_coarse(c[grid.topology.near], cmap)
    np.testing.assert_array_equal(from_active, from_near)
    stacked = map_fine_to_coarse(np.stack([c[grid.topology.near]] * 2, axis=1), cmap)
    assert stacked.shape == (cmap.N, 2)
    np.testing.assert_allclose(stacked[:, 1], from_near, rtol=1e-13)
    with pytest.raises(ValueError, match="matches neither"):
        map_fine_to_coarse(np.ones(3), cmap)


def test_reduced_mapping_runs_in_binary32(grid):
    cmap = coarsen(grid)
    c = np.random.default_rng(6).uniform(size=grid.n_liquid)
    C32 = map_fine_to_coarse(c, cmap, PrecisionMode.MIXED)
    assert C32.dtype == np.float64
    np.testing.assert_array_equal(round_b32(C32), C32)
    np.testing.assert_allclose(C32, map_fine_to_coarse(c, cmap), rtol=1e-6)


def test_remap_keeps_solid_entries(grid):
    cmap = coarsen(grid)
    c = np.arange(grid.n_active, dtype=np.float64)
    out = remap_coarse_to_fine(np.zeros(cmap.N), cmap, c)
    topo = grid.topology
    assert np.all(out[topo.near] == 0.0)
    np.testing.assert_array_equal(out[topo.solid], c[topo.solid])
    assert c[topo.near].sum() > 0


def test_empty_near_field_raises():
    labels = np.full((8, 8, 8), Label.SOLID)
    with pytest.raises(GeometryError, match="no near-field"):
        coarsen(PhaseGrid.from_labels(labels, DH))


def test_coarsen_factor_from_params(grid):
    params = dataclasses.replace(physics.reference_params(), coarsen_factor=3)
    assert coarsen(grid, params.coarsen_factor).factor == 3


def test_save_coarse_map(grid, tmp_path):
    cmap = coarsen(grid)
    save_coarse_map(cmap, grid, tmp_path / "groups.bin")
    raw = (tmp_path / "groups.bin").read_bytes()
    head, body = raw.split(b"\ndata\n", 1)
    assert head.startswith(b"FDIRW-CMAP v1")
    assert f"groups {cmap.N}".encode() in head
    per_voxel = np.frombuffer(body, dtype="<i4")
    assert per_voxel.size == grid.labels.size
    assert np.count_nonzero(per_voxel >= 0) == grid.n_liquid
    assert per_voxel.max() == cmap.N - 1


@pytest.mark.parametrize("edge, groups", [(5, 1), (10, 8)])
def test_all_liquid_cube_groups(edge, groups):
    cube = PhaseGrid.from_labels(np.full((edge, edge, edge), Label.LIQUID_NEAR), DH)
    cmap = coarsen(cube)
    assert cmap.N == groups
    assert np.all(cmap.group_size == 125)
