import dataclasses
import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

import numpy as np
import pytest

import physics
from coarse_mesh import coarsen, map_fine_to_coarse, remap_coarse_to_fine
from fd_solver import FineState, StabilityError, fd_step_liquid
from geometry import GridSpec, Label, ParticleSpec, PhaseGrid, generate_particle, partition_near_far
from precision import PrecisionMode
from transfer import (
    MatrixMismatchError,
    TransferMatrix,
    element_histogram,
    load_matrix,
    operand_scale,
    precondition,
    row_sum_residual,
    save_matrix,
    sink_voxels,
    superpose,
    superpose_sink,
)

DH = 10e-9


def model(size=24, r_p=6.0, pores=3, seed=7, **overrides):
    params = dataclasses.replace(physics.reference_params(), dt_macro=1e-5, V_far=None,
                                 total_mass_0=None, **overrides)
    grid = generate_particle(GridSpec(size, size, size, DH), ParticleSpec(r_p, pores, (2.0, 3.0), seed))
    params = physics.resolve_for_geometry(params, grid.n_solid, grid.n_liquid)
    return partition_near_far(grid, params), params


@pytest.fixture(scope="module")
def built():
    grid, params = model()
    cmap = coarsen(grid)
    return grid, params, cmap, precondition(grid, cmap, params)


def matrix(P, P_BC, mode=PrecisionMode.FULL):
    return TransferMatrix(np.asarray(P, dtype=np.float64), np.asarray(P_BC, dtype=np.float64),
                          1e-5, 20, mode, "0" * 16)


def test_sealed_liquid_box_single_group():
    grid = PhaseGrid.from_labels(np.full((5, 5, 5), Label.LIQUID_NEAR), DH)
    params = dataclasses.replace(physics.reference_params(), dt_macro=1e-5)
    cmap = coarsen(grid)
    M = precondition(grid, cmap, params)
    np.testing.assert_array_equal(M.P, [[1.0]])
    np.testing.assert_array_equal(M.P_BC, [0.0])
    assert M.n_pre == 20
    assert M.dt_encoded == 1e-5


def test_row_sums_and_bounds(built):
    _, _, cmap, M = built
    assert M.P.shape == (cmap.N, cmap.N)
    assert row_sum_residual(M) <= 1e-9
    assert M.P.min() >= 0.0
    assert M.P_BC.min() >= 0.0
    assert M.P.max() <= 1.0 + 1e-15


def test_superposition_matches_fd_evolution(built):
    grid, params, cmap, M = built
    rng = np.random.default_rng(12)
    for _ in range(5):
        C = rng.uniform(0, 2e-3, size=cmap.N)
        c_far = float(rng.uniform(0, 2e-3))
        state = FineState(remap_coarse_to_fine(C, cmap, np.zeros(grid.n_active)), c_far)
        for _ in range(params.n_pre):
            state = fd_step_liquid(state, grid, params, params.dt_fd)
        expected = map_fine_to_coarse(state.c, cmap)
        np.testing.assert_allclose(superpose(M, C, c_far), expected, rtol=1e-9)


def test_mirror_symmetric_geometry_commutes_with_reflection():
    grid, params = model(size=25, r_p=5.0, pores=0)
    cmap = coarsen(grid)
    M = precondition(grid, cmap, params)
    nb = 5
    bx = cmap.block_of % nb
    mirrored = cmap.block_of - bx + (nb - 1 - bx)
    perm = np.searchsorted(cmap.block_of, mirrored)
    np.testing.assert_array_equal(cmap.block_of[perm], mirrored)
    np.testing.assert_allclose(M.P[np.ix_(perm, perm)], M.P, rtol=0, atol=1e-12)
    np.testing.assert_allclose(M.P_BC[perm], M.P_BC, rtol=0, atol=1e-12)


def test_precondition_independent_of_workers():
    grid, params = model()
    cmap = coarsen(grid, 3)
    one = precondition(grid, cmap, params, workers=1)
    four = precondition(grid, cmap, params, workers=4)
    assert cmap.N > 64
    np.testing.assert_array_equal(one.P, four.P)
    np.testing.assert_array_equal(one.P_BC, four.P_BC)


def test_voxel_sources_change_columns_not_boundary(built):
    grid, params, cmap, M = built
    voxel = precondition(grid, cmap, dataclasses.replace(params, source_mode="voxel"))
    assert voxel.source_mode == "voxel"
    np.testing.assert_array_equal(voxel.P_BC, M.P_BC)
    assert not np.array_equal(voxel.P, M.P)


def test_precondition_rejects_unstable_substep(built):
    grid, params, cmap, _ = built
    with pytest.raises(StabilityError, match="exceeds the stability limit"):
        precondition(grid, cmap, dataclasses.replace(params, dt_fd=1e-6))


def test_storage_precision(built):
    M = built[3]
    half = M.as_precision(PrecisionMode.MIXED)
    assert half.P.dtype == np.float16
    assert half.precision_tag is PrecisionMode.MIXED
    assert M.as_precision(PrecisionMode.B32).P.dtype == np.float32


def test_superpose_identity():
    M = matrix(np.eye(3), np.zeros(3))
    C = np.array([1e-3, 2e-3, 3e-3])
    np.testing.assert_array_equal(superpose(M, C, 0.7), C)


@pytest.mark.parametrize(
    "mode, tol",
    [(PrecisionMode.FULL, 1e-14), (PrecisionMode.B32, 1e-6),
     (PrecisionMode.MIXED, 2e-3), (PrecisionMode.B16, 1e-2)],
)
def test_uniform_field_is_preserved(mode, tol):
    rng = np.random.default_rng(3)
    weights = rng.uniform(size=(8, 9))
    weights /= weights.sum(axis=1, keepdims=True)
    M = matrix(weights[:, :8], weights[:, 8]).as_precision(mode)
    kappa = 2.12e-3
    out = superpose(M, np.full(8, kappa), kappa, mode)
    np.testing.assert_allclose(out, kappa, rtol=tol)


def test_superpose_independent_of_workers():
    rng = np.random.default_rng(8)
    M = matrix(rng.uniform(0, 2e-3, size=(600, 600)), rng.uniform(size=600)).as_precision(PrecisionMode.MIXED)
    C = rng.uniform(0, 2e-3, size=600)
    one = superpose(M, C, 1e-3, PrecisionMode.MIXED, workers=1)
    three = superpose(M, C, 1e-3, PrecisionMode.MIXED, workers=3)
    np.testing.assert_array_equal(one, three)


def test_superpose_dimension_mismatch():
    with pytest.raises(MatrixMismatchError, match="shape"):
        superpose(matrix(np.eye(3), np.zeros(3)), np.ones(4), 0.0)


def test_histogram_identity():
    hist = element_histogram(matrix(np.eye(4), np.zeros(4)))
    assert hist.counts[-1] == 4
    assert sum(hist.counts) == 4
    assert hist.zeros == 12
    assert hist.below == 0


def test_histogram_single_decade_and_boundary():
    rng = np.random.default_rng(1)
    M = matrix(1e-3 * rng.uniform(1, 10, size=(5, 5)), np.full(5, 1e-20))
    hist = element_histogram(M)
    assert hist.occupied == 1
    assert hist.counts[hist.decades.index(-3)] == 25
    with_bc = element_histogram(M, include_boundary=True)
    assert with_bc.below == 5


def test_preconditioned_matrix_spans_decades(built):
    hist = element_histogram(built[3])
    assert hist.span >= 4


def test_row_sum_residual():
    M = matrix([[0.5, 0.25], [0.1, 0.1]], [0.25, 0.7])
    assert row_sum_residual(M) == pytest.approx(0.1)


def test_matrix_file(tmp_path, built):
    grid, params, _, M = built
    save_matrix(M, tmp_path / "m.bin")
    back = load_matrix(tmp_path / "m.bin", grid, params)
    np.testing.assert_array_equal(back.P, M.P)
    np.testing.assert_array_equal(back.P_BC, M.P_BC)
    assert back.geometry_hash == grid.hash
    assert back.n_pre == M.n_pre
    half = M.as_precision(PrecisionMode.B16)
    save_matrix(half, tmp_path / "h.bin")
    assert back.has_sink
    for name in ("P_sink", "P_sink_BC", "U", "U_BC"):
        np.testing.assert_array_equal(getattr(back, name), getattr(M, name))
    assert load_matrix(tmp_path / "h.bin").P.dtype == np.float16
    plain = precondition(grid, built[2], params, sink=False)
    save_matrix(plain, tmp_path / "p.bin")
    assert not load_matrix(tmp_path / "p.bin").has_sink


def test_matrix_file_mismatches(tmp_path, built):
    grid, params, _, M = built
    save_matrix(M, tmp_path / "m.bin")
    other, _ = model(seed=8)
    with pytest.raises(MatrixMismatchError) as exc:
        load_matrix(tmp_path / "m.bin", other)
    assert grid.hash in str(exc.value) and other.hash in str(exc.value)
    with pytest.raises(MatrixMismatchError, match="dt_macro"):
        load_matrix(tmp_path / "m.bin", grid, dataclasses.replace(params, dt_macro=2e-5))
    (tmp_path / "junk.bin").write_bytes(b"hello")
    with pytest.raises(MatrixMismatchError, match="not an FDIRW-MAT v1 file"):
        load_matrix(tmp_path / "junk.bin")


def sealed_cube_with_core(size=10, core=(4, 6)):
    labels = np.full((size, size, size), Label.LIQUID_NEAR)
    lo, hi = core
    labels[lo:hi, lo:hi, lo:hi] = Label.SOLID
    return PhaseGrid.from_labels(labels, DH)


def test_sink_voxels_touch_the_solid():
    grid = sealed_cube_with_core()
    drains = sink_voxels(grid)
    # one liquid voxel on each face of the 2x2x2 core
    assert drains.size == 24
    assert np.array_equal(drains, np.unique(grid.topology.interface_pairs[1]))


def test_sink_response_conserves_each_column():
    grid = sealed_cube_with_core()
    params = dataclasses.replace(physics.reference_params(), dt_macro=1e-5)
    cmap = coarsen(grid)
    M = precondition(grid, cmap, params)
    assert M.has_sink
    sizes = cmap.group_size.astype(np.float64)
    np.testing.assert_allclose(sizes @ M.P_sink + M.U.sum(axis=0), sizes, rtol=1e-12)
    assert M.U.min() >= 0.0 and M.P_sink.min() >= 0.0
    assert M.U.sum() > 0.0
    np.testing.assert_array_equal(M.U_BC, 0.0)
    # a sealed box with no-flux solid faces keeps its inventory
    np.testing.assert_allclose(sizes @ M.P, sizes, rtol=1e-12)


def test_sink_superposition_matches_drained_fd_evolution(built):
    grid, params, cmap, M = built
    drains = sink_voxels(grid)
    rng = np.random.default_rng(4)
    C = rng.uniform(0, 2e-3, size=cmap.N)
    c_far = 1.5e-3
    state = FineState(remap_coarse_to_fine(C, cmap, np.zeros(grid.n_active)), c_far)
    near = grid.topology.near
    taken = np.zeros(cmap.N)
    for _ in range(params.n_pre):
        state = fd_step_liquid(state, grid, params, params.dt_fd)
        liquid = state.c[near]
        taken += np.bincount(cmap.group_of[drains], weights=liquid[drains], minlength=cmap.N)
        state.c[near[drains]] = 0.0
    left, absorbed = superpose_sink(M, C, c_far)
    np.testing.assert_allclose(left, map_fine_to_coarse(state.c, cmap), rtol=1e-9, atol=1e-18)
    np.testing.assert_allclose(absorbed, taken, rtol=1e-9, atol=1e-18)


def test_sink_values_need_sink_response():
    with pytest.raises(MatrixMismatchError, match="sink"):
        matrix(np.eye(2), np.zeros(2)).sink_values()


def test_operand_scale_is_a_power_of_two():
    assert operand_scale(np.array([2e-3, 1e-3]), 5e-4) == 256.0
    assert operand_scale(np.zeros(3), 0.0) == 1.0
    assert operand_scale(np.array([0.75]), 0.0) == 1.0


def test_mixed_products_stay_accurate_for_small_concentrations():
    rng = np.random.default_rng(9)
    weights = rng.uniform(size=(16, 401))
    weights /= weights.sum(axis=1, keepdims=True)
    M = matrix(weights[:, :400], weights[:, 400])
    C = rng.uniform(1e-3, 2e-3, size=400)
    exact = superpose(M, C, 2e-3)
    mixed = superpose(M.as_precision(PrecisionMode.MIXED), C, 2e-3, PrecisionMode.MIXED)
    assert np.max(np.abs(mixed - exact) / exact) <= 2e-4
