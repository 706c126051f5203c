import dataclasses
import sys
from collections import Counter
from pathlib import Path
sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

import numpy as np
import pytest

import physics
from fd_solver import (
    FineState,
    KineticsRecord,
    StabilityError,
    advance_solid,
    advance_solid_interface,
    fd_run_baseline,
    fd_step_liquid,
    fd_step_solid,
    fd_step_solid_interface,
    interface_transfer,
    initial_state,
    load_field,
    save_field,
    step_count,
    substep_count,
)
from geometry import GridSpec, Label, ParticleSpec, PhaseGrid, generate_particle, partition_near_far

DH = 10e-9


def short_params(**overrides):
    """Reference physics with a 20-substep macro step and an auto-sized reservoir."""
    return dataclasses.replace(physics.reference_params(), dt_macro=1e-5, V_far=None,
                               total_mass_0=None, **overrides)


def small_model(pores=3, seed=7):
    params = short_params()
    grid = generate_particle(GridSpec(24, 24, 24, DH), ParticleSpec(6.0, pores, (2.0, 3.0), seed))
    params = physics.resolve_for_geometry(params, grid.n_solid, grid.n_liquid)
    return partition_near_far(grid, params), params


def box(labels, n_far=100.0):
    return PhaseGrid.from_labels(np.asarray(labels), DH, n_far_equiv=n_far)


def test_sealed_box_conserves_liquid():
    grid = box(np.full((4, 4, 4), Label.LIQUID_NEAR))
    params = physics.reference_params()
    rng = np.random.default_rng(0)
    state = FineState(rng.uniform(0, 1e-3, size=64), 0.0)
    total = state.c.sum()
    for _ in range(50):
        state = fd_step_liquid(state, grid, params, params.dt_fd)
    assert state.c.sum() == pytest.approx(total, rel=1e-13)
    assert state.c.std() < 1e-4


def test_uniform_field_matching_far_value_is_stationary():
    labels = np.full((3, 3, 5), Label.LIQUID_NEAR)
    labels[:, :, 0] = Label.FAR
    labels[:, :, -1] = Label.FAR
    grid = box(labels)
    params = physics.reference_params()
    state = FineState(np.full(grid.n_active, 2e-3), 2e-3)
    after = fd_step_liquid(state, grid, params, params.dt_fd)
    np.testing.assert_allclose(after.c, 2e-3, rtol=1e-15)


def test_liquid_step_stability_error_names_limit():
    grid = box(np.full((2, 2, 2), Label.LIQUID_NEAR))
    params = physics.reference_params()
    state = FineState(np.zeros(8), 0.0)
    limit = physics.stability_limit(params, physics.Phase.L)
    with pytest.raises(StabilityError, match=repr(limit)):
        fd_step_liquid(state, grid, params, 2 * limit)
    with pytest.raises(StabilityError, match="positive"):
        fd_step_liquid(state, grid, params, 0.0)


def test_two_voxel_interface_exchange():
    grid = box([[[Label.SOLID, Label.LIQUID_NEAR]]])
    p = physics.reference_params()
    c_s, c_l, dt = 1e-6, 2.12e-3, 1e-12
    state = FineState(np.array([c_s, c_l]), 0.0)
    after = fd_step_solid_interface(state, grid, p, dt)
    d_if = 2 * p.D_S * p.D_L / (p.D_S + p.D_L)
    mu_gap = p.A_L_over_RT * (c_l - p.c_L_eq) - p.A_S_over_RT * (c_s - p.c_S_eq)
    reaction = p.k * ((c_l - p.c_L_eq) / p.c_L_eq) * ((p.c_S_eq - c_s) / p.c_S_eq)
    q = d_if * dt / p.dh ** 2 * mu_gap + reaction * dt
    assert after.c[0] == pytest.approx(c_s + q, rel=1e-12)
    assert after.c[1] == pytest.approx(c_l - q, rel=1e-12)
    assert after.c.sum() == pytest.approx(c_s + c_l, rel=1e-15)


def test_interface_clamp_counts_and_empties_liquid():
    grid = box([[[Label.SOLID, Label.LIQUID_NEAR, Label.SOLID]]])
    p = physics.reference_params()
    state = FineState(np.array([1e-6, 1e-9, 1e-6]), 0.0)
    counters = Counter()
    after = fd_step_solid_interface(state, grid, p, 4e-4, counters)
    assert counters["clamped_transfers"] == 1
    assert after.c[1] == pytest.approx(0.0, abs=1e-22)
    assert after.c.sum() == pytest.approx(state.c.sum(), rel=1e-12)
    assert after.c[0] == pytest.approx(after.c[2])


def test_solid_interface_rejects_large_step():
    grid = box([[[Label.SOLID, Label.LIQUID_NEAR]]])
    p = physics.reference_params()
    with pytest.raises(StabilityError, match="solid/interface"):
        fd_step_solid_interface(FineState(np.array([0.0, 1e-3]), 0.0), grid, p, p.dt_macro)


def test_substep_count_at_reference_values():
    p = physics.reference_params()
    assert substep_count(p, p.dt_macro) == 3
    assert substep_count(p, 1e-5) == 1


def test_advance_solid_interface_covers_macro_step():
    grid = box([[[Label.SOLID, Label.LIQUID_NEAR]]])
    p = physics.reference_params()
    state = FineState(np.array([1e-6, 2.12e-3]), 0.0)
    after = advance_solid_interface(state, grid, p, p.dt_macro, Counter())
    assert after.c[0] > state.c[0]
    assert after.c.sum() == pytest.approx(state.c.sum(), rel=1e-12)


def test_initial_state_conserves_total_mass():
    grid, params = small_model()
    state = initial_state(grid, params)
    assert state.totals(grid)[2] == pytest.approx(params.total_mass_0, rel=1e-14)
    assert state.c_far == pytest.approx(params.c_L_0, rel=1e-12)
    assert np.all(state.solid_values(grid) == params.c_S_0)


def test_step_count():
    assert step_count(0.0, 1e-3, 5e-4) == 2
    assert step_count(0.0, 3 * 0.1, 0.1) == 3
    assert step_count(0.0, 2.5e-4, 1e-4) == 3
    assert step_count(1.0, 1.0, 1e-4) == 0
    with pytest.raises(ValueError, match="precedes"):
        step_count(1.0, 0.5, 1e-4)


def test_baseline_run_kinetics():
    grid, params = small_model()
    state = initial_state(grid, params)
    counters = Counter()
    final, record = fd_run_baseline(state, grid, params, 10 * params.dt_macro, counters=counters)
    assert len(record) == 10
    assert final.t == pytest.approx(10 * params.dt_macro)
    assert record.t[0] == pytest.approx(params.dt_macro)
    assert np.all(np.diff(record.t) > 0)
    assert record.max_conservation_error(params.total_mass_0) <= 1e-10
    assert np.all(np.diff(record.Q_S) >= 0)
    assert np.all(np.diff(record.c_far) <= 1e-12 * record.c_far[0])
    assert record.solid_fraction[-1] > record.solid_fraction[0]
    assert record.Q_S_e == params.c_S_eq * grid.n_solid


def test_baseline_stride_and_zero_length():
    grid, params = small_model()
    state = initial_state(grid, params)
    _, record = fd_run_baseline(state, grid, params, 4 * params.dt_macro, stride=5)
    assert len(record) == 16
    same, empty = fd_run_baseline(state, grid, params, state.t)
    assert len(empty) == 0
    assert np.array_equal(same.c, state.c)


def test_kinetics_csv(tmp_path):
    record = KineticsRecord(10.0, 5.0)
    record.t += [0.1, 0.2]
    record.Q_S += [1.0, 2.0]
    record.Q_L_near += [4.0, 3.0]
    record.c_far += [0.5, 0.25]
    record.Q_total += [9.0, 9.0]
    record.write_csv(tmp_path / "k.csv")
    header = (tmp_path / "k.csv").read_text(encoding="utf-8").splitlines()[0]
    assert header == "t,Q_S,Q_L_near,c_far,Q_total"
    back = KineticsRecord.read_csv(tmp_path / "k.csv", 10.0, 5.0)
    assert back.Q_S == record.Q_S
    np.testing.assert_allclose(back.solid_fraction, [0.1, 0.2])
    np.testing.assert_allclose(back.liquid_fraction, [0.8, 0.6])


def test_field_dump(tmp_path):
    grid, params = small_model()
    state = dataclasses.replace(initial_state(grid, params), t=0.25)
    save_field(state, grid, tmp_path / "f.bin")
    back = load_field(tmp_path / "f.bin", grid)
    assert back.t == 0.25
    assert back.c_far == state.c_far
    assert np.array_equal(back.c, state.c)
    other, _ = small_model(seed=8)
    with pytest.raises(ValueError, match="does not match"):
        load_field(tmp_path / "f.bin", other)


def test_single_voxel_stencil():
    grid = box(np.full((3, 3, 3), Label.LIQUID_NEAR))
    params = physics.reference_params()
    c = np.zeros(27)
    c[13] = 1.0
    after = fd_step_liquid(FineState(c, 0.0), grid, params, params.dt_fd)
    lam = physics.effective_diffusivity(params, physics.Phase.L) * params.dt_fd / params.dh ** 2
    assert lam == pytest.approx(0.1)
    assert after.c[13] == pytest.approx(1 - 6 * lam, rel=1e-14)
    for neighbour in (4, 10, 12, 14, 16, 22):
        assert after.c[neighbour] == pytest.approx(lam, rel=1e-14)
    assert np.count_nonzero(after.c) == 7


def test_liquid_step_is_linear():
    grid, params = small_model()
    rng = np.random.default_rng(5)
    a = FineState(rng.uniform(0, 2e-3, size=grid.n_active), 1.0e-3)
    b = FineState(rng.uniform(0, 2e-3, size=grid.n_active), 2.0e-3)
    alpha, beta = 0.3, -1.7
    mixed = FineState(alpha * a.c + beta * b.c, alpha * a.c_far + beta * b.c_far)
    step = fd_step_liquid(mixed, grid, params, params.dt_fd)
    expected = (alpha * fd_step_liquid(a, grid, params, params.dt_fd).c
                + beta * fd_step_liquid(b, grid, params, params.dt_fd).c)
    near = grid.topology.near
    np.testing.assert_allclose(step.c[near], expected[near], rtol=1e-12, atol=1e-18)


def test_liquid_step_keeps_values_within_bounds():
    grid, params = small_model()
    rng = np.random.default_rng(6)
    state = FineState(rng.uniform(1e-4, 2e-3, size=grid.n_active), 5e-4)
    near = grid.topology.near
    lo = min(state.c[near].min(), state.c_far)
    hi = max(state.c[near].max(), state.c_far)
    for _ in range(10):
        state = fd_step_liquid(state, grid, params, params.dt_fd)
        assert state.c[near].min() >= lo * (1 - 1e-12)
        assert state.c[near].max() <= hi * (1 + 1e-12)


def test_interface_transfer_matches_single_step():
    grid = box([[[Label.SOLID, Label.LIQUID_NEAR]]])
    p = physics.reference_params()
    state = FineState(np.array([0.25, 2e-5]), 0.0)
    after = fd_step_solid_interface(state, grid, p, 1e-12)
    q = interface_transfer(np.array([2e-5]), np.array([0.25]), p, 1e-12)
    assert state.c[1] - after.c[1] == pytest.approx(q[0], rel=1e-9)


def test_solid_step_keeps_interface_closed():
    grid = box([[[Label.SOLID, Label.SOLID, Label.LIQUID_NEAR]]])
    p = physics.reference_params()
    state = FineState(np.array([0.5, 0.1, 2e-3]), 0.0)
    after = fd_step_solid(state, grid, p, p.dt_fd)
    assert after.c[2] == state.c[2]
    assert after.c[0] < 0.5 and after.c[1] > 0.1
    assert after.c[:2].sum() == pytest.approx(0.6, rel=1e-15)
    covered = advance_solid(state, grid, p, p.dt_macro)
    assert covered.c[:2].sum() == pytest.approx(0.6, rel=1e-14)
    assert abs(covered.c[0] - covered.c[1]) < abs(after.c[0] - after.c[1])


def test_solid_substeps_use_solid_limit():
    p = physics.reference_params()
    assert substep_count(p, p.dt_macro, physics.stability_limit(p, physics.Phase.S)) == 2


def test_baseline_field_dumps(tmp_path):
    grid, params = small_model()
    state = initial_state(grid, params)
    fd_run_baseline(state, grid, params, 3 * params.dt_macro,
                    dump_at=[params.dt_macro, 2.5 * params.dt_macro], field_dir=tmp_path / "fields")
    dumps = sorted((tmp_path / "fields").glob("field_*.bin"))
    assert [p.name for p in dumps] == ["field_1e-05.bin", "field_2.5e-05.bin"]
    first = load_field(dumps[0], grid)
    assert first.t == pytest.approx(params.dt_macro)
