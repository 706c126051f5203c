"""Integrated macro-step loop, precision comparison and scaling benchmark."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import physics
import plots
from coarse_mesh import CoarseMap, coarsen, map_fine_to_coarse, remap_coarse_to_fine
from fd_solver import (
    KINETICS_COLUMNS,
    FineState,
    KineticsRecord,
    _check_step,
    advance_solid,
    advance_solid_interface,
    due_dumps,
    dump_path,
    fd_run_baseline,
    initial_state,
    interface_transfer,
    save_field,
    step_count,
    update_far_field,
)
from geometry import GridSpec, ParticleSpec, PhaseGrid, generate_particle, partition_near_far
from physics import Phase, PhysParams
from precision import PrecisionMode, mapping_mode
from transfer import (
    MatrixMismatchError,
    TransferMatrix,
    precondition,
    row_sum_residual,
    superpose,
    superpose_sink,
)

logger = logging.getLogger(__name__)

LIQUID_PHASES = ("mapping", "superpose", "remap")
STEP_PHASES = LIQUID_PHASES + ("solid", "far_field")
COMPARE_MODES = (PrecisionMode.FULL, PrecisionMode.B32, PrecisionMode.MIXED, PrecisionMode.B16)
BENCH_PORES_AT_R12 = 20
BENCH_SEED = 7
ROW_SUM_TOLERANCE = 1e-9
CONSERVATION_TOLERANCE = 1e-10


class ScalingError(ValueError):
    """Raised when a scaling benchmark cannot be fitted."""


class InvariantError(RuntimeError):
    """Raised when a finished computation violates a conservation identity."""


@dataclass
class ErrorSeries:
    """AE/RE of the normalised solid concentration against the FULL run."""

    t: np.ndarray
    ae: np.ndarray
    re: np.ndarray
    liquid_discrepancy: float = 0.0
    solid_discrepancy: float = 0.0

    @property
    def max_re(self) -> float:
        return float(np.max(self.re)) if self.re.size else 0.0

    @property
    def final_quarter_mean_re(self) -> float:
        if not self.re.size:
            return 0.0
        tail = self.re[-max(1, math.ceil(self.re.size / 4)):]
        return float(np.mean(tail))


@dataclass
class RunReport:
    solver: str
    mode: PrecisionMode
    n_steps: int = 0
    N: int = 0
    N_L: int = 0
    N_S: int = 0
    geometry_hash: str = ""
    products: int = 1
    timings: dict = field(default_factory=dict)
    counters: Counter = field(default_factory=Counter)
    conservation_error: float = 0.0
    residuals: list = field(default_factory=list)
    errors: ErrorSeries | None = None

    @property
    def flops_per_step(self) -> int | None:
        if self.solver != "fdirw":
            return None
        return flop_count(self.N, self.N_L, self.products)

    @property
    def max_residual(self) -> float:
        """Largest |pre-correction mass residual| over the macro steps."""
        if not self.residuals:
            return 0.0
        return float(np.max(np.abs(self.residuals)))

    @property
    def step_seconds(self) -> float:
        """Wall time per macro step, preconditioning excluded."""
        total = sum(self.timings.get(p, 0.0) for p in STEP_PHASES + ("fd_step",))
        return total / self.n_steps if self.n_steps else 0.0

    @property
    def liquid_share(self) -> float:
        total = sum(self.timings.get(p, 0.0) for p in STEP_PHASES)
        if total <= 0:
            return 0.0
        return sum(self.timings.get(p, 0.0) for p in LIQUID_PHASES) / total

    def to_text(self, params: PhysParams, record: KineticsRecord | None = None) -> str:
        """Deterministic summary (no wall times)."""
        lines = [
            "# FDIRW run report",
            "# kinetics.csv columns: " + ",".join(KINETICS_COLUMNS),
            "#   t: time (s); Q_S: sum of solid c; Q_L_near: sum of near-field liquid c;",
            "#   c_far: far-field concentration; Q_total: Q_S + Q_L_near + c_far*N_far_equiv",
            f"solver {self.solver}",
            f"precision {self.mode.value}",
            f"mixed_product {params.mixed_product}",
            f"geometry {self.geometry_hash}",
            f"N_S {self.N_S}",
            f"N_L {self.N_L}",
            f"N {self.N}",
            f"dt_macro {params.dt_macro!r}",
            f"dt_fd {params.dt_fd!r}",
            f"n_pre {params.n_pre}",
            f"steps {self.n_steps}",
        ]
        if self.flops_per_step is not None:
            lines.append(f"flops_per_step {self.flops_per_step}")
            lines.append(f"flops_total {self.flops_per_step * self.n_steps}")
        if record is not None:
            lines.append(f"Q_S_e {record.Q_S_e!r}")
            lines.append(f"Q_L_0 {record.Q_L_0!r}")
            if len(record):
                lines.append(f"t_final {record.t[-1]!r}")
                lines.append(f"c_S_final {float(record.solid_fraction[-1])!r}")
        lines.append(f"conservation_max_rel_error {self.conservation_error!r}")
        if self.solver == "fdirw":
            lines.append(f"pre_correction_residual_max {self.max_residual!r}")
        for name in ("clamped_transfers", "limited_groups", "negative_far_field", "infinities"):
            lines.append(f"counter {name} {self.counters.get(name, 0)}")
        if self.errors is not None:
            lines.append(f"max_AE {float(np.max(self.errors.ae, initial=0.0))!r}")
            lines.append(f"max_RE {self.errors.max_re!r}")
            lines.append(f"final_quarter_mean_RE {self.errors.final_quarter_mean_re!r}")
            lines.append(f"final_liquid_discrepancy {self.errors.liquid_discrepancy!r}")
            lines.append(f"final_solid_discrepancy {self.errors.solid_discrepancy!r}")
        return "\n".join(lines) + "\n"

    def timings_text(self) -> str:
        lines = [f"{name} {seconds:.6f}" for name, seconds in sorted(self.timings.items())]
        lines.append(f"per_step {self.step_seconds:.6f}")
        if self.solver == "fdirw":
            lines.append(f"liquid_share {self.liquid_share:.4f}")
        return "\n".join(lines) + "\n"


def flop_count(N: int, N_L: int, products: int = 1) -> int:
    """N(N + 1) + 2 N_L: superposition plus mapping and remapping.

    ``products`` counts the matrix-vector products per step (three with the
    interface sink).
    """
    N, N_L, products = int(N), int(N_L), int(products)
    if N < 0 or N_L < 0 or products < 1:
        raise ValueError(f"need N, N_L >= 0 and products >= 1, got N={N}, N_L={N_L}, "
                         f"products={products}")
    return products * N * (N + 1) + 2 * N_L


def check_row_sums(M: TransferMatrix, residual: float | None = None) -> float:
    """Fail when a group-source matrix breaks the uniform-field identity."""
    residual = row_sum_residual(M) if residual is None else residual
    if M.source_mode == "group" and not residual <= ROW_SUM_TOLERANCE:
        raise InvariantError(
            f"row-sum residual {residual:.3e} exceeds {ROW_SUM_TOLERANCE:.0e}"
        )
    return residual


def check_conservation(report: RunReport) -> None:
    if not report.conservation_error <= CONSERVATION_TOLERANCE:
        raise InvariantError(
            f"{report.solver} run ({report.mode.value}) lost mass: relative error "
            f"{report.conservation_error:.3e} exceeds {CONSERVATION_TOLERANCE:.0e}"
        )


def warn_if_widened(M: TransferMatrix, mode: PrecisionMode) -> None:
    """Log when a full-precision run is fed a matrix stored in a narrower format."""
    if mode is PrecisionMode.FULL and M.precision_tag is not PrecisionMode.FULL:
        logger.warning("running full precision from a %s-stored matrix; "
                       "results are not a binary64 reference", M.precision_tag.value)


def prepare(grid: PhaseGrid, params: PhysParams) -> tuple[PhaseGrid, PhysParams]:
    """Resolve ``auto`` parameters, place the near-field shell, check the inventory."""
    # shell labels depend only on shell_width, so any positive volume will do here
    provisional = params if params.V_far is not None else dataclasses.replace(
        params, V_far=params.voxel_volume)
    grid = partition_near_far(grid, provisional)
    params = physics.resolve_for_geometry(params, grid.n_solid, grid.n_liquid)
    grid = dataclasses.replace(grid, n_far_equiv=params.n_far_equiv)
    physics.mass_consistency_gap(params, grid.n_solid, grid.n_liquid)
    logger.info("prepared: N_S=%d N_L=%d N_far_equiv=%.6g", grid.n_solid, grid.n_liquid,
                grid.n_far_equiv)
    return grid, params


def _check_matrix(grid: PhaseGrid, cmap: CoarseMap, M: TransferMatrix, params: PhysParams) -> None:
    if M.geometry_hash != grid.hash:
        raise MatrixMismatchError(
            f"matrix geometry hash {M.geometry_hash} does not match geometry hash {grid.hash}"
        )
    if not math.isclose(M.dt_encoded, params.dt_macro, rel_tol=1e-12):
        raise MatrixMismatchError(
            f"matrix encodes dt={M.dt_encoded!r} s but dt_macro is {params.dt_macro!r} s"
        )
    if M.N != cmap.N:
        raise MatrixMismatchError(f"matrix has N={M.N} but the coarse mesh has {cmap.N} groups")


class _Clock:
    def __init__(self, timings: dict):
        self.timings = timings
        self.start = time.perf_counter()

    def lap(self, phase: str) -> None:
        now = time.perf_counter()
        self.timings[phase] = self.timings.get(phase, 0.0) + now - self.start
        self.start = now


@dataclass
class LiquidStep:
    """Outcome of one macro step of liquid transport and interface uptake."""

    C: np.ndarray
    solid_gain: np.ndarray
    limited: int = 0

    def mass(self, sizes: np.ndarray) -> float:
        return float(np.dot(sizes, self.C) + np.sum(self.solid_gain))


def sink_step(grid: PhaseGrid, cmap: CoarseMap, M: TransferMatrix, params: PhysParams,
              C: np.ndarray, c_solid: np.ndarray, c_far: float,
              mode: PrecisionMode = PrecisionMode.FULL, workers: int = 1) -> LiquidStep:
    """Liquid transport with the interface acting as a sink, capped by the solid.

    Each group's uptake is the drained amount ``U C + U_BC c_far`` unless
    its faces cannot take that much over the macro step; the group then
    takes their capacity and its field is blended between the drained and
    the no-flux responses in the same proportion. Uptake is shared among
    the group's faces in proportion to their capacity.
    """
    free = superpose(M, C, c_far, mode, workers, params.mixed_product)
    left, taken = superpose_sink(M, C, c_far, mode, workers, params.mixed_product)
    s, l = grid.topology.interface_pairs
    g = cmap.group_of[l]
    q = interface_transfer(C[g], c_solid[s], params, params.dt_macro)
    take = np.maximum(q, 0.0)
    release = np.minimum(q, 0.0)
    capacity = np.bincount(g, weights=take, minlength=cmap.N)
    with np.errstate(divide="ignore", invalid="ignore"):
        theta = np.where(taken > capacity, capacity / taken, 1.0)
    theta = np.clip(np.nan_to_num(theta, nan=1.0), 0.0, 1.0)
    uptake = theta * taken
    C_new = theta * left + (1.0 - theta) * free
    C_new -= np.bincount(g, weights=release, minlength=cmap.N) / cmap.group_size
    with np.errstate(divide="ignore", invalid="ignore"):
        share = np.where(capacity[g] > 0, take / capacity[g], 0.0)
    gain = np.bincount(s, weights=uptake[g] * share + release, minlength=c_solid.size)
    return LiquidStep(C_new, gain, int(np.count_nonzero(theta < 1.0)))


def run_integrated(grid: PhaseGrid, cmap: CoarseMap, M: TransferMatrix, params: PhysParams,
                   mode: PrecisionMode = PrecisionMode.FULL, t_end: float = 0.0,
                   state: FineState | None = None, stride: int = 1, workers: int = 1,
                   dump_at=(), field_dir=None):
    """FDiRW macro loop: map, superpose, remap, solid/interface, far field.

    Under the ``sink`` coupling the interface uptake comes out of the
    superposition (:func:`sink_step`) and the solid only diffuses; under
    ``exchange`` the liquid is superposed with no-flux solid faces and the
    interface exchange runs on the remapped field.

    Returns (state, KineticsRecord, RunReport). Kinetics are sampled every
    ``stride`` macro steps and at the last one.
    """
    _check_matrix(grid, cmap, M, params)
    _check_step(params.dt_fd, physics.stability_limit(params, Phase.L), "liquid")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    sink = params.coupling == "sink"
    if sink and not M.has_sink:
        raise MatrixMismatchError(
            "matrix has no interface sink response; rebuild it or set coupling = exchange"
        )
    state = state if state is not None else initial_state(grid, params)
    report = RunReport("fdirw", mode, N=M.N, N_L=grid.n_liquid, N_S=grid.n_solid,
                       geometry_hash=grid.hash, products=3 if sink else 1)
    record = KineticsRecord.for_grid(grid, params)
    dt = params.dt_macro
    n_steps = step_count(state.t, t_end, dt)
    t0 = state.t
    sizes = cmap.group_size.astype(np.float64)
    map_mode = mapping_mode(mode)
    topo = grid.topology
    done: set = set()
    if field_dir is not None and dump_at:
        Path(field_dir).mkdir(parents=True, exist_ok=True)

    def liquid_step(C, c_solid, c_far, run_mode):
        if sink:
            return sink_step(grid, cmap, M, params, C, c_solid, c_far, run_mode, workers)
        C_new = superpose(M, C, c_far, run_mode, workers, params.mixed_product)
        return LiquidStep(C_new, np.zeros(c_solid.size))

    for i in range(1, n_steps + 1):
        clock = _Clock(report.timings)
        C = map_fine_to_coarse(state.c, cmap, map_mode)
        clock.lap("mapping")
        c_solid = state.c[topo.solid]
        step = liquid_step(C, c_solid, state.c_far, mode)
        clock.lap("superpose")
        report.counters["limited_groups"] += step.limited
        if mode is not PrecisionMode.FULL:
            n_inf = int(np.count_nonzero(~np.isfinite(step.C)))
            if n_inf:
                report.counters["infinities"] += n_inf
            exact = liquid_step(C, c_solid, state.c_far, PrecisionMode.FULL)
            with np.errstate(invalid="ignore", over="ignore"):
                report.residuals.append(step.mass(sizes) - exact.mass(sizes))
            clock.lap("audit")
        else:
            report.residuals.append(0.0)
        c = remap_coarse_to_fine(step.C, cmap, state.c)
        c[topo.solid] += step.solid_gain
        state = dataclasses.replace(state, c=c)
        clock.lap("remap")
        if sink:
            state = advance_solid(state, grid, params, dt)
        else:
            state = advance_solid_interface(state, grid, params, dt, report.counters)
        clock.lap("solid")
        state = update_far_field(state, grid, params, report.counters)
        state = dataclasses.replace(state, t=t0 + i * dt)
        clock.lap("far_field")
        if i % stride == 0 or i == n_steps:
            record.sample(state, grid)
        if field_dir is not None:
            for td in due_dumps(dump_at, done, state.t):
                save_field(state, grid, dump_path(field_dir, td))
                done.add(td)

    report.n_steps = n_steps
    report.conservation_error = record.max_conservation_error(params.total_mass_0)
    _log_counters(report)
    logger.info("fdirw[%s]: %d macro steps to t=%.6g s", mode.value, n_steps, state.t)
    return state, record, report


def run_baseline(grid: PhaseGrid, params: PhysParams, t_end: float,
                 state: FineState | None = None, stride: int = 1, dump_at=(), field_dir=None):
    """Reference FD run, sampled every ``stride`` macro steps' worth of substeps.

    Returns (state, KineticsRecord, RunReport) like :func:`run_integrated`.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    state = state if state is not None else initial_state(grid, params)
    report = RunReport("fd", PrecisionMode.FULL, N_L=grid.n_liquid, N_S=grid.n_solid,
                       geometry_hash=grid.hash)
    t0 = state.t
    start = time.perf_counter()
    state, record = fd_run_baseline(state, grid, params, t_end, stride * params.n_pre,
                                    report.counters, dump_at, field_dir)
    report.timings["fd_step"] = time.perf_counter() - start
    report.n_steps = step_count(t0, state.t, params.dt_macro) if state.t > t0 else 0
    report.conservation_error = record.max_conservation_error(params.total_mass_0)
    _log_counters(report)
    return state, record, report


def _log_counters(report: RunReport) -> None:
    if report.counters.get("limited_groups"):
        logger.info("%d group steps took the solid-side capacity instead of the drained amount",
                    report.counters["limited_groups"])
    if report.counters.get("clamped_transfers"):
        logger.warning("%d interface transfers were clamped to the liquid content",
                       report.counters["clamped_transfers"])
    if report.counters.get("infinities"):
        logger.warning("%d infinite values produced under %s arithmetic",
                       report.counters["infinities"], report.mode.value)


def error_series(reference: KineticsRecord, record: KineticsRecord) -> ErrorSeries:
    """AE and RE of c_S = Q_S / Q_S_e between two equally sampled runs."""
    if len(reference) != len(record):
        raise ValueError(f"runs have {len(reference)} and {len(record)} samples")
    ref = reference.solid_fraction
    ae = np.abs(ref - record.solid_fraction)
    with np.errstate(divide="ignore", invalid="ignore"):
        re = np.where(ref != 0, ae / np.abs(ref), ae)
    return ErrorSeries(np.asarray(reference.t, dtype=np.float64), ae, re)


def compare_precision(grid: PhaseGrid, cmap: CoarseMap, M: TransferMatrix, params: PhysParams,
                      t_end: float, modes=COMPARE_MODES, stride: int = 1, workers: int = 1) -> dict:
    """Run each mode on identical inputs and measure it against FULL.

    Returns {mode: (state, record, report)}; every report carries its
    ErrorSeries and the final-field discrepancies in liquid and solid.
    """
    warn_if_widened(M, PrecisionMode.FULL)
    modes = [PrecisionMode.FULL] + [m for m in modes if m is not PrecisionMode.FULL]
    start = initial_state(grid, params)
    results = {}
    for mode in modes:
        results[mode] = run_integrated(grid, cmap, M.as_precision(mode), params, mode, t_end,
                                       state=start, stride=stride, workers=workers)
    ref_state, ref_record, _ = results[PrecisionMode.FULL]
    topo = grid.topology
    for mode, (state, record, report) in results.items():
        series = error_series(ref_record, record)
        diff = np.abs(state.c - ref_state.c)
        series.liquid_discrepancy = float(np.max(diff[topo.near], initial=0.0))
        series.solid_discrepancy = float(np.max(diff[topo.solid], initial=0.0))
        report.errors = series
        logger.info("%s: max RE %.3e", mode.value, series.max_re)
    return results


@dataclass
class ScalingRow:
    r_p: float
    size: int
    N: int
    N_L: int
    precondition_seconds: float
    step_seconds: dict
    baseline_step_seconds: float | None = None

    @property
    def flops(self) -> int:
        return flop_count(self.N, self.N_L)

    @property
    def speedup(self) -> float | None:
        """Baseline time over FULL FDiRW time for one macro interval."""
        full = self.step_seconds.get(PrecisionMode.FULL)
        if self.baseline_step_seconds is None or not full:
            return None
        return self.baseline_step_seconds / full

    def efficiency_gain(self, mode: PrecisionMode) -> float | None:
        full = self.step_seconds.get(PrecisionMode.FULL)
        other = self.step_seconds.get(mode)
        if not full or not other:
            return None
        return full / other


@dataclass
class ScalingTable:
    rows: list
    slope: float
    intercept: float


def bench_particle(r_p: float, dh: float, shell_width: int, seed: int = BENCH_SEED) -> PhaseGrid:
    """Geometry for one benchmark size: grid edge 4 r_p, pore count scaled with volume."""
    size = int(round(4 * r_p))
    pores = int(round(BENCH_PORES_AT_R12 * (r_p / 12) ** 3))
    return generate_particle(GridSpec(size, size, size, dh),
                             ParticleSpec(r_p, pores, (2.0, 3.0), seed), shell_width)


def bench_scaling(sizes, params: PhysParams, modes=(PrecisionMode.FULL,), steps: int = 3,
                  workers: int = 1, baseline: bool = True) -> ScalingTable:
    """Time FDiRW macro steps over particle radii and fit log time against log N_L.

    The far field is sized per geometry. Preconditioning is timed but kept
    out of the fit.
    """
    sizes = [float(s) for s in sizes]
    if len(sizes) < 3:
        raise ScalingError(f"need at least 3 particle sizes for a fit, got {len(sizes)}")
    modes = [PrecisionMode.FULL] + [m for m in modes if m is not PrecisionMode.FULL]
    auto = dataclasses.replace(params, V_far=None, total_mass_0=None)
    t_end = steps * params.dt_macro
    rows = []
    for r_p in sizes:
        grid, run_params = prepare(bench_particle(r_p, params.dh, params.shell_width), auto)
        cmap = coarsen(grid, run_params.coarsen_factor)
        start = time.perf_counter()
        M = precondition(grid, cmap, run_params, workers)
        pre_seconds = time.perf_counter() - start
        step_seconds = {}
        for mode in modes:
            _, _, report = run_integrated(grid, cmap, M.as_precision(mode), run_params, mode,
                                          t_end, workers=workers)
            step_seconds[mode] = report.step_seconds
        base = None
        if baseline:
            _, _, report = run_baseline(grid, run_params, params.dt_macro)
            base = report.step_seconds
        rows.append(ScalingRow(r_p, grid.spec.nx, cmap.N, grid.n_liquid, pre_seconds,
                               step_seconds, base))
        logger.info("bench r_p=%g: N=%d N_L=%d step %.4g s", r_p, cmap.N, grid.n_liquid,
                    step_seconds[PrecisionMode.FULL])
    x = np.log([row.N_L for row in rows])
    y = np.log([row.step_seconds[PrecisionMode.FULL] for row in rows])
    slope, intercept = np.polyfit(x, y, 1)
    return ScalingTable(rows, float(slope), float(intercept))


def write_run(out_dir, params: PhysParams, record: KineticsRecord, report: RunReport,
              plot: bool = True) -> Path:
    """kinetics.csv, report.txt, timings.txt and the kinetics chart."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record.write_csv(out_dir / "kinetics.csv")
    (out_dir / "report.txt").write_text(report.to_text(params, record), encoding="utf-8")
    (out_dir / "timings.txt").write_text(report.timings_text(), encoding="utf-8")
    if plot and len(record):
        plots.plot_kinetics(record.t, record.solid_fraction, record.liquid_fraction,
                            out_dir / "plots" / "kinetics.svg",
                            title=f"{report.solver} ({report.mode.value})")
    return out_dir


def write_comparison(out_dir, params: PhysParams, results: dict, plot: bool = True) -> Path:
    """One run directory per mode plus errors.csv and the relative-error chart."""
    out_dir = Path(out_dir)
    for mode, (_, record, report) in results.items():
        write_run(out_dir / mode.value, params, record, report, plot)
    ref = results[PrecisionMode.FULL][2].errors
    header = ["t"]
    columns = [ref.t]
    for mode, (_, _, report) in results.items():
        header += [f"AE_{mode.value}", f"RE_{mode.value}"]
        columns += [report.errors.ae, report.errors.re]
    with open(out_dir / "errors.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in zip(*columns):
            writer.writerow([repr(float(v)) for v in row])
    if plot:
        plots.plot_errors(ref.t, {m.value: r[2].errors.re for m, r in results.items()
                                  if m is not PrecisionMode.FULL},
                          out_dir / "plots" / "relative_error.svg")
    return out_dir


def write_scaling(out_dir, table: ScalingTable, plot: bool = True) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    modes = list(table.rows[0].step_seconds)
    header = ["r_p", "size", "N", "N_L", "flops", "precondition"]
    header += [f"step_{m.value}" for m in modes] + ["baseline_step", "speedup"]
    with open(out_dir / "scaling.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in table.rows:
            writer.writerow(
                [row.r_p, row.size, row.N, row.N_L, row.flops, f"{row.precondition_seconds:.6f}"]
                + [f"{row.step_seconds[m]:.6e}" for m in modes]
                + [f"{row.baseline_step_seconds:.6e}" if row.baseline_step_seconds else "nan",
                   f"{row.speedup:.3f}" if row.speedup else "nan"]
            )
    if plot:
        plots.plot_scaling([r.N_L for r in table.rows],
                           [r.step_seconds[PrecisionMode.FULL] for r in table.rows],
                           table.slope, table.intercept, out_dir / "plots" / "scaling.svg")
    return out_dir
