#!/usr/bin/env python3
"""Command-line front end for the FDiRW absorption solver."""

import argparse
import logging
import os
import sys
from pathlib import Path

import driver
import plots
from coarse_mesh import CMAP_MAGIC, coarsen, save_coarse_map
from fd_solver import FIELD_MAGIC
from geometry import (
    GEOM_MAGIC,
    GridSpec,
    ParticleSpec,
    generate_particle,
    load_geometry,
    porosity,
    save_geometry,
)
from physics import REFERENCE_CONFIG, load_params
from precision import MODE_NAMES, PrecisionMode
from transfer import (
    MATRIX_MAGIC,
    element_histogram,
    load_matrix,
    precondition,
    save_matrix,
)

__version__ = "0.1.0"

DEFAULT_LOG_LEVEL = os.environ.get("FDIRW_LOG_LEVEL", "WARNING")
DEFAULT_DH = 10e-9

logger = logging.getLogger("fdirw_tool")


def fmt(value: float) -> str:
    """Return a compact number for terminal summaries."""
    if isinstance(value, int):
        return f"{value:,}"
    return f"{value:.6g}"


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got '{text}'") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _radius_range(text: str) -> tuple[float, float]:
    lo, sep, hi = text.partition(":")
    try:
        if not sep:
            raise ValueError
        return float(lo), float(hi)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MIN:MAX, got '{text}'") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'") from None


def _mode_list(text: str) -> list[PrecisionMode]:
    try:
        return [PrecisionMode.parse(v.strip()) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def parse_args(argv=None) -> argparse.Namespace:
    """Parse and return command line arguments."""
    parser = argparse.ArgumentParser(prog="fdirw-tool", description="FDiRW absorption solver")
    parser.add_argument(
        "--version", action="version",
        version=f"fdirw-tool {__version__} ({GEOM_MAGIC}, {MATRIX_MAGIC}, {FIELD_MAGIC}, {CMAP_MAGIC})",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workers", type=_positive_int,
                        default=os.environ.get("FDIRW_WORKERS", "1"),
                        help="Worker threads (default: FDIRW_WORKERS or 1)")
    common.add_argument("--log-level", default=DEFAULT_LOG_LEVEL,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], type=str.upper)
    subparsers = parser.add_subparsers(dest="command")

    parser_geom = subparsers.add_parser("gen-geometry", parents=[common],
                                        help="Generate a porous particle geometry")
    parser_geom.add_argument("--size", type=_positive_int, required=True, help="Grid edge in voxels")
    parser_geom.add_argument("--rp", type=float, required=True, help="Particle radius in voxels")
    parser_geom.add_argument("--pores", type=int, default=0)
    parser_geom.add_argument("--pore-radius", type=_radius_range, default=(2.0, 3.0))
    parser_geom.add_argument("--seed", type=int, default=0)
    parser_geom.add_argument("--dh", type=float, default=DEFAULT_DH, help="Voxel edge (m)")
    parser_geom.add_argument("--shell-width", type=int, default=5)
    parser_geom.add_argument("--out", required=True)

    def add_physics(p):
        p.add_argument("--geometry", required=True)
        p.add_argument("--config", default=str(REFERENCE_CONFIG), help="Physics parameter file")

    parser_pre = subparsers.add_parser("precondition", parents=[common],
                                       help="Build the transfer matrix")
    add_physics(parser_pre)
    parser_pre.add_argument("--precision", choices=MODE_NAMES, default="full")
    parser_pre.add_argument("--out", required=True)
    parser_pre.add_argument("--coarse-map", default=None, help="Also write the group map here")

    def add_run(p):
        add_physics(p)
        p.add_argument("--matrix", default=None, help="Precomputed matrix (default: build it)")
        p.add_argument("--t-end", type=float, required=True, help="End time (s)")
        p.add_argument("--stride", type=_positive_int, default=1, help="Sample every N macro steps")
        p.add_argument("--no-plots", action="store_true")
        p.add_argument("--out", required=True, help="Output directory")

    parser_run = subparsers.add_parser("run", parents=[common], help="Run one solver")
    add_run(parser_run)
    parser_run.add_argument("--solver", choices=["fd", "fdirw"], default="fdirw")
    parser_run.add_argument("--precision", choices=MODE_NAMES, default="full")
    parser_run.add_argument("--dump-at", type=_float_list, default=[],
                            help="Comma-separated times for field dumps")

    parser_cmp = subparsers.add_parser("compare", parents=[common],
                                       help="Run every precision mode against full")
    add_run(parser_cmp)

    parser_bench = subparsers.add_parser("bench", parents=[common], help="Scaling benchmark")
    parser_bench.add_argument("--sizes", type=_float_list, default=[8.0, 12.0, 16.0])
    parser_bench.add_argument("--config", default=str(REFERENCE_CONFIG))
    parser_bench.add_argument("--modes", type=_mode_list, default=[PrecisionMode.FULL])
    parser_bench.add_argument("--steps", type=_positive_int, default=3)
    parser_bench.add_argument("--no-baseline", action="store_true")
    parser_bench.add_argument("--no-plots", action="store_true")
    parser_bench.add_argument("--out", required=True)

    parser_plot = subparsers.add_parser("plot", parents=[common], help="Re-render charts")
    parser_plot.add_argument("run_dir")

    return parser.parse_args(argv)


def _setup(args):
    grid = load_geometry(args.geometry)
    params = load_params(args.config)
    grid, params = driver.prepare(grid, params)
    cmap = coarsen(grid, params.coarsen_factor)
    return grid, params, cmap


def _matrix(args, grid, cmap, params):
    if args.matrix:
        return load_matrix(args.matrix, grid, params)
    return precondition(grid, cmap, params, args.workers)


def cmd_gen_geometry(args) -> None:
    grid = generate_particle(
        GridSpec(args.size, args.size, args.size, args.dh),
        ParticleSpec(args.rp, args.pores, args.pore_radius, args.seed),
        args.shell_width,
    )
    save_geometry(grid, args.out)
    print(f"Geometry written to {args.out}")
    print(f"N_S: {fmt(grid.n_solid)}")
    print(f"N_L: {fmt(grid.n_liquid)}")
    print(f"Porosity: {porosity(grid):.4f}")


def cmd_precondition(args) -> None:
    grid, params, cmap = _setup(args)
    M = precondition(grid, cmap, params, args.workers)
    residual = driver.check_row_sums(M)
    hist = element_histogram(M)
    M = M.as_precision(PrecisionMode.parse(args.precision))
    save_matrix(M, args.out)
    if args.coarse_map:
        save_coarse_map(cmap, grid, args.coarse_map)
    print(f"Matrix written to {args.out}")
    print(f"N: {fmt(M.N)}  N_L: {fmt(grid.n_liquid)}  n_pre: {M.n_pre}")
    print(f"Row-sum residual: {residual:.3e}")
    print(f"Decades occupied: {hist.occupied} (span {hist.span}), zeros: {fmt(hist.zeros)}")


def cmd_run(args) -> None:
    grid, params, cmap = _setup(args)
    out = Path(args.out)
    mode = PrecisionMode.parse(args.precision)
    if args.solver == "fd":
        if mode is not PrecisionMode.FULL:
            logger.warning("the FD baseline always runs in full precision")
        state, record, report = driver.run_baseline(grid, params, args.t_end, stride=args.stride,
                                                    dump_at=args.dump_at,
                                                    field_dir=out / "fields")
    else:
        M = _matrix(args, grid, cmap, params)
        driver.warn_if_widened(M, mode)
        M = M.as_precision(mode)
        state, record, report = driver.run_integrated(
            grid, cmap, M, params, mode, args.t_end, stride=args.stride,
            workers=args.workers, dump_at=args.dump_at, field_dir=out / "fields",
        )
    driver.write_run(out, params, record, report, plot=not args.no_plots)
    print(f"Run written to {out}")
    print(f"Steps: {fmt(report.n_steps)}  t: {fmt(state.t)} s")
    if len(record):
        print(f"Q_S/Q_S_e: {fmt(float(record.solid_fraction[-1]))}")
    print(f"Conservation error: {report.conservation_error:.3e}")
    driver.check_conservation(report)


def cmd_compare(args) -> None:
    grid, params, cmap = _setup(args)
    M = _matrix(args, grid, cmap, params)
    results = driver.compare_precision(grid, cmap, M, params, args.t_end,
                                       stride=args.stride, workers=args.workers)
    driver.write_comparison(args.out, params, results, plot=not args.no_plots)
    print(f"Comparison written to {args.out}")
    for mode, (_, _, report) in results.items():
        print(f"- {mode.value}: max RE {report.errors.max_re:.3e}, "
              f"final-quarter mean {report.errors.final_quarter_mean_re:.3e}")
    for _, _, report in results.values():
        driver.check_conservation(report)


def cmd_bench(args) -> None:
    params = load_params(args.config)
    table = driver.bench_scaling(args.sizes, params, args.modes, args.steps,
                                 args.workers, baseline=not args.no_baseline)
    driver.write_scaling(args.out, table, plot=not args.no_plots)
    for row in table.rows:
        line = (f"- r_p {fmt(row.r_p)}: N {fmt(row.N)}, N_L {fmt(row.N_L)}, "
                f"FLOPs {fmt(row.flops)}, step {row.step_seconds[PrecisionMode.FULL]:.4g} s")
        if row.speedup:
            line += f", speedup {row.speedup:.1f}x"
        print(line)
    print(f"Slope: {table.slope:.3f}")


def cmd_plot(args) -> None:
    for path in plots.plot_run_dir(args.run_dir):
        print(f"Wrote {path}")


COMMANDS = {
    "gen-geometry": cmd_gen_geometry,
    "precondition": cmd_precondition,
    "run": cmd_run,
    "compare": cmd_compare,
    "bench": cmd_bench,
    "plot": cmd_plot,
}


def main(argv=None) -> None:
    """Entry point for the command line interface."""
    args = parse_args(argv)
    if not args.command:
        print("No command provided. Use -h for help.")
        return
    logging.basicConfig(level=args.log_level, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        raise SystemExit(1) from None


if __name__ == "__main__":
    main()
