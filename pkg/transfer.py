"""Transfer-matrix construction (preconditioning) and superposition."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse

import physics
from coarse_mesh import CoarseMap, map_fine_to_coarse
from fd_solver import StabilityError, _check_step, liquid_update
from geometry import PhaseGrid
from physics import Phase, PhysParams
from precision import STORAGE_DTYPE, PrecisionMode, superpose_rows

logger = logging.getLogger(__name__)

MATRIX_MAGIC = "FDIRW-MAT v1"
# Fixed work-unit sizes; results never depend on the worker count.
COLUMN_CHUNK = 64
ROW_BLOCK = 256
HISTOGRAM_DECADES = tuple(range(-12, 0))
SINK_ARRAYS = ("P_sink", "P_sink_BC", "U", "U_BC")


class MatrixMismatchError(ValueError):
    """Raised when a matrix does not belong to the geometry, step or vector it meets."""


@dataclass(frozen=True, eq=False)
class TransferMatrix:
    """Liquid response over one macro step, per coarse group.

    ``P``/``P_BC`` evolve the liquid with no-flux solid faces. The optional
    sink set evolves it with every liquid voxel touching the solid emptied
    after each FD step: ``P_sink``/``P_sink_BC`` give the group means left
    behind, ``U``/``U_BC`` the amount each group handed to the solid.
    """

    P: np.ndarray
    P_BC: np.ndarray
    dt_encoded: float
    n_pre: int
    precision_tag: PrecisionMode
    geometry_hash: str
    source_mode: str = "group"
    P_sink: np.ndarray | None = None
    P_sink_BC: np.ndarray | None = None
    U: np.ndarray | None = None
    U_BC: np.ndarray | None = None

    @property
    def N(self) -> int:
        return int(self.P.shape[0])

    @property
    def has_sink(self) -> bool:
        return self.P_sink is not None

    def values(self) -> tuple[np.ndarray, np.ndarray]:
        """P and P_BC widened to binary64."""
        return self.P.astype(np.float64), self.P_BC.astype(np.float64)

    def sink_values(self) -> tuple[np.ndarray, ...]:
        """P_sink, P_sink_BC, U and U_BC widened to binary64."""
        if not self.has_sink:
            raise MatrixMismatchError("matrix was built without the interface sink response")
        return tuple(getattr(self, name).astype(np.float64) for name in SINK_ARRAYS)

    def as_precision(self, mode: PrecisionMode) -> "TransferMatrix":
        """The same matrix rounded into ``mode``'s storage format."""
        dtype = STORAGE_DTYPE[mode]
        p, p_bc = self.values()
        sink = {}
        with np.errstate(over="ignore"):
            if self.has_sink:
                sink = {name: v.astype(dtype) for name, v in zip(SINK_ARRAYS, self.sink_values())}
            return TransferMatrix(p.astype(dtype), p_bc.astype(dtype), self.dt_encoded,
                                  self.n_pre, mode, self.geometry_hash, self.source_mode, **sink)


def _source_columns(cmap: CoarseMap, cols: range, source_mode: str):
    n_cols = len(cols)
    x = np.zeros((cmap.n_liquid, n_cols))
    far = np.zeros(n_cols)
    for k, j in enumerate(cols):
        if j == cmap.N:
            far[k] = 1.0
            continue
        members = cmap.order[cmap.offsets[j]:cmap.offsets[j + 1]]
        if source_mode == "voxel":
            x[members[0], k] = 1.0
        else:
            x[members, k] = 1.0
    return x, far


def sink_voxels(grid: PhaseGrid) -> np.ndarray:
    """Near-field indices of liquid voxels sharing a face with the solid."""
    return np.unique(grid.topology.interface_pairs[1])


def precondition(grid: PhaseGrid, cmap: CoarseMap, params: PhysParams,
                 workers: int = 1, storage: PrecisionMode = PrecisionMode.FULL,
                 sink: bool | None = None) -> TransferMatrix:
    """Build P and P_BC by evolving unit sources with the liquid FD step.

    Column J starts from unit concentration on group J (zero far field);
    the boundary column starts from zero with the far field held at one.
    Each column runs n_pre liquid-only steps and is mapped to the coarse
    mesh. Columns are independent and processed in fixed-size chunks.

    With ``sink`` (default: the ``sink`` coupling) every column is run a
    second time with the interface liquid emptied after each step, and the
    removed amount is summed per group.
    """
    _check_step(params.dt_fd, physics.stability_limit(params, Phase.L), "liquid")
    ratio = params.dt_macro / params.dt_fd
    if abs(ratio - round(ratio)) > 1e-9 * ratio:
        raise StabilityError(f"dt_macro {params.dt_macro!r} is not a multiple of dt_fd {params.dt_fd!r}")
    if sink is None:
        sink = params.coupling == "sink"
    topo = grid.topology
    n_pre = params.n_pre
    lam = physics.effective_diffusivity(params, Phase.L) * params.dt_fd / params.dh ** 2
    n_cols = cmap.N + 1
    chunks = [range(j, min(j + COLUMN_CHUNK, n_cols)) for j in range(0, n_cols, COLUMN_CHUNK)]
    drains = sink_voxels(grid)
    gather = scipy.sparse.csr_matrix(
        (np.ones(drains.size), (cmap.group_of[drains], np.arange(drains.size))),
        shape=(cmap.N, drains.size),
    )

    def run_chunk(cols: range) -> tuple[np.ndarray, ...]:
        x0, far = _source_columns(cmap, cols, params.source_mode)
        x = x0
        for _ in range(n_pre):
            x = liquid_update(topo, x, far, lam)
        free = map_fine_to_coarse(x, cmap, PrecisionMode.FULL)
        if not sink:
            return (free,)
        x = x0
        taken = np.zeros((cmap.N, len(cols)))
        for _ in range(n_pre):
            x = liquid_update(topo, x, far, lam)
            taken += gather @ x[drains]
            x[drains] = 0.0
        return free, map_fine_to_coarse(x, cmap, PrecisionMode.FULL), taken

    logger.info("preconditioning %d columns x %d steps on %d worker(s)%s", n_cols, n_pre,
                workers, " with interface sink" if sink else "")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run_chunk, chunks))
    else:
        parts = [run_chunk(c) for c in chunks]
    full = [np.concatenate([p[k] for p in parts], axis=1) for k in range(len(parts[0]))]
    n = cmap.N
    extra = {}
    if sink:
        extra = {"P_sink": full[1][:, :n].copy(), "P_sink_BC": full[1][:, n].copy(),
                 "U": full[2][:, :n].copy(), "U_BC": full[2][:, n].copy()}
    matrix = TransferMatrix(full[0][:, :n].copy(), full[0][:, n].copy(), params.dt_macro,
                            n_pre, PrecisionMode.FULL, grid.hash, params.source_mode, **extra)
    logger.info("row-sum residual %.3e", row_sum_residual(matrix))
    if storage is not PrecisionMode.FULL:
        matrix = matrix.as_precision(storage)
    return matrix


def row_sum_residual(M: TransferMatrix) -> float:
    """max_I |sum_J P_IJ + P_BC_I - 1|."""
    p, p_bc = M.values()
    if M.N == 0:
        return 0.0
    return float(np.max(np.abs(p.sum(axis=1) + p_bc - 1.0)))


def operand_scale(C: np.ndarray, c_far: float) -> float:
    """Power of two bringing the largest operand into [0.5, 1).

    Scaling by it is exact, and it keeps binary16 products of small
    concentrations out of the subnormal range.
    """
    peak = max(float(np.max(np.abs(C), initial=0.0)), abs(float(c_far)))
    if not (peak > 0 and math.isfinite(peak)):
        return 1.0
    return math.ldexp(1.0, -math.frexp(peak)[1])


def _apply(p: np.ndarray, p_bc: np.ndarray, C: np.ndarray, c_far: float,
           mode: PrecisionMode, workers: int, mixed_product: str) -> np.ndarray:
    scale = operand_scale(C, c_far) if mode is PrecisionMode.MIXED else 1.0
    C_s = C * scale
    far_s = c_far * scale
    n = p.shape[0]
    blocks = [slice(i, min(i + ROW_BLOCK, n)) for i in range(0, n, ROW_BLOCK)]

    def run_block(rows: slice) -> np.ndarray:
        return superpose_rows(p[rows], C_s, p_bc[rows], far_s, mode, mixed_product)

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run_block, blocks))
    else:
        parts = [run_block(b) for b in blocks]
    out = np.concatenate(parts) if parts else np.zeros(0)
    return out / scale


def _check_field(M: TransferMatrix, C) -> np.ndarray:
    C = np.asarray(C, dtype=np.float64)
    if C.shape != (M.N,):
        raise MatrixMismatchError(f"coarse field has shape {C.shape}, matrix is {M.N}x{M.N}")
    return C


def superpose(M: TransferMatrix, C: np.ndarray, c_far: float,
              mode: PrecisionMode = PrecisionMode.FULL, workers: int = 1,
              mixed_product: str = "b16") -> np.ndarray:
    """C' = P C + P_BC c_far under ``mode``'s arithmetic, row blocks in parallel.

    MIXED works on operands scaled by :func:`operand_scale` and undoes the
    scale on the result; the other modes see the values as given.
    """
    C = _check_field(M, C)
    p, p_bc = M.values()
    return _apply(p, p_bc, C, c_far, mode, workers, mixed_product)


def superpose_sink(M: TransferMatrix, C: np.ndarray, c_far: float,
                   mode: PrecisionMode = PrecisionMode.FULL, workers: int = 1,
                   mixed_product: str = "b16") -> tuple[np.ndarray, np.ndarray]:
    """Group means and per-group amounts absorbed under the interface sink."""
    C = _check_field(M, C)
    p_sink, p_sink_bc, u, u_bc = M.sink_values()
    left = _apply(p_sink, p_sink_bc, C, c_far, mode, workers, mixed_product)
    taken = _apply(u, u_bc, C, c_far, mode, workers, mixed_product)
    return left, taken


@dataclass(frozen=True)
class Histogram:
    """Entry counts per decade [10^e, 10^(e+1)) for e in -12..-1.

    Values of magnitude >= 1 fall in the top decade; exact zeros and
    magnitudes below 1e-12 are counted separately.
    """

    decades: tuple
    counts: tuple
    zeros: int
    below: int

    @property
    def occupied(self) -> int:
        return sum(1 for n in self.counts if n)

    @property
    def span(self) -> int:
        """Decades between the lowest and highest occupied bins, inclusive."""
        hit = [i for i, n in enumerate(self.counts) if n]
        return hit[-1] - hit[0] + 1 if hit else 0


def element_histogram(M: TransferMatrix, include_boundary: bool = False) -> Histogram:
    """Log10-magnitude histogram of the matrix entries."""
    p, p_bc = M.values()
    values = np.abs(p.ravel())
    if include_boundary:
        values = np.concatenate([values, np.abs(p_bc)])
    zeros = int(np.count_nonzero(values == 0))
    below = int(np.count_nonzero((values > 0) & (values < 1e-12)))
    kept = values[values >= 1e-12]
    exps = np.clip(np.floor(np.log10(kept)).astype(np.int64), -12, -1)
    counts = np.bincount(exps + 12, minlength=len(HISTOGRAM_DECADES))
    return Histogram(HISTOGRAM_DECADES, tuple(int(n) for n in counts), zeros, below)


def save_matrix(M: TransferMatrix, path) -> None:
    """Write FDIRW-MAT v1: text header, then P row-major and P_BC.

    A matrix with the sink response appends P_sink, P_sink_BC, U and U_BC
    in the same layout and says so in the header.
    """
    dtype = STORAGE_DTYPE[M.precision_tag]
    lines = [
        MATRIX_MAGIC,
        f"N {M.N}",
        f"dt_encoded {M.dt_encoded!r}",
        f"n_pre {M.n_pre}",
        f"precision {M.precision_tag.value}",
        f"geometry {M.geometry_hash}",
        f"source {M.source_mode}",
        f"sink {int(M.has_sink)}",
        "data",
    ]
    arrays = [M.P, M.P_BC]
    if M.has_sink:
        arrays += [getattr(M, name) for name in SINK_ARRAYS]
    body = b"".join(a.astype(dtype).tobytes() for a in arrays)
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8") + body)


def load_matrix(path, grid: PhaseGrid | None = None, params: PhysParams | None = None) -> TransferMatrix:
    """Read a matrix file; checks the geometry hash and dt when given."""
    raw = Path(path).read_bytes()
    marker = b"\ndata\n"
    cut = raw.find(marker)
    if not raw.startswith(MATRIX_MAGIC.encode()) or cut < 0:
        raise MatrixMismatchError(f"{path}: not an {MATRIX_MAGIC} file")
    header = dict(line.split(" ", 1) for line in raw[:cut].decode("utf-8").splitlines()[1:])
    try:
        n = int(header["N"])
        mode = PrecisionMode.parse(header["precision"])
        dt = float(header["dt_encoded"])
        n_pre = int(header["n_pre"])
        ghash = header["geometry"]
        has_sink = bool(int(header.get("sink", "0")))
    except (KeyError, ValueError) as exc:
        raise MatrixMismatchError(f"{path}: malformed header ({exc})") from None
    if grid is not None and ghash != grid.hash:
        raise MatrixMismatchError(
            f"{path}: matrix geometry hash {ghash} does not match geometry hash {grid.hash}"
        )
    if params is not None and not math.isclose(dt, params.dt_macro, rel_tol=1e-12):
        raise MatrixMismatchError(
            f"{path}: matrix encodes dt={dt!r} s but dt_macro is {params.dt_macro!r} s"
        )
    dtype = STORAGE_DTYPE[mode]
    data = np.frombuffer(raw[cut + len(marker):], dtype=dtype)
    block = n * n + n
    expected = 3 * block if has_sink else block
    if data.size != expected:
        raise MatrixMismatchError(f"{path}: expected {expected} entries, found {data.size}")
    parts = [data[i:i + block] for i in range(0, expected, block)]
    matrices = [(p[:n * n].reshape(n, n).copy(), p[n * n:].copy()) for p in parts]
    sink = {}
    if has_sink:
        sink = dict(zip(SINK_ARRAYS, (*matrices[1], *matrices[2])))
    return TransferMatrix(matrices[0][0], matrices[0][1], dt, n_pre,
                          mode, ghash, header.get("source", "group"), **sink)
