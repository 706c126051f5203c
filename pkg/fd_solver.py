"""Explicit finite-difference stepping for liquid, solid and interface exchange.

All updates are Jacobi-style: fluxes come from the pre-step field and are
accumulated per voxel in a fixed face order before being applied.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import physics
from geometry import PhaseGrid, Topology
from physics import Phase, PhysParams

logger = logging.getLogger(__name__)

FIELD_MAGIC = "FDIRW-FIELD v1"
KINETICS_COLUMNS = ("t", "Q_S", "Q_L_near", "c_far", "Q_total")
# relative slack on stability comparisons (dt values read back from text)
STABILITY_SLACK = 1e-12


class StabilityError(ValueError):
    """Raised when a time step exceeds the explicit stability limit."""


@dataclass(frozen=True)
class FineState:
    """Concentration per non-FAR voxel (topology order), far field, time."""

    c: np.ndarray
    c_far: float
    t: float = 0.0

    def near_values(self, grid: PhaseGrid) -> np.ndarray:
        return self.c[grid.topology.near]

    def solid_values(self, grid: PhaseGrid) -> np.ndarray:
        return self.c[grid.topology.solid]

    def totals(self, grid: PhaseGrid) -> tuple[float, float, float]:
        """Return (Q_S, Q_L_near, Q_total)."""
        q_s = float(np.sum(self.solid_values(grid)))
        q_l = float(np.sum(self.near_values(grid)))
        return q_s, q_l, q_s + q_l + self.c_far * grid.n_far_equiv


@dataclass
class KineticsRecord:
    """Sampled absorption kinetics."""

    Q_S_e: float
    Q_L_0: float
    t: list = field(default_factory=list)
    Q_S: list = field(default_factory=list)
    Q_L_near: list = field(default_factory=list)
    c_far: list = field(default_factory=list)
    Q_total: list = field(default_factory=list)

    @classmethod
    def for_grid(cls, grid: PhaseGrid, params: PhysParams) -> "KineticsRecord":
        return cls(params.c_S_eq * grid.n_solid, params.c_L_0 * grid.n_liquid)

    def __len__(self) -> int:
        return len(self.t)

    def sample(self, state: FineState, grid: PhaseGrid) -> None:
        q_s, q_l, q_total = state.totals(grid)
        self.t.append(state.t)
        self.Q_S.append(q_s)
        self.Q_L_near.append(q_l)
        self.c_far.append(state.c_far)
        self.Q_total.append(q_total)

    @property
    def solid_fraction(self) -> np.ndarray:
        """Normalised solid concentration Q_S / Q_S_e."""
        return np.asarray(self.Q_S) / self.Q_S_e

    @property
    def liquid_fraction(self) -> np.ndarray:
        return np.asarray(self.Q_L_near) / self.Q_L_0

    def max_conservation_error(self, total_mass_0: float) -> float:
        if not self.Q_total:
            return 0.0
        return float(np.max(np.abs(np.asarray(self.Q_total) - total_mass_0)) / total_mass_0)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(KINETICS_COLUMNS)
            for row in zip(self.t, self.Q_S, self.Q_L_near, self.c_far, self.Q_total):
                writer.writerow([repr(float(v)) for v in row])

    @classmethod
    def read_csv(cls, path, Q_S_e: float = math.nan, Q_L_0: float = math.nan) -> "KineticsRecord":
        record = cls(Q_S_e, Q_L_0)
        with open(path, newline="", encoding="utf-8") as f:
            for row in csv.DictReader(f):
                for name in KINETICS_COLUMNS:
                    getattr(record, name).append(float(row[name]))
        return record


def _liquid_coefficient(params: PhysParams, dt: float) -> float:
    return physics.effective_diffusivity(params, Phase.L) * dt / params.dh ** 2


def liquid_update(topo: Topology, x: np.ndarray, c_far, lam: float) -> np.ndarray:
    """One explicit liquid step on near-field values ``x``.

    ``x`` is (N_L,) or (N_L, k); ``c_far`` is a scalar or one Dirichlet value
    per column. Solid faces are no-flux, FAR faces see ``c_far``.
    """
    adj = topo.near_adjacency
    if x.ndim == 1:
        lap = adj @ x - topo.near_degree * x + topo.far_faces * c_far
    else:
        far = np.asarray(c_far, dtype=np.float64)
        lap = adj @ x - topo.near_degree[:, None] * x + topo.far_faces[:, None] * far[None, :]
    return x + lam * lap


def _check_step(dt: float, limit: float, what: str) -> None:
    if not dt > 0:
        raise StabilityError(f"{what} step must be positive, got {dt!r}")
    if dt > limit * (1 + STABILITY_SLACK):
        raise StabilityError(f"{what} step {dt!r} s exceeds the stability limit {limit!r} s")


def fd_step_liquid(state: FineState, grid: PhaseGrid, params: PhysParams, dt: float) -> FineState:
    """Advance near-field liquid diffusion by one explicit step."""
    _check_step(dt, physics.stability_limit(params, Phase.L), "liquid")
    topo = grid.topology
    c = state.c.copy()
    c[topo.near] = liquid_update(topo, state.c[topo.near], state.c_far,
                                 _liquid_coefficient(params, dt))
    return dataclasses.replace(state, c=c)


def solid_interface_limit(params: PhysParams) -> float:
    return min(physics.stability_limit(params, Phase.S),
               physics.interface_stability_limit(params))


def _solid_diffusion(topo: Topology, cs: np.ndarray, params: PhysParams, dt: float) -> np.ndarray:
    a, b = topo.solid_pairs
    flux = physics.effective_diffusivity(params, Phase.S) * dt / params.dh ** 2 * (cs[b] - cs[a])
    n_s = cs.size
    return np.bincount(a, weights=flux, minlength=n_s) - np.bincount(b, weights=flux, minlength=n_s)


def interface_transfer(cl_faces, cs_faces, params: PhysParams, dt: float) -> np.ndarray:
    """Liquid-to-solid amount per interface face over ``dt`` from the pre-step field.

    Potential-driven flux plus the absorption reaction; negative values
    flow back into the liquid.
    """
    mu_l = physics.chem_potential(cl_faces, Phase.L, params)
    mu_s = physics.chem_potential(cs_faces, Phase.S, params)
    q = physics.interface_diffusivity(params) * dt / params.dh ** 2 * (mu_l - mu_s)
    r_s, _ = physics.reaction_rate(cl_faces, cs_faces, params)
    return q + r_s * dt


def fd_step_solid(state: FineState, grid: PhaseGrid, params: PhysParams, dt: float) -> FineState:
    """Solid diffusion alone, one explicit step (interface faces no-flux)."""
    _check_step(dt, physics.stability_limit(params, Phase.S), "solid")
    topo = grid.topology
    cs = state.c[topo.solid]
    c = state.c.copy()
    c[topo.solid] = cs + _solid_diffusion(topo, cs, params, dt)
    return dataclasses.replace(state, c=c)


def fd_step_solid_interface(state: FineState, grid: PhaseGrid, params: PhysParams,
                            dt: float, counters: Counter | None = None) -> FineState:
    """Solid diffusion, interface potential flux and absorption, one step.

    Interface exchange is evaluated per solid-liquid face. A liquid voxel
    whose outgoing transfers exceed its content has them scaled down to
    what it holds; each such voxel counts as one ``clamped_transfers`` event.
    """
    _check_step(dt, solid_interface_limit(params), "solid/interface")
    topo = grid.topology
    cs = state.c[topo.solid]
    cl = state.c[topo.near]
    n_s, n_l = cs.size, cl.size
    ds = _solid_diffusion(topo, cs, params, dt)

    s, l = topo.interface_pairs
    if s.size:
        q = interface_transfer(cl[l], cs[s], params, dt)
        out = np.bincount(l, weights=np.maximum(q, 0.0), minlength=n_l)
        avail = np.maximum(cl, 0.0)
        over = out > avail
        n_over = int(np.count_nonzero(over))
        if n_over:
            scale = np.ones(n_l)
            scale[over] = avail[over] / out[over]
            q = np.where(q > 0, q * scale[l], q)
            if counters is not None:
                counters["clamped_transfers"] += n_over
        ds = ds + np.bincount(s, weights=q, minlength=n_s)
        dl = -np.bincount(l, weights=q, minlength=n_l)
    else:
        dl = np.zeros(n_l)

    c = state.c.copy()
    c[topo.solid] = cs + ds
    c[topo.near] = cl + dl
    return dataclasses.replace(state, c=c)


def substep_count(params: PhysParams, dt: float, limit: float | None = None) -> int:
    """Sub-steps needed to cover ``dt`` at half ``limit`` (default: solid/interface)."""
    limit = solid_interface_limit(params) if limit is None else limit
    if math.isinf(limit):
        return 1
    return max(1, math.ceil(dt / (0.5 * limit) - STABILITY_SLACK))


def advance_solid_interface(state: FineState, grid: PhaseGrid, params: PhysParams,
                            dt: float, counters: Counter | None = None) -> FineState:
    """Cover ``dt`` of solid/interface physics with automatic sub-stepping."""
    n_sub = substep_count(params, dt)
    logger.debug("solid/interface: %d sub-steps of %.6g s", n_sub, dt / n_sub)
    for _ in range(n_sub):
        state = fd_step_solid_interface(state, grid, params, dt / n_sub, counters)
    return state


def advance_solid(state: FineState, grid: PhaseGrid, params: PhysParams, dt: float) -> FineState:
    """Cover ``dt`` of solid diffusion with automatic sub-stepping."""
    n_sub = substep_count(params, dt, physics.stability_limit(params, Phase.S))
    for _ in range(n_sub):
        state = fd_step_solid(state, grid, params, dt / n_sub)
    return state


def update_far_field(state: FineState, grid: PhaseGrid, params: PhysParams,
                     counters: Counter | None = None) -> FineState:
    topo = grid.topology
    c_far = physics.far_field_update(
        params.total_mass_0,
        float(np.sum(state.c[topo.near])),
        float(np.sum(state.c[topo.solid])),
        grid.n_far_equiv,
    )
    if c_far < 0 and counters is not None:
        counters["negative_far_field"] += 1
    return dataclasses.replace(state, c_far=c_far)


def initial_state(grid: PhaseGrid, params: PhysParams) -> FineState:
    """Initial concentrations, with c_far set by the conservation constraint."""
    topo = grid.topology
    c = np.zeros(topo.active.size)
    c[topo.solid] = params.c_S_0
    c[topo.near] = params.c_L_0
    return update_far_field(FineState(c, params.c_L_0, 0.0), grid, params)


def step_count(t0: float, t_end: float, dt: float) -> int:
    """Number of ``dt`` steps from ``t0`` to ``t_end`` (rounding up)."""
    if t_end < t0:
        raise ValueError(f"t_end {t_end!r} precedes the current time {t0!r}")
    n = (t_end - t0) / dt
    k = round(n)
    if abs(n - k) <= 1e-9 * max(1.0, n):
        return int(k)
    return int(math.ceil(n))


def due_dumps(dump_at, done: set, t: float) -> list:
    """Requested dump times reached at ``t`` and not yet written."""
    return [td for td in dump_at if td not in done and t >= td * (1 - 1e-12)]


def dump_path(field_dir, t_dump: float) -> Path:
    return Path(field_dir) / f"field_{t_dump:.6g}.bin"


def fd_run_baseline(state: FineState, grid: PhaseGrid, params: PhysParams, t_end: float,
                    stride: int | None = None, counters: Counter | None = None,
                    dump_at=(), field_dir=None):
    """Reference solver: every physics term at the dt_fd cadence.

    Samples kinetics every ``stride`` substeps (default: once per macro step)
    and writes a field dump at the first substep reaching each ``dump_at``
    time. Returns (state, KineticsRecord).
    """
    dt = params.dt_fd
    _check_step(dt, physics.stability_limit(params, Phase.L), "liquid")
    _check_step(dt, solid_interface_limit(params), "solid/interface")
    stride = stride or params.n_pre
    record = KineticsRecord.for_grid(grid, params)
    n_steps = step_count(state.t, t_end, dt)
    t0 = state.t
    done: set = set()
    if field_dir is not None and dump_at:
        Path(field_dir).mkdir(parents=True, exist_ok=True)
    for i in range(1, n_steps + 1):
        state = fd_step_liquid(state, grid, params, dt)
        state = fd_step_solid_interface(state, grid, params, dt, counters)
        state = update_far_field(state, grid, params, counters)
        state = dataclasses.replace(state, t=t0 + i * dt)
        if i % stride == 0 or i == n_steps:
            record.sample(state, grid)
        if field_dir is not None:
            for td in due_dumps(dump_at, done, state.t):
                save_field(state, grid, dump_path(field_dir, td))
                done.add(td)
    logger.info("baseline: %d substeps to t=%.6g s", n_steps, state.t)
    return state, record


def save_field(state: FineState, grid: PhaseGrid, path) -> None:
    """Write an FDIRW-FIELD v1 dump: header, then binary64 values and c_far."""
    lines = [
        FIELD_MAGIC,
        f"time {state.t!r}",
        f"dims {grid.spec.nx} {grid.spec.ny} {grid.spec.nz}",
        f"geometry {grid.hash}",
        f"values {state.c.size}",
        "data",
    ]
    body = np.concatenate([state.c, [state.c_far]]).astype("<f8").tobytes()
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8") + body)


def load_field(path, grid: PhaseGrid) -> FineState:
    raw = Path(path).read_bytes()
    marker = b"\ndata\n"
    cut = raw.find(marker)
    if not raw.startswith(FIELD_MAGIC.encode()) or cut < 0:
        raise ValueError(f"{path}: not an {FIELD_MAGIC} file")
    header = dict(line.split(" ", 1) for line in raw[:cut].decode("utf-8").splitlines()[1:])
    if header.get("geometry") != grid.hash:
        raise ValueError(
            f"{path}: field geometry {header.get('geometry')} does not match grid {grid.hash}"
        )
    values = np.frombuffer(raw[cut + len(marker):], dtype="<f8").astype(np.float64)
    if values.size != grid.n_active + 1:
        raise ValueError(f"{path}: expected {grid.n_active + 1} values, found {values.size}")
    return FineState(values[:-1].copy(), float(values[-1]), float(header["time"]))
