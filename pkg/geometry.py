"""Voxelised computational domain: porous particle, near-field shell, far field."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass
from enum import IntEnum
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.ndimage
import scipy.sparse

logger = logging.getLogger(__name__)

GEOM_MAGIC = "FDIRW-GEOM v1"
DEFAULT_SHELL_WIDTH = 5


class GeometryError(ValueError):
    """Raised for grids that cannot host the requested particle or domain."""


class Label(IntEnum):
    SOLID = 0
    LIQUID_NEAR = 1
    FAR = 2


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    nz: int
    dh: float
    d: int = 3

    def validate(self) -> None:
        if min(self.nx, self.ny, self.nz) < 8:
            raise GeometryError(
                f"grid {self.nx}x{self.ny}x{self.nz} below the 8-voxel minimum per axis"
            )
        if not self.dh > 0:
            raise GeometryError(f"dh must be positive, got {self.dh!r}")
        if self.d != 3:
            raise GeometryError(f"only 3-D grids are supported, got d={self.d}")

    @property
    def shape(self) -> tuple[int, int, int]:
        """Array shape (z, y, x); C-order flattening is x-fastest."""
        return (self.nz, self.ny, self.nx)

    @property
    def voxel_volume(self) -> float:
        return self.dh ** self.d


@dataclass(frozen=True)
class ParticleSpec:
    r_p: float
    n_pores: int = 0
    pore_radius_range: tuple[float, float] = (2.0, 3.0)
    rng_seed: int = 0

    def validate(self) -> None:
        lo, hi = self.pore_radius_range
        if self.r_p < 4:
            raise GeometryError(f"particle radius {self.r_p} below the minimum of 4 voxels")
        if self.n_pores < 0:
            raise GeometryError("pore count must be non-negative")
        if self.n_pores and not 0 < lo <= hi < self.r_p:
            raise GeometryError(
                f"pore radii [{lo}, {hi}] must satisfy 0 < min <= max < r_p={self.r_p}"
            )


@dataclass(frozen=True)
class Topology:
    """Index structures shared by the solvers.

    ``active`` lists the flat (x-fastest) indices of all non-FAR voxels; a
    fine field is stored in that order. ``near`` and ``solid`` are positions
    into ``active``. Pair arrays list every face once, axis by axis.
    """

    active: np.ndarray
    near: np.ndarray
    solid: np.ndarray
    near_adjacency: scipy.sparse.csr_matrix
    near_degree: np.ndarray
    far_faces: np.ndarray
    solid_pairs: tuple[np.ndarray, np.ndarray]
    interface_pairs: tuple[np.ndarray, np.ndarray]

    @property
    def n_near(self) -> int:
        return int(self.near.size)

    @property
    def n_solid(self) -> int:
        return int(self.solid.size)


def _face_pairs(shape: tuple[int, int, int]):
    """Yield (a, b) flat index arrays of face-adjacent voxels, one axis at a time."""
    idx = np.arange(int(np.prod(shape)), dtype=np.int64).reshape(shape)
    for axis in (2, 1, 0):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        yield idx[tuple(lo)].ravel(), idx[tuple(hi)].ravel()


@dataclass(frozen=True, eq=False)
class PhaseGrid:
    """Labelled voxel grid plus the particle metadata that produced it."""

    spec: GridSpec
    labels: np.ndarray
    center: tuple[float, float, float]
    r_p: float | None = None
    n_far_equiv: float = 0.0
    shell_width: int = DEFAULT_SHELL_WIDTH
    particle: ParticleSpec | None = None

    @classmethod
    def from_labels(cls, labels, dh: float, r_p: float | None = None,
                    center=None, n_far_equiv: float = 0.0) -> "PhaseGrid":
        """Build a grid straight from a (z, y, x) label array."""
        arr = np.array(labels, dtype=np.uint8)
        if arr.ndim != 3:
            raise GeometryError(f"labels must be 3-D, got shape {arr.shape}")
        if arr.size and arr.max() > Label.FAR:
            raise GeometryError("labels contain values outside SOLID/LIQUID_NEAR/FAR")
        arr.flags.writeable = False
        nz, ny, nx = arr.shape
        if center is None:
            center = (nz // 2, ny // 2, nx // 2)
        return cls(GridSpec(nx, ny, nz, dh), arr, tuple(float(c) for c in center),
                   r_p, n_far_equiv)

    @property
    def n_solid(self) -> int:
        return int(np.count_nonzero(self.labels == Label.SOLID))

    @property
    def n_liquid(self) -> int:
        """N_L: near-field liquid voxels."""
        return int(np.count_nonzero(self.labels == Label.LIQUID_NEAR))

    @property
    def n_active(self) -> int:
        return self.n_solid + self.n_liquid

    @cached_property
    def hash(self) -> str:
        return geometry_hash(self)

    @cached_property
    def topology(self) -> Topology:
        return _build_topology(self.labels)

    def same_as(self, other: "PhaseGrid") -> bool:
        return (
            self.spec == other.spec
            and np.array_equal(self.labels, other.labels)
            and self.center == other.center
            and self.r_p == other.r_p
            and self.n_far_equiv == other.n_far_equiv
            and self.shell_width == other.shell_width
            and self.particle == other.particle
        )


def _build_topology(labels: np.ndarray) -> Topology:
    flat = labels.ravel()
    n = flat.size
    active = np.flatnonzero(flat != Label.FAR)
    pos = np.full(n, -1, dtype=np.int64)
    pos[active] = np.arange(active.size)
    near_flat = np.flatnonzero(flat == Label.LIQUID_NEAR)
    solid_flat = np.flatnonzero(flat == Label.SOLID)
    near_index = np.full(n, -1, dtype=np.int64)
    near_index[near_flat] = np.arange(near_flat.size)
    solid_index = np.full(n, -1, dtype=np.int64)
    solid_index[solid_flat] = np.arange(solid_flat.size)

    nn_rows, nn_cols = [], []
    far_hits = []
    ss_a, ss_b = [], []
    if_s, if_l = [], []
    for a, b in _face_pairs(labels.shape):
        la, lb = flat[a], flat[b]
        m = (la == Label.LIQUID_NEAR) & (lb == Label.LIQUID_NEAR)
        nn_rows.append(near_index[a[m]])
        nn_cols.append(near_index[b[m]])
        far_hits.append(near_index[a[(la == Label.LIQUID_NEAR) & (lb == Label.FAR)]])
        far_hits.append(near_index[b[(lb == Label.LIQUID_NEAR) & (la == Label.FAR)]])
        m = (la == Label.SOLID) & (lb == Label.SOLID)
        ss_a.append(solid_index[a[m]])
        ss_b.append(solid_index[b[m]])
        m = (la == Label.SOLID) & (lb == Label.LIQUID_NEAR)
        if_s.append(solid_index[a[m]])
        if_l.append(near_index[b[m]])
        m = (la == Label.LIQUID_NEAR) & (lb == Label.SOLID)
        if_s.append(solid_index[b[m]])
        if_l.append(near_index[a[m]])

    n_near = near_flat.size
    rows = np.concatenate(nn_rows)
    cols = np.concatenate(nn_cols)
    adjacency = scipy.sparse.coo_matrix(
        (np.ones(2 * rows.size), (np.concatenate([rows, cols]), np.concatenate([cols, rows]))),
        shape=(n_near, n_near),
    ).tocsr()
    adjacency.sort_indices()
    far_faces = np.bincount(np.concatenate(far_hits), minlength=n_near).astype(np.float64)
    near_degree = np.asarray(adjacency.sum(axis=1)).ravel() + far_faces

    return Topology(
        active=active,
        near=pos[near_flat],
        solid=pos[solid_flat],
        near_adjacency=adjacency,
        near_degree=near_degree,
        far_faces=far_faces,
        solid_pairs=(np.concatenate(ss_a), np.concatenate(ss_b)),
        interface_pairs=(np.concatenate(if_s), np.concatenate(if_l)),
    )


def _squared_distance(shape, center) -> np.ndarray:
    z, y, x = np.indices(shape, dtype=np.float64)
    cz, cy, cx = center
    return (z - cz) ** 2 + (y - cy) ** 2 + (x - cx) ** 2


def _check_margin(spec: GridSpec, center, r_p: float, shell_width: int) -> None:
    need = r_p + shell_width
    for axis, n, c in zip("zyx", spec.shape, center):
        room = min(c, n - 1 - c)
        if room < need:
            raise GeometryError(
                f"particle does not fit along {axis}: center {c} leaves {room} voxels to the "
                f"nearest face, need r_p + {shell_width} = {need} (grid {n})"
            )


def _sample_pores(part: ParticleSpec, rng: np.random.Generator):
    """Pore centers uniform in the particle ball, radii uniform in range."""
    pores = []
    lo, hi = part.pore_radius_range
    while len(pores) < part.n_pores:
        offset = rng.uniform(-part.r_p, part.r_p, size=3)
        if offset @ offset > part.r_p * part.r_p:
            continue
        pores.append((offset, rng.uniform(lo, hi)))
    return pores


def _shell_labels(solid: np.ndarray, d2: np.ndarray, r_shell: float) -> np.ndarray:
    labels = np.full(solid.shape, Label.FAR, dtype=np.uint8)
    labels[~solid & (d2 <= r_shell * r_shell)] = Label.LIQUID_NEAR
    labels[solid] = Label.SOLID
    return labels


def generate_particle(spec: GridSpec, part: ParticleSpec,
                      shell_width: int = DEFAULT_SHELL_WIDTH) -> PhaseGrid:
    """Build a porous spherical particle centred in the grid.

    Liquid cavities with no face-connected path to the grid boundary are
    relabelled solid. Liquid is labelled by the geometric shell rule; the
    far-field volume stays a voxel count until :func:`partition_near_far`.
    """
    spec.validate()
    part.validate()
    center = tuple(n // 2 for n in spec.shape)
    _check_margin(spec, center, part.r_p, shell_width)

    d2 = _squared_distance(spec.shape, center)
    solid = d2 <= part.r_p * part.r_p
    rng = np.random.default_rng(part.rng_seed)
    for offset, radius in _sample_pores(part, rng):
        pc = np.asarray(center, dtype=np.float64) + offset
        solid &= _squared_distance(spec.shape, pc) > radius * radius

    liquid = ~solid
    components, _ = scipy.ndimage.label(liquid)
    border = np.concatenate([
        components[0].ravel(), components[-1].ravel(),
        components[:, 0].ravel(), components[:, -1].ravel(),
        components[:, :, 0].ravel(), components[:, :, -1].ravel(),
    ])
    open_ids = np.unique(border[border > 0])
    trapped = liquid & ~np.isin(components, open_ids)
    n_trapped = int(np.count_nonzero(trapped))
    if n_trapped:
        logger.debug("relabelled %d trapped liquid voxels as solid", n_trapped)
    solid |= trapped

    labels = _shell_labels(solid, d2, part.r_p + shell_width)
    labels.flags.writeable = False
    grid = PhaseGrid(
        spec, labels, tuple(float(c) for c in center), float(part.r_p),
        float(np.count_nonzero(labels == Label.FAR)), shell_width, part,
    )
    logger.info("particle r_p=%s: N_S=%d N_L=%d", part.r_p, grid.n_solid, grid.n_liquid)
    return grid


def partition_near_far(grid: PhaseGrid, params) -> PhaseGrid:
    """Split liquid into the resolved near-field shell and the far-field reservoir."""
    if grid.r_p is None:
        raise GeometryError("grid has no particle radius; cannot place the near-field shell")
    if abs(grid.spec.dh - params.dh) > 1e-12 * params.dh:
        raise GeometryError(f"grid dh {grid.spec.dh!r} does not match parameter dh {params.dh!r}")
    solid = grid.labels == Label.SOLID
    if solid.all() or not solid.any():
        raise GeometryError("grid must contain both solid and liquid voxels")
    d2 = _squared_distance(grid.spec.shape, grid.center)
    labels = _shell_labels(solid, d2, grid.r_p + params.shell_width)
    if not np.any(labels == Label.LIQUID_NEAR):
        raise GeometryError("near-field shell contains no liquid voxels")
    labels.flags.writeable = False
    return dataclasses.replace(
        grid, labels=labels, n_far_equiv=params.n_far_equiv, shell_width=params.shell_width,
    )


def sphere_voxel_count(grid: PhaseGrid) -> int:
    """Voxels inside the digitised particle sphere (solid plus pores)."""
    d2 = _squared_distance(grid.spec.shape, grid.center)
    return int(np.count_nonzero(d2 <= grid.r_p * grid.r_p))


def porosity(grid: PhaseGrid) -> float:
    return 1.0 - grid.n_solid / sphere_voxel_count(grid)


def geometry_hash(grid: PhaseGrid) -> str:
    h = hashlib.sha256()
    h.update(f"{grid.spec.nx} {grid.spec.ny} {grid.spec.nz} {grid.spec.dh!r}".encode())
    h.update(np.ascontiguousarray(grid.labels, dtype=np.uint8).tobytes())
    return h.hexdigest()[:16]


def _header_value(value) -> str:
    return "none" if value is None else repr(value)


def save_geometry(grid: PhaseGrid, path) -> None:
    """Write the FDIRW-GEOM v1 file: text header, then one byte per voxel."""
    part = grid.particle
    lines = [
        GEOM_MAGIC,
        f"dims {grid.spec.nx} {grid.spec.ny} {grid.spec.nz}",
        f"dh {grid.spec.dh!r}",
        f"r_p {_header_value(grid.r_p)}",
        "center " + " ".join(repr(c) for c in grid.center),
        f"seed {part.rng_seed if part else 'none'}",
        "pores " + (f"{part.n_pores} {part.pore_radius_range[0]!r} {part.pore_radius_range[1]!r}"
                    if part else "none"),
        f"shell {grid.shell_width}",
        f"counts {grid.n_solid} {grid.n_liquid} {grid.n_far_equiv!r}",
        "data",
    ]
    header = ("\n".join(lines) + "\n").encode("utf-8")
    Path(path).write_bytes(header + np.ascontiguousarray(grid.labels, dtype=np.uint8).tobytes())


def load_geometry(path) -> PhaseGrid:
    """Read an FDIRW-GEOM v1 file written by :func:`save_geometry`."""
    raw = Path(path).read_bytes()
    marker = b"\ndata\n"
    cut = raw.find(marker)
    if not raw.startswith(GEOM_MAGIC.encode()) or cut < 0:
        raise GeometryError(f"{path}: not an {GEOM_MAGIC} file")
    fields = {}
    for line in raw[:cut].decode("utf-8").splitlines()[1:]:
        key, _, rest = line.partition(" ")
        fields[key] = rest.split()
    try:
        nx, ny, nz = (int(v) for v in fields["dims"])
        dh = float(fields["dh"][0])
        r_p = None if fields["r_p"][0] == "none" else float(fields["r_p"][0])
        center = tuple(float(v) for v in fields["center"])
        shell = int(fields["shell"][0])
        n_s, n_l, n_far = fields["counts"]
        particle = None
        if fields["seed"][0] != "none":
            n_pores, lo, hi = fields["pores"]
            particle = ParticleSpec(r_p, int(n_pores), (float(lo), float(hi)),
                                    int(fields["seed"][0]))
    except (KeyError, ValueError, IndexError) as exc:
        raise GeometryError(f"{path}: malformed header ({exc})") from None
    body = raw[cut + len(marker):]
    if len(body) != nx * ny * nz:
        raise GeometryError(f"{path}: expected {nx * ny * nz} voxel bytes, found {len(body)}")
    labels = np.frombuffer(body, dtype=np.uint8).reshape(nz, ny, nx).copy()
    labels.flags.writeable = False
    grid = PhaseGrid(GridSpec(nx, ny, nz, dh), labels, center, r_p, float(n_far), shell, particle)
    if grid.n_solid != int(n_s) or grid.n_liquid != int(n_l):
        raise GeometryError(f"{path}: header counts do not match voxel data")
    return grid
