"""Coarse representative-node mesh over the near-field liquid."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from geometry import GeometryError, PhaseGrid
from precision import PrecisionMode

logger = logging.getLogger(__name__)

CMAP_MAGIC = "FDIRW-CMAP v1"
DEFAULT_FACTOR = 5


@dataclass(frozen=True, eq=False)
class CoarseMap:
    """Partition of near-field liquid voxels into groups.

    Voxels are addressed by near-field index (topology order). Members of
    group I are ``order[offsets[I]:offsets[I+1]]``, ascending.
    """

    group_of: np.ndarray
    order: np.ndarray
    offsets: np.ndarray
    block_of: np.ndarray
    near: np.ndarray
    n_active: int
    factor: int

    @property
    def N(self) -> int:
        return int(self.offsets.size - 1)

    @property
    def n_liquid(self) -> int:
        return int(self.group_of.size)

    @property
    def group_size(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def group_members(self) -> list[np.ndarray]:
        return [self.order[self.offsets[i]:self.offsets[i + 1]] for i in range(self.N)]

    def near_part(self, c: np.ndarray) -> np.ndarray:
        """Near-field values of ``c`` (accepts a full active field or near values)."""
        if c.shape[0] == self.n_liquid:
            return c
        if c.shape[0] == self.n_active:
            return c[self.near]
        raise ValueError(
            f"field of length {c.shape[0]} matches neither N_L={self.n_liquid} "
            f"nor the active voxel count {self.n_active}"
        )


def coarsen(grid: PhaseGrid, factor: int = DEFAULT_FACTOR) -> CoarseMap:
    """Group near-field liquid voxels by origin-anchored factor**3 blocks."""
    topo = grid.topology
    if topo.n_near == 0:
        raise GeometryError("no near-field liquid voxels to coarsen")
    nz, ny, nx = grid.spec.shape
    flat = topo.active[topo.near]
    z, y, x = np.unravel_index(flat, (nz, ny, nx))
    nby = -(-ny // factor)
    nbx = -(-nx // factor)
    block = (z // factor) * (nby * nbx) + (y // factor) * nbx + (x // factor)
    blocks, group_of = np.unique(block, return_inverse=True)
    group_of = group_of.astype(np.int64).ravel()
    order = np.argsort(group_of, kind="stable")
    offsets = np.concatenate([[0], np.cumsum(np.bincount(group_of, minlength=blocks.size))])
    cmap = CoarseMap(group_of, order, offsets.astype(np.int64), blocks.astype(np.int64),
                     topo.near, topo.active.size, factor)
    logger.info("coarse mesh: N=%d groups for N_L=%d (ratio %.1f)",
                cmap.N, cmap.n_liquid, cmap.n_liquid / cmap.N)
    return cmap


def map_fine_to_coarse(c: np.ndarray, cmap: CoarseMap,
                       mode: PrecisionMode = PrecisionMode.FULL) -> np.ndarray:
    """Group means of the fine liquid field (pairwise sums per group).

    Under any reduced mode the sums and the division run in binary32; the
    result is returned widened to binary64. ``c`` may carry extra columns.
    """
    values = cmap.near_part(np.asarray(c))[cmap.order]
    dtype = np.float64 if mode is PrecisionMode.FULL else np.float32
    values = values.astype(dtype, copy=False)
    out = np.empty((cmap.N,) + values.shape[1:], dtype=dtype)
    sizes = cmap.group_size
    for i in range(cmap.N):
        seg = values[cmap.offsets[i]:cmap.offsets[i + 1]]
        out[i] = np.sum(seg, axis=0, dtype=dtype) / dtype(sizes[i])
    return out.astype(np.float64)


def remap_coarse_to_fine(C: np.ndarray, cmap: CoarseMap, c: np.ndarray | None = None) -> np.ndarray:
    """Broadcast each group value back onto its member voxels.

    With ``c`` (a full active field) a copy is returned whose liquid entries
    are replaced and all others untouched; without it, near-field values.
    """
    near_values = np.asarray(C, dtype=np.float64)[cmap.group_of]
    if c is None:
        return near_values
    out = np.array(c, dtype=np.float64, copy=True)
    if out.shape[0] == cmap.n_liquid:
        return near_values
    out[cmap.near] = near_values
    return out


def save_coarse_map(cmap: CoarseMap, grid: PhaseGrid, path) -> None:
    """Write per-voxel group indices (-1 outside the near field) for audit."""
    topo = grid.topology
    per_voxel = np.full(grid.labels.size, -1, dtype="<i4")
    per_voxel[topo.active[topo.near]] = cmap.group_of
    lines = [
        CMAP_MAGIC,
        f"dims {grid.spec.nx} {grid.spec.ny} {grid.spec.nz}",
        f"factor {cmap.factor}",
        f"groups {cmap.N}",
        f"geometry {grid.hash}",
        "data",
    ]
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8") + per_voxel.tobytes())
