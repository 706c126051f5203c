"""Reduced-precision arithmetic emulation for the superposition step.

Every elementary operation is carried out in binary64 and rounded to the
target format (IEEE-754 round-to-nearest-even, subnormals kept, overflow to
signed infinity). The rounding itself is numpy's float16/float32 cast, which
converts directly from binary64 without an intermediate format.
"""

from __future__ import annotations

import logging
import operator
from enum import Enum

import numpy as np

logger = logging.getLogger(__name__)


class PrecisionMode(Enum):
    """Arithmetic contract of one superposition run."""

    FULL = "full"
    B32 = "fp32"
    MIXED = "mixed"
    B16 = "fp16"

    @classmethod
    def parse(cls, name: str) -> "PrecisionMode":
        try:
            return cls(name.lower())
        except ValueError:
            names = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown precision mode '{name}' (expected one of: {names})") from None


MODE_NAMES = tuple(m.value for m in PrecisionMode)

# storage width of the transfer matrix per mode
STORAGE_DTYPE = {
    PrecisionMode.FULL: np.dtype("<f8"),
    PrecisionMode.B32: np.dtype("<f4"),
    PrecisionMode.MIXED: np.dtype("<f2"),
    PrecisionMode.B16: np.dtype("<f2"),
}

_OPS = {
    "+": operator.add,
    "-": operator.sub,
    "*": operator.mul,
    "/": operator.truediv,
}


def _round_to(x, dtype):
    arr = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        out = arr.astype(dtype).astype(np.float64)
    if out.ndim == 0 and not isinstance(x, np.ndarray):
        return float(out)
    return out


def round_b16(x):
    """Return ``x`` rounded to the nearest binary16 value, widened back to binary64."""
    return _round_to(x, np.float16)


def round_b32(x):
    """Return ``x`` rounded to the nearest binary32 value, widened back to binary64."""
    return _round_to(x, np.float32)


def _identity(x):
    return x


def _rounders(mode: PrecisionMode, mixed_product: str = "b16"):
    """Return (operand, product, accumulator) rounding functions for a mode."""
    if mode is PrecisionMode.FULL:
        return _identity, _identity, _identity
    if mode is PrecisionMode.B32:
        return round_b32, round_b32, round_b32
    if mode is PrecisionMode.B16:
        return round_b16, round_b16, round_b16
    if mixed_product == "b16":
        return round_b16, round_b16, round_b32
    if mixed_product == "b32":
        return round_b16, round_b32, round_b32
    raise ValueError(f"mixed_product must be 'b16' or 'b32', got '{mixed_product}'")


def mapping_mode(mode: PrecisionMode) -> PrecisionMode:
    """Mode used by the mapping step: binary32 under every reduced mode."""
    return PrecisionMode.FULL if mode is PrecisionMode.FULL else PrecisionMode.B32


def emulated_op(op: str, a, b, mode: PrecisionMode):
    """Apply one elementary operation under ``mode``'s format.

    Operands are rounded to the format first, then the exact binary64 result
    is rounded once more. MIXED has no single format and is rejected here.
    """
    if mode is PrecisionMode.MIXED:
        raise ValueError("mixed mode has no single arithmetic format")
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unsupported operation '{op}'") from None
    rnd, _, _ = _rounders(mode)
    with np.errstate(all="ignore"):
        return rnd(fn(rnd(a), rnd(b)))


def dot_with_boundary(p_row, c_vec, p_bc: float, c_far: float,
                      mode: PrecisionMode, mixed_product: str = "b16") -> float:
    """Return sum_j p_row[j]*c_vec[j] + p_bc*c_far under a precision contract.

    Accumulation runs strictly in ascending index order. No fused
    multiply-add: each product is formed, rounded, then added.
    """
    p_row = np.asarray(p_row, dtype=np.float64)
    c_vec = np.asarray(c_vec, dtype=np.float64)
    if p_row.shape != c_vec.shape:
        raise ValueError(f"length mismatch: {p_row.shape[0]} vs {c_vec.shape[0]}")
    r_op, r_prod, r_acc = _rounders(mode, mixed_product)
    ps = [float(v) for v in r_op(p_row)]
    cs = [float(v) for v in r_op(c_vec)]
    acc = 0.0
    with np.errstate(all="ignore"):
        for p, c in zip(ps, cs):
            acc = r_acc(acc + r_prod(p * c))
        acc = r_acc(acc + r_prod(r_op(float(p_bc)) * r_op(float(c_far))))
    if mode is PrecisionMode.MIXED:
        acc = round_b32(acc)
    return float(acc)


def superpose_rows(P, C, p_bc, c_far: float, mode: PrecisionMode,
                   mixed_product: str = "b16") -> np.ndarray:
    """Row-vectorised :func:`dot_with_boundary` over every row of ``P``.

    Each row sees exactly the operation sequence of the scalar routine, so
    the result bits do not depend on how rows are split across workers.
    """
    r_op, r_prod, r_acc = _rounders(mode, mixed_product)
    cols = np.ascontiguousarray(r_op(np.asarray(P, dtype=np.float64)).T)
    cv = r_op(np.asarray(C, dtype=np.float64))
    bc = r_op(np.asarray(p_bc, dtype=np.float64))
    cf = r_op(float(c_far))
    acc = np.zeros(cols.shape[1], dtype=np.float64)
    with np.errstate(all="ignore"):
        for j in range(cols.shape[0]):
            acc = r_acc(acc + r_prod(cols[j] * cv[j]))
        acc = r_acc(acc + r_prod(bc * cf))
    if mode is PrecisionMode.MIXED:
        acc = round_b32(acc)
    return np.asarray(acc, dtype=np.float64)
