"""Model parameters and pointwise physics formulas.

Concentrations are per-voxel quantities; volumes are converted to voxel
units (divided by dh**3) once, so the far-field update is a count-weighted
average.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

DIMENSION = 3
REFERENCE_CONFIG = Path(__file__).with_name("reference.cfg")
MASS_GAP_WARNING = 0.05
ML_TO_M3 = 1.0e-6


class ConfigError(ValueError):
    """Raised for malformed parameter files or violated parameter invariants."""


class Phase(Enum):
    S = "S"
    L = "L"


@dataclass(frozen=True)
class PhysParams:
    """All simulation parameters (model symbols plus solver options).

    ``V_far`` and ``total_mass_0`` may be ``None`` meaning "derive from the
    geometry" (see :func:`resolve_for_geometry`).
    """

    dh: float
    dt_macro: float
    dt_fd: float
    D_S: float
    D_L: float
    A_S_over_RT: float
    A_L_over_RT: float
    c_S_eq: float
    c_L_eq: float
    c_S_0: float
    c_L_0: float
    k: float
    V_far: float | None
    total_mass_0: float | None
    coarsen_factor: int = 5
    shell_width: int = 5
    source_mode: str = "group"
    mixed_product: str = "b16"
    far_field_loading: float = 1.04
    coupling: str = "sink"

    def __post_init__(self):
        for name in ("dh", "dt_macro", "dt_fd", "D_S", "D_L", "A_S_over_RT",
                     "A_L_over_RT", "k", "c_S_eq", "c_L_eq"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be strictly positive, got {value!r}")
        if not self.c_S_0 < self.c_S_eq:
            raise ConfigError(
                f"c_S_0 ({self.c_S_0!r}) must be below c_S_eq ({self.c_S_eq!r})"
            )
        if not self.c_L_0 > self.c_L_eq:
            raise ConfigError(
                f"c_L_0 ({self.c_L_0!r}) must exceed c_L_eq ({self.c_L_eq!r})"
            )
        ratio = self.dt_macro / self.dt_fd
        if round(ratio) < 1 or abs(ratio - round(ratio)) > 1e-9 * ratio:
            raise ConfigError(
                f"dt_macro ({self.dt_macro!r}) is not an integer multiple of "
                f"dt_fd ({self.dt_fd!r}); ratio {ratio!r}"
            )
        if self.V_far is not None and not self.V_far > 0:
            raise ConfigError(f"V_far must be positive, got {self.V_far!r}")
        if self.total_mass_0 is not None and not self.total_mass_0 > 0:
            raise ConfigError(f"total_mass_0 must be positive, got {self.total_mass_0!r}")
        if self.coarsen_factor < 1:
            raise ConfigError(f"coarsen_factor must be >= 1, got {self.coarsen_factor}")
        if self.shell_width < 0:
            raise ConfigError(f"shell_width must be >= 0, got {self.shell_width}")
        if self.source_mode not in ("group", "voxel"):
            raise ConfigError(f"source_mode must be 'group' or 'voxel', got '{self.source_mode}'")
        if self.mixed_product not in ("b16", "b32"):
            raise ConfigError(f"mixed_product must be 'b16' or 'b32', got '{self.mixed_product}'")
        if not self.far_field_loading > 0:
            raise ConfigError("far_field_loading must be positive")
        if self.coupling not in ("sink", "exchange"):
            raise ConfigError(f"coupling must be 'sink' or 'exchange', got '{self.coupling}'")

    @property
    def n_pre(self) -> int:
        """FD substeps per macro step."""
        return int(round(self.dt_macro / self.dt_fd))

    @property
    def voxel_volume(self) -> float:
        return self.dh ** DIMENSION

    @property
    def n_far_equiv(self) -> float:
        """Far-field reservoir volume in voxel units."""
        if self.V_far is None:
            raise ConfigError("V_far is unresolved; call resolve_for_geometry first")
        return self.V_far / self.voxel_volume

    @property
    def resolved(self) -> bool:
        return self.V_far is not None and self.total_mass_0 is not None


REQUIRED_KEYS = (
    "dh", "dt_macro", "dt_fd", "D_S", "D_L", "A_S_over_RT", "A_L_over_RT",
    "c_S_eq", "c_L_eq", "c_S_0", "c_L_0", "k", "V_far", "total_mass_0",
)
OPTIONAL_KEYS = {
    "coarsen_factor": int,
    "shell_width": int,
    "source_mode": str,
    "mixed_product": str,
    "far_field_loading": float,
    "coupling": str,
}


def _parse_float(key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse '{raw}' as a number") from None


def _parse_volume(raw: str) -> float | None:
    text = raw.strip()
    if text.lower() == "auto":
        return None
    parts = text.split()
    if len(parts) == 2 and parts[1] in ("mL", "ml"):
        return _parse_float("V_far", parts[0]) * ML_TO_M3
    if len(parts) == 2 and parts[1] in ("m3", "m^3"):
        return _parse_float("V_far", parts[0])
    if len(parts) != 1:
        raise ConfigError(f"V_far: cannot parse '{raw}'")
    return _parse_float("V_far", text)


def parse_params(text: str, source: str = "<string>") -> PhysParams:
    """Parse a flat ``key = value`` parameter file."""
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got '{line}'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'")
        if key == "V_far":
            values[key] = _parse_volume(raw)
        elif key == "total_mass_0":
            values[key] = None if raw.lower() == "auto" else _parse_float(key, raw)
        elif key in REQUIRED_KEYS:
            values[key] = _parse_float(key, raw)
        elif key in OPTIONAL_KEYS:
            try:
                values[key] = OPTIONAL_KEYS[key](raw)
            except ValueError:
                raise ConfigError(f"{source}:{lineno}: bad value for {key}: '{raw}'") from None
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
    missing = [k for k in REQUIRED_KEYS if k not in values]
    if missing:
        raise ConfigError(f"{source}: missing keys: {', '.join(missing)}")
    return PhysParams(**values)


def load_params(path) -> PhysParams:
    """Read a parameter file from disk."""
    path = Path(path)
    return parse_params(path.read_text(encoding="utf-8"), source=str(path))


def reference_params() -> PhysParams:
    """Return the bundled reference parameter set."""
    return load_params(REFERENCE_CONFIG)


def dump_params(params: PhysParams) -> str:
    """Serialise parameters back to the config format (round-trips exactly)."""
    lines = []
    for f in dataclasses.fields(params):
        value = getattr(params, f.name)
        if value is None:
            lines.append(f"{f.name} = auto")
        elif isinstance(value, float):
            lines.append(f"{f.name} = {value!r}")
        else:
            lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def chem_potential(c, phase: Phase, params: PhysParams):
    """Return the dimensionless chemical potential mu/RT = (A/RT)(c - c_eq)."""
    if phase is Phase.S:
        return params.A_S_over_RT * (c - params.c_S_eq)
    return params.A_L_over_RT * (c - params.c_L_eq)


def driving_factors(c_L, c_S, params: PhysParams):
    """Return the pseudo-second-order driving factors (f_L, f_S).

    f_L vanishes at or below the liquid equilibrium; f_S is clamped at zero
    above the solid equilibrium (no desorption).
    """
    c_L = np.asarray(c_L, dtype=np.float64)
    c_S = np.asarray(c_S, dtype=np.float64)
    f_L = np.where(c_L > params.c_L_eq, (c_L - params.c_L_eq) / params.c_L_eq, 0.0)
    f_S = np.maximum((params.c_S_eq - c_S) / params.c_S_eq, 0.0)
    return f_L, f_S


def reaction_rate(c_L, c_S, params: PhysParams):
    """Return (R_dot_S, R_dot_L) for the interface absorption reaction."""
    f_L, f_S = driving_factors(c_L, c_S, params)
    rate = params.k * f_L * f_S
    if rate.ndim == 0:
        rate = float(rate)
    return rate, -rate


def far_field_update(total_mass_0: float, sum_near: float, sum_solid: float,
                     n_far_equiv: float) -> float:
    """Return the far-field concentration that restores global conservation."""
    if not n_far_equiv > 0:
        raise ValueError(f"far-field volume must be positive, got {n_far_equiv!r}")
    c_far = (total_mass_0 - sum_near - sum_solid) / n_far_equiv
    if c_far < 0:
        logger.warning(
            "far-field concentration negative (%.6g): mass over-absorbed", c_far
        )
    return c_far


def effective_diffusivity(params: PhysParams, phase: Phase) -> float:
    if phase is Phase.S:
        return params.D_S * params.A_S_over_RT
    return params.D_L * params.A_L_over_RT


def interface_diffusivity(params: PhysParams) -> float:
    """Harmonic mean of the solid and liquid diffusivities."""
    return 2.0 * params.D_S * params.D_L / (params.D_S + params.D_L)


def _explicit_limit(dh: float, d_eff: float) -> float:
    if d_eff <= 0:
        return math.inf
    return dh * dh / (2 * DIMENSION * d_eff)


def stability_limit(params: PhysParams, phase: Phase) -> float:
    """Largest stable explicit step for diffusion within one phase."""
    return _explicit_limit(params.dh, effective_diffusivity(params, phase))


def interface_stability_limit(params: PhysParams) -> float:
    """Largest stable explicit step for the solid-liquid potential flux."""
    ratio = max(params.A_S_over_RT, params.A_L_over_RT)
    return _explicit_limit(params.dh, interface_diffusivity(params) * ratio)


def initial_total_mass(params: PhysParams, n_solid: int, n_liquid: int,
                       n_far_equiv: float) -> float:
    """Total inventory implied by the initial concentrations and counts."""
    return params.c_S_0 * n_solid + params.c_L_0 * (n_liquid + n_far_equiv)


def resolve_for_geometry(params: PhysParams, n_solid: int, n_liquid: int) -> PhysParams:
    """Fill in ``auto`` far-field volume and total mass from the voxel counts."""
    v_far = params.V_far
    if v_far is None:
        n_far = params.far_field_loading * params.c_S_eq * n_solid / params.c_L_0 - n_liquid
        if not n_far > 0:
            raise ConfigError(
                f"far_field_loading {params.far_field_loading!r} leaves no far-field "
                f"volume for N_S={n_solid}, N_L={n_liquid}"
            )
        v_far = n_far * params.voxel_volume
    total = params.total_mass_0
    if total is None:
        total = initial_total_mass(params, n_solid, n_liquid, v_far / params.voxel_volume)
    return dataclasses.replace(params, V_far=v_far, total_mass_0=total)


def mass_consistency_gap(params: PhysParams, n_solid: int, n_liquid: int) -> float:
    """Relative gap between configured and recomputed total mass (warns above 5%)."""
    expected = initial_total_mass(params, n_solid, n_liquid, params.n_far_equiv)
    gap = abs(params.total_mass_0 - expected) / expected
    if gap > MASS_GAP_WARNING:
        logger.warning(
            "total_mass_0 %.8g differs from c_S_0*N_S + c_L_0*(N_L + N_far) = %.8g "
            "by %.2f%%", params.total_mass_0, expected, 100 * gap,
        )
    return gap
