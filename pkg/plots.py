"""SVG charts for kinetics, precision errors and scaling fits."""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

# fixed so repeated runs write identical SVG ids
SVG_HASH_SALT = "fdirw"


def _pyplot():
    try:
        import matplotlib
    except Exception as exc:  # pragma: no cover - optional dependency
        raise RuntimeError("matplotlib is required for plots") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = SVG_HASH_SALT
    return plt


def _save(fig, plt, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", bbox_inches="tight", metadata={"Date": None})
    plt.close(fig)
    logger.debug("wrote %s", path)
    return path


def _read_columns(path) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        return {}
    return {key: np.array([float(r[key]) for r in rows]) for key in rows[0]}


def plot_kinetics(t, solid_fraction, liquid_fraction, path, title: str = "kinetics") -> Path:
    """Normalised solid uptake and near-field liquid depletion against time."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(t, solid_fraction, label="Q_S / Q_S_e")
    ax.plot(t, liquid_fraction, label="Q_L_near / Q_L_0")
    ax.set_xlabel("t (s)")
    ax.set_ylabel("normalised concentration")
    ax.set_title(title)
    ax.legend()
    return _save(fig, plt, path)


def plot_errors(t, errors: dict, path) -> Path:
    """Relative error of c_S against the full-precision run, one line per mode."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, series in errors.items():
        series = np.asarray(series, dtype=np.float64)
        # log axis: exact zeros are drawn at the floor
        ax.plot(t, np.maximum(series, 1e-18), label=name)
    ax.set_yscale("log")
    ax.set_xlabel("t (s)")
    ax.set_ylabel("relative error")
    ax.legend()
    return _save(fig, plt, path)


def plot_scaling(n_liquid, step_seconds, slope: float, intercept: float, path) -> Path:
    """Per-macro-step time against N_L on log-log axes with the fitted line."""
    plt = _pyplot()
    x = np.asarray(n_liquid, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.loglog(x, step_seconds, "o", label="measured")
    xs = np.geomspace(x.min(), x.max(), 50)
    ax.loglog(xs, np.exp(intercept) * xs ** slope, "--", label=f"fit, slope {slope:.2f}")
    ax.set_xlabel("N_L")
    ax.set_ylabel("time per macro step (s)")
    ax.legend()
    return _save(fig, plt, path)


def plot_run_dir(run_dir) -> list[Path]:
    """Re-render every chart whose CSV exists in ``run_dir``."""
    run_dir = Path(run_dir)
    plot_dir = run_dir / "plots"
    written = []
    kinetics = run_dir / "kinetics.csv"
    if kinetics.exists():
        cols = _read_columns(kinetics)
        if cols:
            # normalisation constants live in report.txt; fall back to first-sample scaling
            q_s_e, q_l_0 = _report_constants(run_dir / "report.txt", cols)
            written.append(plot_kinetics(cols["t"], cols["Q_S"] / q_s_e, cols["Q_L_near"] / q_l_0,
                                         plot_dir / "kinetics.svg"))
    errors = run_dir / "errors.csv"
    if errors.exists():
        cols = _read_columns(errors)
        if cols:
            series = {k[3:]: v for k, v in cols.items() if k.startswith("RE_")}
            written.append(plot_errors(cols["t"], series, plot_dir / "relative_error.svg"))
    scaling = run_dir / "scaling.csv"
    if scaling.exists():
        cols = _read_columns(scaling)
        if cols:
            slope, intercept = np.polyfit(np.log(cols["N_L"]), np.log(cols["step_full"]), 1)
            written.append(plot_scaling(cols["N_L"], cols["step_full"], float(slope),
                                        float(intercept), plot_dir / "scaling.svg"))
    if not written:
        raise FileNotFoundError(f"{run_dir}: no kinetics.csv, errors.csv or scaling.csv found")
    return written


def _report_constants(report, cols) -> tuple[float, float]:
    values = {}
    if Path(report).exists():
        for line in Path(report).read_text(encoding="utf-8").splitlines():
            key, _, rest = line.partition(" ")
            if key in ("Q_S_e", "Q_L_0"):
                values[key] = float(rest.strip())
    return values.get("Q_S_e", float(cols["Q_S"].max())), values.get("Q_L_0", float(cols["Q_L_near"][0]))
