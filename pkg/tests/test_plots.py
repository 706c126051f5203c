import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

import numpy as np
import pytest

import plots


def write_csv(path, header, rows):
    lines = [",".join(header)] + [",".join(repr(float(v)) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def test_kinetics_chart_is_reproducible(tmp_path):
    t = np.linspace(0, 1, 20)
    a = plots.plot_kinetics(t, t ** 0.5, 1 - t / 2, tmp_path / "a.svg")
    b = plots.plot_kinetics(t, t ** 0.5, 1 - t / 2, tmp_path / "b.svg")
    text = a.read_text(encoding="utf-8")
    assert "<svg" in text
    assert "<dc:date>" not in text
    assert text == b.read_text(encoding="utf-8")


def test_error_chart_accepts_zero_series(tmp_path):
    t = np.arange(1, 6, dtype=float)
    path = plots.plot_errors(t, {"fp32": np.zeros(5), "fp16": np.full(5, 1e-3)},
                             tmp_path / "plots" / "errors.svg")
    assert path.exists()


def test_plot_run_dir(tmp_path):
    write_csv(tmp_path / "kinetics.csv", ["t", "Q_S", "Q_L_near", "c_far", "Q_total"],
              [[0.1, 1.0, 9.0, 0.5, 20.0], [0.2, 2.0, 8.0, 0.5, 20.0]])
    (tmp_path / "report.txt").write_text("solver fdirw\nQ_S_e 10.0\nQ_L_0 10.0\n", encoding="utf-8")
    write_csv(tmp_path / "scaling.csv", ["r_p", "N_L", "step_full"],
              [[8, 1e3, 1e-3], [12, 3e3, 3e-3], [16, 8e3, 8e-3]])
    written = plots.plot_run_dir(tmp_path)
    assert sorted(p.name for p in written) == ["kinetics.svg", "scaling.svg"]


def test_plot_run_dir_needs_data(tmp_path):
    with pytest.raises(FileNotFoundError, match="no kinetics.csv"):
        plots.plot_run_dir(tmp_path)


def test_missing_matplotlib(monkeypatch, tmp_path):
    monkeypatch.setitem(sys.modules, "matplotlib", None)
    with pytest.raises(RuntimeError, match="matplotlib is required"):
        plots.plot_kinetics([0, 1], [0, 1], [1, 0], tmp_path / "k.svg")
