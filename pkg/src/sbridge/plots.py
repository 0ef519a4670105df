"""Plot-ready tables, gnuplot scripts and PNG figures from a finished solve.

Everything here is a pure function of the files in the output directory, so
re-running :func:`emit_plots` rewrites byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .config import build_grid, effective_config  # noqa: E402
from .io import read_csv, write_csv  # noqa: E402

CONFIG_NAME = "config.cfg"
HISTORY_NAME = "history.csv"
SUMMARY_NAME = "summary.txt"
SOLUTION_DIR = "solution"
PLOT_DIR = "plots"
WATERFALL_CURVES = 11
PNG_META = {"Software": None}


class MissingArtifactsError(FileNotFoundError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing solve outputs: " + ", ".join(self.missing))


def _solution_path(out: Path, k: int) -> Path:
    return out / SOLUTION_DIR / f"solution_{k:05d}.csv"


def _marginal_x1(grid, header, data):
    """Density of the first coordinate, integrating out the others."""
    rho = data[:, header.index("rho")].reshape(grid.shape)
    other = float(np.prod(grid.h[1:])) if grid.dim > 1 else 1.0
    return rho.reshape(grid.cells[0], -1).sum(axis=1) * other


def _first_control(grid, header, data):
    u = data[:, header.index("u1")].reshape(grid.shape)
    return u.reshape(grid.cells[0], -1).mean(axis=1)


def _gnuplot(path: Path, png: str, body: list[str]) -> None:
    lines = ["# sbridge-gnuplot/1",
             "set datafile separator ','",
             "set key autotitle columnheader",
             "set terminal pngcairo size 800,600",
             f"set output '{png}'"] + body
    path.write_text("\n".join(lines) + "\n")


def emit_plots(out_dir) -> list[Path]:
    out = Path(out_dir)
    cfg_path = out / CONFIG_NAME
    missing = [name for name in (CONFIG_NAME, HISTORY_NAME, SUMMARY_NAME) if not (out / name).is_file()]
    grid = None
    if cfg_path.is_file():
        grid = build_grid(effective_config(cfg_path))
        missing += [str(_solution_path(out, k).relative_to(out)) for k in range(grid.num_steps + 1)
                    if not _solution_path(out, k).is_file()]
    elif not (out / SOLUTION_DIR).is_dir():
        missing.append(SOLUTION_DIR + "/")
    if missing:
        raise MissingArtifactsError(missing)

    plots = out / PLOT_DIR
    plots.mkdir(exist_ok=True)
    times = grid.times()
    K = grid.num_steps
    x = grid.axis_centers(0)
    marg, ctrl = [], []
    for k in range(K + 1):
        header, data = read_csv(_solution_path(out, k))
        marg.append(_marginal_x1(grid, header, data))
        ctrl.append(_first_control(grid, header, data))
    marg, ctrl = np.array(marg), np.array(ctrl)
    picks = sorted(set(np.linspace(0, K, WATERFALL_CURVES).round().astype(int)))
    hist_header, hist = read_csv(out / HISTORY_NAME)
    hist = hist.reshape(-1, len(hist_header))

    written = []

    def table(name, header, rows):
        path = plots / name
        write_csv(path, header, rows)
        written.append(path)

    table("density_waterfall.csv", ["t", "x1", "rho"],
          ([float(times[k]), float(xi), float(r)] for k in picks for xi, r in zip(x, marg[k])))
    table("control_field.csv", ["t", "x1", "u1"],
          ([float(times[k]), float(xi), float(u)] for k in range(K + 1) for xi, u in zip(x, ctrl[k])))
    # wall-clock time is left out so the table is reproducible
    table("convergence_history.csv", hist_header[:4], ([int(r[0])] + [float(v) for v in r[1:4]] for r in hist))
    mid = K // 2
    table("endpoint_marginals.csv", ["x1", "rho_t0", "rho_mid", "rho_t1"],
          ([float(xi), float(a), float(b), float(c)] for xi, a, b, c in zip(x, marg[0], marg[mid], marg[K])))

    scripts = {
        "density_waterfall": ["set xlabel 't'", "set ylabel 'x1'", "set zlabel 'rho'",
                              "splot 'density_waterfall.csv' using 1:2:3 with points pt 7 ps 0.3"],
        "control_field": ["set xlabel 't'", "set ylabel 'x1'", "set view map",
                          "splot 'control_field.csv' using 1:2:3 with points pt 5 ps 0.5 palette"],
        "convergence_history": ["set logscale y", "set xlabel 'iteration'",
                                "plot 'convergence_history.csv' using 1:2 with linespoints, "
                                "'' using 1:4 with linespoints"],
        "endpoint_marginals": ["set xlabel 'x1'",
                               "plot for [c=2:4] 'endpoint_marginals.csv' using 1:c with lines"],
    }
    for name, body in scripts.items():
        path = plots / f"{name}.gp"
        _gnuplot(path, f"{name}_gnuplot.png", body)
        written.append(path)

    written += _figures(plots, times, x, marg, ctrl, picks, hist)
    return written


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=100, metadata=PNG_META)
    plt.close(fig)
    return path


def _figures(plots: Path, times, x, marg, ctrl, picks, hist) -> list[Path]:
    out = []
    fig, ax = plt.subplots(figsize=(7, 5))
    span = float(np.max(marg)) or 1.0
    for j, k in enumerate(picks):
        ax.plot(x, marg[k] + 0.25 * span * j, color="k", lw=0.8)
    ax.set_xlabel("x1")
    ax.set_ylabel("rho (offset per time)")
    out.append(_save(fig, plots / "density_waterfall.png"))

    fig, ax = plt.subplots(figsize=(7, 5))
    mesh = ax.pcolormesh(times, x, ctrl.T, shading="nearest", cmap="RdBu_r")
    fig.colorbar(mesh, ax=ax, label="u1")
    ax.set_xlabel("t")
    ax.set_ylabel("x1")
    out.append(_save(fig, plots / "control_field.png"))

    fig, ax = plt.subplots(figsize=(7, 5))
    if hist.size:
        ax.semilogy(hist[:, 0], hist[:, 1], "o-", label="d_H phi(t1)")
        ax.semilogy(hist[:, 0], np.maximum(hist[:, 3], 1e-300), "s-", label="marginal L1")
        ax.legend()
    ax.set_xlabel("iteration")
    out.append(_save(fig, plots / "convergence_history.png"))

    fig, ax = plt.subplots(figsize=(7, 5))
    K = len(times) - 1
    for k, label in ((0, "t0"), (K // 2, "mid"), (K, "t1")):
        ax.plot(x, marg[k], label=label)
    ax.set_xlabel("x1")
    ax.legend()
    out.append(_save(fig, plots / "endpoint_marginals.png"))
    return out
