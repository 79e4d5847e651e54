"""Matplotlib figures for experiment reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .experiments import RateReport  # noqa: E402

STYLE = {
    "figure.figsize": (5.5, 4.0),
    "figure.dpi": 120,
    "savefig.bbox": "tight",
    "font.family": "serif",
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _series(report: RateReport):
    """Group rows into labelled (x, y) series for plotting."""
    x, y = report.x_key, report.y_key
    if report.experiment == "consistency":
        group = "m"
    elif report.experiment == "gates-check":
        group = "nu"
    else:
        group = None
    if report.experiment == "em-diagnostics":
        rows = [r for r in report.rows if r["kind"] == "em"]
        return {"min loglik increment": (np.array([r["run"] for r in rows]), np.array([r["min_delta"] for r in rows]))}
    out = {}
    for r in report.rows:
        if r[y] != r[y] or (x == "tau" and r[x] == 0):
            continue
        key = f"{group}={r[group]}" if group else report.y_key
        xs, ys = out.setdefault(key, ([], []))
        xs.append(r[x])
        ys.append(r[y])
    return {k: (np.array(a, dtype=float), np.array(b, dtype=float)) for k, (a, b) in out.items()}


def plot_report(report: RateReport, path) -> Path:
    """Render the report's results on log-log axes and save to ``path``."""
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, (xs, ys) in _series(report).items():
            ax.plot(xs, ys, "o-", label=label)
        if report.experiment == "em-diagnostics":
            ax.set_yscale("symlog", linthresh=1e-12)
        else:
            ax.set_xscale("log")
            ax.set_yscale("log")
        # the consistency slope is against m, not the plotted n axis
        if report.slope is not None and report.experiment != "consistency":
            xs = np.array(sorted({r[report.x_key] for r in report.rows}), dtype=float)
            ax.plot(xs, np.exp(report.intercept) * xs**report.slope, "k--", lw=1,
                    label=f"fit: slope {report.slope:.2f} (expected {report.expected:g})")
        ax.set_xlabel(report.x_key)
        ax.set_ylabel(report.y_key)
        ax.set_title(f"{report.experiment} ({'pass' if report.passed else 'fail'})")
        ax.legend(fontsize="small")
        fig.savefig(path)
        plt.close(fig)
    return path
