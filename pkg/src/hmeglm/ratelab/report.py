"""CSV, text and gnuplot outputs for a :class:`RateReport`."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from .experiments import ExperimentConfig, RateReport


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def results_csv(report: RateReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(report.columns)
    for row in report.rows:
        w.writerow([_fmt(row[c]) for c in report.columns])
    return buf.getvalue()


def metrics_csv(report: RateReport, config_hash: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value", "config_hash"])
    for name in ("slope", "intercept", "residual", "expected", "tolerance"):
        v = getattr(report, name)
        if v is not None:
            w.writerow([name, _fmt(float(v)), config_hash])
    for c in report.checks:
        w.writerow([f"check:{c.name}", int(c.passed), config_hash])
    w.writerow(["passed", int(report.passed), config_hash])
    return buf.getvalue()


def report_text(report: RateReport, cfg: ExperimentConfig) -> str:
    lines = [f"experiment: {report.experiment}", f"config hash: {cfg.config_hash()}"]
    lines += [f"note: {n}" for n in report.notes]
    if report.slope is not None:
        lines.append(
            f"fitted slope {report.slope:.4f} (expected {report.expected:g}, tolerance +{report.tolerance:g}), "
            f"intercept {report.intercept:.4f}, residual {report.residual:.4f}"
        )
    for c in report.checks:
        lines.append(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}" + (f": {c.detail}" if c.detail else ""))
    lines.append(f"overall: {'PASS' if report.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"


def gnuplot_script(report: RateReport, csv_name: str = "results.csv", png_name: str = "figure_gnuplot.png") -> str:
    """A gnuplot script drawing the results on log-log axes."""
    cols = report.columns
    xi, yi = cols.index(report.x_key) + 1, cols.index(report.y_key) + 1
    lines = [
        "set datafile separator ','",
        "set terminal pngcairo size 800,600",
        f"set output '{png_name}'",
        "set logscale xy",
        f"set xlabel '{report.x_key}'",
        f"set ylabel '{report.y_key}'",
        "set key top right",
    ]
    plot = f"plot '{csv_name}' every ::1 using {xi}:{yi} with linespoints title '{report.y_key}'"
    if report.slope is not None and report.experiment != "consistency":
        lines.append(f"fit_line(x) = exp({report.intercept!r}) * x**({report.slope!r})")
        plot += f", fit_line(x) with lines dashtype 2 title 'slope {report.slope:.3f}'"
    lines.append(plot)
    return "\n".join(lines) + "\n"


def write_outputs(report: RateReport, cfg: ExperimentConfig, out_dir, plot: bool = True) -> dict[str, Path]:
    """Write results, metrics, report text, config, plot script and figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.config_hash()
    paths = {
        "results": out / "results.csv",
        "metrics": out / "metrics.csv",
        "report": out / "report.txt",
        "config": out / "config.json",
        "gnuplot": out / "plot.gp",
    }
    paths["results"].write_text(results_csv(report))
    paths["metrics"].write_text(metrics_csv(report, h))
    paths["report"].write_text(report_text(report, cfg))
    paths["config"].write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True, default=str) + "\n")
    paths["gnuplot"].write_text(gnuplot_script(report))
    if plot:
        from .plotting import plot_report

        paths["figure"] = plot_report(report, out / "figure.png")
    return paths
