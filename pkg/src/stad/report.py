"""Report bundle: reward charts (SVG), training-budget table and final summary."""

from __future__ import annotations

import math
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

from .util import read_csv

# original World Models budget: rollouts, generations, agents/generation, total agents
REFERENCE_BUDGET = (10000, 2000, 64, 128000)


class ReportError(RuntimeError):
    pass


@dataclass(frozen=True)
class BudgetRow:
    label: str
    value: int
    reference: int

    @property
    def percent(self) -> float:
        return 100.0 * self.value / self.reference

    def line(self) -> str:
        return f"{self.label}: {self.value} ({self.percent:.6g}%)"


def budget_rows(rollouts: int, generations: int, population: int) -> list[BudgetRow]:
    r_ref, g_ref, p_ref, t_ref = REFERENCE_BUDGET
    return [
        BudgetRow("Rollouts", rollouts, r_ref),
        BudgetRow("Number of Generations", generations, g_ref),
        BudgetRow("Agents per Generation", population, p_ref),
        BudgetRow("Total Agents Evaluated", generations * population, t_ref),
    ]


def budget_table(rollouts: int, generations: int, population: int) -> str:
    rows = budget_rows(rollouts, generations, population)
    width = max(len(r.label) for r in rows)
    out = [f"{'Quantity':<{width}}  {'Reference':>9}  {'This run':>8}  {'Share':>7}"]
    for r in rows:
        out.append(f"{r.label:<{width}}  {r.reference:>9}  {r.value:>8}  {r.percent:>6.6g}%")
    out.append("")
    out.extend(r.line() for r in rows)
    return "\n".join(out) + "\n"


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** _floor_log10(raw)
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    start = step * _ceil_div(lo, step)
    ticks, t = [], start
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 10))
        t += step
    return ticks


def _floor_log10(x: float) -> int:
    return int(math.floor(math.log10(x)))


def _ceil_div(a: float, b: float) -> int:
    return int(math.ceil(a / b - 1e-12))


def line_chart_svg(xs, ys, title: str, xlabel: str, ylabel: str, width: int = 640, height: int = 400) -> str:
    """Single-series line chart as a standalone SVG document."""
    if len(xs) != len(ys) or not xs:
        raise ReportError(f"chart {title!r} needs matching, non-empty series")
    left, right, top, bottom = 70, 20, 40, 50
    pw, ph = width - left - right, height - top - bottom
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + (1 - (y - y0) / (y1 - y0)) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for t in _nice_ticks(y0, y1):
        y = sy(t)
        parts.append(f'<line x1="{left - 4}" y1="{y:.1f}" x2="{left + pw}" y2="{y:.1f}" stroke="#ddd"/>')
        parts.append(f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end">{t:g}</text>')
    for t in _nice_ticks(x0, x1):
        x = sx(t)
        parts.append(f'<line x1="{x:.1f}" y1="{top + ph}" x2="{x:.1f}" y2="{top + ph + 4}" stroke="black"/>')
        parts.append(f'<text x="{x:.1f}" y="{top + ph + 18}" text-anchor="middle">{t:g}</text>')
    parts.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    parts.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" '
                 f'transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    points = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
    parts.append(f'<polyline points="{points}" fill="none" stroke="#1f5fa8" stroke-width="1.5"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


CHARTS = (
    ("min", "reward_min.svg", "Minimum performer per generation"),
    ("mean", "reward_mean.svg", "Average performer per generation"),
    ("max", "reward_max.svg", "Maximum performer per generation"),
)


def _read_stats(path: Path) -> dict[str, list[float]]:
    try:
        header, rows = read_csv(path)
    except ValueError as err:
        raise ReportError(str(err)) from None
    if not rows:
        raise ReportError(f"{path} has no rows")
    cols = {name: [float(r[i]) for r in rows] for i, name in enumerate(header)}
    missing = {"generation", "min", "mean", "max"} - cols.keys()
    if missing:
        raise ReportError(f"{path} lacks columns: {', '.join(sorted(missing))}")
    return cols


def emit_report(stats_csv: str | os.PathLike, eval_summary: str | os.PathLike, out_dir: str | os.PathLike,
                rollouts: int, generations: int, population: int) -> list[Path]:
    """Write the bundle into ``out_dir`` atomically; nothing is left behind on failure."""
    stats_csv, eval_summary, out_dir = Path(stats_csv), Path(eval_summary), Path(out_dir)
    missing = [str(p) for p in (stats_csv, eval_summary) if not p.is_file()]
    if missing:
        raise ReportError("missing report inputs; expected files: " + ", ".join(missing))
    cols = _read_stats(stats_csv)
    summary = eval_summary.read_text()

    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".report-", dir=out_dir.parent))
    try:
        gens = cols["generation"]
        for key, name, title in CHARTS:
            (tmp / name).write_text(line_chart_svg(gens, cols[key], title, "Generation", "Episodic reward"))
        table = budget_table(rollouts, generations, population)
        (tmp / "budget.txt").write_text(table)
        lines = ["Training budget", "", table, "Final evaluation", "", summary.rstrip("\n"), "",
                 f"Generations recorded: {len(gens)}",
                 f"Best reward during training: {max(cols['max']):.2f}", ""]
        (tmp / "report.txt").write_text("\n".join(lines))
        if out_dir.exists():
            shutil.rmtree(out_dir)
        tmp.rename(out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return sorted(out_dir.iterdir())
