"""Self-contained SVG plotting and learning-curve emission.

The writer embeds each series' raw data in a `data-points` attribute (exact
shortest round-trip decimals) next to the rendered screen-space polyline, so
plotted values can be recovered exactly and checked against the CSV they came
from. Matplotlib cannot offer that guarantee, hence the hand-rolled writer.
"""

from __future__ import annotations

import csv
import json
import math
import re
from pathlib import Path
from typing import Optional, Sequence

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


class SvgPlot:
    def __init__(
        self,
        title: str = "",
        xlabel: str = "",
        ylabel: str = "",
        width: int = 640,
        height: int = 420,
    ):
        self.title = title
        self.xlabel = xlabel
        self.ylabel = ylabel
        self.width = width
        self.height = height
        self.margin_l, self.margin_r = 62, 16
        self.margin_t, self.margin_b = 36, 46
        self._series: list[dict] = []
        self._bands: list[dict] = []
        self._scatters: list[dict] = []
        self._rects: list[dict] = []

    def add_series(self, xs: Sequence[float], ys: Sequence[float], label: str = "",
                   color: Optional[str] = None) -> None:
        if len(xs) != len(ys):
            raise ValueError("x and y lengths differ")
        if len(xs) == 0:
            raise ValueError("series needs at least one point")
        self._series.append({"xs": list(xs), "ys": list(ys), "label": label, "color": color})

    def add_band(self, xs: Sequence[float], lo: Sequence[float], hi: Sequence[float],
                 color: Optional[str] = None) -> None:
        if not (len(xs) == len(lo) == len(hi)):
            raise ValueError("band arrays must share a length")
        self._bands.append({"xs": list(xs), "lo": list(lo), "hi": list(hi), "color": color})

    def add_scatter(self, xs: Sequence[float], ys: Sequence[float], label: str = "",
                    color: Optional[str] = None, radius: float = 2.5) -> None:
        self._scatters.append({"xs": list(xs), "ys": list(ys), "label": label,
                               "color": color, "radius": radius})

    def add_rect(self, x0: float, y0: float, x1: float, y1: float,
                 color: str = "#888888") -> None:
        """Data-space rectangle outline (e.g. the table boundary)."""
        self._rects.append({"x0": x0, "y0": y0, "x1": x1, "y1": y1, "color": color})

    # -- rendering -----------------------------------------------------------

    def _limits(self) -> tuple[float, float, float, float]:
        xs: list[float] = []
        ys: list[float] = []
        for s in self._series + self._scatters:
            xs.extend(s["xs"])
            ys.extend(s["ys"])
        for b in self._bands:
            xs.extend(b["xs"])
            ys.extend(b["lo"])
            ys.extend(b["hi"])
        for r in self._rects:
            xs.extend((r["x0"], r["x1"]))
            ys.extend((r["y0"], r["y1"]))
        if not xs:
            raise ValueError("nothing to plot")
        x0, x1 = min(xs), max(xs)
        y0, y1 = min(ys), max(ys)
        if x0 == x1:
            x0, x1 = x0 - 1.0, x1 + 1.0
        if y0 == y1:
            y0, y1 = y0 - 1.0, y1 + 1.0
        mx = 0.04 * (x1 - x0)
        my = 0.06 * (y1 - y0)
        return x0 - mx, x1 + mx, y0 - my, y1 + my

    def render(self) -> str:
        x0, x1, y0, y1 = self._limits()
        iw = self.width - self.margin_l - self.margin_r
        ih = self.height - self.margin_t - self.margin_b

        def tx(x: float) -> float:
            return self.margin_l + (x - x0) / (x1 - x0) * iw

        def ty(y: float) -> float:
            return self.margin_t + (y1 - y) / (y1 - y0) * ih

        out = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" '
            f'height="{self.height}" viewBox="0 0 {self.width} {self.height}">',
            f'<rect width="{self.width}" height="{self.height}" fill="white"/>',
        ]
        # Axes box and ticks.
        out.append(
            f'<rect x="{self.margin_l}" y="{self.margin_t}" width="{iw}" height="{ih}" '
            'fill="none" stroke="#222222" stroke-width="1"/>'
        )
        for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
            xv = x0 + frac * (x1 - x0)
            yv = y0 + frac * (y1 - y0)
            xp, yp = tx(xv), ty(yv)
            out.append(
                f'<line x1="{xp:.2f}" y1="{self.margin_t + ih}" x2="{xp:.2f}" '
                f'y2="{self.margin_t + ih + 4}" stroke="#222222"/>'
            )
            out.append(
                f'<text x="{xp:.2f}" y="{self.margin_t + ih + 16}" font-size="10" '
                f'text-anchor="middle" font-family="sans-serif">{xv:.4g}</text>'
            )
            out.append(
                f'<line x1="{self.margin_l - 4}" y1="{yp:.2f}" x2="{self.margin_l}" '
                f'y2="{yp:.2f}" stroke="#222222"/>'
            )
            out.append(
                f'<text x="{self.margin_l - 7}" y="{yp + 3:.2f}" font-size="10" '
                f'text-anchor="end" font-family="sans-serif">{yv:.4g}</text>'
            )
        if self.title:
            out.append(
                f'<text x="{self.width / 2:.1f}" y="20" font-size="13" text-anchor="middle" '
                f'font-family="sans-serif">{_esc(self.title)}</text>'
            )
        if self.xlabel:
            out.append(
                f'<text x="{self.margin_l + iw / 2:.1f}" y="{self.height - 10}" font-size="11" '
                f'text-anchor="middle" font-family="sans-serif">{_esc(self.xlabel)}</text>'
            )
        if self.ylabel:
            yl_x, yl_y = 16, self.margin_t + ih / 2
            out.append(
                f'<text x="{yl_x}" y="{yl_y:.1f}" font-size="11" text-anchor="middle" '
                f'font-family="sans-serif" transform="rotate(-90 {yl_x} {yl_y:.1f})">'
                f"{_esc(self.ylabel)}</text>"
            )

        for bi, b in enumerate(self._bands):
            color = b["color"] or PALETTE[bi % len(PALETTE)]
            pts = [f"{tx(x):.3f},{ty(y):.3f}" for x, y in zip(b["xs"], b["hi"])]
            pts += [f"{tx(x):.3f},{ty(y):.3f}" for x, y in zip(reversed(b["xs"]), reversed(b["lo"]))]
            out.append(
                f'<polygon points="{" ".join(pts)}" fill="{color}" fill-opacity="0.18" stroke="none"/>'
            )
        for ri, r in enumerate(self._rects):
            xs = sorted((tx(r["x0"]), tx(r["x1"])))
            ys = sorted((ty(r["y0"]), ty(r["y1"])))
            out.append(
                f'<rect x="{xs[0]:.3f}" y="{ys[0]:.3f}" width="{xs[1] - xs[0]:.3f}" '
                f'height="{ys[1] - ys[0]:.3f}" fill="none" stroke="{r["color"]}" stroke-width="1.2"/>'
            )
        for si, s in enumerate(self._series):
            color = s["color"] or PALETTE[si % len(PALETTE)]
            data = " ".join(f"{x!r},{y!r}" for x, y in zip(s["xs"], s["ys"]))
            if len(s["xs"]) == 1:
                out.append(
                    f'<circle cx="{tx(s["xs"][0]):.3f}" cy="{ty(s["ys"][0]):.3f}" r="3" '
                    f'fill="{color}" class="series" data-label="{_esc(s["label"])}" '
                    f'data-points="{data}"/>'
                )
            else:
                pts = " ".join(f"{tx(x):.3f},{ty(y):.3f}" for x, y in zip(s["xs"], s["ys"]))
                out.append(
                    f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.6" '
                    f'class="series" data-label="{_esc(s["label"])}" data-points="{data}"/>'
                )
        for si, s in enumerate(self._scatters):
            color = s["color"] or PALETTE[si % len(PALETTE)]
            data = " ".join(f"{x!r},{y!r}" for x, y in zip(s["xs"], s["ys"]))
            circles = "".join(
                f'<circle cx="{tx(x):.3f}" cy="{ty(y):.3f}" r="{s["radius"]}"/>'
                for x, y in zip(s["xs"], s["ys"])
            )
            out.append(
                f'<g fill="{color}" fill-opacity="0.75" class="scatter" '
                f'data-label="{_esc(s["label"])}" data-points="{data}">{circles}</g>'
            )
        # Legend.
        labeled = [s for s in self._series + self._scatters if s["label"]]
        for li, s in enumerate(labeled):
            color = s.get("color") or PALETTE[
                (self._series + self._scatters).index(s) % len(PALETTE)
            ]
            ly = self.margin_t + 14 + 14 * li
            lx = self.margin_l + 8
            out.append(f'<rect x="{lx}" y="{ly - 7}" width="10" height="3" fill="{color}"/>')
            out.append(
                f'<text x="{lx + 14}" y="{ly - 2}" font-size="10" font-family="sans-serif">'
                f"{_esc(s['label'])}</text>"
            )
        out.append("</svg>")
        return "\n".join(out)

    def save(self, path) -> None:
        Path(path).write_text(self.render())


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def parse_series(svg_text: str) -> dict[str, list[tuple[float, float]]]:
    """Recover the exact data points of every labeled series in a written SVG."""
    found: dict[str, list[tuple[float, float]]] = {}
    for m in re.finditer(r'data-label="([^"]*)" data-points="([^"]*)"', svg_text):
        label, data = m.group(1), m.group(2)
        pts = []
        for tok in data.split():
            xs, ys = tok.split(",")
            pts.append((float(xs), float(ys)))
        found[label] = pts
    return found


def parse_screen_polylines(svg_text: str) -> list[list[tuple[float, float]]]:
    """Screen-space polylines as rendered (for monotonicity checks)."""
    out = []
    for m in re.finditer(r'<polyline points="([^"]*)"', svg_text):
        pts = []
        for tok in m.group(1).split():
            xs, ys = tok.split(",")
            pts.append((float(xs), float(ys)))
        out.append(pts)
    return out


# ---------------------------------------------------------------------------
# Learning curves from run directories
# ---------------------------------------------------------------------------


def _read_progress(run_dir: Path) -> tuple[dict, list[dict]]:
    manifest = json.loads((run_dir / "manifest.json").read_text())
    rows = []
    with open(run_dir / "progress.csv") as fh:
        for row in csv.DictReader(fh):
            rows.append(row)
    if not rows:
        raise ValueError(f"{run_dir}/progress.csv has no data rows")
    return manifest, rows


def _curve_points(manifest: dict, rows: list[dict]) -> list[dict]:
    """Per-iteration points with x = total trajectories seen so far."""
    demos = manifest.get("demos_count", 0)
    total = demos
    pts = []
    for row in rows:
        total += int(row["attempted"])
        pt = {"x": float(total)}
        for col, key in (("eval_pct_30cm", "pct30"), ("eval_pct_20cm", "pct20"),
                         ("mean_dist", "dist")):
            pt[key] = float(row[col]) if row[col] not in ("", None) else None
        pts.append(pt)
    return pts


def collect_run_curves(run_dir) -> list[list[dict]]:
    """One curve per seed: a run dir either has progress.csv itself or holds
    seed_*/ subruns."""
    run_dir = Path(run_dir)
    if (run_dir / "progress.csv").exists():
        manifest, rows = _read_progress(run_dir)
        return [_curve_points(manifest, rows)]
    subs = sorted(p for p in run_dir.glob("seed_*") if (p / "progress.csv").exists())
    if not subs:
        raise FileNotFoundError(f"no progress.csv under {run_dir}")
    return [_curve_points(*_read_progress(p)) for p in subs]


def emit_learning_curve(run_dir, out_svg=None) -> tuple[Path, Path]:
    """Write curves.csv + curves.svg for a run (or a directory of seed runs).

    x = total trajectories seen (demos + attempted practice); y = the progress
    metrics. Multi-seed input renders a mean line with a +-std band.
    """
    run_dir = Path(run_dir)
    curves = collect_run_curves(run_dir)
    out_svg = Path(out_svg) if out_svg is not None else run_dir / "curves.svg"
    out_csv = out_svg.with_suffix(".csv")

    series: dict[str, tuple[list[float], list[float], list[float]]] = {}
    for key in ("pct30", "pct20", "dist"):
        xs: list[float] = []
        means: list[float] = []
        stds: list[float] = []
        n_pts = min(len(c) for c in curves)
        for i in range(n_pts):
            vals = [c[i][key] for c in curves if c[i][key] is not None]
            if not vals:
                continue
            xs.append(curves[0][i]["x"])
            mean = sum(vals) / len(vals)
            means.append(mean)
            stds.append(math.sqrt(sum((v - mean) ** 2 for v in vals) / len(vals)))
        if xs:
            series[key] = (xs, means, stds)
    if not series:
        raise ValueError(f"{run_dir}: progress rows contain no evaluation points")

    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["series", "x", "mean", "std"])
        for key, (xs, means, stds) in series.items():
            for x, m, s in zip(xs, means, stds):
                writer.writerow([key, repr(x), repr(m), repr(s)])

    plot = SvgPlot(
        title="Goal-reaching progress",
        xlabel="total trajectories (demos + practice)",
        ylabel="% within threshold / distance (m)",
    )
    for i, (key, (xs, means, stds)) in enumerate(series.items()):
        if len(curves) > 1 and any(s > 0 for s in stds):
            plot.add_band(xs, [m - s for m, s in zip(means, stds)],
                          [m + s for m, s in zip(means, stds)], color=PALETTE[i])
        plot.add_series(xs, means, label=key, color=PALETTE[i])
    plot.save(out_svg)
    return out_csv, out_svg


def emit_ablation_curves(out_dir, demo_counts: Sequence[int], seeds: Sequence[int]) -> Path:
    """Overlaid median pct30 curves and stored/attempted efficiency curves for
    an ablation directory laid out as count_<n>/seed_<s>/."""
    out_dir = Path(out_dir)
    acc_plot = SvgPlot(title="Demo-count ablation", xlabel="total trajectories",
                       ylabel="% within 30 cm (median)")
    eff_plot = SvgPlot(title="Practice data efficiency", xlabel="total trajectories",
                       ylabel="stored / attempted (cumulative)")
    for ci, count in enumerate(demo_counts):
        curves = []
        eff_curves = []
        for s in seeds:
            run = out_dir / f"count_{count}" / f"seed_{s}"
            manifest, rows = _read_progress(run)
            curves.append(_curve_points(manifest, rows))
            demos = manifest.get("demos_count", 0)
            total, att_cum, sto_cum = demos, 0, 0
            eff = []
            for row in rows:
                att_cum += int(row["attempted"])
                sto_cum += int(row["stored"])
                total += int(row["attempted"])
                if att_cum > 0:
                    eff.append((float(total), sto_cum / att_cum))
            eff_curves.append(eff)
        n_pts = min(len(c) for c in curves)
        xs, med = [], []
        for i in range(n_pts):
            vals = [c[i]["pct30"] for c in curves if c[i]["pct30"] is not None]
            if vals:
                xs.append(curves[0][i]["x"])
                med.append(float(sorted(vals)[len(vals) // 2]))
        if xs:
            acc_plot.add_series(xs, med, label=f"{count} demos", color=PALETTE[ci])
        if eff_curves and min(len(e) for e in eff_curves) > 0:
            n_eff = min(len(e) for e in eff_curves)
            exs = [eff_curves[0][i][0] for i in range(n_eff)]
            emed = [float(np_median([e[i][1] for e in eff_curves])) for i in range(n_eff)]
            eff_plot.add_series(exs, emed, label=f"{count} demos", color=PALETTE[ci])
    acc_path = out_dir / "ablation_accuracy.svg"
    eff_path = out_dir / "ablation_efficiency.svg"
    acc_plot.save(acc_path)
    eff_plot.save(eff_path)
    return acc_path


def np_median(vals: Sequence[float]) -> float:
    s = sorted(vals)
    n = len(s)
    return s[n // 2] if n % 2 else 0.5 * (s[n // 2 - 1] + s[n // 2])


def emit_landing_scatter(landings: Sequence[tuple[float, float]], geom, path,
                         label: str = "landings") -> Path:
    """Scatter of landing points over the table outline."""
    plot = SvgPlot(title="Ball landing distribution", xlabel="x (m)", ylabel="y (m)",
                   width=520, height=420)
    plot.add_rect(-geom.length / 2, -geom.width / 2, geom.length / 2, geom.width / 2)
    plot.add_rect(0.0, -geom.width / 2, 0.0001, geom.width / 2, color="#bbbbbb")  # net line
    xs = [p[0] for p in landings]
    ys = [p[1] for p in landings]
    if xs:
        plot.add_scatter(xs, ys, label=label)
    path = Path(path)
    plot.save(path)
    return path
