"""Minimal deterministic SVG 1.1 charts (line charts with log axes, bar histograms).

Output depends only on the data, so the same result always produces the same bytes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2",
           "#17becf", "#7f7f7f", "#bcbd22")


@dataclass
class Series:
    x: list
    y: list
    label: str
    color: str = PALETTE[0]
    dashed: bool = False
    band: tuple | None = None  # (lower, upper) aligned with x


@dataclass
class Chart:
    title: str
    xlabel: str
    ylabel: str
    logx: bool = True
    logy: bool = True
    series: list = field(default_factory=list)
    width: int = 640
    height: int = 420
    note: str = ""


def _f(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, log: bool) -> list[float]:
    if log:
        a, b = math.floor(math.log10(lo)), math.ceil(math.log10(hi))
        ticks = [10.0 ** k for k in range(a, b + 1)]
        if b - a <= 1:
            ticks = sorted({t * s for t in ticks for s in (1, 2, 5)})
        return [t for t in ticks if lo * (1 - 1e-9) <= t <= hi * (1 + 1e-9)] or [lo, hi]
    if hi == lo:
        return [lo]
    raw = (hi - lo) / 5
    mag = 10 ** math.floor(math.log10(raw))
    step = min((s * mag for s in (1, 2, 5, 10) if s * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


def _fmt_tick(t: float) -> str:
    if t != 0 and (abs(t) >= 1e4 or abs(t) < 1e-2):
        return f"{t:.0e}"
    return f"{t:g}"


def _range(values: list[float], log: bool) -> tuple[float, float]:
    v = [x for x in values if math.isfinite(x) and (x > 0 or not log)]
    if not v:
        return (1.0, 10.0) if log else (0.0, 1.0)
    lo, hi = min(v), max(v)
    if log:
        if lo == hi:
            return lo / 2, hi * 2
        return lo / 1.15, hi * 1.15
    if lo == hi:
        return lo - 1, hi + 1
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def render_chart(chart: Chart) -> str:
    W, H = chart.width, chart.height
    left, right, top, bottom = 78, 180, 40, 56
    pw, ph = W - left - right, H - top - bottom
    xs = [x for s in chart.series for x in s.x]
    ys = [y for s in chart.series for y in s.y]
    for s in chart.series:
        if s.band:
            ys += list(s.band[0]) + list(s.band[1])
    x0, x1 = _range(xs, chart.logx)
    y0, y1 = _range(ys, chart.logy)

    def tx(v):
        if chart.logx:
            return left + pw * (math.log10(v) - math.log10(x0)) / (math.log10(x1) - math.log10(x0))
        return left + pw * (v - x0) / (x1 - x0)

    def ty(v):
        if chart.logy:
            return top + ph * (1 - (math.log10(v) - math.log10(y0)) / (math.log10(y1) - math.log10(y0)))
        return top + ph * (1 - (v - y0) / (y1 - y0))

    def ok(x, y):
        return (math.isfinite(x) and math.isfinite(y) and (x > 0 or not chart.logx)
                and (y > 0 or not chart.logy))

    out = [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">',
        f"<title>{escape(chart.title)}</title>",
    ]
    if chart.note:
        out.append(f"<desc>{escape(chart.note)}</desc>")
    out.append(f'<rect x="0" y="0" width="{W}" height="{H}" fill="#ffffff"/>')
    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#000000"/>')
    for t in _ticks(x0, x1, chart.logx):
        px = _f(tx(t))
        out.append(f'<line x1="{px}" y1="{top + ph}" x2="{px}" y2="{top + ph + 5}" stroke="#000000"/>')
        out.append(f'<text x="{px}" y="{top + ph + 18}" text-anchor="middle">{_fmt_tick(t)}</text>')
    for t in _ticks(y0, y1, chart.logy):
        py = _f(ty(t))
        out.append(f'<line x1="{left - 5}" y1="{py}" x2="{left}" y2="{py}" stroke="#000000"/>')
        out.append(f'<text x="{left - 8}" y="{py}" text-anchor="end" dominant-baseline="middle">'
                   f"{_fmt_tick(t)}</text>")
    out.append(f'<text x="{_f(left + pw / 2)}" y="{H - 14}" text-anchor="middle">'
               f"{escape(chart.xlabel)}</text>")
    out.append(f'<text x="18" y="{_f(top + ph / 2)}" text-anchor="middle" '
               f'transform="rotate(-90 18 {_f(top + ph / 2)})">{escape(chart.ylabel)}</text>')
    out.append(f'<text x="{_f(left + pw / 2)}" y="24" text-anchor="middle" font-size="14">'
               f"{escape(chart.title)}</text>")

    for s in chart.series:
        if s.band:
            lo, hi = s.band
            pts = [(x, a, b) for x, a, b in zip(s.x, lo, hi) if ok(x, a) and ok(x, b)]
            if len(pts) >= 2:
                poly = [(tx(x), ty(b)) for x, _, b in pts] + [(tx(x), ty(a)) for x, a, _ in reversed(pts)]
                out.append('<polygon points="' + " ".join(f"{_f(a)},{_f(b)}" for a, b in poly)
                           + f'" fill="{s.color}" fill-opacity="0.15" stroke="none"/>')
        segments, cur = [], []
        for x, y in zip(s.x, s.y):
            if ok(x, y):
                cur.append((tx(x), ty(y)))
            elif cur:
                segments.append(cur)
                cur = []
        if cur:
            segments.append(cur)
        dash = ' stroke-dasharray="6,4"' if s.dashed else ""
        for seg in segments:
            out.append('<polyline points="' + " ".join(f"{_f(a)},{_f(b)}" for a, b in seg)
                       + f'" fill="none" stroke="{s.color}" stroke-width="2"{dash}/>')
            for a, b in seg:
                out.append(f'<circle cx="{_f(a)}" cy="{_f(b)}" r="3" fill="{s.color}"/>')

    for i, s in enumerate(chart.series):
        ly = top + 10 + 18 * i
        lx = left + pw + 12
        dash = ' stroke-dasharray="6,4"' if s.dashed else ""
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 22}" y2="{ly}" stroke="{s.color}" '
                   f'stroke-width="2"{dash}/>')
        out.append(f'<text x="{lx + 28}" y="{ly}" dominant-baseline="middle">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_histogram(title: str, edges, counts_by_label: dict, xlabel: str, note: str = "",
                     width: int = 640, height: int = 420) -> str:
    """Grouped bar histogram; ``counts_by_label`` maps a legend label to bin counts."""
    edges = [float(e) for e in edges]
    left, right, top, bottom = 64, 180, 40, 56
    pw, ph = width - left - right, height - top - bottom
    labels = list(counts_by_label)
    ymax = max([max(c) for c in counts_by_label.values() if len(c)] + [1])
    nb = len(edges) - 1
    out = [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f"<title>{escape(title)}</title>",
    ]
    if note:
        out.append(f"<desc>{escape(note)}</desc>")
    out.append(f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>')
    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#000000"/>')
    bw = pw / max(nb, 1)
    sub = bw / max(len(labels), 1)
    for j, lab in enumerate(labels):
        color = PALETTE[j % len(PALETTE)]
        for i, c in enumerate(counts_by_label[lab]):
            h = ph * c / ymax
            out.append(f'<rect x="{_f(left + i * bw + j * sub)}" y="{_f(top + ph - h)}" '
                       f'width="{_f(sub)}" height="{_f(h)}" fill="{color}" fill-opacity="0.8"/>')
        ly = top + 10 + 18 * j
        out.append(f'<rect x="{left + pw + 12}" y="{ly - 5}" width="12" height="10" fill="{color}"/>')
        out.append(f'<text x="{left + pw + 30}" y="{ly}" dominant-baseline="middle">{escape(lab)}</text>')
    for i in range(0, nb + 1, max(1, nb // 5)):
        px = _f(left + i * bw)
        out.append(f'<text x="{px}" y="{top + ph + 18}" text-anchor="middle">{edges[i]:g}</text>')
    for t in _ticks(0.0, float(ymax), False):
        py = _f(top + ph * (1 - t / ymax))
        out.append(f'<text x="{left - 8}" y="{py}" text-anchor="end" dominant-baseline="middle">'
                   f"{_fmt_tick(t)}</text>")
    out.append(f'<text x="{_f(left + pw / 2)}" y="{height - 14}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="18" y="{_f(top + ph / 2)}" text-anchor="middle" '
               f'transform="rotate(-90 18 {_f(top + ph / 2)})">count</text>')
    out.append(f'<text x="{_f(left + pw / 2)}" y="24" text-anchor="middle" font-size="14">{escape(title)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# --- experiment figures ------------------------------------------------------------


def _band(recs, field_name):
    return ([r[f"{field_name}_min"] for r in recs], [r[f"{field_name}_max"] for r in recs])


def emit_plots(result, out_dir, eps: float = 0.1) -> list[Path]:
    """Write the SVG figures for ``result`` into ``out_dir`` and return their paths."""
    from .experiments import arch_label, critical_sizes, curve_label, curves

    if not result.rows:
        raise ValueError("cannot plot an empty result")
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    note = f"flgap kind={result.kind} config_hash={result.config_hash} repeats={result.repeats}"
    by = curves(result)
    multi_arch = len({k[3:] for k in by}) > 1
    show_band = result.repeats > 1
    paths = []

    def name(key):
        return curve_label(key) + (f" {arch_label(key)}" if multi_arch else "")

    lc = Chart("Learning curves", "training set size m", "test MSE", note=note)
    for i, (key, recs) in enumerate(by.items()):
        color = PALETTE[i % len(PALETTE)]
        ms = [r["m"] for r in recs]
        lc.series.append(Series(ms, [r["nn_error_median"] for r in recs], f"NN {name(key)}", color,
                                band=_band(recs, "nn_error") if show_band else None))
        if any(math.isfinite(r["ntk_error_median"]) for r in recs):
            lc.series.append(Series(ms, [r["ntk_error_median"] for r in recs], f"NTK {name(key)}",
                                    color, dashed=True,
                                    band=_band(recs, "ntk_error") if show_band else None))
    paths.append(_save(d / "learning_curves.svg", render_chart(lc)))

    for metric, title, ylabel in (("s_nt", "NTK strength", "S_NT"), ("s_ck", "CK strength", "S_CK")):
        ch = Chart(f"{title} vs m", "training set size m", ylabel, logy=(metric == "s_ck"), note=note)
        for i, (key, recs) in enumerate(by.items()):
            ys = [r[f"{metric}_median"] for r in recs]
            if any(math.isfinite(y) for y in ys):
                ch.series.append(Series([r["m"] for r in recs], ys, name(key), PALETTE[i % len(PALETTE)],
                                        band=_band(recs, metric) if show_band else None))
        if ch.series:
            paths.append(_save(d / f"{metric}.svg", render_chart(ch)))

    gap = Chart("FL gap vs m", "training set size m", "NTK error - NN error", logy=False, note=note)
    for i, (key, recs) in enumerate(by.items()):
        ys = [r["fl_gap_median"] for r in recs]
        if any(math.isfinite(y) for y in ys):
            gap.series.append(Series([r["m"] for r in recs], ys, name(key), PALETTE[i % len(PALETTE)]))
    if gap.series:
        paths.append(_save(d / "fl_gap.svg", render_chart(gap)))

    hist = _dims_histograms(result, Path(out_dir))
    if hist:
        edges, counts = hist
        paths.append(_save(d / "dims_hist.svg", render_histogram(
            "Feature dimensionality, first layer, largest m", edges, counts, "D", note=note)))

    if result.kind == "sweep-mstar":
        paths += _mstar_plots(result, d, eps, note, critical_sizes)
    return paths


def _dims_histograms(result, out_dir: Path):
    """First-layer feature-dimensionality histograms at the largest m (repeat 0) per curve."""
    from .experiments import curve_label

    m_max = max(r["m"] for r in result.rows)
    counts, edges = {}, None
    for key, rows in result.groups().items():
        for r in rows:
            if r["m"] != m_max or r["repeat"] != 0:
                continue
            art = result.artifacts.get(r["run_id"], {})
            if "dims" in art and art["dims"]:
                rep = art["dims"][0]
                edges, c = rep.edges, [int(v) for v in rep.counts]
            else:
                path = out_dir / "cells" / r["run_id"] / "hist.csv"
                if not path.exists():
                    continue
                with open(path) as fh:
                    recs = [x for x in csv.DictReader(fh) if x["layer"] == "1"]
                if not recs:
                    continue
                edges = [float(x["bin_lo"]) for x in recs] + [float(recs[-1]["bin_hi"])]
                c = [int(x["count"]) for x in recs]
            counts[f"{curve_label(key)} w{key[3]}"] = c
    if not counts:
        return None
    return np.asarray(edges), counts


def _mstar_plots(result, d: Path, eps: float, note: str, critical_sizes) -> list[Path]:
    ms = critical_sizes(result, eps)
    paths = []
    # m* vs width, one series per (depth, lr)
    for axis, idx, title, fname in (("width", 3, "m* vs width", "mstar_width.svg"),
                                    ("base learning rate", 5, "m* vs learning rate", "mstar_lr.svg")):
        series: dict = {}
        for key, v in ms.items():
            other = tuple(k for j, k in enumerate(key[3:], start=3) if j != idx)
            series.setdefault(other, []).append((key[idx], math.nan if v is None else float(v)))
        ch = Chart(title, axis, "m*", note=note + f" eps={eps:g}")
        for i, (other, pts) in enumerate(sorted(series.items())):
            pts.sort()
            lab = ("h{} lr{:g}" if idx == 3 else "w{} h{}").format(*other)
            ch.series.append(Series([p[0] for p in pts], [p[1] for p in pts], lab,
                                    PALETTE[i % len(PALETTE)]))
        paths.append(_save(d / fname, render_chart(ch)))
    return paths


def _save(path: Path, text: str) -> Path:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)
    return path
