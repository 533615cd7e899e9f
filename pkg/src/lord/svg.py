"""Minimal SVG polyline charts (no plotting dependency)."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _ticks(lo: float, hi: float, n: int = 5) -> list:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def line_chart(series: dict, title: str = "", xlabel: str = "", ylabel: str = "",
               width: int = 640, height: int = 400, log_y: bool = False) -> str:
    """``series`` maps a label to a list of (x, y) points; returns SVG text."""
    pts = [(x, y) for s in series.values() for x, y in s if math.isfinite(y)]
    if log_y:
        pts = [(x, y) for x, y in pts if y > 0]
    if not pts:
        raise ValueError("line_chart needs at least one finite point")
    fy = (lambda y: math.log10(y)) if log_y else (lambda y: y)
    xs = [p[0] for p in pts]
    ys = [fy(p[1]) for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    ml, mr, mt, mb = 70, 150, 40, 50
    pw, ph = width - ml - mr, height - mt - mb

    def X(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def Y(y):
        return mt + ph - (fy(y) - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for t in _ticks(x0, x1):
        out.append(f'<text x="{X(t):.1f}" y="{mt + ph + 16}" text-anchor="middle">{t:.3g}</text>')
    for t in _ticks(y0, y1):
        yy = mt + ph - (t - y0) / (y1 - y0) * ph
        label = f"{10 ** t:.3g}" if log_y else f"{t:.3g}"
        out.append(f'<text x="{ml - 6}" y="{yy + 4:.1f}" text-anchor="end">{label}</text>')
        out.append(f'<line x1="{ml}" x2="{ml + pw}" y1="{yy:.1f}" y2="{yy:.1f}" stroke="#eee"/>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{mt + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {mt + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, (label, s) in enumerate(series.items()):
        col = PALETTE[i % len(PALETTE)]
        good = [(x, y) for x, y in s if math.isfinite(y) and (y > 0 or not log_y)]
        if good:
            path = " ".join(f"{X(x):.1f},{Y(y):.1f}" for x, y in good)
            out.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{path}"/>')
            if len(good) <= 12:
                out.extend(f'<circle cx="{X(x):.1f}" cy="{Y(y):.1f}" r="3" fill="{col}"/>' for x, y in good)
        ly = mt + 14 + 16 * i
        out.append(f'<line x1="{ml + pw + 10}" x2="{ml + pw + 28}" y1="{ly}" y2="{ly}" stroke="{col}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw + 32}" y="{ly + 4}">{escape(str(label))[:18]}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
