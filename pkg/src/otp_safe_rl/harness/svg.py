"""Standalone SVG line charts; the CSVs stay the source of truth."""
from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#7f7f7f"]
W, H = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 160, 40, 50


def _ticks(lo, hi, n=5):
    if hi == lo:
        return [lo]
    step = 10 ** math.floor(math.log10((hi - lo) / n))
    for m in (1, 2, 5, 10):
        if (hi - lo) / (step * m) <= n:
            step *= m
            break
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-12 * abs(step):
        out.append(round(v, 12))
        v += step
    return out


def line_chart(path, xs, series: dict, title="", xlabel="", ylabel="") -> Path:
    xs = [float(x) for x in xs]
    finite = [v for ys in series.values() for v in ys if v is not None and math.isfinite(v)]
    if not xs or not finite:
        raise ValueError("nothing to plot")
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(finite), max(finite)
    if x0 == x1:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y0 == y1:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM

    def px(x):
        return LEFT + (x - x0) / (x1 - x0) * pw

    def py(y):
        return TOP + (1 - (y - y0) / (y1 - y0)) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
             f'font-family="sans-serif" font-size="11">',
             f'<rect width="{W}" height="{H}" fill="white"/>',
             f'<text x="{W / 2:.1f}" y="20" text-anchor="middle" font-size="14">'
             f'{escape(title)}</text>',
             f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for t in _ticks(x0, x1):
        parts.append(f'<line x1="{px(t):.1f}" y1="{TOP + ph}" x2="{px(t):.1f}" '
                     f'y2="{TOP + ph + 4}" stroke="#444"/>')
        parts.append(f'<text x="{px(t):.1f}" y="{TOP + ph + 16}" text-anchor="middle">'
                     f'{t:g}</text>')
    for t in _ticks(y0, y1):
        parts.append(f'<line x1="{LEFT - 4}" y1="{py(t):.1f}" x2="{LEFT + pw}" y2="{py(t):.1f}" '
                     f'stroke="#ddd"/>')
        parts.append(f'<text x="{LEFT - 6}" y="{py(t) + 4:.1f}" text-anchor="end">{t:g}</text>')
    parts.append(f'<text x="{LEFT + pw / 2:.1f}" y="{H - 10}" text-anchor="middle">'
                 f'{escape(xlabel)}</text>')
    if ylabel:
        parts.append(f'<text transform="translate(16,{TOP + ph / 2:.1f}) rotate(-90)" '
                     f'text-anchor="middle">{escape(ylabel)}</text>')
    for i, (name, ys) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = [f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs, ys)
               if y is not None and math.isfinite(y)]
        dash = ' stroke-dasharray="5,4"' if name in ("budget", "threshold") else ""
        if pts:
            parts.append(f'<polyline points="{" ".join(pts)}" fill="none" stroke="{color}" '
                         f'stroke-width="1.5"{dash}/>')
        ly = TOP + 14 + 16 * i
        parts.append(f'<line x1="{LEFT + pw + 10}" y1="{ly - 4}" x2="{LEFT + pw + 30}" '
                     f'y2="{ly - 4}" stroke="{color}" stroke-width="2"{dash}/>')
        parts.append(f'<text x="{LEFT + pw + 35}" y="{ly}">{escape(str(name))}</text>')
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(parts) + "\n", encoding="utf-8")
    return path
