"""Minimal SVG 1.1 line plots for DET and CMC curves."""
from __future__ import annotations

import math
from typing import Sequence
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 480, 360
MARGIN = dict(left=60, right=130, top=30, bottom=45)
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"]


def _axis_map(lo, hi, a, b, log):
    if log:
        lo, hi = math.log10(lo), math.log10(hi)
    span = (hi - lo) or 1.0

    def f(v):
        if log:
            v = math.log10(v)
        return a + (v - lo) / span * (b - a)
    return f


def line_plot(series: Sequence[tuple], title: str, xlabel: str, ylabel: str,
              xlim: tuple, ylim: tuple, xlog: bool = False, ylog: bool = False) -> str:
    """``series`` holds ``(label, xs, ys)``; points outside the limits are dropped."""
    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    y0, y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]
    fx = _axis_map(*xlim, x0, x1, xlog)
    fy = _axis_map(*ylim, y0, y1, ylog)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{(x0 + x1) / 2:.1f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" height="{y0 - y1}" fill="none" stroke="black"/>',
           f'<text x="{(x0 + x1) / 2:.1f}" y="{HEIGHT - 8}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
           f'<text x="14" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" font-size="12" '
           f'transform="rotate(-90 14 {(y0 + y1) / 2:.1f})">{escape(ylabel)}</text>']
    for v in _ticks(*xlim, xlog):
        px = fx(v)
        out.append(f'<line x1="{px:.1f}" y1="{y0}" x2="{px:.1f}" y2="{y0 + 4}" stroke="black"/>')
        out.append(f'<text x="{px:.1f}" y="{y0 + 16}" text-anchor="middle" font-size="10">{_fmt(v)}</text>')
    for v in _ticks(*ylim, ylog):
        py = fy(v)
        out.append(f'<line x1="{x0 - 4}" y1="{py:.1f}" x2="{x0}" y2="{py:.1f}" stroke="black"/>')
        out.append(f'<text x="{x0 - 6}" y="{py + 3:.1f}" text-anchor="end" font-size="10">{_fmt(v)}</text>')
    for i, (label, xs, ys) in enumerate(series):
        color = COLORS[i % len(COLORS)]
        pts = [(fx(x), fy(y)) for x, y in zip(xs, ys)
               if xlim[0] <= x <= xlim[1] and ylim[0] <= y <= ylim[1]]
        if pts:
            d = "M " + " L ".join(f"{px:.2f} {py:.2f}" for px, py in pts)
            out.append(f'<path d="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = y1 + 14 + 16 * i
        out.append(f'<line x1="{x1 + 10}" y1="{ly - 4}" x2="{x1 + 30}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{x1 + 34}" y="{ly}" font-size="11">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _ticks(lo, hi, log):
    if log:
        return [10.0 ** e for e in range(math.ceil(math.log10(lo)), math.floor(math.log10(hi)) + 1)]
    step = (hi - lo) / 5
    return [lo + step * i for i in range(6)]


def _fmt(v):
    if v != 0 and (abs(v) < 1e-2 or abs(v) >= 1e4):
        return f"{v:.0e}"
    return f"{v:.3g}"


def det_plot(curves: Sequence[tuple]) -> str:
    """False reject rate against false accept rate, both on log axes.

    ``curves`` holds ``(label, far, tar)``; zero rates cannot sit on a log axis
    and are clipped to the lower limit.
    """
    floor = 1e-4
    series = []
    for label, far, tar in curves:
        xs = [max(float(f), floor) for f in far]
        ys = [max(1.0 - float(t), floor) for t in tar]
        series.append((label, xs, ys))
    return line_plot(series, "DET", "false accept rate", "false reject rate",
                     (floor, 1.0), (floor, 1.0), xlog=True, ylog=True)


def cmc_plot(curves: Sequence[tuple]) -> str:
    """``curves`` holds ``(label, cmc)`` with ``cmc[k-1]`` the rank-k rate."""
    longest = max((len(c) for _, c in curves), default=1)
    series = [(label, list(range(1, len(c) + 1)), [float(v) for v in c]) for label, c in curves]
    return line_plot(series, "CMC", "rank", "identification rate",
                     (1, max(longest, 2)), (0.0, 1.0))
