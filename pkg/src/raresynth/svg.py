"""Minimal deterministic SVG plots (no plotting library needed).

Output depends only on the inputs: coordinates are printed with fixed
precision and elements are emitted in input order.
"""

from __future__ import annotations

import math
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

W, H = 640, 400
PAD_L, PAD_R, PAD_T, PAD_B = 60, 150, 30, 50
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _n(x: float) -> str:
    return f"{x:.2f}"


def _frame(title: str, xlabel: str, ylabel: str) -> list[str]:
    pw, ph = W - PAD_L - PAD_R, H - PAD_T - PAD_B
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.0f}" y="18" text-anchor="middle" font-size="14" font-family="sans-serif">{escape(title)}</text>',
        f'<rect x="{PAD_L}" y="{PAD_T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
        f'<text x="{PAD_L + pw / 2:.0f}" y="{H - 10}" text-anchor="middle" font-size="12" font-family="sans-serif">{escape(xlabel)}</text>',
        f'<text x="15" y="{PAD_T + ph / 2:.0f}" text-anchor="middle" font-size="12" font-family="sans-serif" '
        f'transform="rotate(-90 15 {PAD_T + ph / 2:.0f})">{escape(ylabel)}</text>',
    ]


def _legend(names: Sequence[str]) -> list[str]:
    out = []
    x = W - PAD_R + 10
    for i, name in enumerate(names):
        y = PAD_T + 15 + 18 * i
        c = COLORS[i % len(COLORS)]
        out.append(f'<rect x="{x}" y="{y - 9}" width="12" height="10" fill="{c}" fill-opacity="0.7"/>')
        out.append(f'<text x="{x + 18}" y="{y}" font-size="11" font-family="sans-serif">{escape(name)}</text>')
    return out


def _ticks_y(lo: float, hi: float, n: int = 5) -> list[str]:
    ph = H - PAD_T - PAD_B
    out = []
    for k in range(n + 1):
        v = lo + (hi - lo) * k / n
        y = PAD_T + ph * (1 - k / n)
        out.append(f'<line x1="{PAD_L - 4}" y1="{_n(y)}" x2="{PAD_L}" y2="{_n(y)}" stroke="black"/>')
        out.append(f'<text x="{PAD_L - 6}" y="{_n(y + 4)}" text-anchor="end" font-size="10" font-family="sans-serif">{v:.3g}</text>')
    return out


def ratio_positions(ratios: Sequence[float]) -> dict[float, float]:
    """Map ratios to [0, 1] on a log axis; 0x sits one decade left of the smallest positive ratio."""
    pos = sorted({float(r) for r in ratios if r > 0})
    if not pos:
        return {0.0: 0.5}
    lo = math.log10(pos[0]) - (1.0 if 0.0 in ratios else 0.0)
    hi = math.log10(pos[-1])
    span = hi - lo or 1.0
    out = {r: (math.log10(r) - lo) / span for r in pos}
    if 0.0 in ratios:
        out[0.0] = 0.0
    return out


def metric_vs_ratio(series: Mapping[str, Mapping[float, float]], title: str, ylabel: str, ylim=(0.0, 1.0)) -> str:
    """Line plot of ``series[name][ratio] -> value`` on a log ratio axis."""
    ratios = sorted({r for s in series.values() for r in s})
    xs = ratio_positions(ratios)
    pw, ph = W - PAD_L - PAD_R, H - PAD_T - PAD_B
    lo, hi = ylim
    out = _frame(title, "synthetic : real positive ratio (log scale)", ylabel) + _ticks_y(lo, hi)
    for r in ratios:
        x = PAD_L + pw * xs[r]
        out.append(f'<line x1="{_n(x)}" y1="{H - PAD_B}" x2="{_n(x)}" y2="{H - PAD_B + 4}" stroke="black"/>')
        out.append(f'<text x="{_n(x)}" y="{H - PAD_B + 16}" text-anchor="middle" font-size="10" font-family="sans-serif">{r:g}×</text>')
    for i, (name, s) in enumerate(series.items()):
        c = COLORS[i % len(COLORS)]
        pts = [(PAD_L + pw * xs[r], PAD_T + ph * (1 - (min(max(s[r], lo), hi) - lo) / ((hi - lo) or 1.0))) for r in sorted(s)]
        if len(pts) > 1:
            out.append(f'<polyline fill="none" stroke="{c}" stroke-width="2" points="{" ".join(f"{_n(x)},{_n(y)}" for x, y in pts)}"/>')
        for x, y in pts:
            out.append(f'<circle cx="{_n(x)}" cy="{_n(y)}" r="3" fill="{c}"/>')
    out += _legend(list(series))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def histogram_overlay(edges, counts: Mapping[str, Sequence[int]], title: str, xlabel: str) -> str:
    """Overlaid normalized histograms sharing ``edges``."""
    edges = np.asarray(edges, dtype=np.float64)
    pw, ph = W - PAD_L - PAD_R, H - PAD_T - PAD_B
    dens = {k: np.asarray(v, dtype=np.float64) / max(1.0, float(np.sum(v))) for k, v in counts.items()}
    top = max((float(d.max()) for d in dens.values() if d.size), default=1.0) or 1.0
    out = _frame(title, xlabel, "fraction of pairs") + _ticks_y(0.0, top)
    x0, x1 = float(edges[0]), float(edges[-1])
    span = (x1 - x0) or 1.0
    for k in (0, len(edges) // 2, len(edges) - 1):
        x = PAD_L + pw * (edges[k] - x0) / span
        out.append(f'<text x="{_n(x)}" y="{H - PAD_B + 16}" text-anchor="middle" font-size="10" font-family="sans-serif">{edges[k]:.3g}</text>')
    for i, (name, d) in enumerate(dens.items()):
        c = COLORS[i % len(COLORS)]
        for b, v in enumerate(d):
            if v <= 0:
                continue
            xa = PAD_L + pw * (edges[b] - x0) / span
            xb = PAD_L + pw * (edges[b + 1] - x0) / span
            h = ph * v / top
            out.append(
                f'<rect x="{_n(xa)}" y="{_n(PAD_T + ph - h)}" width="{_n(xb - xa)}" height="{_n(h)}" fill="{c}" fill-opacity="0.45"/>'
            )
    out += _legend(list(dens))
    out.append("</svg>")
    return "\n".join(out) + "\n"
