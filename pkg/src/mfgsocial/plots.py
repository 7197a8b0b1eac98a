"""Self-contained static SVG line plots (polyline + axes + text).

No renderer dependency: the files are plain XML and open in any browser.
Output formatting is fixed-precision so identical data produces identical
bytes.
"""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

from .errors import UsageError

__all__ = ["svg_line_plot"]

_COLORS = ("#1f6fb2", "#d1495b", "#3e8e5a", "#8c5aa8", "#c07a1f", "#3aa6a6")

_W, _H = 720, 460
_ML, _MR, _MT, _MB = 80, 30, 44, 58


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / count
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        if raw <= mult * mag:
            step = mult * mag
            break
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-12 * step:
        out.append(round(v, 12))
        v += step
    return out or [lo, hi]


def svg_line_plot(path, x: Sequence[float], series: Mapping[str, Sequence[float]],
                  title: str, xlabel: str, ylabel: str, logy: bool = False,
                  logx: bool = False, annotation: str = "") -> None:
    """Write one SVG with a polyline per series and a small legend."""
    x = np.asarray(list(x), dtype=float)
    if x.size == 0 or not series:
        raise UsageError("nothing to plot")
    data = {}
    for name, ys in series.items():
        ys = np.asarray(list(ys), dtype=float)
        if ys.shape != x.shape:
            raise UsageError(f"series {name!r} length differs from x")
        data[name] = ys

    def tx(v):
        return np.log10(v) if logx else v

    def ty(v):
        return np.log10(v) if logy else v

    if logx and np.any(x <= 0):
        raise UsageError("log x-axis requires positive x")
    finite_y = np.concatenate([
        ys[np.isfinite(ys) & ((ys > 0) if logy else True)] for ys in data.values()
    ])
    if finite_y.size == 0:
        raise UsageError("no finite data to plot")
    x_lo, x_hi = float(tx(x).min()), float(tx(x).max())
    y_lo, y_hi = float(ty(finite_y).min()), float(ty(finite_y).max())
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    iw = _W - _ML - _MR
    ih = _H - _MT - _MB

    def px(v):
        return _ML + (tx(v) - x_lo) / (x_hi - x_lo) * iw

    def py(v):
        return _MT + (y_hi - ty(v)) / (y_hi - y_lo) * ih

    out = []
    out.append('<?xml version="1.0" encoding="UTF-8"?>')
    out.append(
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">'
    )
    out.append(f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>')
    out.append(
        f'<text x="{_W / 2:.1f}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="15">{title}</text>'
    )
    # Axes box.
    out.append(
        f'<rect x="{_ML}" y="{_MT}" width="{iw}" height="{ih}" fill="none" '
        f'stroke="#444444" stroke-width="1"/>'
    )
    for tick in _ticks(x_lo, x_hi):
        vx = _ML + (tick - x_lo) / (x_hi - x_lo) * iw
        label = f"1e{tick:g}" if logx else f"{tick:g}"
        out.append(f'<line x1="{vx:.2f}" y1="{_MT + ih}" x2="{vx:.2f}" '
                   f'y2="{_MT + ih + 5}" stroke="#444444"/>')
        out.append(f'<text x="{vx:.2f}" y="{_MT + ih + 20}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="11">{label}</text>')
    for tick in _ticks(y_lo, y_hi):
        vy = _MT + (y_hi - tick) / (y_hi - y_lo) * ih
        label = f"1e{tick:g}" if logy else f"{tick:g}"
        out.append(f'<line x1="{_ML - 5}" y1="{vy:.2f}" x2="{_ML}" y2="{vy:.2f}" '
                   f'stroke="#444444"/>')
        out.append(f'<text x="{_ML - 8}" y="{vy + 4:.2f}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="11">{label}</text>')
    out.append(f'<text x="{_ML + iw / 2:.1f}" y="{_H - 16}" text-anchor="middle" '
               f'font-family="sans-serif" font-size="13">{xlabel}</text>')
    out.append(f'<text x="20" y="{_MT + ih / 2:.1f}" text-anchor="middle" '
               f'font-family="sans-serif" font-size="13" '
               f'transform="rotate(-90 20 {_MT + ih / 2:.1f})">{ylabel}</text>')

    for idx, (name, ys) in enumerate(data.items()):
        color = _COLORS[idx % len(_COLORS)]
        pts = []
        for xv, yv in zip(x, ys):
            if not np.isfinite(yv) or (logy and yv <= 0):
                continue
            pts.append(f"{px(xv):.2f},{py(yv):.2f}")
        if pts:
            out.append(f'<polyline points="{" ".join(pts)}" fill="none" '
                       f'stroke="{color}" stroke-width="1.6"/>')
        ly = _MT + 16 + 16 * idx
        out.append(f'<line x1="{_ML + iw - 150}" y1="{ly - 4}" '
                   f'x2="{_ML + iw - 126}" y2="{ly - 4}" stroke="{color}" '
                   f'stroke-width="1.6"/>')
        out.append(f'<text x="{_ML + iw - 120}" y="{ly}" font-family="sans-serif" '
                   f'font-size="12">{name}</text>')
    if annotation:
        out.append(f'<text x="{_ML + 10}" y="{_MT + 18}" font-family="sans-serif" '
                   f'font-size="12" fill="#333333">{annotation}</text>')
    out.append("</svg>")
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(out) + "\n")
