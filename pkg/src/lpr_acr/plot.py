"""Static SVG charts of reconstructed arrival curves with 90% bands."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .curves import CumulativeCurve
from .reconstruct import ReconstructedCurve

Z90 = 1.645
PANEL_W, PANEL_H = 720, 240
MARGIN = 48


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _path(xs, ys) -> str:
    return " ".join(("M" if i == 0 else "L") + f"{_fmt(x)},{_fmt(y)}" for i, (x, y) in enumerate(zip(xs, ys)))


def _step_xy(times, values, t0, t1):
    """Vertices of a right-continuous step curve clipped to [t0, t1]."""
    keep = (times >= t0) & (times <= t1)
    t, v = times[keep], values[keep]
    before = values[times < t0]
    start = float(before[-1]) if before.size else 0.0
    xs, ys = [t0], [start]
    for ti, vi in zip(t, v):
        xs += [ti, ti]
        ys += [ys[-1], vi]
    xs.append(t1)
    ys.append(ys[-1])
    return np.array(xs), np.array(ys)


def band_svg(
    curves: Sequence[ReconstructedCurve],
    truth: Optional[Mapping[str, CumulativeCurve]] = None,
    title: str = "",
) -> str:
    """One panel per lane: mean line, shaded mean +/- 1.645 sd band, anchor
    dots and, when given, the true arrival curve as a step line."""
    height = len(curves) * (PANEL_H + MARGIN) + MARGIN
    width = PANEL_W + 2 * MARGIN
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{MARGIN}" y="{MARGIN // 2}" font-family="sans-serif" font-size="14">{escape(title)}</text>')
    for k, c in enumerate(curves):
        top = MARGIN + k * (PANEL_H + MARGIN)
        if c.times.size == 0:
            continue
        t0, t1 = float(c.times.min()), float(c.times.max())
        sd = c.std
        lo, hi = c.mean - Z90 * sd, c.mean + Z90 * sd
        y0, y1 = float(lo.min()), float(hi.max())
        if truth is not None and c.lane in truth:
            tr = truth[c.lane]
            tx, ty = _step_xy(np.asarray(tr.times), np.asarray(tr.values), t0, t1)
            y0, y1 = min(y0, float(ty.min())), max(y1, float(ty.max()))
        else:
            tx = ty = None
        span_t = (t1 - t0) or 1.0
        span_y = (y1 - y0) or 1.0
        sx = lambda t: MARGIN + (np.asarray(t) - t0) / span_t * PANEL_W
        sy = lambda y: top + PANEL_H - (np.asarray(y) - y0) / span_y * PANEL_H

        out.append(f'<g class="lane" data-lane="{escape(c.lane)}">')
        out.append(f'<rect x="{MARGIN}" y="{top}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#999"/>')
        out.append(f'<text x="{MARGIN + 4}" y="{top + 14}" font-family="sans-serif" font-size="12">{escape(c.lane)} ({c.mode})</text>')
        out.append(f'<text x="{MARGIN}" y="{top + PANEL_H + 14}" font-family="sans-serif" font-size="10">{_fmt(t0)} s</text>')
        out.append(f'<text x="{MARGIN + PANEL_W - 60}" y="{top + PANEL_H + 14}" font-family="sans-serif" font-size="10">{_fmt(t1)} s</text>')
        xs = sx(c.times)
        poly = list(zip(xs, sy(hi))) + list(zip(xs[::-1], sy(lo)[::-1]))
        pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in poly)
        out.append(f'<polygon points="{pts}" fill="#4a90d9" fill-opacity="0.25" stroke="none"/>')
        if tx is not None:
            out.append(f'<path d="{_path(sx(tx), sy(ty))}" fill="none" stroke="#222" stroke-width="1"/>')
        out.append(f'<path d="{_path(xs, sy(c.mean))}" fill="none" stroke="#1f5fa8" stroke-width="1.5"/>')
        for a in c.anchors:
            if t0 <= a.t <= t1:
                out.append(f'<circle cx="{_fmt(float(sx(a.t)))}" cy="{_fmt(float(sy(a.index)))}" r="2.5" fill="#c0392b"/>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_band_svg(path: str | Path, curves, truth=None, title: str = "") -> None:
    Path(path).write_text(band_svg(curves, truth, title), encoding="utf-8")
