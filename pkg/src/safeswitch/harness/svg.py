"""Minimal SVG line charts (polylines with axes, ticks and optional error bars)."""
from __future__ import annotations

import math
from typing import Sequence
from xml.sax.saxutils import escape

W, H = 640, 400
PAD_L, PAD_R, PAD_T, PAD_B = 70, 20, 40, 50
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _ticks(lo: float, hi: float, k: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * i / (k - 1) for i in range(k)]


def line_chart(series: dict[str, tuple[Sequence[float], Sequence[float]]], *, title: str = "",
               xlabel: str = "", ylabel: str = "", logx: bool = False,
               errors: dict[str, Sequence[float]] | None = None) -> str:
    """Render named (x, y) series to an SVG document string."""
    errors = errors or {}
    tx = (lambda v: math.log10(v)) if logx else (lambda v: v)
    pts = {k: [(tx(float(x)), float(y)) for x, y in zip(*xy) if math.isfinite(float(y))]
           for k, xy in series.items()}
    xs = [p[0] for v in pts.values() for p in v] or [0.0, 1.0]
    ys = [p[1] for v in pts.values() for p in v] or [0.0, 1.0]
    for k, err in errors.items():
        for (x, y), e in zip(pts.get(k, []), err):
            ys += [y - float(e), y + float(e)]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1

    def sx(x):
        return PAD_L + (x - x0) / (x1 - x0) * (W - PAD_L - PAD_R)

    def sy(y):
        return H - PAD_B - (y - y0) / (y1 - y0) * (H - PAD_T - PAD_B)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
           f'<line x1="{PAD_L}" y1="{H - PAD_B}" x2="{W - PAD_R}" y2="{H - PAD_B}" stroke="black"/>',
           f'<line x1="{PAD_L}" y1="{PAD_T}" x2="{PAD_L}" y2="{H - PAD_B}" stroke="black"/>']
    for v in _ticks(x0, x1):
        label = _fmt(10**v) if logx else _fmt(v)
        out.append(f'<text x="{sx(v):.2f}" y="{H - PAD_B + 16}" text-anchor="middle" font-size="11">{label}</text>')
    for v in _ticks(y0, y1):
        out.append(f'<text x="{PAD_L - 6}" y="{sy(v) + 4:.2f}" text-anchor="end" font-size="11">{_fmt(v)}</text>')
    out.append(f'<text x="{W / 2}" y="{H - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{H / 2}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 16 {H / 2})">{escape(ylabel)}</text>')
    for idx, (name, p) in enumerate(pts.items()):
        color = COLORS[idx % len(COLORS)]
        if p:
            coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in p)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        for (x, y), e in zip(p, errors.get(name, [])):
            out.append(f'<line x1="{sx(x):.2f}" y1="{sy(y - float(e)):.2f}" x2="{sx(x):.2f}" '
                       f'y2="{sy(y + float(e)):.2f}" stroke="{color}"/>')
        out.append(f'<text x="{W - PAD_R - 4}" y="{PAD_T + 14 * (idx + 1)}" text-anchor="end" '
                   f'font-size="11" fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_chart(path, *args, **kwargs) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(line_chart(*args, **kwargs))
