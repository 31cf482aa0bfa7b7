"""Dependency-free SVG emission for sweep curves and scatter plots."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

PALETTE = (
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd",
    "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
    "#bcbd22", "#e377c2",
)

MARGIN_LEFT = 64
MARGIN_RIGHT = 150
MARGIN_TOP = 40
MARGIN_BOTTOM = 48


class SvgCanvas:
    def __init__(self, width: int = 640, height: int = 420):
        self.width = width
        self.height = height
        self._parts: list[str] = []

    def add(self, element: str) -> None:
        self._parts.append(element)

    def line(self, x1, y1, x2, y2, color="#333", width=1.0, dash=None) -> None:
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.add(
            f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
            f'stroke="{color}" stroke-width="{width}"{d}/>'
        )

    def polyline(self, points, color, width=1.8) -> None:
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
        self.add(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"/>')

    def circle(self, x, y, r, color, opacity=1.0) -> None:
        self.add(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r:.2f}" fill="{color}" fill-opacity="{opacity}"/>')

    def text(self, x, y, s, size=12, anchor="start", color="#222", rotate=None) -> None:
        tr = f' transform="rotate({rotate} {x:.2f} {y:.2f})"' if rotate is not None else ""
        self.add(
            f'<text x="{x:.2f}" y="{y:.2f}" font-size="{size}" font-family="sans-serif" '
            f'text-anchor="{anchor}" fill="{color}"{tr}>{escape(str(s))}</text>'
        )

    def render(self) -> str:
        body = "\n".join(self._parts)
        return (
            '<?xml version="1.0" encoding="UTF-8"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
            f'viewBox="0 0 {self.width} {self.height}">\n'
            f'<rect x="0" y="0" width="{self.width}" height="{self.height}" fill="white"/>\n'
            f"{body}\n</svg>\n"
        )


def _nice_ticks(lo: float, hi: float, n: int = 5):
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo
    step = 10 ** np.floor(np.log10(span / n))
    for mult in (1, 2, 2.5, 5, 10):
        if span / (step * mult) <= n:
            step *= mult
            break
    start = np.ceil(lo / step) * step
    return np.arange(start, hi + 0.5 * step, step)


class _Frame:
    """Axis frame mapping data coordinates onto the canvas."""

    def __init__(self, canvas: SvgCanvas, xlim, ylim, title, xlabel, ylabel):
        self.c = canvas
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 <= self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 <= self.y0:
            self.y1 = self.y0 + 1.0
        self.px0, self.px1 = MARGIN_LEFT, canvas.width - MARGIN_RIGHT
        self.py0, self.py1 = canvas.height - MARGIN_BOTTOM, MARGIN_TOP
        canvas.text(canvas.width / 2, 20, title, size=14, anchor="middle")
        canvas.text((self.px0 + self.px1) / 2, canvas.height - 12, xlabel, anchor="middle")
        canvas.text(18, (self.py0 + self.py1) / 2, ylabel, anchor="middle", rotate=-90)
        canvas.line(self.px0, self.py0, self.px1, self.py0)
        canvas.line(self.px0, self.py0, self.px0, self.py1)
        for tx in _nice_ticks(self.x0, self.x1):
            px, _ = self.map(tx, self.y0)
            canvas.line(px, self.py0, px, self.py0 + 4)
            canvas.text(px, self.py0 + 18, f"{tx:g}", size=10, anchor="middle")
        for ty in _nice_ticks(self.y0, self.y1):
            _, py = self.map(self.x0, ty)
            canvas.line(self.px0 - 4, py, self.px0, py)
            canvas.text(self.px0 - 7, py + 3, f"{ty:g}", size=10, anchor="end")

    def map(self, x, y):
        fx = (x - self.x0) / (self.x1 - self.x0)
        fy = (y - self.y0) / (self.y1 - self.y0)
        return self.px0 + fx * (self.px1 - self.px0), self.py0 + fy * (self.py1 - self.py0)

    def legend(self, entries):
        lx = self.px1 + 12
        ly = self.py1 + 8
        for i, (label, color) in enumerate(entries):
            y = ly + 18 * i
            self.c.line(lx, y - 4, lx + 18, y - 4, color=color, width=2.5)
            self.c.text(lx + 24, y, label, size=11)


def _pad(lo, hi):
    span = (hi - lo) or 1.0
    return lo - 0.05 * span, hi + 0.05 * span


def line_chart(series, title="", xlabel="", ylabel="") -> str:
    """Polyline chart; ``series`` is a list of (label, xs, ys) triples."""
    canvas = SvgCanvas()
    all_x = np.concatenate([np.asarray(xs, dtype=float) for _, xs, _ in series])
    all_y = np.concatenate([np.asarray(ys, dtype=float) for _, _, ys in series])
    frame = _Frame(canvas, _pad(all_x.min(), all_x.max()), _pad(all_y.min(), all_y.max()),
                   title, xlabel, ylabel)
    legend = []
    for i, (label, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = [frame.map(x, y) for x, y in zip(xs, ys)]
        frame.c.polyline(pts, color)
        for px, py in pts:
            canvas.circle(px, py, 2.6, color)
        legend.append((label, color))
    frame.legend(legend)
    return canvas.render()


def scatter_chart(groups, title="", xlabel="", ylabel="") -> str:
    """Scatter plot; ``groups`` is a list of (label, points, emphasized) with
    points of shape (n, 2). Emphasized groups draw larger, opaque markers."""
    canvas = SvgCanvas()
    pts_all = np.concatenate([np.atleast_2d(np.asarray(p, dtype=float)) for _, p, _ in groups])
    frame = _Frame(canvas, _pad(pts_all[:, 0].min(), pts_all[:, 0].max()),
                   _pad(pts_all[:, 1].min(), pts_all[:, 1].max()), title, xlabel, ylabel)
    legend = []
    color_by_label = {}
    for label, _, _ in groups:
        if label not in color_by_label:
            color_by_label[label] = PALETTE[len(color_by_label) % len(PALETTE)]
    for label, points, emphasized in groups:
        color = color_by_label[label]
        r, op = (3.4, 0.95) if emphasized else (1.8, 0.30)
        for x, y in np.atleast_2d(points):
            px, py = frame.map(x, y)
            canvas.circle(px, py, r, color, opacity=op)
    for label, color in color_by_label.items():
        legend.append((label, color))
    frame.legend(legend)
    return canvas.render()
