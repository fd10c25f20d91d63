"""Minimal SVG figures built from rects, circles, lines and text."""
from __future__ import annotations

from html import escape
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

PALETTE = ("#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7")


class Canvas:
    def __init__(self, width: int, height: int):
        self.width, self.height = width, height
        self.items: List[str] = []

    def rect(self, x, y, w, h, fill, stroke="none"):
        self.items.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{max(w, 0):.2f}" height="{max(h, 0):.2f}" '
                          f'fill="{fill}" stroke="{stroke}"/>')

    def circle(self, x, y, r, fill, stroke="none", opacity=1.0):
        self.items.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r:.2f}" fill="{fill}" stroke="{stroke}" '
                          f'fill-opacity="{opacity:.2f}"/>')

    def line(self, x1, y1, x2, y2, stroke="#333", width=1.0):
        self.items.append(f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
                          f'stroke="{stroke}" stroke-width="{width:.2f}"/>')

    def text(self, x, y, s, size=11, anchor="start", rotate: Optional[float] = None):
        rot = f' transform="rotate({rotate:.1f} {x:.2f} {y:.2f})"' if rotate is not None else ""
        self.items.append(f'<text x="{x:.2f}" y="{y:.2f}" font-size="{size}" font-family="sans-serif" '
                          f'text-anchor="{anchor}"{rot}>{escape(str(s))}</text>')

    def render(self) -> str:
        body = "\n".join(self.items)
        return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
                f'viewBox="0 0 {self.width} {self.height}">\n'
                f'<rect width="100%" height="100%" fill="white"/>\n{body}\n</svg>\n')


def bar_chart(labels: Sequence[str], series: Dict[str, Sequence[float]], title: str = "",
              y_max: float = 1.0, note: str = "") -> str:
    """Grouped bars, one group per label and one colour per series."""
    names = list(series)
    group_w = 18 * max(1, len(names)) + 10
    left, top, plot_h = 50, 30, 220
    width = left + group_w * len(labels) + 20
    c = Canvas(max(width, 320), top + plot_h + 110)
    c.text(left, 18, title, 13)
    c.line(left, top, left, top + plot_h)
    c.line(left, top + plot_h, width - 10, top + plot_h)
    for t in np.linspace(0, y_max, 5):
        y = top + plot_h * (1 - t / y_max)
        c.line(left - 4, y, left, y)
        c.text(left - 6, y + 4, f"{t:.2f}", 9, "end")
    for gi, lab in enumerate(labels):
        x0 = left + 5 + gi * group_w
        for si, name in enumerate(names):
            v = float(np.clip(series[name][gi], 0, y_max))
            h = plot_h * v / y_max
            c.rect(x0 + si * 18, top + plot_h - h, 16, h, PALETTE[si % len(PALETTE)])
        cx = x0 + 9 * len(names)
        c.text(cx, top + plot_h + 12, lab, 9, "end", rotate=-45)
    for si, name in enumerate(names):
        y = top + plot_h + 80 + 14 * (si // 4)
        x = left + 120 * (si % 4)
        c.rect(x, y - 9, 10, 10, PALETTE[si % len(PALETTE)])
        c.text(x + 14, y, name, 10)
    if note:
        c.text(left, c.height - 6, note, 8)
    return c.render()


def scatter(points: np.ndarray, groups: Optional[np.ndarray] = None,
            markers: Sequence[Tuple[str, np.ndarray]] = (), title: str = "", note: str = "") -> str:
    """2-D scatter; ``markers`` are labelled highlighted points drawn on top."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    extra = np.array([m for _, m in markers], dtype=np.float64).reshape(-1, 2)
    allp = np.vstack([pts, extra]) if len(extra) else pts
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    size, pad = 360, 40
    c = Canvas(size + 2 * pad + 120, size + 2 * pad)
    c.text(pad, 20, title, 13)
    c.rect(pad, pad, size, size, "none", "#999")

    def xy(p):
        u = (p - lo) / span
        return pad + u[0] * size, pad + (1 - u[1]) * size

    g = np.zeros(len(pts), dtype=int) if groups is None else np.asarray(groups, dtype=int)
    for p, k in zip(pts, g):
        x, y = xy(p)
        c.circle(x, y, 1.6, PALETTE[k % len(PALETTE)], opacity=0.5)
    for i, (name, p) in enumerate(markers):
        x, y = xy(np.asarray(p, dtype=np.float64))
        col = ("#000000", "#d62728", "#2ca02c", "#9467bd")[i % 4]
        c.circle(x, y, 6, "none", col)
        c.circle(x, y, 2.5, col)
        c.text(size + pad + 10, pad + 16 * (i + 1), name, 10)
        c.circle(size + pad + 4, pad + 16 * (i + 1) - 4, 3, col)
    if note:
        c.text(pad, c.height - 8, note, 8)
    return c.render()


def heatmap(values: np.ndarray, title: str = "", vmax: Optional[float] = None, cell: int = 5) -> str:
    """Greyscale heatmap of a 2-D array (row 0 at the top); 1-D input is drawn as a profile."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        return profile(v, title)
    top = vmax if vmax is not None else float(v.max()) or 1.0
    rows, cols = v.shape
    c = Canvas(cols * cell + 20, rows * cell + 40)
    c.text(10, 18, title, 12)
    for i in range(rows):
        for j in range(cols):
            s = int(round(255 * (1 - min(v[i, j] / top, 1.0))))
            c.rect(10 + j * cell, 28 + i * cell, cell, cell, f"rgb({s},{s},{s})")
    return c.render()


def profile(values: Sequence[float], title: str = "", overlay: Optional[Sequence[float]] = None) -> str:
    """Step plot of a 1-D array; ``overlay`` is drawn as a second line."""
    v = np.asarray(values, dtype=np.float64)
    w, h, pad = 480, 200, 30
    top = float(max(v.max(), np.max(overlay) if overlay is not None else 0.0)) or 1.0
    c = Canvas(w + 2 * pad, h + 2 * pad)
    c.text(pad, 18, title, 12)
    c.line(pad, pad + h, pad + w, pad + h)
    for k, arr in enumerate([v] + ([np.asarray(overlay, dtype=np.float64)] if overlay is not None else [])):
        dx = w / len(arr)
        for i, a in enumerate(arr):
            y = pad + h * (1 - a / top)
            c.line(pad + i * dx, y, pad + (i + 1) * dx, y, PALETTE[k], 1.5)
    return c.render()
