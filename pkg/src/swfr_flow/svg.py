"""Minimal deterministic SVG writer for histograms, curves and trajectory fans.

Numbers are printed with a fixed precision so identical inputs give
byte-identical files.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")


def _f(v: float) -> str:
    return f"{v:.2f}"


@dataclass
class Panel:
    """One axes box mapping data coordinates onto a pixel rectangle."""

    x0: float
    y0: float
    width: float
    height: float
    xlim: tuple[float, float]
    ylim: tuple[float, float]
    title: str = ""
    items: list[str] = field(default_factory=list)

    def px(self, x):
        lo, hi = self.xlim
        return self.x0 + (np.asarray(x, dtype=float) - lo) / (hi - lo) * self.width

    def py(self, y):
        lo, hi = self.ylim
        return self.y0 + self.height - (np.asarray(y, dtype=float) - lo) / (hi - lo) * self.height

    def bars(self, edges, heights, color=PALETTE[0], opacity=0.5):
        for a, b, h in zip(edges[:-1], edges[1:], heights):
            if h <= 0:
                continue
            xa, xb = float(self.px(a)), float(self.px(b))
            yt, yb = float(self.py(h)), float(self.py(self.ylim[0]))
            self.items.append(
                f'<rect x="{_f(xa)}" y="{_f(yt)}" width="{_f(xb - xa)}" height="{_f(yb - yt)}" '
                f'fill="{color}" fill-opacity="{opacity}" stroke="none"/>'
            )

    def polyline(self, x, y, color=PALETTE[1], width=1.5, opacity=1.0):
        px, py = self.px(x), self.py(y)
        pts = " ".join(f"{_f(a)},{_f(b)}" for a, b in zip(px, py))
        self.items.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}" '
            f'stroke-opacity="{opacity}"/>'
        )

    def markers(self, x, y, color=PALETTE[0], r=2.5):
        for a, b in zip(self.px(x), self.py(y)):
            self.items.append(f'<circle cx="{_f(a)}" cy="{_f(b)}" r="{r}" fill="{color}"/>')

    def render(self) -> list[str]:
        out = [
            f'<rect x="{_f(self.x0)}" y="{_f(self.y0)}" width="{_f(self.width)}" height="{_f(self.height)}" '
            'fill="white" stroke="black" stroke-width="0.8"/>'
        ]
        out += self.items
        bottom = self.y0 + self.height
        for v in np.linspace(*self.xlim, 5):
            out.append(
                f'<text x="{_f(float(self.px(v)))}" y="{_f(bottom + 12)}" font-size="9" '
                f'text-anchor="middle">{v:.3g}</text>'
            )
        for v in np.linspace(*self.ylim, 5):
            out.append(
                f'<text x="{_f(self.x0 - 4)}" y="{_f(float(self.py(v)) + 3)}" font-size="9" '
                f'text-anchor="end">{v:.3g}</text>'
            )
        if self.title:
            out.append(
                f'<text x="{_f(self.x0 + self.width / 2)}" y="{_f(self.y0 - 5)}" font-size="11" '
                f'text-anchor="middle">{escape(self.title)}</text>'
            )
        return out


class Figure:
    def __init__(self, width: int, height: int, title: str = ""):
        self.width = width
        self.height = height
        self.title = title
        self.panels: list[Panel] = []

    def panel(self, x0, y0, width, height, xlim, ylim, title="") -> Panel:
        p = Panel(x0, y0, width, height, _nondegenerate(xlim), _nondegenerate(ylim), title)
        self.panels.append(p)
        return p

    def to_string(self) -> str:
        lines = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
            f'viewBox="0 0 {self.width} {self.height}" font-family="sans-serif">'
        ]
        if self.title:
            lines.append(
                f'<text x="{self.width / 2:.2f}" y="16" font-size="13" text-anchor="middle">{escape(self.title)}</text>'
            )
        for p in self.panels:
            lines += p.render()
        lines.append("</svg>")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_string())


def _nondegenerate(lim):
    lo, hi = float(lim[0]), float(lim[1])
    if not hi > lo:
        lo, hi = lo - 0.5, lo + 0.5
    return lo, hi


def weighted_histogram(x, w, bins: int, lo: float, hi: float):
    """Density-normalized weighted histogram; returns (edges, heights)."""
    w = np.asarray(w, dtype=float).ravel()
    h, edges = np.histogram(np.ravel(x), bins=bins, range=(lo, hi), weights=w / w.sum(), density=False)
    return edges, h / np.diff(edges)


def density_slices(times, positions, weights, path, reference=None, bins=40, title="") -> None:
    """Weighted histogram of 1-D particle positions at each stored time.

    ``reference`` is an optional ``(grid, density)`` curve drawn on the last panel.
    """
    positions = np.asarray(positions)[..., 0]
    lo, hi = float(np.min(positions)), float(np.max(positions))
    k = len(times)
    cols = min(k, 5)
    rows = -(-k // cols)
    pw, ph = 180, 120
    fig = Figure(cols * (pw + 40) + 30, rows * (ph + 45) + 30, title)
    hists = [weighted_histogram(positions[j], weights[j], bins, lo, hi) for j in range(k)]
    top = max(float(h.max()) for _, h in hists) * 1.1
    for j, (edges, h) in enumerate(hists):
        r, c = divmod(j, cols)
        p = fig.panel(40 + c * (pw + 40), 40 + r * (ph + 45), pw, ph, (lo, hi), (0.0, top), f"t = {times[j]:.3g}")
        p.bars(edges, h)
        if reference is not None and j == k - 1:
            p.polyline(reference[0], np.minimum(reference[1], top))
    fig.save(path)


def trajectory_fan(times, positions, weights, path, max_particles=64, title="") -> None:
    """Particle paths of a 1-D flow with stroke opacity following the weight."""
    positions = np.asarray(positions)[..., 0]
    weights = np.asarray(weights)
    n = positions.shape[1]
    ids = np.linspace(0, n - 1, min(n, max_particles)).round().astype(int)
    fig = Figure(520, 360, title)
    p = fig.panel(50, 30, 440, 290, (float(times[0]), float(times[-1])), (float(positions.min()), float(positions.max())))
    wmax = float(weights[:, ids].max())
    for i in ids:
        op = 0.15 + 0.85 * float(weights[-1, i]) / wmax
        p.polyline(times, positions[:, i], color=PALETTE[0], width=1.0, opacity=round(op, 3))
    fig.save(path)


def curve_plot(x, ys: dict[str, np.ndarray], path, title="", markers=True) -> None:
    x = np.asarray(x, dtype=float)
    allv = np.concatenate([np.asarray(v, dtype=float).ravel() for v in ys.values()])
    pad = 0.05 * (allv.max() - allv.min() + 1e-12)
    fig = Figure(520, 360, title)
    p = fig.panel(60, 30, 420, 280, (float(x.min()), float(x.max())), (float(allv.min() - pad), float(allv.max() + pad)))
    for j, (name, y) in enumerate(ys.items()):
        color = PALETTE[j % len(PALETTE)]
        p.polyline(x, y, color=color)
        if markers:
            p.markers(x, y, color=color)
        p.items.append(
            f'<text x="{_f(p.x0 + 8)}" y="{_f(p.y0 + 14 + 12 * j)}" font-size="10" fill="{color}">{escape(name)}</text>'
        )
    fig.save(path)


def scatter_weighted(x, w, path, title="", max_points=4000) -> None:
    """2-D weighted point cloud; marker radius scales with the weight."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float).ravel()
    idx = np.arange(x.shape[0])[: max_points]
    fig = Figure(420, 420, title)
    lo = float(x[idx].min()) - 0.2
    hi = float(x[idx].max()) + 0.2
    p = fig.panel(40, 30, 350, 350, (lo, hi), (lo, hi))
    r = 0.6 + 1.6 * np.sqrt(w[idx] / w.max())
    for (a, b), ri in zip(x[idx], r):
        p.items.append(
            f'<circle cx="{_f(float(p.px(a)))}" cy="{_f(float(p.py(b)))}" r="{ri:.2f}" fill="{PALETTE[0]}" fill-opacity="0.4"/>'
        )
    fig.save(path)
