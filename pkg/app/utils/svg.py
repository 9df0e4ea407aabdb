"""
Minimal SVG renderers for analysis outputs.

Responsibility:
- Line plots (curves over steps or m), scatter plots (similarity vs cosine)
  and heatmaps (distance, similarity and cosine matrices).
- CSV stays the canonical output; figures are previews.
"""
from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
from xml.sax.saxutils import escape

import numpy as np

WIDTH = 640
HEIGHT = 420
MARGIN = 60
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")

Point = Tuple[float, float]


def _bounds(values: Sequence[float]) -> Tuple[float, float]:
    finite = [v for v in values if np.isfinite(v)]
    if not finite:
        return 0.0, 1.0
    lo, hi = min(finite), max(finite)
    if hi == lo:
        pad = abs(lo) * 0.1 or 1.0
        return lo - pad, hi + pad
    return lo, hi


class _Canvas:
    def __init__(self, title: str, x_range: Tuple[float, float], y_range: Tuple[float, float]) -> None:
        self.x_range = x_range
        self.y_range = y_range
        self.items: List[str] = [
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2}" y="24" text-anchor="middle" font-size="15">{escape(title)}</text>',
        ]

    def x(self, value: float) -> float:
        lo, hi = self.x_range
        return MARGIN + (value - lo) / (hi - lo) * (WIDTH - 2 * MARGIN)

    def y(self, value: float) -> float:
        lo, hi = self.y_range
        return HEIGHT - MARGIN - (value - lo) / (hi - lo) * (HEIGHT - 2 * MARGIN)

    def axes(self, xlabel: str, ylabel: str) -> None:
        x0, y0 = MARGIN, HEIGHT - MARGIN
        self.items.append(f'<line x1="{x0}" y1="{y0}" x2="{WIDTH - MARGIN}" y2="{y0}" stroke="black"/>')
        self.items.append(f'<line x1="{x0}" y1="{MARGIN}" x2="{x0}" y2="{y0}" stroke="black"/>')
        for value in np.linspace(*self.x_range, 5):
            self.items.append(
                f'<text x="{self.x(value):.1f}" y="{y0 + 16}" text-anchor="middle" font-size="10">{value:.3g}</text>'
            )
        for value in np.linspace(*self.y_range, 5):
            self.items.append(
                f'<text x="{x0 - 6}" y="{self.y(value) + 3:.1f}" text-anchor="end" font-size="10">{value:.3g}</text>'
            )
        self.items.append(
            f'<text x="{WIDTH / 2}" y="{HEIGHT - 16}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>'
        )
        self.items.append(
            f'<text x="16" y="{HEIGHT / 2}" text-anchor="middle" font-size="12" '
            f'transform="rotate(-90 16 {HEIGHT / 2})">{escape(ylabel)}</text>'
        )

    def legend(self, names: Sequence[str]) -> None:
        for i, name in enumerate(names):
            y = MARGIN + 14 * i
            color = PALETTE[i % len(PALETTE)]
            self.items.append(f'<rect x="{WIDTH - MARGIN - 130}" y="{y - 8}" width="10" height="10" fill="{color}"/>')
            self.items.append(f'<text x="{WIDTH - MARGIN - 115}" y="{y + 1}" font-size="10">{escape(name)}</text>')

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        body = "\n".join(self.items)
        path.write_text(
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">\n{body}\n</svg>\n'
        )
        return path


def line_plot(
    series: Dict[str, Sequence[Point]],
    path: Union[str, Path],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
) -> Path:
    """One polyline per named series; non-finite points are skipped."""
    xs = [x for points in series.values() for x, _ in points]
    ys = [y for points in series.values() for _, y in points]
    canvas = _Canvas(title, _bounds(xs), _bounds(ys))
    canvas.axes(xlabel, ylabel)
    for i, (name, points) in enumerate(series.items()):
        coords = " ".join(
            f"{canvas.x(x):.2f},{canvas.y(y):.2f}" for x, y in points if np.isfinite(x) and np.isfinite(y)
        )
        canvas.items.append(
            f'<polyline points="{coords}" fill="none" stroke="{PALETTE[i % len(PALETTE)]}" stroke-width="1.5"/>'
        )
    canvas.legend(list(series))
    return canvas.write(path)


def scatter_plot(
    points: Sequence[Point],
    path: Union[str, Path],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    fit: Optional[Tuple[float, float]] = None,
) -> Path:
    """Scatter with an optional least-squares line given as (slope, intercept)."""
    canvas = _Canvas(title, _bounds([p[0] for p in points]), _bounds([p[1] for p in points]))
    canvas.axes(xlabel, ylabel)
    for x, y in points:
        if np.isfinite(x) and np.isfinite(y):
            canvas.items.append(f'<circle cx="{canvas.x(x):.2f}" cy="{canvas.y(y):.2f}" r="3" fill="{PALETTE[0]}"/>')
    if fit is not None:
        slope, intercept = fit
        lo, hi = canvas.x_range
        canvas.items.append(
            f'<line x1="{canvas.x(lo):.2f}" y1="{canvas.y(slope * lo + intercept):.2f}" '
            f'x2="{canvas.x(hi):.2f}" y2="{canvas.y(slope * hi + intercept):.2f}" stroke="{PALETTE[1]}"/>'
        )
    return canvas.write(path)


def _cell_color(value: float, lo: float, hi: float) -> str:
    if not np.isfinite(value):
        return "#cccccc"
    t = 0.5 if hi == lo else (value - lo) / (hi - lo)
    # blue (low) to red (high) through white
    if t < 0.5:
        s = t * 2
        r, g, b = int(255 * s), int(255 * s), 255
    else:
        s = (1 - t) * 2
        r, g, b = 255, int(255 * s), int(255 * s)
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap(
    matrix: np.ndarray,
    labels: Sequence[str],
    path: Union[str, Path],
    title: str = "",
    value_range: Optional[Tuple[float, float]] = None,
) -> Path:
    """Square matrix as colored cells with row and column labels."""
    matrix = np.asarray(matrix, dtype=np.float64)
    n = len(labels)
    lo, hi = value_range or _bounds(matrix.ravel().tolist())
    canvas = _Canvas(title, (0.0, 1.0), (0.0, 1.0))
    size = (min(WIDTH, HEIGHT) - 2 * MARGIN) / max(n, 1)
    left = MARGIN + 40
    for i in range(n):
        y = MARGIN + i * size
        canvas.items.append(
            f'<text x="{left - 4}" y="{y + size * 0.7:.1f}" text-anchor="end" font-size="8">{escape(labels[i])}</text>'
        )
        for k in range(n):
            canvas.items.append(
                f'<rect x="{left + k * size:.2f}" y="{y:.2f}" width="{size:.2f}" height="{size:.2f}" '
                f'fill="{_cell_color(matrix[i, k], lo, hi)}"><title>{escape(labels[i])} / {escape(labels[k])}: '
                f"{matrix[i, k]:.4g}</title></rect>"
            )
    canvas.items.append(
        f'<text x="{left + n * size + 8:.1f}" y="{MARGIN + 10}" font-size="10">max {hi:.3g}</text>'
    )
    canvas.items.append(
        f'<text x="{left + n * size + 8:.1f}" y="{MARGIN + n * size:.1f}" font-size="10">min {lo:.3g}</text>'
    )
    return canvas.write(path)
