"""Small deterministic SVG writers (no plotting dependency).

All coordinates are printed with fixed precision, so identical inputs give
byte-identical files.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

WIDTH, HEIGHT = 520, 440
LEFT, RIGHT, TOP, BOTTOM = 64, 20, 36, 52


def _f(v: float) -> str:
    return f"{v:.2f}"


class _Axes:
    def __init__(self, xmax: float, ymax: float, xmin: float = 0.0, ymin: float = 0.0):
        self.x0, self.x1 = xmin, xmax if xmax > xmin else xmin + 1.0
        self.y0, self.y1 = ymin, ymax if ymax > ymin else ymin + 1.0

    def px(self, x):
        return LEFT + (np.asarray(x, dtype=float) - self.x0) / (self.x1 - self.x0) * (WIDTH - LEFT - RIGHT)

    def py(self, y):
        return HEIGHT - BOTTOM - (np.asarray(y, dtype=float) - self.y0) / (self.y1 - self.y0) * (HEIGHT - TOP - BOTTOM)


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    span = hi - lo
    raw = span / n
    mag = 10 ** np.floor(np.log10(raw)) if raw > 0 else 1.0
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=mag)
    start = np.ceil(lo / step) * step
    return np.arange(start, hi + 1e-9 * step, step)


def _frame(ax: _Axes, title: str, xlabel: str, ylabel: str) -> list[str]:
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2:.2f}" y="20" text-anchor="middle" font-size="13">{_esc(title)}</text>']
    x_left, x_right = _f(float(ax.px(ax.x0))), _f(float(ax.px(ax.x1)))
    y_bot, y_top = _f(float(ax.py(ax.y0))), _f(float(ax.py(ax.y1)))
    out.append(f'<path id="axes" d="M{x_left},{y_top} L{x_left},{y_bot} L{x_right},{y_bot}" '
               'fill="none" stroke="black"/>')
    for t in _ticks(ax.x0, ax.x1):
        x = _f(float(ax.px(t)))
        out.append(f'<line x1="{x}" y1="{y_bot}" x2="{x}" y2="{_f(float(ax.py(ax.y0)) + 4)}" stroke="black"/>')
        out.append(f'<text x="{x}" y="{_f(float(ax.py(ax.y0)) + 16)}" text-anchor="middle">{t:g}</text>')
    for t in _ticks(ax.y0, ax.y1):
        y = _f(float(ax.py(t)))
        out.append(f'<line x1="{_f(float(ax.px(ax.x0)) - 4)}" y1="{y}" x2="{x_left}" y2="{y}" stroke="black"/>')
        out.append(f'<text x="{_f(float(ax.px(ax.x0)) - 7)}" y="{y}" text-anchor="end" '
                   f'dominant-baseline="middle">{t:g}</text>')
    out.append(f'<text x="{(LEFT + WIDTH - RIGHT) / 2:.2f}" y="{HEIGHT - 14}" text-anchor="middle">{_esc(xlabel)}</text>')
    out.append(f'<text x="16" y="{(TOP + HEIGHT - BOTTOM) / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {(TOP + HEIGHT - BOTTOM) / 2:.2f})">{_esc(ylabel)}</text>')
    return out


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def scatter_svg(x, y, *, title: str, xlabel: str, ylabel: str, identity: bool = False,
                regression=None) -> str:
    """Scatter plot with optional identity line and regression line + band.

    With ``identity`` both axes span ``[0, max(x, y)]`` and the identity line
    runs from ``(0, 0)`` to ``(max, max)``.  ``regression`` is a report with
    ``grid``, ``lower``, ``upper`` and ``predict``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size == 0 or x.size != y.size:
        raise ValueError("scatter needs a non-empty set of (x, y) pairs")
    if identity:
        top = float(max(x.max(), y.max(), 0.0))
        ax = _Axes(top, top)
    else:
        ymax = float(y.max())
        if regression is not None:
            ymax = max(ymax, float(np.max(regression.upper)))
        ax = _Axes(float(max(x.max(), 0.0)), max(ymax, 0.0))
    out = _frame(ax, title, xlabel, ylabel)
    if regression is not None:
        g = np.asarray(regression.grid, dtype=float)
        up = np.clip(regression.upper, ax.y0, ax.y1)
        lo = np.clip(regression.lower, ax.y0, ax.y1)
        pts = [f"{_f(a)},{_f(b)}" for a, b in zip(ax.px(g), ax.py(up))]
        pts += [f"{_f(a)},{_f(b)}" for a, b in zip(ax.px(g[::-1]), ax.py(lo[::-1]))]
        out.append(f'<polygon id="band" points="{" ".join(pts)}" fill="#bbbbbb" fill-opacity="0.5" stroke="none"/>')
    for a, b in zip(ax.px(x), ax.py(y)):
        out.append(f'<circle cx="{_f(a)}" cy="{_f(b)}" r="1.6" fill="#1f4e9c" fill-opacity="0.6"/>')
    if identity:
        out.append(f'<path id="identity" d="M{_f(float(ax.px(0.0)))},{_f(float(ax.py(0.0)))} '
                   f'L{_f(float(ax.px(ax.x1)))},{_f(float(ax.py(ax.y1)))}" '
                   'stroke="black" stroke-dasharray="5,4" fill="none"/>')
    if regression is not None:
        g0, g1 = float(regression.grid[0]), float(regression.grid[-1])
        y0, y1 = float(regression.predict(g0)), float(regression.predict(g1))
        out.append(f'<path id="regression" d="M{_f(float(ax.px(g0)))},{_f(float(ax.py(y0)))} '
                   f'L{_f(float(ax.px(g1)))},{_f(float(ax.py(y1)))}" stroke="#333333" '
                   'stroke-width="2" fill="none"/>')
        out.append(f'<text x="{WIDTH - RIGHT - 4}" y="{TOP + 12}" text-anchor="end">'
                   f'slope {regression.slope:.3f}, n = {regression.n}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _color(v: float, signed: bool) -> str:
    if signed:
        v = float(np.clip(v, -1.0, 1.0))
        if v >= 0:
            r, g, b = 255, int(255 * (1 - v)), int(255 * (1 - v))
        else:
            r, g, b = int(255 * (1 + v)), int(255 * (1 + v)), 255
    else:
        v = float(np.clip(v, 0.0, 1.0))
        r, g, b = int(255 * v), int(64 + 96 * (1 - v)), int(255 * (1 - v))
    return f"#{r:02x}{g:02x}{b:02x}"


def surface_map_svg(positions, values, *, title: str, signed: bool = False) -> str:
    """Top view (x-y projection) of a scalar map over source positions.

    Points are drawn from bottom to top (by z, then index) so the upper
    hemisphere stays visible.  Values are scaled by their maximum modulus.
    """
    positions = np.asarray(positions, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("empty map")
    scale = float(np.max(np.abs(values)))
    norm = values / scale if scale > 0 else values
    half = float(np.max(np.abs(positions[:, :2]))) * 1.05 or 1.0
    ax = _Axes(half, half, -half, -half)
    out = _frame(ax, title, "x (mm)", "y (mm)")
    order = np.lexsort((np.arange(values.size), positions[:, 2]))
    for k in order:
        out.append(f'<circle cx="{_f(float(ax.px(positions[k, 0])))}" cy="{_f(float(ax.py(positions[k, 1])))}" '
                   f'r="3.0" fill="{_color(norm[k], signed)}"/>')
    out.append(f'<text x="{WIDTH - RIGHT - 4}" y="{TOP + 12}" text-anchor="end">max |value| {scale:.3e}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, text: str) -> Path:
    path = Path(path)
    path.write_text(text, encoding="utf-8", newline="\n")
    return path
