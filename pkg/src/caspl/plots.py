"""Minimal SVG output for ablation reports (line charts and heatmaps)."""
from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

W, H, PAD = 420, 300, 50


def _svg(body, width=W, height=H):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'font-family="sans-serif" font-size="11">\n{body}</svg>\n')


def _text(x, y, s, anchor="middle"):
    return f'<text x="{x:.1f}" y="{y:.1f}" text-anchor="{anchor}">{escape(str(s))}</text>\n'


def line_chart(path, labels, values, title="", ylabel="HM"):
    """One series of ``values`` at categorical x positions ``labels``."""
    lo, hi = min(values), max(values)
    span = (hi - lo) or 1.0
    n = len(values)
    xs = [PAD + i * (W - 2 * PAD) / max(1, n - 1) for i in range(n)]
    ys = [H - PAD - (v - lo) / span * (H - 2 * PAD) for v in values]
    body = _text(W / 2, 20, title)
    body += f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>\n'
    body += f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>\n'
    pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(xs, ys))
    body += f'<polyline points="{pts}" fill="none" stroke="#1f77b4" stroke-width="2"/>\n'
    for x, y, lab, v in zip(xs, ys, labels, values):
        body += f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3" fill="#1f77b4"/>\n'
        body += _text(x, H - PAD + 15, lab)
        body += _text(x, y - 8, f"{v:.1f}")
    body += _text(15, H / 2, ylabel)
    Path(path).write_text(_svg(body))
    return Path(path)


def heatmap(path, rows, cols, grid, title="", xlabel="", ylabel=""):
    """``grid[i][j]`` drawn at row ``rows[i]``, column ``cols[j]``; darker is higher."""
    flat = [v for r in grid for v in r]
    lo, hi = min(flat), max(flat)
    span = (hi - lo) or 1.0
    cw = (W - 2 * PAD) / len(cols)
    ch = (H - 2 * PAD) / len(rows)
    body = _text(W / 2, 20, title)
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            v = grid[i][j]
            shade = int(235 - 170 * (v - lo) / span)
            x, y = PAD + j * cw, PAD + i * ch
            body += (f'<rect x="{x:.1f}" y="{y:.1f}" width="{cw:.1f}" height="{ch:.1f}" '
                     f'fill="rgb({shade},{shade},255)" stroke="white"/>\n')
            body += _text(x + cw / 2, y + ch / 2 + 4, f"{v:.1f}")
        body += _text(PAD - 8, PAD + (i + 0.5) * ch + 4, r, anchor="end")
    for j, c in enumerate(cols):
        body += _text(PAD + (j + 0.5) * cw, H - PAD + 15, c)
    body += _text(W / 2, H - 10, xlabel)
    body += _text(12, PAD - 10, ylabel, anchor="start")
    Path(path).write_text(_svg(body))
    return Path(path)
