"""Deterministic hand-written SVG renderings of transfer grids and embeddings."""

from __future__ import annotations

import colorsys
from html import escape
from typing import Sequence

import numpy as np

from .evaluate import EmbeddingPoint, TransferGrid

CELL = 28
MARGIN = 90


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def transfer_grid_svg(grid: TransferGrid, title: str = "") -> str:
    """Grayscale heat map: black = 1, white = 0."""
    k = len(grid.class_names)
    size = MARGIN + k * CELL + 10
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 20}" '
           f'font-family="sans-serif" font-size="10">']
    if title:
        out.append(f'<text x="{MARGIN}" y="14">{escape(title)}</text>')
    for r, name in enumerate(grid.class_names):
        y = 20 + MARGIN + r * CELL
        out.append(f'<text x="{MARGIN - 4}" y="{y + CELL * 0.65:.1f}" text-anchor="end">{escape(name)}</text>')
        for c in range(k):
            level = int(round(255 * (1.0 - float(grid.matrix[r, c]))))
            out.append(f'<rect x="{MARGIN + c * CELL}" y="{y}" width="{CELL}" height="{CELL}" '
                       f'fill="rgb({level},{level},{level})" stroke="#999" stroke-width="0.5">'
                       f'<title>{escape(name)} -&gt; {escape(grid.class_names[c])}: {grid.matrix[r, c]:.3f}</title>'
                       f'</rect>')
    for c, name in enumerate(grid.class_names):
        x = MARGIN + c * CELL + CELL / 2
        out.append(f'<text x="{x:.1f}" y="{20 + MARGIN - 4}" text-anchor="start" '
                   f'transform="rotate(-60 {x:.1f} {20 + MARGIN - 4})">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _palette(names: Sequence[str]) -> dict[str, str]:
    out = {}
    for i, name in enumerate(names):
        r, g, b = colorsys.hsv_to_rgb(i / max(1, len(names)), 0.75, 0.85)
        out[name] = f"#{int(r * 255):02x}{int(g * 255):02x}{int(b * 255):02x}"
    return out


def embedding_svg(points: Sequence[EmbeddingPoint], size: int = 600, title: str = "") -> str:
    """Circles coloured by command; hollow = before maximization, filled = after; misclassified ringed black."""
    xy = np.array([[p.x, p.y] for p in points]) if points else np.zeros((0, 2))
    lo = xy.min(axis=0) if len(xy) else np.zeros(2)
    span = np.maximum(xy.max(axis=0) - lo, 1e-12) if len(xy) else np.ones(2)
    colours = _palette(sorted({p.command for p in points}))
    pad = 20
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'font-family="sans-serif" font-size="10">']
    if title:
        out.append(f'<text x="{pad}" y="14">{escape(title)}</text>')
    for p, (x, y) in zip(points, xy):
        cx = pad + (x - lo[0]) / span[0] * (size - 2 * pad)
        cy = size - pad - (y - lo[1]) / span[1] * (size - 2 * pad)
        col = colours[p.command]
        fill = col if p.phase == "after" else "none"
        stroke = "#000" if p.misclassified else col
        out.append(f'<circle cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="3.5" fill="{fill}" stroke="{stroke}">'
                   f'<title>{escape(p.command)} {escape(p.speaker)} {p.phase}</title></circle>')
    for i, (name, col) in enumerate(colours.items()):
        out.append(f'<circle cx="{size - 80}" cy="{pad + 12 * i}" r="4" fill="{col}"/>'
                   f'<text x="{size - 72}" y="{pad + 12 * i + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
