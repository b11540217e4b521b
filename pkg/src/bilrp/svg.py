"""Standalone SVG heatmaps with a symmetric red/blue diverging scale."""

from __future__ import annotations

import os
from typing import Sequence
from xml.sax.saxutils import escape, quoteattr

import numpy as np

from .corpus import PosAggregate
from .interactions import InteractionMatrix

CELL = 28
LABEL_PAD = 90
FONT = 11


def diverging_color(value: float, vmax: float) -> str:
    """Hex color: white at 0, pure red at +vmax, pure blue at -vmax."""
    if vmax <= 0:
        return "#ffffff"
    t = max(-1.0, min(1.0, value / vmax))
    fade = round(255 * (1 - abs(t)))
    if t >= 0:
        return f"#ff{fade:02x}{fade:02x}"
    return f"#{fade:02x}{fade:02x}ff"


def _fmt(v: float) -> str:
    return repr(float(v))


def _labels(parts, rows: Sequence[str], cols: Sequence[str]):
    for i, label in enumerate(rows):
        y = LABEL_PAD + i * CELL + CELL / 2
        parts.append(
            f'<text x="{LABEL_PAD - 4}" y="{y}" text-anchor="end" dominant-baseline="middle" '
            f'font-size="{FONT}">{escape(label)}</text>'
        )
    for j, label in enumerate(cols):
        x = LABEL_PAD + j * CELL + CELL / 2
        parts.append(
            f'<text x="{x}" y="{LABEL_PAD - 4}" font-size="{FONT}" '
            f'transform="rotate(-60 {x} {LABEL_PAD - 4})">{escape(label)}</text>'
        )


def _document(parts, n_rows: int, n_cols: int, vmax: float) -> str:
    width = LABEL_PAD + n_cols * CELL + 10
    height = LABEL_PAD + n_rows * CELL + 10
    head = (
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" data-vmax={quoteattr(_fmt(vmax))}>'
    )
    return "\n".join([head, *parts, "</svg>"]) + "\n"


def matrix_svg(values: np.ndarray, rows: Sequence[str], cols: Sequence[str]) -> str:
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("heatmap values must be finite")
    vmax = float(np.max(np.abs(values))) if values.size else 0.0
    parts = []
    for i in range(values.shape[0]):
        for j in range(values.shape[1]):
            v = values[i, j]
            parts.append(
                f'<rect x="{LABEL_PAD + j * CELL}" y="{LABEL_PAD + i * CELL}" width="{CELL}" '
                f'height="{CELL}" fill="{diverging_color(v, vmax)}">'
                f"<title>{escape(f'{rows[i]} / {cols[j]}: {_fmt(v)}')}</title></rect>"
            )
    _labels(parts, rows, cols)
    return _document(parts, values.shape[0], values.shape[1], vmax)


def pos_svg(agg: PosAggregate) -> str:
    """Each tag-pair cell is split: positive relevance in the upper-left
    triangle, negative in the lower-right."""
    rows, cols = agg.tags_a, agg.tags_b
    pos = np.array([[agg.value((a, b), "pos") for b in cols] for a in rows]).reshape(len(rows), len(cols))
    neg = np.array([[agg.value((a, b), "neg") for b in cols] for a in rows]).reshape(len(rows), len(cols))
    vmax = max(float(np.max(np.abs(pos), initial=0.0)), float(np.max(np.abs(neg), initial=0.0)))
    parts = []
    for i, a in enumerate(rows):
        for j, b in enumerate(cols):
            x0, y0 = LABEL_PAD + j * CELL, LABEL_PAD + i * CELL
            x1, y1 = x0 + CELL, y0 + CELL
            for kind, value, points in (
                ("pos", pos[i, j], f"{x0},{y0} {x1},{y0} {x0},{y1}"),
                ("neg", neg[i, j], f"{x1},{y0} {x1},{y1} {x0},{y1}"),
            ):
                parts.append(
                    f'<polygon points="{points}" fill="{diverging_color(value, vmax)}">'
                    f"<title>{escape(f'{a} / {b} {kind}: {_fmt(value)}')}</title></polygon>"
                )
    _labels(parts, rows, cols)
    return _document(parts, len(rows), len(cols), vmax)


def render_heatmap_svg(obj, path: str | os.PathLike) -> None:
    if isinstance(obj, PosAggregate):
        text = pos_svg(obj)
    elif isinstance(obj, InteractionMatrix):
        text = matrix_svg(obj.values, obj.tokens_a, obj.tokens_b)
    else:
        raise TypeError(f"cannot render {type(obj).__name__}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
