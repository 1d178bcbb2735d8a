"""Standalone SVG line charts for metrics CSV files (only path and text elements)."""
from __future__ import annotations

import csv
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def read_metrics(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty metrics file")
    header, body = rows[0], rows[1:]
    if not header or header[0] != "iter":
        raise ValueError(f"{path}: first column must be 'iter'")
    try:
        data = np.array([[float(x) for x in r] for r in body if r], dtype=float).reshape(-1, len(header))
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric metrics row ({exc})") from None
    return header, data


def _polyline(xs, ys, x0, x1, y0, y1, box):
    left, top, w, h = box
    sx = (xs - x0) / (x1 - x0 if x1 > x0 else 1.0)
    sy = (ys - y0) / (y1 - y0 if y1 > y0 else 1.0)
    px = left + sx * w
    py = top + h - sy * h
    return "M" + " L".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))


def render_svg(header, data, title="training curves", width=640, height=400) -> str:
    """Loss columns share the left panel; columns named ``acc*``/``rank*`` get their own."""
    xs = data[:, 0] if len(data) else np.zeros(0)
    series = header[1:]
    acc = [i for i, n in enumerate(series, 1) if n.lower().startswith(("acc", "rank"))]
    loss = [i for i in range(1, len(header)) if i not in acc]
    panels = [p for p in (("loss", loss), ("accuracy", acc)) if p[1]]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<text x="{width / 2:.0f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>']
    ph = (height - 40) / max(1, len(panels))
    for pi, (label, cols) in enumerate(panels):
        box = (60.0, 30 + pi * ph + 10, width - 180.0, ph - 40)
        left, top, w, h = box
        out.append(f'<path d="M{left},{top} L{left},{top + h} L{left + w},{top + h}" '
                   f'stroke="#000" fill="none"/>')
        out.append(f'<text x="{left - 8}" y="{top - 4}" font-size="11">{escape(label)}</text>')
        if len(xs) == 0:
            continue
        vals = data[:, cols]
        finite = vals[np.isfinite(vals)]
        y0, y1 = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
        x0, x1 = float(xs.min()), float(xs.max())
        out.append(f'<text x="{left - 4}" y="{top + 4}" text-anchor="end" font-size="10">{y1:.3g}</text>')
        out.append(f'<text x="{left - 4}" y="{top + h}" text-anchor="end" font-size="10">{y0:.3g}</text>')
        out.append(f'<text x="{left}" y="{top + h + 14}" font-size="10">{x0:g}</text>')
        out.append(f'<text x="{left + w}" y="{top + h + 14}" text-anchor="end" font-size="10">{x1:g}</text>')
        for j, c in enumerate(cols):
            color = _COLORS[j % len(_COLORS)]
            ok = np.isfinite(data[:, c])
            if ok.any():
                d = _polyline(xs[ok], data[ok, c], x0, x1, y0, y1, box)
                out.append(f'<path d="{d}" stroke="{color}" stroke-width="1.5" fill="none"/>')
            ly = top + 14 * (j + 1)
            out.append(f'<path d="M{left + w + 10},{ly - 4} L{left + w + 30},{ly - 4}" stroke="{color}"/>')
            out.append(f'<text x="{left + w + 34}" y="{ly}" font-size="11">{escape(header[c])}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_metrics(metrics_path, out_path, title=None):
    header, data = read_metrics(metrics_path)
    svg = render_svg(header, data, title or Path(metrics_path).name)
    Path(out_path).write_text(svg, encoding="utf-8")
    return out_path
