"""CSV number formatting and deterministic SVG charts."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f", "#17becf")


def fmt(x) -> str:
    """Round-trippable real formatting (17 significant digits)."""
    if isinstance(x, (bool, int)) and not isinstance(x, float):
        return str(int(x))
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def write_csv(path, header, rows) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, int)) else v for v in row])


def _c(v: float) -> str:
    return f"{v:.2f}"


def roc_svg(curves, guide_tpr: float = 0.9, width: int = 480, height: int = 480, title: str = "ROC") -> str:
    """Line chart of ROC curves.

    ``curves`` is a list of ``(name, fpr, tpr, marker)`` where ``marker`` is
    an ``(fpr, tpr)`` point drawn as a filled circle (or ``None``).  A thin
    gray horizontal guide marks ``tpr = guide_tpr``.
    """
    left, top, plot = 60, 40, min(width, height) - 100

    def px(f, t):
        return left + f * plot, top + (1.0 - t) * plot

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<text x="{width / 2:.0f}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{escape(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{plot}" height="{plot}" fill="none" stroke="black" stroke-width="1"/>',
    ]
    for i in range(6):
        v = i / 5
        x, _ = px(v, 0)
        _, y = px(0, v)
        out.append(f'<text x="{_c(x)}" y="{top + plot + 16}" text-anchor="middle" font-family="sans-serif" font-size="10">{v:.1f}</text>')
        out.append(f'<text x="{left - 6}" y="{_c(y + 3)}" text-anchor="end" font-family="sans-serif" font-size="10">{v:.1f}</text>')
    out.append(f'<text x="{left + plot / 2:.0f}" y="{top + plot + 34}" text-anchor="middle" font-family="sans-serif" font-size="12">false positive rate</text>')
    out.append(f'<text x="16" y="{top + plot / 2:.0f}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {top + plot / 2:.0f})">true positive rate</text>')
    gx0, gy = px(0, guide_tpr)
    gx1, _ = px(1, guide_tpr)
    out.append(
        f'<line class="fnr-guide" x1="{_c(gx0)}" y1="{_c(gy)}" x2="{_c(gx1)}" y2="{_c(gy)}" stroke="#999999" stroke-width="0.75" data-tpr="{guide_tpr}"/>'
    )
    for i, (name, fpr, tpr, marker) in enumerate(curves):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_c(a)},{_c(b)}" for a, b in (px(f, t) for f, t in zip(fpr, tpr)))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        if marker is not None:
            mx, my = px(*marker)
            out.append(f'<circle class="best-ba" cx="{_c(mx)}" cy="{_c(my)}" r="4" fill="{color}"/>')
        ly = top + 14 + 14 * i
        out.append(f'<line x1="{left + plot - 150}" y1="{ly - 4}" x2="{left + plot - 134}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + plot - 130}" y="{ly}" font-family="sans-serif" font-size="10">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bar_svg(labels, values, vmax: float = 100.0, title: str = "", width: int = 420, bar_h: int = 22) -> str:
    """Horizontal bars, one per label; used for per-feature percentiles."""
    left, top, span = 130, 36, width - 180
    height = top + bar_h * len(labels) + 30
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" font-family="sans-serif" font-size="13">{escape(title)}</text>',
    ]
    for i, (name, v) in enumerate(zip(labels, values)):
        y = top + i * bar_h
        w = span * max(0.0, min(v, vmax)) / vmax
        out.append(f'<text x="{left - 6}" y="{y + bar_h * 0.65:.1f}" text-anchor="end" font-family="sans-serif" font-size="11">{escape(name)}</text>')
        out.append(f'<rect x="{left}" y="{y + 3}" width="{_c(w)}" height="{bar_h - 6}" fill="{PALETTE[i % len(PALETTE)]}"/>')
        out.append(f'<text x="{_c(left + w + 4)}" y="{y + bar_h * 0.65:.1f}" font-family="sans-serif" font-size="11">{v:.0f}</text>')
    axis_y = top + bar_h * len(labels) + 4
    out.append(f'<line x1="{left}" y1="{axis_y}" x2="{left + span}" y2="{axis_y}" stroke="black" stroke-width="1"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
