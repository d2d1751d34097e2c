"""Static SVG rendering of risk traces.

This is a CLI concern only: the math modules never import it.  Two CSV
shapes are accepted: the trace schema written by the ``trace`` subcommand
(one series per clip, probability vs. time) and a wide layout whose first
column is the time axis and every remaining column is one model variant.
"""

from __future__ import annotations

import csv
from typing import Dict, List, Tuple

from .errors import ValidationError

TRACE_HEADER = ["clip_id", "snippet_index", "t_start_s", "logit", "prob",
                "attention"]

_WIDTH, _HEIGHT = 640, 400
_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 60, 24, 28, 44
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

Series = Dict[str, Tuple[List[float], List[float]]]


def parse_trace_csv(path) -> Series:
    """Read either CSV shape into {series label: (times, values)}."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty trace CSV") from None
        rows = [(i, row) for i, row in enumerate(reader, start=2) if row]
    if not rows:
        raise ValidationError(f"{path}: trace CSV has a header but no data rows")

    series: Series = {}
    if header == TRACE_HEADER:
        for lineno, row in rows:
            if len(row) != len(TRACE_HEADER):
                raise ValidationError(f"{path}: malformed row at line {lineno}")
            try:
                t, prob = float(row[2]), float(row[4])
            except ValueError:
                raise ValidationError(
                    f"{path}: non-numeric value at line {lineno}") from None
            xs, ys = series.setdefault(row[0], ([], []))
            xs.append(t)
            ys.append(prob)
        return series

    if len(header) < 2:
        raise ValidationError(f"{path}: need a time column plus one series")
    for name in header[1:]:
        series[name] = ([], [])
    for lineno, row in rows:
        if len(row) != len(header):
            raise ValidationError(f"{path}: malformed row at line {lineno}")
        try:
            t = float(row[0])
            values = [float(v) for v in row[1:]]
        except ValueError:
            raise ValidationError(
                f"{path}: non-numeric value at line {lineno}") from None
        for name, v in zip(header[1:], values):
            series[name][0].append(t)
            series[name][1].append(v)
    return series


def _scale(lo: float, hi: float) -> Tuple[float, float]:
    if hi == lo:
        return lo - 1.0, hi + 1.0
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def render_series_svg(series: Series) -> str:
    """Self-contained SVG: one polyline plus circle markers per series."""
    if not series:
        raise ValidationError("no series to plot")
    all_x = [x for xs, _ in series.values() for x in xs]
    all_y = [y for _, ys in series.values() for y in ys]
    x0, x1 = _scale(min(all_x), max(all_x))
    y0, y1 = _scale(min(all_y), max(all_y))
    plot_w = _WIDTH - _MARGIN_L - _MARGIN_R
    plot_h = _HEIGHT - _MARGIN_T - _MARGIN_B

    def px(x: float) -> float:
        return _MARGIN_L + (x - x0) / (x1 - x0) * plot_w

    def py(y: float) -> float:
        return _MARGIN_T + (y1 - y) / (y1 - y0) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" '
        f'height="{_HEIGHT}" viewBox="0 0 {_WIDTH} {_HEIGHT}">',
        f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>',
        f'<line x1="{_MARGIN_L}" y1="{_HEIGHT - _MARGIN_B}" '
        f'x2="{_WIDTH - _MARGIN_R}" y2="{_HEIGHT - _MARGIN_B}" stroke="black"/>',
        f'<line x1="{_MARGIN_L}" y1="{_MARGIN_T}" x2="{_MARGIN_L}" '
        f'y2="{_HEIGHT - _MARGIN_B}" stroke="black"/>',
        f'<text x="{_MARGIN_L}" y="{_HEIGHT - 12}" font-size="12">{x0:.3g}</text>',
        f'<text x="{_WIDTH - _MARGIN_R - 30}" y="{_HEIGHT - 12}" '
        f'font-size="12">{x1:.3g}</text>',
        f'<text x="6" y="{_HEIGHT - _MARGIN_B}" font-size="12">{y0:.3g}</text>',
        f'<text x="6" y="{_MARGIN_T + 10}" font-size="12">{y1:.3g}</text>',
        f'<text x="{_WIDTH // 2 - 20}" y="{_HEIGHT - 8}" font-size="12">time (s)</text>',
    ]
    for si, (name, (xs, ys)) in enumerate(series.items()):
        color = _COLORS[si % len(_COLORS)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline fill="none" stroke="{color}" '
                     f'stroke-width="1.5" points="{pts}"/>')
        for x, y in zip(xs, ys):
            parts.append(f'<circle class="marker" cx="{px(x):.2f}" '
                         f'cy="{py(y):.2f}" r="3" fill="{color}"/>')
        parts.append(f'<text class="legend" x="{_WIDTH - _MARGIN_R - 150}" '
                     f'y="{_MARGIN_T + 16 * (si + 1)}" font-size="12" '
                     f'fill="{color}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def emit_trace_plot(csv_path, out_path) -> int:
    """Validate and plot a trace CSV; returns the number of series.

    Parsing errors happen before the output file is touched, so a bad input
    never leaves a partial image behind.  The input CSV is read only.
    """
    series = parse_trace_csv(csv_path)
    svg = render_series_svg(series)
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(svg)
    return len(series)
