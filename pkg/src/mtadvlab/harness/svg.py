"""Minimal SVG line charts and the output emitter."""
from __future__ import annotations

import os
from xml.sax.saxutils import escape

from .sweep import SweepTable

__all__ = ["line_chart", "emit_outputs", "AXIS_COLUMNS"]

AXIS_COLUMNS = {"epsilon": "ε", "steps": "steps", "epochs": "epochs",
                "encoder_id": "encoder", "p": "p"}
_NUMERIC = ("epsilon", "steps", "epochs")
_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2",
            "#7f7f7f", "#bcbd22", "#17becf")

W, H = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 170, 30, 50


def _num(v):
    return f"{v:.2f}"


def _tick(v):
    return f"{v:.4g}" if isinstance(v, float) else str(v)


def line_chart(series, x_label, y_label, title="", categories=None):
    """SVG text with one polyline per entry of ``series``.

    ``series`` maps a label to ``[(x, y), ...]``.  With ``categories`` the x
    values are placed evenly in that order; otherwise they are numeric.
    """
    pts = [p for s in series.values() for p in s]
    if categories is not None:
        pos = {c: i for i, c in enumerate(categories)}
        xs = [float(pos[x]) for x, _ in pts]
        xmin, xmax = 0.0, float(max(len(categories) - 1, 1))
    else:
        xs = [float(x) for x, _ in pts]
        xmin, xmax = (min(xs), max(xs)) if xs else (0.0, 1.0)
    ys = [float(y) for _, y in pts]
    ymin, ymax = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if xmax == xmin:
        xmin, xmax = xmin - 0.5, xmax + 0.5
    if ymax == ymin:
        ymin, ymax = ymin - 0.5, ymax + 0.5
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM

    def sx(x):
        x = float(pos[x]) if categories is not None else float(x)
        return LEFT + (x - xmin) / (xmax - xmin) * pw

    def sy(y):
        return TOP + ph - (float(y) - ymin) / (ymax - ymin) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
           f'viewBox="0 0 {W} {H}">',
           f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
           f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" '
           'stroke="black"/>']
    if title:
        out.append(f'<text x="{W / 2}" y="18" text-anchor="middle" font-size="13">'
                   f'{escape(title)}</text>')
    ticks = categories if categories is not None else sorted(set(x for x, _ in pts))
    for t in ticks:
        out.append(f'<text x="{_num(sx(t))}" y="{TOP + ph + 16}" text-anchor="middle" '
                   f'font-size="10">{escape(_tick(t))}</text>')
    for frac in (0.0, 0.5, 1.0):
        v = ymin + frac * (ymax - ymin)
        out.append(f'<text x="{LEFT - 6}" y="{_num(sy(v) + 3)}" text-anchor="end" '
                   f'font-size="10">{escape(_tick(float(v)))}</text>')
    out.append(f'<text class="x-label" x="{LEFT + pw / 2}" y="{H - 10}" '
               f'text-anchor="middle" font-size="12">{escape(x_label)}</text>')
    out.append(f'<text class="y-label" x="16" y="{TOP + ph / 2}" text-anchor="middle" '
               f'font-size="12" transform="rotate(-90 16 {TOP + ph / 2})">'
               f'{escape(y_label)}</text>')
    for i, (label, s) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{_num(sx(x))},{_num(sy(y))}" for x, y in s)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                   f'points="{coords}"><title>{escape(label)}</title></polyline>')
        ly = TOP + 12 + 14 * i
        out.append(f'<rect x="{W - RIGHT + 10}" y="{ly - 8}" width="10" height="10" '
                   f'fill="{color}"/>')
        out.append(f'<text x="{W - RIGHT + 24}" y="{ly}" font-size="10">'
                   f'{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _series_label(row, extra):
    label = row.main_task + (f" + {row.auxiliary_set}" if row.auxiliary_set else "")
    parts = [f"{c}={getattr(row, c)}" for c in extra]
    return label + (f" ({', '.join(parts)})" if parts else "")


def emit_outputs(table, out_dir):
    """Write ``results.csv`` and one chart per swept axis and metric.

    An axis counts as swept when it takes more than one value among the
    attack rows.  Each chart draws one polyline per task combination; other
    varying key columns are folded into the series label.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = [table.to_csv(os.path.join(out_dir, "results.csv"))]
    rows = [r for r in table.rows if r.attack_variant != "clean"]
    sub = SweepTable(rows)
    swept = [c for c in AXIS_COLUMNS if len(sub.distinct(c)) > 1]
    for axis in swept:
        others = [c for c in swept if c != axis]
        if len(sub.distinct("attack_variant")) > 1:
            others.append("attack_variant")
        for metric in sub.distinct("metric_name"):
            series = {}
            for r in sub.filter(metric_name=metric):
                series.setdefault(_series_label(r, others), []).append(
                    (getattr(r, axis), r.value))
            for s in series.values():
                s.sort(key=lambda p: p[0])
            categories = None if axis in _NUMERIC else sub.distinct(axis)
            svg = line_chart(series, AXIS_COLUMNS[axis], metric,
                             f"{metric} vs {AXIS_COLUMNS[axis]}", categories)
            path = os.path.join(out_dir, f"{metric}_vs_{axis}.svg")
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(svg)
            written.append(path)
    return written
