"""Deterministic CSV, JSON and SVG output for experiment reports."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from xml.sax.saxutils import escape

FORMATS = ("csv", "json", "svg")
PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860")


def report_csv(report) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["method", "split", "object", "trials", "successes", "rate"])
    for m, split, obj, t, k in report.rows():
        w.writerow([m, split, obj, t, k, "%.4f" % (k / t)])
    for m, split, t, k in report.aggregates():
        w.writerow([m, split, "*", t, k, "%.4f" % (k / t)])
    return out.getvalue()


def report_json(report) -> str:
    return json.dumps(report.to_json(), sort_keys=True, indent=1) + "\n"


def svg_bars(groups, series, values, title: str = "", ylabel: str = "success rate") -> str:
    """Grouped bar chart; ``values[g][s]`` in [0, 1]."""
    width, height = 80 + len(groups) * max(100, 36 * len(series)), 320
    left, right, top, bottom = 60, 20, 40, 60
    plot_w, plot_h = width - left - right, height - top - bottom
    group_w = plot_w / max(1, len(groups))
    bar_w = 0.8 * group_w / max(1, len(series))
    parts = ['<svg xmlns="http://www.w3.org/2000/svg" width="%d" height="%d" viewBox="0 0 %d %d">'
             % (width, height, width, height),
             '<rect width="100%" height="100%" fill="white"/>',
             '<text x="%d" y="20" font-size="14" font-family="sans-serif">%s</text>' % (left, escape(title))]
    for tick in range(6):
        v = tick / 5
        y = top + plot_h * (1 - v)
        parts.append('<line x1="%d" y1="%.1f" x2="%d" y2="%.1f" stroke="#ddd"/>' % (left, y, width - right, y))
        parts.append('<text x="%d" y="%.1f" font-size="10" text-anchor="end" font-family="sans-serif">%.1f</text>'
                     % (left - 4, y + 3, v))
    parts.append('<text x="14" y="%.1f" font-size="11" font-family="sans-serif" transform="rotate(-90 14 %.1f)">'
                 '%s</text>' % (top + plot_h / 2, top + plot_h / 2, escape(ylabel)))
    for gi, g in enumerate(groups):
        x0 = left + gi * group_w + 0.1 * group_w
        for si, s in enumerate(series):
            v = min(max(float(values[g].get(s, 0.0)), 0.0), 1.0)
            h = plot_h * v
            parts.append('<rect x="%.1f" y="%.1f" width="%.1f" height="%.1f" fill="%s"><title>%s %s %.3f</title></rect>'
                         % (x0 + si * bar_w, top + plot_h - h, bar_w, h, PALETTE[si % len(PALETTE)],
                            escape(str(g)), escape(str(s)), v))
        parts.append('<text x="%.1f" y="%d" font-size="11" text-anchor="middle" font-family="sans-serif">%s</text>'
                     % (left + (gi + 0.5) * group_w, height - bottom + 16, escape(str(g))))
    for si, s in enumerate(series):
        x = left + 90 * si
        parts.append('<rect x="%d" y="%d" width="10" height="10" fill="%s"/>' % (x, height - 24, PALETTE[si % len(PALETTE)]))
        parts.append('<text x="%d" y="%d" font-size="11" font-family="sans-serif">%s</text>'
                     % (x + 14, height - 15, escape(str(s))))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def report_svg(report) -> str:
    methods = report.methods()
    agg = report.aggregates()
    splits = list(dict.fromkeys(s for _, s, _, _ in agg))
    values = {s: {m: k / t for m, s2, t, k in agg if s2 == s} for s in splits}
    return svg_bars(splits, methods, values, "success rate per split (seed %d)" % report.seed)


def emit_report(report, out_dir, formats=FORMATS, stem: str = "report") -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    writers = {"csv": report_csv, "json": report_json, "svg": report_svg}
    paths = []
    for fmt in formats:
        if fmt not in writers:
            raise ValueError("unknown report format %r" % fmt)
        p = out_dir / ("%s.%s" % (stem, fmt))
        p.write_text(writers[fmt](report))
        paths.append(p)
    return paths
