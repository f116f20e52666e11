"""Aggregate tables, radar-chart SVG, and distribution data emission."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

from .grounded_metrics import AggregateGroundedMetrics

RADAR_AXES = ("scene", "background", "characters", "salient_objects")

GROUNDED_ROWS = (
    ("precision", "mean_precision"),
    ("recall", "mean_recall"),
    ("macro_f1", "macro_f1"),
    ("mean_mistakes", "mean_mistakes"),
)

JUDGED_ROWS = ("overall", "salient_objects", "characters", "background", "scene")


@dataclass(frozen=True)
class RadarData:
    series: tuple[tuple[str, dict[str, float]], ...]

    def __post_init__(self):
        for label, scores in self.series:
            for axis in RADAR_AXES:
                if axis not in scores:
                    raise ValueError(f"series {label!r} missing axis {axis!r}")
                if not (1.0 <= scores[axis] <= 10.0):
                    raise ValueError(f"series {label!r} axis {axis!r} outside [1, 10]")


def grounded_table(variants: dict[str, AggregateGroundedMetrics]) -> tuple[str, str]:
    """Metric-by-variant grid of set-based scores; returns (markdown, csv)."""
    if not variants:
        raise ValueError("need at least one variant")
    names = list(variants)
    md = io.StringIO()
    md.write("| metric | " + " | ".join(names) + " |\n")
    md.write("|---" * (len(names) + 1) + "|\n")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric"] + names)
    for label, attr in GROUNDED_ROWS:
        values = [getattr(variants[n], attr) for n in names]
        md.write(f"| {label} | " + " | ".join(f"{v:.2f}" for v in values) + " |\n")
        writer.writerow([label] + [f"{v:.6f}" for v in values])
    return md.getvalue(), buf.getvalue()


def judged_table(variants: dict[str, dict[str, float]]) -> tuple[str, str]:
    """Judge-score grid with the overall row recomputed as the mean of the
    four section rows; returns (markdown, csv)."""
    if not variants:
        raise ValueError("need at least one variant")
    names = list(variants)
    rows: dict[str, list[float]] = {}
    for axis in RADAR_AXES:
        rows[axis] = [variants[n][axis] for n in names]
    rows["overall"] = [
        sum(variants[n][axis] for axis in RADAR_AXES) / len(RADAR_AXES) for n in names
    ]
    md = io.StringIO()
    md.write("| metric | " + " | ".join(names) + " |\n")
    md.write("|---" * (len(names) + 1) + "|\n")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric"] + names)
    for label in JUDGED_ROWS:
        values = rows[label]
        md.write(f"| {label} | " + " | ".join(f"{v:.2f}" for v in values) + " |\n")
        writer.writerow([label] + [f"{v:.6f}" for v in values])
    return md.getvalue(), buf.getvalue()


def emit_aggregate_tables(
    grounded: dict[str, AggregateGroundedMetrics] | None,
    judged: dict[str, dict[str, float]] | None,
    md_path=None,
    csv_path=None,
) -> tuple[str, str]:
    md_parts, csv_parts = [], []
    if grounded:
        md, csv_text = grounded_table(grounded)
        md_parts.append("## Instance-grounded metrics\n\n" + md)
        csv_parts.append(csv_text)
    if judged:
        md, csv_text = judged_table(judged)
        md_parts.append("## Judge scores\n\n" + md)
        csv_parts.append(csv_text)
    md_out = "\n".join(md_parts)
    csv_out = "\n".join(csv_parts)
    if md_path:
        with open(md_path, "w", encoding="utf-8") as fh:
            fh.write(md_out)
    if csv_path:
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write(csv_out)
    return md_out, csv_out


def radar_svg(data: RadarData) -> str:
    """Standalone SVG, one polygon per series over the four axes; radial
    scale is linear over [1, 10]."""
    size = 360.0
    cx = cy = size / 2.0
    radius = 130.0
    angles = {axis: math.pi / 2.0 - i * math.pi / 2.0 for i, axis in enumerate(RADAR_AXES)}

    def point(axis: str, value: float) -> tuple[float, float]:
        frac = (value - 1.0) / 9.0
        a = angles[axis]
        return cx + frac * radius * math.cos(a), cy - frac * radius * math.sin(a)

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size:.0f}" height="{size:.0f}" '
        f'viewBox="0 0 {size:.0f} {size:.0f}">',
        f'<circle cx="{cx:.3f}" cy="{cy:.3f}" r="{radius:.3f}" fill="none" stroke="#cccccc"/>',
    ]
    for axis in RADAR_AXES:
        x, y = cx + radius * math.cos(angles[axis]), cy - radius * math.sin(angles[axis])
        lines.append(
            f'<line x1="{cx:.3f}" y1="{cy:.3f}" x2="{x:.3f}" y2="{y:.3f}" stroke="#cccccc"/>'
        )
        lx, ly = cx + (radius + 18) * math.cos(angles[axis]), cy - (radius + 18) * math.sin(angles[axis])
        lines.append(
            f'<text x="{lx:.3f}" y="{ly:.3f}" font-size="11" text-anchor="middle">{axis}</text>'
        )
    palette = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")
    for i, (label, scores) in enumerate(data.series):
        pts = " ".join(
            f"{x:.3f},{y:.3f}" for x, y in (point(axis, scores[axis]) for axis in RADAR_AXES)
        )
        color = palette[i % len(palette)]
        lines.append(
            f'<polygon points="{pts}" fill="{color}" fill-opacity="0.15" stroke="{color}">'
            f"<title>{label}</title></polygon>"
        )
    lines.append(
        f'<text x="{cx:.3f}" y="{size - 8:.3f}" font-size="9" text-anchor="middle">'
        "linear radial scale, 1 to 10</text>"
    )
    lines.append("</svg>")
    return "\n".join(lines)


def emit_radar_svg(data: RadarData, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(radar_svg(data))


def emit_distribution_chart_data(dist: dict[str, int], path=None) -> dict:
    """Counts plus percentage shares (summing to 100 when non-empty)."""
    total = sum(dist.values())
    series = []
    for name in sorted(dist):
        rec = {"name": name, "count": dist[name]}
        if total > 0:
            rec["share_pct"] = 100.0 * dist[name] / total
        series.append(rec)
    obj = {"total": total, "series": series}
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2)
    return obj
