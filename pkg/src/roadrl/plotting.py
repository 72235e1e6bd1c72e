"""Dependency-free SVG emission for training curves and episode plots.

Plots are also exported as raw CSV series by the CLI, so the SVG files are a
convenience view rather than the canonical artifact.
"""

from __future__ import annotations

from typing import Sequence

__all__ = ["line_chart", "path_chart"]


def _scale(vals, lo, hi, out_lo, out_hi):
    span = hi - lo if hi > lo else 1.0
    return [out_lo + (v - lo) / span * (out_hi - out_lo) for v in vals]


def _svg_header(width: int, height: int) -> list[str]:
    return [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}">',
            f'<rect width="{width}" height="{height}" fill="white"/>']


def _polyline(xs, ys, color: str, width: float = 1.5) -> str:
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
    return f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"/>'


def line_chart(series: dict[str, tuple[Sequence[float], Sequence[float]]],
               title: str, x_label: str, y_label: str,
               width: int = 720, height: int = 420) -> str:
    """Simple multi-series line chart; series maps label -> (xs, ys)."""
    colors = ["#888888", "#c62828", "#1565c0", "#2e7d32"]
    margin = 50
    all_x = [x for xs, _ in series.values() for x in xs]
    all_y = [y for _, ys in series.values() for y in ys]
    if not all_x:
        all_x, all_y = [0.0, 1.0], [0.0, 1.0]
    x_lo, x_hi = min(all_x), max(all_x)
    y_lo, y_hi = min(all_y), max(all_y)
    parts = _svg_header(width, height)
    parts.append(f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" '
                 f'font-size="14">{title}</text>')
    parts.append(f'<line x1="{margin}" y1="{height - margin}" x2="{width - 10}" '
                 f'y2="{height - margin}" stroke="black"/>')
    parts.append(f'<line x1="{margin}" y1="{height - margin}" x2="{margin}" '
                 f'y2="30" stroke="black"/>')
    parts.append(f'<text x="{width / 2:.0f}" y="{height - 8}" text-anchor="middle" '
                 f'font-size="12">{x_label}</text>')
    parts.append(f'<text x="14" y="{height / 2:.0f}" font-size="12" '
                 f'transform="rotate(-90 14 {height / 2:.0f})" '
                 f'text-anchor="middle">{y_label}</text>')
    for lo, label in ((y_lo, f"{y_lo:.3g}"), (y_hi, f"{y_hi:.3g}")):
        y = _scale([lo], y_lo, y_hi, height - margin, 30)[0]
        parts.append(f'<text x="{margin - 4}" y="{y:.0f}" text-anchor="end" '
                     f'font-size="10">{label}</text>')
    for i, (label, (xs, ys)) in enumerate(series.items()):
        if not len(xs):
            continue
        px = _scale(xs, x_lo, x_hi, margin, width - 10)
        py = _scale(ys, y_lo, y_hi, height - margin, 30)
        color = colors[i % len(colors)]
        parts.append(_polyline(px, py, color))
        parts.append(f'<text x="{width - 12}" y="{34 + 14 * i}" text-anchor="end" '
                     f'font-size="11" fill="{color}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def path_chart(occupancy, speed_limits, v_max: float,
               points: Sequence[tuple[float, float]],
               spline: Sequence[tuple[float, float]],
               width_px: int = 840) -> str:
    """Cell-grid rendering: obstacles, speed shading, points and spline.

    Rows run left to right (layer index), lanes bottom to top in lane-offset
    units.  Obstacle cells are blue, regulatory speed shades red (darker is
    slower), chosen points purple, the fitted spline green.
    """
    n_rows, n_lanes = len(occupancy), len(occupancy[0])
    cell = max(18, min(48, width_px // max(n_rows, 1)))
    margin = 40
    width = margin * 2 + cell * n_rows
    height = margin * 2 + cell * n_lanes

    def cx(layer: float) -> float:  # layer 1 .. n_rows maps to column centers
        return margin + (layer - 0.5) * cell

    def cy(n: float) -> float:      # lane offset in [-W/2, W/2], up positive
        return margin + (n_lanes / 2.0 - n) * cell

    parts = _svg_header(width, height)
    for r in range(n_rows):
        for l in range(n_lanes):
            x = margin + r * cell
            y = margin + (n_lanes - 1 - l) * cell
            if occupancy[r][l]:
                fill = "#3f51b5"
            else:
                # darker red = slower zone
                frac = max(0.0, min(1.0, float(speed_limits[r][l]) / v_max))
                shade = int(255 - 140 * (1.0 - frac))
                fill = f"rgb(255,{shade},{shade})"
            parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                         f'fill="{fill}" stroke="#cccccc"/>')
    if len(spline) >= 2:
        xs = [cx(p[0]) for p in spline]
        ys = [cy(p[1]) for p in spline]
        parts.append(_polyline(xs, ys, "#2e7d32", 2.0))
    for layer, n in points:
        parts.append(f'<circle cx="{cx(layer):.2f}" cy="{cy(n):.2f}" r="4" '
                     f'fill="#7b1fa2"/>')
    parts.append("</svg>")
    return "\n".join(parts)
