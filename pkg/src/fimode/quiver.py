"""Quiver export: side-by-side vector-field comparison as CSV and SVG.

Both fields are sampled on the same grid_n x grid_n lattice over a 2D box.
For 3D systems the caller fixes the third coordinate and passes 2D slices.
The SVG is written by hand with fixed-precision coordinates, so identical
inputs give identical bytes.
"""

from __future__ import annotations

import numpy as np


def sample_quiver_grid(field_a, field_b, region, grid_n: int):
    """Evaluate both (D=2) fields on the lattice; returns (points, ua, ub).

    `region` is (xmin, xmax, ymin, ymax); points are row-major with x
    varying fastest, shape (grid_n**2, 2).
    """
    xmin, xmax, ymin, ymax = region
    if not (xmax > xmin and ymax > ymin):
        raise ValueError("region must have positive extent")
    if grid_n < 2:
        raise ValueError("grid_n must be at least 2")
    xs = np.linspace(xmin, xmax, grid_n)
    ys = np.linspace(ymin, ymax, grid_n)
    points = np.array([(x, y) for y in ys for x in xs])
    ua = np.array([np.asarray(field_a(p), dtype=float) for p in points])
    ub = np.array([np.asarray(field_b(p), dtype=float) for p in points])
    if ua.shape != points.shape or ub.shape != points.shape:
        raise ValueError("fields must map 2D points to 2D vectors")
    return points, ua, ub


def export_quiver(
    field_a,
    field_b,
    region,
    grid_n: int,
    csv_path,
    svg_path=None,
    context_polylines=None,
    labels: tuple[str, str] = ("estimate", "truth"),
) -> None:
    """Write (x, y, u_a, v_a, u_b, v_b) rows and, optionally, a two-panel
    SVG with the context trajectories overlaid on each panel."""
    points, ua, ub = sample_quiver_grid(field_a, field_b, region, grid_n)
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("x,y,u_a,v_a,u_b,v_b\n")
        for row in np.concatenate([points, ua, ub], axis=1):
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")
    if svg_path is not None:
        svg = render_quiver_svg(points, (ua, ub), region, grid_n, context_polylines, labels)
        with open(svg_path, "w", encoding="utf-8") as fh:
            fh.write(svg)


def _arrow(x0, y0, dx, dy, color):
    tip_x, tip_y = x0 + dx, y0 + dy
    norm = np.hypot(dx, dy)
    if norm < 1e-12:
        return f'<circle cx="{x0:.2f}" cy="{y0:.2f}" r="0.6" fill="{color}"/>'
    hx, hy = dx / norm, dy / norm
    # two short barbs at the tip
    left = (-0.5 * hx + 0.3 * hy, -0.5 * hy - 0.3 * hx)
    right = (-0.5 * hx - 0.3 * hy, -0.5 * hy + 0.3 * hx)
    head = 0.35 * min(norm, 12.0)
    parts = [
        f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{tip_x:.2f}" y2="{tip_y:.2f}" '
        f'stroke="{color}" stroke-width="0.8"/>',
        f'<line x1="{tip_x:.2f}" y1="{tip_y:.2f}" '
        f'x2="{tip_x + head * left[0]:.2f}" y2="{tip_y + head * left[1]:.2f}" '
        f'stroke="{color}" stroke-width="0.8"/>',
        f'<line x1="{tip_x:.2f}" y1="{tip_y:.2f}" '
        f'x2="{tip_x + head * right[0]:.2f}" y2="{tip_y + head * right[1]:.2f}" '
        f'stroke="{color}" stroke-width="0.8"/>',
    ]
    return "".join(parts)


def render_quiver_svg(points, fields, region, grid_n, context_polylines, labels) -> str:
    if context_polylines is not None and isinstance(context_polylines, np.ndarray):
        context_polylines = [context_polylines]
    xmin, xmax, ymin, ymax = region
    panel = 320.0
    margin = 30.0
    gap = 40.0
    width = 2 * panel + 2 * margin + gap
    height = panel + 2 * margin + 20.0

    def mapper(panel_index):
        off_x = margin + panel_index * (panel + gap)
        sx = panel / (xmax - xmin)
        sy = panel / (ymax - ymin)

        def to_px(p):
            return off_x + (p[0] - xmin) * sx, margin + (ymax - p[1]) * sy

        return to_px

    # one shared arrow scale so the two panels are visually comparable
    max_mag = max(float(np.max(np.hypot(f[:, 0], f[:, 1]))) for f in fields)
    cell = panel / (grid_n - 1)
    arrow_scale = 0.0 if max_mag == 0 else 0.85 * cell / max_mag

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" '
        f'height="{height:.0f}" viewBox="0 0 {width:.0f} {height:.0f}">',
        '<rect width="100%" height="100%" fill="white"/>',
    ]
    colors = ("#1f5fbf", "#b23a3a")
    for i, (field_uv, label, color) in enumerate(zip(fields, labels, colors)):
        to_px = mapper(i)
        off_x = margin + i * (panel + gap)
        out.append(
            f'<rect x="{off_x:.2f}" y="{margin:.2f}" width="{panel:.2f}" '
            f'height="{panel:.2f}" fill="none" stroke="#888" stroke-width="1"/>'
        )
        out.append(
            f'<text x="{off_x + panel / 2:.2f}" y="{margin + panel + 16:.2f}" '
            f'font-family="sans-serif" font-size="12" text-anchor="middle">{label}</text>'
        )
        for p, uv in zip(points, field_uv):
            px, py = to_px(p)
            # SVG y axis points down: flip the v component
            out.append(_arrow(px, py, uv[0] * arrow_scale, -uv[1] * arrow_scale, color))
        for line in context_polylines or []:
            if len(line) < 2:
                continue
            pts = " ".join("{:.2f},{:.2f}".format(*to_px(p)) for p in np.asarray(line))
            out.append(
                f'<polyline points="{pts}" fill="none" stroke="#222" stroke-width="1.5"/>'
            )
    out.append("</svg>")
    return "\n".join(out)
