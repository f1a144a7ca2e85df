"""Rasterization of simple shapes onto a pixel grid.

Shapes are described in canvas coordinates (y down, x right, origin at the
top-left corner) and tested against pixel centers: pixel (i, j) covers the
point (i + 0.5, j + 0.5).  ``rasterize_shapes`` stamps a list of shapes in
priority order — the first shape to claim a pixel keeps it — which is how
layouts stay non-overlapping by construction.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateShape, ZeroDimension


def _grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    ys = np.arange(height, dtype=np.float64) + 0.5
    xs = np.arange(width, dtype=np.float64) + 0.5
    return ys[:, None], xs[None, :]


def raster_circle(height: int, width: int, cy: float, cx: float, r: float) -> np.ndarray:
    if r <= 0:
        raise DegenerateShape(f"circle radius {r} <= 0")
    y, x = _grid(height, width)
    return (((y - cy) ** 2 + (x - cx) ** 2) <= r * r).astype(np.float64)


def raster_ellipse(
    height: int, width: int, cy: float, cx: float, ry: float, rx: float
) -> np.ndarray:
    if ry <= 0 or rx <= 0:
        raise DegenerateShape(f"ellipse radii ({ry}, {rx}) must be positive")
    y, x = _grid(height, width)
    return ((((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2) <= 1.0).astype(np.float64)


def raster_rect(
    height: int, width: int, y0: float, x0: float, y1: float, x1: float
) -> np.ndarray:
    if y1 <= y0 or x1 <= x0:
        raise DegenerateShape(f"rect corners ({y0},{x0})..({y1},{x1}) are inverted")
    y, x = _grid(height, width)
    return ((y >= y0) & (y < y1) & (x >= x0) & (x < x1)).astype(np.float64)


def raster_polygon(height: int, width: int, points: list) -> np.ndarray:
    """Even-odd fill of a closed polygon given as [(y, x), ...] vertices."""
    if len(points) < 3:
        raise DegenerateShape(f"polygon needs >= 3 vertices, got {len(points)}")
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DegenerateShape(f"polygon points must be (n, 2), got {pts.shape}")
    y, x = _grid(height, width)
    inside = np.zeros((height, width), dtype=bool)
    n = len(pts)
    for k in range(n):
        y0, x0 = pts[k]
        y1, x1 = pts[(k + 1) % n]
        if y0 == y1:
            continue  # horizontal edge never crosses a scanline strictly
        # half-open rule on y avoids double-counting shared vertices
        crosses = (y >= np.minimum(y0, y1)) & (y < np.maximum(y0, y1))
        x_at = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (x < x_at)
    return inside.astype(np.float64)


_KINDS = {
    "circle": (raster_circle, ("cy", "cx", "r")),
    "ellipse": (raster_ellipse, ("cy", "cx", "ry", "rx")),
    "rect": (raster_rect, ("y0", "x0", "y1", "x1")),
    "polygon": (raster_polygon, ("points",)),
}


def raster_shape(height: int, width: int, shape: dict) -> np.ndarray:
    """Rasterize one shape dict, e.g. {"kind": "circle", "cy": .., "cx": .., "r": ..}."""
    kind = shape.get("kind")
    if kind not in _KINDS:
        raise DegenerateShape(f"unknown shape kind {kind!r}")
    fn, keys = _KINDS[kind]
    try:
        args = [shape[k] for k in keys]
    except KeyError as exc:
        raise DegenerateShape(f"shape {kind!r} missing field {exc.args[0]!r}") from None
    return fn(height, width, *args)


def rasterize_shapes(height: int, width: int, shapes: list[dict]) -> np.ndarray:
    """Stamp shapes first-come-first-kept; returns (len(shapes), H, W) binary masks."""
    if height <= 0 or width <= 0:
        raise ZeroDimension(f"raster grid {height}x{width}")
    taken = np.zeros((height, width), dtype=bool)
    out = np.zeros((len(shapes), height, width), dtype=np.float64)
    for i, shape in enumerate(shapes):
        m = raster_shape(height, width, shape) > 0.5
        m &= ~taken
        taken |= m
        out[i] = m.astype(np.float64)
    return out
