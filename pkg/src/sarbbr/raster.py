"""Pixel-center polygon rasterisation (even-odd rule).

Pixel (i, j) covers [j, j+1) x [i, i+1) in continuous (rg, az) coordinates,
so its center sits at (j + 0.5, i + 0.5).
"""

from __future__ import annotations

import math

import numpy as np


def points_in_polygon(px, py, poly) -> np.ndarray:
    """Even-odd crossing test for many points against one polygon ring.

    ``poly`` is an (n, 2) array of vertices, open or closed.
    """
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    poly = np.asarray(poly, dtype=np.float64)
    inside = np.zeros(np.broadcast(px, py).shape, dtype=bool)
    xj, yj = poly[-1]
    for xi, yi in poly:
        if yi != yj:
            crosses = (yi > py) != (yj > py)
            x_at = xi + (py - yi) * (xj - xi) / (yj - yi)
            inside ^= crosses & (px < x_at)
        xj, yj = xi, yi
    return inside


def polygon_window(poly, dims):
    """Integer (row0, row1, col0, col1) pixel window covering ``poly``, clipped to ``dims``."""
    poly = np.asarray(poly, dtype=np.float64)
    rows, cols = dims
    c0 = max(0, math.floor(poly[:, 0].min()))
    c1 = min(cols, math.ceil(poly[:, 0].max()) + 1)
    r0 = max(0, math.floor(poly[:, 1].min()))
    r1 = min(rows, math.ceil(poly[:, 1].max()) + 1)
    return r0, r1, c0, c1


def fill_polygon(mask: np.ndarray, poly, value=True) -> np.ndarray:
    """Set every pixel of ``mask`` whose center is inside ``poly``; returns ``mask``."""
    r0, r1, c0, c1 = polygon_window(poly, mask.shape)
    if r0 >= r1 or c0 >= c1:
        return mask
    jj, ii = np.meshgrid(np.arange(c0, c1) + 0.5, np.arange(r0, r1) + 0.5)
    hit = points_in_polygon(jj, ii, poly)
    mask[r0:r1, c0:c1][hit] = value
    return mask


def rasterize_polygon(poly, dims) -> np.ndarray:
    return fill_polygon(np.zeros(dims, dtype=bool), poly)


def draw_range_crossings(mask: np.ndarray, seg_a, seg_b) -> np.ndarray:
    """Mark, on every row whose center the segment crosses, the one pixel holding the crossing.

    Produces a line that is exactly one pixel thick along range.
    """
    (xa, ya), (xb, yb) = seg_a, seg_b
    if ya == yb:
        return mask
    lo, hi = min(ya, yb), max(ya, yb)
    rows = np.arange(max(0, math.ceil(lo - 0.5)), min(mask.shape[0], math.floor(hi - 0.5) + 1))
    if rows.size == 0:
        return mask
    yc = rows + 0.5
    # half-open in y so a row center exactly on a shared vertex is counted once
    keep = (yc >= lo) & (yc < hi) if ya < yb else (yc > lo) & (yc <= hi)
    rows, yc = rows[keep], yc[keep]
    xc = xa + (yc - ya) * (xb - xa) / (yb - ya)
    cols = np.floor(xc).astype(np.int64)
    ok = (cols >= 0) & (cols < mask.shape[1])
    mask[rows[ok], cols[ok]] = True
    return mask
