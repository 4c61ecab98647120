"""Axis-aligned rectangle helpers.

Rectangles are ``(x0, y0, x1, y1)`` with ``x0 < x1`` and ``y0 < y1``; boxes
in the COCO sense are ``(x, y, w, h)``.
"""

from __future__ import annotations

import numpy as np


def box_to_rect(box):
    x, y, w, h = box
    return (x, y, x + w, y + h)


def rect_to_box(rect):
    x0, y0, x1, y1 = rect
    return (x0, y0, x1 - x0, y1 - y0)


def rect_area(rect) -> float:
    x0, y0, x1, y1 = rect
    return max(0.0, x1 - x0) * max(0.0, y1 - y0)


def intersect(a, b):
    """Intersection rectangle of ``a`` and ``b``, or ``None`` if it has no area."""
    x0, y0 = max(a[0], b[0]), max(a[1], b[1])
    x1, y1 = min(a[2], b[2]), min(a[3], b[3])
    if x1 <= x0 or y1 <= y0:
        return None
    return (x0, y0, x1, y1)


def union_area(rects) -> float:
    """Exact area of a union of rectangles by coordinate compression.

    The distinct x and y edges cut the plane into a grid of elementary cells;
    each cell is either fully inside some rectangle or outside all of them.
    """
    rects = [r for r in rects if rect_area(r) > 0]
    if not rects:
        return 0.0
    xs = np.unique([v for r in rects for v in (r[0], r[2])])
    ys = np.unique([v for r in rects for v in (r[1], r[3])])
    covered = np.zeros((len(ys) - 1, len(xs) - 1), dtype=bool)
    for x0, y0, x1, y1 in rects:
        i0, i1 = np.searchsorted(xs, x0), np.searchsorted(xs, x1)
        j0, j1 = np.searchsorted(ys, y0), np.searchsorted(ys, y1)
        covered[j0:j1, i0:i1] = True
    cell_area = np.outer(np.diff(ys), np.diff(xs))
    return float(cell_area[covered].sum())
