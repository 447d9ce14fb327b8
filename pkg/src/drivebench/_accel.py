"""Hot geometry kernels: numba-jitted with a pure-numpy fallback.

Both implementations perform the same arithmetic in the same order, so
results are identical bit-for-bit.  Selection happens once at import:
set ``DRIVEBENCH_DISABLE_NUMBA=1`` to force the numpy path (or run on a
machine without numba).  ``drivebench.bench`` times the two paths.

Box rows are ``[x, y, heading, half_length, half_width]``.
"""
from __future__ import annotations

import math
import os

import numpy as np

_EDGE_EPS = 1e-12


# ---------------------------------------------------------------------------
# pure-numpy reference implementations
# ---------------------------------------------------------------------------

def _sat_pairs_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Separating-axis overlap test for matched rows of boxes (M,5) x (M,5)."""
    dx = b[:, 0] - a[:, 0]
    dy = b[:, 1] - a[:, 1]
    ca, sa = np.cos(a[:, 2]), np.sin(a[:, 2])
    cb, sb = np.cos(b[:, 2]), np.sin(b[:, 2])
    out = np.ones(a.shape[0], dtype=np.bool_)
    # candidate axes: both boxes' local x and y directions
    for ax, ay in ((ca, sa), (-sa, ca), (cb, sb), (-sb, cb)):
        dist = np.abs(dx * ax + dy * ay)
        ra = a[:, 3] * np.abs(ca * ax + sa * ay) + a[:, 4] * np.abs(-sa * ax + ca * ay)
        rb = b[:, 3] * np.abs(cb * ax + sb * ay) + b[:, 4] * np.abs(-sb * ax + cb * ay)
        out &= dist <= ra + rb
    return out


def _points_in_polygon_np(points: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Ray-crossing containment with boundary points counted inside."""
    px, py = points[:, 0], points[:, 1]
    inside = np.zeros(points.shape[0], dtype=np.bool_)
    on_edge = np.zeros_like(inside)
    n = verts.shape[0]
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        cross = (x2 - x1) * (py - y1) - (px - x1) * (y2 - y1)
        scale = abs(x2 - x1) + abs(y2 - y1) + 1.0
        on_seg = (
            (np.abs(cross) <= _EDGE_EPS * scale)
            & (px >= min(x1, x2) - _EDGE_EPS)
            & (px <= max(x1, x2) + _EDGE_EPS)
            & (py >= min(y1, y2) - _EDGE_EPS)
            & (py <= max(y1, y2) + _EDGE_EPS)
        )
        on_edge |= on_seg
        with np.errstate(divide="ignore", invalid="ignore"):
            crosses = ((y1 > py) != (y2 > py)) & (
                px < (x2 - x1) * (py - y1) / (y2 - y1) + x1
            )
        inside ^= crosses
    return inside | on_edge


def _project_polyline_np(
    points: np.ndarray, verts: np.ndarray, cum_s: np.ndarray
) -> np.ndarray:
    """Closest-point projection onto a polyline.

    Returns (N,3): arclength of the closest point, signed lateral offset
    (positive left of travel direction), tangent heading.  Ties in distance
    go to the smaller arclength.
    """
    n_pts = points.shape[0]
    best_d2 = np.full(n_pts, np.inf)
    out = np.zeros((n_pts, 3))
    px, py = points[:, 0], points[:, 1]
    for i in range(verts.shape[0] - 1):
        x1, y1 = verts[i]
        x2, y2 = verts[i + 1]
        ex, ey = x2 - x1, y2 - y1
        seg_len2 = ex * ex + ey * ey
        t = np.clip(((px - x1) * ex + (py - y1) * ey) / seg_len2, 0.0, 1.0)
        cx = x1 + t * ex
        cy = y1 + t * ey
        d2 = (px - cx) ** 2 + (py - cy) ** 2
        s = cum_s[i] + t * np.sqrt(seg_len2)
        take = (d2 < best_d2) | ((d2 == best_d2) & (s < out[:, 0]))
        # signed distance: magnitude is the euclidean distance to the closest
        # point (also when it clamps to a vertex), sign is the side of travel
        cross = ex * (py - cy) - ey * (px - cx)
        lateral = np.where(cross < 0.0, -np.sqrt(d2), np.sqrt(d2))
        heading = math.atan2(ey, ex)
        best_d2 = np.where(take, d2, best_d2)
        out[:, 0] = np.where(take, s, out[:, 0])
        out[:, 1] = np.where(take, lateral, out[:, 1])
        out[:, 2] = np.where(take, heading, out[:, 2])
    return out


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

_DISABLED = os.environ.get("DRIVEBENCH_DISABLE_NUMBA", "0") not in ("", "0")

try:
    if _DISABLED:
        raise ImportError("numba disabled by DRIVEBENCH_DISABLE_NUMBA")
    from numba import njit

    USING_NUMBA = True
except ImportError:
    njit = None
    USING_NUMBA = False


if USING_NUMBA:

    @njit(cache=True)
    def _sat_pairs_nb(a, b):  # pragma: no cover - exercised via dispatch
        m = a.shape[0]
        out = np.empty(m, dtype=np.bool_)
        for r in range(m):
            dx = b[r, 0] - a[r, 0]
            dy = b[r, 1] - a[r, 1]
            ca, sa = np.cos(a[r, 2]), np.sin(a[r, 2])
            cb, sb = np.cos(b[r, 2]), np.sin(b[r, 2])
            hit = True
            for k in range(4):
                if k == 0:
                    ax, ay = ca, sa
                elif k == 1:
                    ax, ay = -sa, ca
                elif k == 2:
                    ax, ay = cb, sb
                else:
                    ax, ay = -sb, cb
                dist = abs(dx * ax + dy * ay)
                ra = a[r, 3] * abs(ca * ax + sa * ay) + a[r, 4] * abs(-sa * ax + ca * ay)
                rb = b[r, 3] * abs(cb * ax + sb * ay) + b[r, 4] * abs(-sb * ax + cb * ay)
                if dist > ra + rb:
                    hit = False
                    break
            out[r] = hit
        return out

    @njit(cache=True)
    def _points_in_polygon_nb(points, verts):  # pragma: no cover
        n_pts = points.shape[0]
        n = verts.shape[0]
        out = np.empty(n_pts, dtype=np.bool_)
        for p in range(n_pts):
            px, py = points[p, 0], points[p, 1]
            inside = False
            on_edge = False
            for i in range(n):
                x1, y1 = verts[i, 0], verts[i, 1]
                j = i + 1
                if j == n:
                    j = 0
                x2, y2 = verts[j, 0], verts[j, 1]
                cross = (x2 - x1) * (py - y1) - (px - x1) * (y2 - y1)
                scale = abs(x2 - x1) + abs(y2 - y1) + 1.0
                lox = x1 if x1 < x2 else x2
                hix = x2 if x1 < x2 else x1
                loy = y1 if y1 < y2 else y2
                hiy = y2 if y1 < y2 else y1
                if (
                    abs(cross) <= _EDGE_EPS * scale
                    and px >= lox - _EDGE_EPS
                    and px <= hix + _EDGE_EPS
                    and py >= loy - _EDGE_EPS
                    and py <= hiy + _EDGE_EPS
                ):
                    on_edge = True
                if (y1 > py) != (y2 > py):
                    if px < (x2 - x1) * (py - y1) / (y2 - y1) + x1:
                        inside = not inside
            out[p] = inside or on_edge
        return out

    @njit(cache=True)
    def _project_polyline_nb(points, verts, cum_s):  # pragma: no cover
        n_pts = points.shape[0]
        out = np.zeros((n_pts, 3))
        for p in range(n_pts):
            px, py = points[p, 0], points[p, 1]
            best_d2 = np.inf
            best_s = 0.0
            best_lat = 0.0
            best_h = 0.0
            for i in range(verts.shape[0] - 1):
                x1, y1 = verts[i, 0], verts[i, 1]
                x2, y2 = verts[i + 1, 0], verts[i + 1, 1]
                ex, ey = x2 - x1, y2 - y1
                seg_len2 = ex * ex + ey * ey
                t = ((px - x1) * ex + (py - y1) * ey) / seg_len2
                if t < 0.0:
                    t = 0.0
                elif t > 1.0:
                    t = 1.0
                cx = x1 + t * ex
                cy = y1 + t * ey
                d2 = (px - cx) ** 2 + (py - cy) ** 2
                seg_len = np.sqrt(seg_len2)
                s = cum_s[i] + t * seg_len
                if d2 < best_d2 or (d2 == best_d2 and s < best_s):
                    best_d2 = d2
                    best_s = s
                    cross = ex * (py - cy) - ey * (px - cx)
                    best_lat = -np.sqrt(d2) if cross < 0.0 else np.sqrt(d2)
                    best_h = np.arctan2(ey, ex)
            out[p, 0] = best_s
            out[p, 1] = best_lat
            out[p, 2] = best_h
        return out


def _c64(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def sat_pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Overlap flags for matched box rows; touching counts as overlap."""
    a, b = _c64(a), _c64(b)
    if USING_NUMBA:
        return _sat_pairs_nb(a, b)
    return _sat_pairs_np(a, b)


def points_in_polygon(points: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Containment flags (boundary inclusive) for points vs a simple polygon."""
    points, verts = _c64(points), _c64(verts)
    if USING_NUMBA:
        return _points_in_polygon_nb(points, verts)
    return _points_in_polygon_np(points, verts)


def project_polyline(points: np.ndarray, verts: np.ndarray, cum_s: np.ndarray) -> np.ndarray:
    """(arclength, signed lateral, tangent heading) rows for each point."""
    points, verts, cum_s = _c64(points), _c64(verts), _c64(cum_s)
    if USING_NUMBA:
        return _project_polyline_nb(points, verts, cum_s)
    return _project_polyline_np(points, verts, cum_s)


# explicit handles for the benchmark; None when the numba path is unavailable
NUMPY_KERNELS = {
    "sat_pairs": _sat_pairs_np,
    "points_in_polygon": _points_in_polygon_np,
    "project_polyline": _project_polyline_np,
}
NUMBA_KERNELS = (
    {
        "sat_pairs": _sat_pairs_nb,
        "points_in_polygon": _points_in_polygon_nb,
        "project_polyline": _project_polyline_nb,
    }
    if USING_NUMBA
    else None
)
