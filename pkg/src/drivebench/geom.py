"""Planar geometry primitives for rollouts and metric computation.

Conventions used throughout the package:

* headings are radians in (-pi, pi], x forward / y left in ego frame;
* signed lateral offsets are positive to the LEFT of the travel direction;
* trajectories are uniformly sampled, waypoint ``i`` at time ``i * dt``;
* touching boxes count as overlapping (conservative for collision metrics).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .errors import HorizonExceedsData, TrajectoryTooShort


def normalize_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    r = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    r = np.where(r == -np.pi, np.pi, r)
    return float(r) if np.ndim(a) == 0 else r


@dataclass(frozen=True)
class Pose2:
    """Planar pose; heading normalized to (-pi, pi]."""

    x: float
    y: float
    heading: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "heading", normalize_angle(self.heading))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading])


class Trajectory:
    """Uniformly sampled sequence of poses.

    ``waypoints`` is a (T, 3) float array of (x, y, heading); ``dt`` is the
    sampling period.  T >= 2, finite coordinates.
    """

    __slots__ = ("dt", "waypoints")

    def __init__(self, dt: float, waypoints: np.ndarray):
        waypoints = np.array(waypoints, dtype=np.float64)
        if waypoints.ndim != 2 or waypoints.shape[1] != 3:
            raise ValueError(f"waypoints must be (T, 3), got {waypoints.shape}")
        if waypoints.shape[0] < 2:
            raise ValueError("trajectory needs at least 2 waypoints")
        if not dt > 0:
            raise ValueError("dt must be positive")
        if not np.all(np.isfinite(waypoints)):
            raise ValueError("non-finite waypoint coordinates")
        waypoints[:, 2] = normalize_angle(waypoints[:, 2])
        waypoints.setflags(write=False)
        self.dt = float(dt)
        self.waypoints = waypoints

    def __len__(self) -> int:
        return self.waypoints.shape[0]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Trajectory)
            and self.dt == other.dt
            and self.waypoints.shape == other.waypoints.shape
            and bool(np.all(self.waypoints == other.waypoints))
        )

    def __repr__(self) -> str:
        return f"Trajectory(dt={self.dt}, T={len(self)})"

    @property
    def xy(self) -> np.ndarray:
        return self.waypoints[:, :2]

    @property
    def headings(self) -> np.ndarray:
        return self.waypoints[:, 2]

    @property
    def duration(self) -> float:
        return (len(self) - 1) * self.dt

    def pose(self, i: int) -> Pose2:
        x, y, h = self.waypoints[i]
        return Pose2(x, y, h)

    def to_frame(self, origin: Pose2) -> "Trajectory":
        """Express waypoints in the frame anchored at ``origin``."""
        c, s = math.cos(origin.heading), math.sin(origin.heading)
        dx = self.waypoints[:, 0] - origin.x
        dy = self.waypoints[:, 1] - origin.y
        out = np.empty_like(self.waypoints)
        out[:, 0] = c * dx + s * dy
        out[:, 1] = -s * dx + c * dy
        out[:, 2] = normalize_angle(self.waypoints[:, 2] - origin.heading)
        return Trajectory(self.dt, out)

    def from_frame(self, origin: Pose2) -> "Trajectory":
        """Inverse of :meth:`to_frame`."""
        c, s = math.cos(origin.heading), math.sin(origin.heading)
        out = np.empty_like(self.waypoints)
        out[:, 0] = origin.x + c * self.waypoints[:, 0] - s * self.waypoints[:, 1]
        out[:, 1] = origin.y + s * self.waypoints[:, 0] + c * self.waypoints[:, 1]
        out[:, 2] = normalize_angle(self.waypoints[:, 2] + origin.heading)
        return Trajectory(self.dt, out)


@dataclass(frozen=True)
class OrientedBox:
    """Rectangle with pose; extents are half sizes along local x / y."""

    center: Pose2
    half_length: float
    half_width: float

    def __post_init__(self):
        if self.half_length <= 0 or self.half_width <= 0:
            raise ValueError("box extents must be positive")

    def params(self) -> np.ndarray:
        c = self.center
        return np.array([c.x, c.y, c.heading, self.half_length, self.half_width])

    def corners(self) -> np.ndarray:
        return box_corners(self.params()[None, :])[0]


def box_corners(params: np.ndarray) -> np.ndarray:
    """Corner coordinates (N, 4, 2) for box parameter rows (N, 5)."""
    params = np.asarray(params, dtype=np.float64)
    c, s = np.cos(params[:, 2]), np.sin(params[:, 2])
    hl, hw = params[:, 3], params[:, 4]
    local = np.array([[1, 1], [1, -1], [-1, -1], [-1, 1]], dtype=np.float64)
    lx = local[None, :, 0] * hl[:, None]
    ly = local[None, :, 1] * hw[:, None]
    out = np.empty((params.shape[0], 4, 2))
    out[:, :, 0] = params[:, 0, None] + c[:, None] * lx - s[:, None] * ly
    out[:, :, 1] = params[:, 1, None] + s[:, None] * lx + c[:, None] * ly
    return out


class Polyline:
    """Ordered vertex chain; vertex order defines the travel direction."""

    __slots__ = ("vertices", "cum_s")

    def __init__(self, vertices: np.ndarray):
        vertices = np.array(vertices, dtype=np.float64)
        if vertices.ndim != 2 or vertices.shape[1] != 2 or vertices.shape[0] < 2:
            raise ValueError("polyline needs at least 2 (x, y) vertices")
        seg = np.diff(vertices, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seg_len == 0.0):
            raise ValueError("consecutive polyline vertices must be distinct")
        vertices.setflags(write=False)
        self.vertices = vertices
        cum = np.concatenate([[0.0], np.cumsum(seg_len)])
        cum.setflags(write=False)
        self.cum_s = cum

    @property
    def length(self) -> float:
        return float(self.cum_s[-1])

    def project(self, points: np.ndarray) -> np.ndarray:
        """(arclength, signed lateral, tangent heading) rows per query point."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return _accel.project_polyline(points, self.vertices, self.cum_s)

    def point_at(self, s: float) -> tuple[float, float, float]:
        """Position and tangent heading at (clamped) arclength ``s``."""
        s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self.cum_s, s, side="right") - 1)
        i = min(i, len(self.cum_s) - 2)
        t = (s - self.cum_s[i]) / (self.cum_s[i + 1] - self.cum_s[i])
        p = self.vertices[i] + t * (self.vertices[i + 1] - self.vertices[i])
        d = self.vertices[i + 1] - self.vertices[i]
        return float(p[0]), float(p[1]), math.atan2(d[1], d[0])


class Polygon:
    """Simple counterclockwise ring, implicitly closed."""

    __slots__ = ("ring",)

    def __init__(self, ring: np.ndarray):
        ring = np.array(ring, dtype=np.float64)
        if ring.ndim != 2 or ring.shape[1] != 2 or ring.shape[0] < 3:
            raise ValueError("polygon needs at least 3 (x, y) vertices")
        if _signed_area(ring) <= 0:
            raise ValueError("polygon ring must be counterclockwise")
        if _self_intersects(ring):
            raise ValueError("polygon ring must be simple")
        ring.setflags(write=False)
        self.ring = ring

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boundary-inclusive containment flags for (N, 2) query points."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return _accel.points_in_polygon(points, self.ring)


def _signed_area(ring: np.ndarray) -> float:
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _self_intersects(ring: np.ndarray) -> bool:
    n = ring.shape[0]
    if n < 4:
        return False
    starts, ends = ring, np.roll(ring, -1, axis=0)
    i_idx, j_idx = np.triu_indices(n, k=2)
    keep = ~((i_idx == 0) & (j_idx == n - 1))  # first and last edges are adjacent
    i_idx, j_idx = i_idx[keep], j_idx[keep]
    p1, p2 = starts[i_idx], ends[i_idx]
    q1, q2 = starts[j_idx], ends[j_idx]

    def cross(a, b, c):
        return (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])

    def on_seg(a, b, c):
        return (
            (np.minimum(a[:, 0], b[:, 0]) <= c[:, 0])
            & (c[:, 0] <= np.maximum(a[:, 0], b[:, 0]))
            & (np.minimum(a[:, 1], b[:, 1]) <= c[:, 1])
            & (c[:, 1] <= np.maximum(a[:, 1], b[:, 1]))
        )

    d1, d2 = cross(q1, q2, p1), cross(q1, q2, p2)
    d3, d4 = cross(p1, p2, q1), cross(p1, p2, q2)
    proper = (
        ((d1 > 0) != (d2 > 0))
        & ((d3 > 0) != (d4 > 0))
        & (d1 != 0) & (d2 != 0) & (d3 != 0) & (d4 != 0)
    )
    touch = (
        ((d1 == 0) & on_seg(q1, q2, p1))
        | ((d2 == 0) & on_seg(q1, q2, p2))
        | ((d3 == 0) & on_seg(p1, p2, q1))
        | ((d4 == 0) & on_seg(p1, p2, q2))
    )
    return bool(proper.any() or touch.any())


def segments_intersect(p1, p2, q1, q2) -> bool:
    """True iff segments [p1,p2] and [q1,q2] intersect (touching included)."""

    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    def on_seg(a, b, c):
        return (
            min(a[0], b[0]) <= c[0] <= max(a[0], b[0])
            and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])
        )

    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 != 0 and d2 != 0 and d3 != 0 and d4 != 0:
        return True
    if d1 == 0 and on_seg(q1, q2, p1):
        return True
    if d2 == 0 and on_seg(q1, q2, p2):
        return True
    if d3 == 0 and on_seg(p1, p2, q1):
        return True
    if d4 == 0 and on_seg(p1, p2, q2):
        return True
    return False


def obb_overlap(a: OrientedBox, b: OrientedBox) -> bool:
    """Separating-axis rectangle intersection; shared edges overlap."""
    return bool(_accel.sat_pairs(a.params()[None, :], b.params()[None, :])[0])


def obb_overlap_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorized overlap for matched (N, 5) box parameter rows."""
    return _accel.sat_pairs(a, b)


def point_in_polygon(p, poly: Polygon) -> bool:
    """Boundary-inclusive containment of a single point."""
    return bool(poly.contains(np.asarray(p, dtype=np.float64)[None, :])[0])


def project_to_polyline(p, line: Polyline) -> tuple[float, float, float]:
    """Closest-point (arclength, signed lateral offset, tangent heading).

    Lateral offset is positive to the left of the travel direction; distance
    ties resolve to the smaller arclength.
    """
    row = line.project(np.asarray(p, dtype=np.float64)[None, :])[0]
    return float(row[0]), float(row[1]), float(row[2])


def interp_headings(t_out: np.ndarray, t_in: np.ndarray, headings: np.ndarray) -> np.ndarray:
    """Shortest-arc linear interpolation of heading samples."""
    unwrapped = np.unwrap(headings)
    return normalize_angle(np.interp(t_out, t_in, unwrapped))


def resample_trajectory(traj: Trajectory, dt_out: float, horizon: float) -> Trajectory:
    """Resample to period ``dt_out`` over [0, horizon].

    Positions interpolate linearly, headings along the shortest arc.  The
    identity resample (matching dt and horizon) returns the input unchanged.
    """
    if not dt_out > 0:
        raise ValueError("dt_out must be positive")
    if horizon > traj.duration + 1e-9:
        raise HorizonExceedsData(
            f"horizon {horizon} s exceeds trajectory duration {traj.duration} s"
        )
    n_out = int(round(horizon / dt_out)) + 1
    if n_out < 2:
        raise ValueError("horizon must cover at least one output step")
    if dt_out == traj.dt and n_out == len(traj):
        return traj
    t_out = np.arange(n_out) * dt_out
    t_in = np.arange(len(traj)) * traj.dt
    out = np.empty((n_out, 3))
    out[:, 0] = np.interp(t_out, t_in, traj.waypoints[:, 0])
    out[:, 1] = np.interp(t_out, t_in, traj.waypoints[:, 1])
    out[:, 2] = interp_headings(t_out, t_in, traj.headings)
    return Trajectory(dt_out, out)


def refit_headings(xy: np.ndarray, fallback: float = 0.0) -> np.ndarray:
    """Headings from position finite differences; stationary spans keep the
    previous heading (``fallback`` until the first motion)."""
    xy = np.asarray(xy, dtype=np.float64)
    n = xy.shape[0]
    diffs = np.empty((n, 2))
    diffs[1:-1] = xy[2:] - xy[:-2]
    diffs[0] = xy[1] - xy[0]
    diffs[-1] = xy[-1] - xy[-2]
    headings = np.empty(n)
    prev = fallback
    for i in range(n):
        dx, dy = diffs[i]
        if dx * dx + dy * dy > 1e-12:
            prev = math.atan2(dy, dx)
        headings[i] = prev
    return headings


@dataclass
class DynamicsProfile:
    """Per-step motion derivatives; arrays share the trajectory length."""

    speed: np.ndarray
    accel: np.ndarray
    jerk: np.ndarray
    yaw_rate: np.ndarray


def _central_with_replicated_ends(x: np.ndarray, dt: float) -> np.ndarray:
    out = np.empty_like(x)
    out[1:-1] = (x[2:] - x[:-2]) / (2.0 * dt)
    out[0] = out[1]
    out[-1] = out[-2]
    return out


def dynamics_profile(traj: Trajectory) -> DynamicsProfile:
    """Speed / longitudinal accel / jerk / yaw rate per waypoint.

    Central differences in the interior; speed uses one-sided differences at
    the ends, higher derivatives replicate the nearest interior value there.
    """
    if len(traj) < 4:
        raise TrajectoryTooShort("dynamics profile needs at least 4 waypoints")
    dt = traj.dt
    xy = traj.xy
    vel = np.empty_like(xy)
    vel[1:-1] = (xy[2:] - xy[:-2]) / (2.0 * dt)
    vel[0] = (xy[1] - xy[0]) / dt
    vel[-1] = (xy[-1] - xy[-2]) / dt
    speed = np.hypot(vel[:, 0], vel[:, 1])
    accel = _central_with_replicated_ends(speed, dt)
    jerk = _central_with_replicated_ends(accel, dt)
    yaw_rate = _central_with_replicated_ends(np.unwrap(traj.headings), dt)
    return DynamicsProfile(speed=speed, accel=accel, jerk=jerk, yaw_rate=yaw_rate)
