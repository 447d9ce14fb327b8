"""Scenario model, seeded procedural generation, splits, serialization.

Generation factorizes geometry from appearance: every geometric field is a
deterministic function of ``(geometry_seed, GeneratorConfig)`` alone, the
style is a pure tag.  Two scenarios built from the same seed with different
styles are bit-identical except for that tag.

Map families: straight corridor, constant-curvature arc, and a signalized
intersection.  The expert trajectory comes from a scripted driver
(pure-pursuit lateral, IDM longitudinal with comfort clamps); seeds whose
expert collides, leaves the road, runs a red light, or breaks comfort bounds
are rejected and regenerated from a derived seed.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    GenerationFailed,
    InvalidFraction,
    SchemaVersionMismatch,
    ValidationError,
)
from .geom import (
    Polygon,
    Polyline,
    Pose2,
    Trajectory,
    box_corners,
    dynamics_profile,
    normalize_angle,
    obb_overlap_rows,
)

SCHEMA_VERSION = 1

DEFAULT_STYLE_NAMES = (
    "origin",
    "heavy_rain",
    "heavy_snow",
    "dawn_sunrise",
    "dusk_sunset",
    "light_dust",
    "vintage_photo",
    "digital_noise",
    "motion_blur",
    "toy_render",
    "dappled_light",
)

GOAL_COMMANDS = ("left", "straight", "right")


@dataclass(frozen=True)
class StyleId:
    """Appearance style tag; id 0 is the origin (unstyled) reference."""

    id: int
    name: str


class StyleRegistry:
    def __init__(self, names=DEFAULT_STYLE_NAMES):
        if not names or names[0] != "origin":
            raise ConfigError("style registry must start with 'origin'")
        if len(set(names)) != len(names):
            raise ConfigError("style names must be unique")
        self.styles = tuple(StyleId(i, n) for i, n in enumerate(names))

    def __len__(self) -> int:
        return len(self.styles)

    def __iter__(self):
        return iter(self.styles)

    @property
    def origin(self) -> StyleId:
        return self.styles[0]

    def non_origin(self) -> tuple[StyleId, ...]:
        return self.styles[1:]

    def by_id(self, i: int) -> StyleId:
        if not 0 <= i < len(self.styles):
            raise ValidationError(f"style id {i} outside registry of size {len(self.styles)}")
        return self.styles[i]

    def by_name(self, name: str) -> StyleId:
        for s in self.styles:
            if s.name == name:
                return s
        raise ValidationError(f"unknown style {name!r}")


@dataclass
class Agent:
    """Traffic participant with a logged motion over the scenario horizon."""

    kind: str  # "vehicle" | "pedestrian"
    half_length: float
    half_width: float
    trajectory: Trajectory

    def box_rows(self) -> np.ndarray:
        """Per-step box parameter rows (T, 5)."""
        wp = self.trajectory.waypoints
        rows = np.empty((wp.shape[0], 5))
        rows[:, :3] = wp
        rows[:, 3] = self.half_length
        rows[:, 4] = self.half_width
        return rows


@dataclass
class TrafficLightState:
    stop_line: Polyline
    phase: np.ndarray  # 0 = red, 1 = green, one entry per scenario step

    def is_red(self, step: int) -> bool:
        return self.phase[step] == 0


@dataclass
class Scenario:
    geometry_seed: int
    style: StyleId
    drivable: list[Polygon]
    centerlines: list[Polyline]
    lights: list[TrafficLightState]
    agents: list[Agent]
    ego_history: Trajectory
    ego_half_length: float
    ego_half_width: float
    expert: Trajectory
    goal_command: str
    route_index: int  # centerline the expert follows (used by progress metric)

    @property
    def n_steps(self) -> int:
        return len(self.expert)

    @property
    def dt(self) -> float:
        return self.expert.dt

    @property
    def current_pose(self) -> Pose2:
        return self.ego_history.pose(len(self.ego_history) - 1)

    @property
    def route(self) -> Polyline:
        return self.centerlines[self.route_index]

    def ego_box_rows(self, traj: Trajectory) -> np.ndarray:
        rows = np.empty((len(traj), 5))
        rows[:, :3] = traj.waypoints
        rows[:, 3] = self.ego_half_length
        rows[:, 4] = self.ego_half_width
        return rows

    def validate(self):
        if self.goal_command not in GOAL_COMMANDS:
            raise ValidationError(f"bad goal command {self.goal_command!r}")
        if not np.array_equal(self.expert.waypoints[0], self.ego_history.waypoints[-1]):
            raise ValidationError("expert must start at the last history pose")
        if not 0 <= self.route_index < len(self.centerlines):
            raise ValidationError("route index outside centerline list")
        for light in self.lights:
            if len(light.phase) != self.n_steps:
                raise ValidationError("light phase length must match scenario steps")
        for agent in self.agents:
            if agent.trajectory.duration < self.expert.duration - 1e-9:
                raise ValidationError("agent log shorter than scenario horizon")
            if agent.kind not in ("vehicle", "pedestrian"):
                raise ValidationError(f"bad agent kind {agent.kind!r}")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class GeneratorConfig:
    horizon: float = 4.0
    dt: float = 0.1
    history: float = 2.0
    lane_width: tuple[float, float] = (3.3, 3.9)
    shoulder: float = 0.3
    desired_speed: tuple[float, float] = (6.0, 14.0)
    family_weights: tuple[float, float, float] = (0.40, 0.32, 0.28)  # straight, arc, intersection
    arc_radius: tuple[float, float] = (45.0, 110.0)
    p_lead: float = 0.55
    p_pedestrian: float = 0.30
    p_oncoming: float = 0.35
    p_cross_traffic: float = 0.7
    ego_half_length: float = 2.3
    ego_half_width: float = 1.0
    max_agents: int = 4
    max_retries: int = 25
    # scripted driver limits (inside the history-comfort envelope)
    idm_time_headway: float = 1.5
    idm_min_gap: float = 3.0
    idm_accel: float = 1.5
    idm_decel: float = 1.8
    accel_clamp: tuple[float, float] = (-2.2, 1.5)
    jerk_limit: float = 3.0
    yaw_rate_limit: float = 0.85
    lat_accel_limit: float = 1.8

    def validate(self):
        if self.horizon <= 0 or self.dt <= 0 or self.history <= 0:
            raise ConfigError("horizon, dt, history must be positive")
        if self.lane_width[0] <= 2.0 * self.ego_half_width:
            raise ConfigError("lane width must exceed vehicle width")
        if self.max_agents < 1:
            raise ConfigError("config must allow at least one agent")
        if abs(sum(self.family_weights) - 1.0) > 1e-9:
            raise ConfigError("family weights must sum to 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt)) + 1

    @property
    def n_history(self) -> int:
        return int(round(self.history / self.dt)) + 1


# ---------------------------------------------------------------------------
# scripted expert driver
# ---------------------------------------------------------------------------

@dataclass
class _Obstacle:
    kind: str  # "vehicle" | "pedestrian" | "stopline"
    positions: np.ndarray | None  # (n_total, 2) or None for stop lines
    speeds: np.ndarray | None  # along own heading
    headings: np.ndarray | None
    half_length: float
    stop_s: float = 0.0
    red_until_step: np.ndarray | None = None  # bool per sim step: red now?


def _route_curvature(route: Polyline) -> np.ndarray:
    v = route.vertices
    seg = np.diff(v, axis=0)
    headings = np.arctan2(seg[:, 1], seg[:, 0])
    kappa = np.zeros(len(v))
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    dh = normalize_angle(np.diff(headings))
    ds = 0.5 * (seg_len[:-1] + seg_len[1:])
    kappa[1:-1] = np.abs(dh) / np.maximum(ds, 1e-6)
    return kappa


def _drive_route(
    route: Polyline,
    cfg: GeneratorConfig,
    v_desired: float,
    start_s: float,
    start_v: float,
    obstacles: list[_Obstacle],
    n_total: int,
) -> np.ndarray:
    """Simulate the scripted driver along ``route``; returns (n_total, 3) poses."""
    dt = cfg.dt
    kappa = _route_curvature(route)
    cum_s = route.cum_s
    x, y, h = route.point_at(start_s)
    v = start_v
    a_prev = 0.0
    out = np.empty((n_total, 3))
    sqrt_ab = math.sqrt(cfg.idm_accel * cfg.idm_decel)
    for step in range(n_total):
        out[step] = (x, y, h)
        s_here, _, _ = _project_scalar(route, x, y)
        # curvature-limited speed over the stopping window ahead
        window = v * 2.5 + 8.0
        lo = np.searchsorted(cum_s, s_here)
        hi = np.searchsorted(cum_s, s_here + window)
        k_max = float(kappa[max(lo - 1, 0) : hi + 1].max()) if hi > lo - 1 else 0.0
        v_curve = v_desired
        if k_max > 1e-6:
            v_curve = min(
                v_desired,
                math.sqrt(cfg.lat_accel_limit / k_max),
                cfg.yaw_rate_limit / k_max,
            )
        v0_eff = max(v_curve, 0.5)
        # IDM against the nearest relevant obstacle
        accel = cfg.idm_accel * (1.0 - (max(v, 0.0) / v0_eff) ** 4)
        for obs in obstacles:
            gap, closing = _obstacle_gap(route, obs, step, s_here, v, cfg)
            if gap is None:
                continue
            s_star = cfg.idm_min_gap + v * cfg.idm_time_headway + v * closing / (2.0 * sqrt_ab)
            a_obs = cfg.idm_accel * (
                1.0 - (max(v, 0.0) / v0_eff) ** 4 - (s_star / max(gap, 0.3)) ** 2
            )
            accel = min(accel, a_obs)
        accel = min(max(accel, cfg.accel_clamp[0]), cfg.accel_clamp[1])
        accel = min(max(accel, a_prev - cfg.jerk_limit * dt), a_prev + cfg.jerk_limit * dt)
        a_prev = accel
        # pure pursuit steering
        lookahead = min(max(0.7 + 0.45 * v, 2.0), 9.0)
        tx, ty, _ = route.point_at(s_here + lookahead)
        alpha = normalize_angle(math.atan2(ty - y, tx - x) - h)
        yaw_rate = 2.0 * v * math.sin(alpha) / lookahead
        yaw_rate = min(max(yaw_rate, -cfg.yaw_rate_limit), cfg.yaw_rate_limit)
        if v < 0.3:
            yaw_rate = 0.0
        # integrate
        x += v * math.cos(h) * dt
        y += v * math.sin(h) * dt
        h = normalize_angle(h + yaw_rate * dt)
        v = max(0.0, v + accel * dt)
    return out


def _project_scalar(route: Polyline, x: float, y: float):
    row = route.project(np.array([[x, y]]))[0]
    return float(row[0]), float(row[1]), float(row[2])


def _obstacle_gap(route, obs: _Obstacle, step, s_here, v, cfg):
    """(gap, closing_speed) to an obstacle ahead on the route, else (None, None)."""
    if obs.kind == "stopline":
        if obs.red_until_step is not None and not obs.red_until_step[step]:
            return None, None
        gap = obs.stop_s - s_here - cfg.ego_half_length - 0.8
        if gap < -1.0:
            return None, None
        return max(gap, 0.05), v
    px, py = obs.positions[step]
    s_obs, lat, tangent = _project_scalar(route, px, py)
    if s_obs <= s_here:
        return None, None
    lat_limit = 2.0 if obs.kind == "vehicle" else 2.6
    if abs(lat) > lat_limit:
        return None, None
    v_along = obs.speeds[step] * math.cos(obs.headings[step] - tangent)
    if obs.kind == "pedestrian":
        v_along = 0.0  # treat as a static blocker while in the corridor
    gap = s_obs - s_here - cfg.ego_half_length - obs.half_length
    if gap <= 0:
        gap = 0.05
    return gap, v - v_along


# ---------------------------------------------------------------------------
# map families
# ---------------------------------------------------------------------------

def _rect_ring(x0, x1, y0, y1) -> Polygon:
    return Polygon([(x0, y0), (x1, y0), (x1, y1), (x0, y1)])


def _arc_points(center, radius, phi0, phi1, step=0.035) -> np.ndarray:
    n = max(int(abs(phi1 - phi0) / step) + 2, 2)
    phi = np.linspace(phi0, phi1, n)
    return np.stack(
        [center[0] + radius * np.sin(phi), center[1] - radius * np.cos(phi)], axis=1
    )


@dataclass
class _Draft:
    drivable: list
    centerlines: list
    lights: list
    route_index: int
    goal: str
    obstacles: list
    agent_specs: list  # (kind, hl, hw, positions (n_total,2), headings (n_total,))
    v_desired: float
    start_s: float
    start_v: float


def _build_straight(rng, cfg: GeneratorConfig, n_total: int) -> _Draft:
    w = rng.uniform(*cfg.lane_width)
    v0 = rng.uniform(*cfg.desired_speed)
    x0, x1 = -40.0, 180.0
    drivable = [_rect_ring(x0, x1, -w / 2 - cfg.shoulder, 1.5 * w + cfg.shoulder)]
    ego_lane = Polyline([(x0, 0.0), (x1, 0.0)])
    oncoming = Polyline([(x1, w), (x0, w)])
    centerlines = [ego_lane, oncoming]
    obstacles: list[_Obstacle] = []
    agent_specs = []
    t_all = np.arange(n_total) * cfg.dt - cfg.history

    start_x = 0.0
    if rng.uniform() < cfg.p_lead:
        gap0 = rng.uniform(22.0, 50.0) + 1.2 * v0
        v_lead = v0 * rng.uniform(0.45, 0.85)
        decel = rng.uniform(0.0, 0.5) if rng.uniform() < 0.4 else 0.0
        speeds = np.maximum(v_lead - decel * np.maximum(t_all, 0.0), 0.0)
        xs = start_x + gap0 + np.concatenate([[0.0], np.cumsum(speeds[:-1] * cfg.dt)])
        pos = np.stack([xs, np.zeros(n_total)], axis=1)
        headings = np.zeros(n_total)
        agent_specs.append(("vehicle", 2.3, 1.0, pos, headings, speeds))
        obstacles.append(_Obstacle("vehicle", pos, speeds, headings, 2.3))
    if rng.uniform() < cfg.p_pedestrian:
        x_ped = start_x + v0 * rng.uniform(3.5, 5.5) + 8.0
        side = 1.0 if rng.uniform() < 0.5 else -1.0
        if side > 0:
            y_start = 1.5 * w + cfg.shoulder + rng.uniform(0.5, 2.0)
        else:
            y_start = -w / 2 - cfg.shoulder - rng.uniform(0.5, 2.0)
        t_start = rng.uniform(-1.5, 1.0)
        speed = rng.uniform(1.0, 1.5)
        walk = np.clip(t_all - t_start, 0.0, None) * speed * (-side)
        ys = y_start + walk
        pos = np.stack([np.full(n_total, x_ped), ys], axis=1)
        headings = np.full(n_total, math.pi / 2 * (-side))
        speeds = np.where(t_all >= t_start, speed, 0.0)
        agent_specs.append(("pedestrian", 0.3, 0.3, pos, headings, speeds))
        obstacles.append(_Obstacle("pedestrian", pos, speeds, headings, 0.3))
    if rng.uniform() < cfg.p_oncoming:
        x_onc = rng.uniform(70.0, 140.0)
        v_onc = rng.uniform(4.0, 9.0)
        xs = x_onc - v_onc * (t_all - t_all[0])
        pos = np.stack([xs, np.full(n_total, w)], axis=1)
        headings = np.full(n_total, math.pi)
        speeds = np.full(n_total, v_onc)
        agent_specs.append(("vehicle", 2.3, 1.0, pos, headings, speeds))
        obstacles.append(_Obstacle("vehicle", pos, speeds, headings, 2.3))

    return _Draft(
        drivable=drivable,
        centerlines=centerlines,
        lights=[],
        route_index=0,
        goal="straight",
        obstacles=obstacles,
        agent_specs=agent_specs,
        v_desired=v0,
        start_s=40.0 + start_x,
        start_v=v0 * rng.uniform(0.7, 1.0),
    )


def _build_arc(rng, cfg: GeneratorConfig, n_total: int) -> _Draft:
    w = rng.uniform(*cfg.lane_width)
    v0 = rng.uniform(*cfg.desired_speed)
    radius = rng.uniform(*cfg.arc_radius)
    left = rng.uniform() < 0.5
    length = 170.0
    phi_span = length / radius
    center = (0.0, radius)
    # ego lane arc from 30 m behind the start
    phi0, phi1 = -30.0 / radius, phi_span
    ego_pts = _arc_points(center, radius, phi0, phi1)
    oncoming_pts = _arc_points(center, radius - w, phi1, phi0)
    inner = radius - w - w / 2 - cfg.shoulder
    outer = radius + w / 2 + cfg.shoulder
    # outer edge forward then inner edge backward keeps the ring CCW
    ring = np.concatenate(
        [_arc_points(center, outer, phi0, phi1), _arc_points(center, inner, phi1, phi0)]
    )
    if not left:  # mirror across the x-axis
        for arr in (ego_pts, oncoming_pts, ring):
            arr[:, 1] *= -1.0
        ring = ring[::-1]
    drivable = [Polygon(ring)]
    centerlines = [Polyline(ego_pts), Polyline(oncoming_pts)]
    obstacles: list[_Obstacle] = []
    agent_specs = []
    t_all = np.arange(n_total) * cfg.dt - cfg.history
    route = centerlines[0]

    if rng.uniform() < cfg.p_lead:
        gap0 = rng.uniform(22.0, 45.0) + 1.2 * v0
        v_lead = v0 * rng.uniform(0.5, 0.85)
        s_lead = 30.0 + gap0 + v_lead * (t_all - t_all[0])
        pts = np.array([route.point_at(s) for s in s_lead])
        pos = pts[:, :2]
        headings = pts[:, 2]
        speeds = np.full(n_total, v_lead)
        agent_specs.append(("vehicle", 2.3, 1.0, pos, headings, speeds))
        obstacles.append(_Obstacle("vehicle", pos, speeds, headings, 2.3))

    return _Draft(
        drivable=drivable,
        centerlines=centerlines,
        lights=[],
        route_index=0,
        goal="left" if left else "right",
        obstacles=obstacles,
        agent_specs=agent_specs,
        v_desired=v0,
        start_s=30.0,
        start_v=v0 * rng.uniform(0.7, 1.0),
    )


def _build_intersection(rng, cfg: GeneratorConfig, n_total: int) -> _Draft:
    w = rng.uniform(*cfg.lane_width)
    v0 = rng.uniform(6.0, 11.0)
    b = w + 1.5  # half-extent of the crossing box
    app = 90.0
    drivable = [
        _rect_ring(-app, app, -w / 2 - cfg.shoulder, 1.5 * w + cfg.shoulder),
        _rect_ring(-w - cfg.shoulder, w + cfg.shoulder, -app, app),
    ]
    goal = ("straight", "left", "right")[int(rng.integers(3))]
    # route: approach along y=0, optional turn arc, exit on the target lane
    if goal == "straight":
        route_pts = np.array([(-app, 0.0), (app, 0.0)])
    elif goal == "left":
        r = w / 2 + b
        turn = _arc_points((-b, r), r, 0.0, math.pi / 2)  # ends at (w/2, r) heading +y
        route_pts = np.concatenate([[(-app, 0.0)], turn, [(w / 2, app)]])
    else:
        r = b - w / 2
        phi = np.linspace(0.0, math.pi / 2, 40)
        turn = np.stack([-b + r * np.sin(phi), -r + r * np.cos(phi)], axis=1)
        route_pts = np.concatenate([[(-app, 0.0)], turn, [(-w / 2, -app)]])
    route = Polyline(_dedupe(route_pts))
    oncoming = Polyline([(app, w), (-app, w)])
    northbound = Polyline([(w / 2, -app), (w / 2, app)])
    southbound = Polyline([(-w / 2, app), (-w / 2, -app)])
    centerlines = [route, oncoming, northbound, southbound]

    stop_x = -b - 1.0
    stop_line = Polyline([(stop_x, -w / 2 - 0.3), (stop_x, w / 2 + 0.3)])
    n_steps = cfg.n_steps
    case = rng.uniform()
    if case < 0.40:
        t_green = 0.0  # green throughout
    elif case < 0.80:
        t_green = rng.uniform(0.8, 2.4)  # red, then green at t_green
    else:
        t_green = math.inf  # red throughout
    step_times = np.arange(n_steps) * cfg.dt
    phase = (step_times >= t_green).astype(np.int64)
    red_now = np.arange(n_total) * cfg.dt - cfg.history < t_green
    lights = [TrafficLightState(stop_line=stop_line, phase=phase)]

    obstacles: list[_Obstacle] = [
        _Obstacle("stopline", None, None, None, 0.0, stop_s=0.0, red_until_step=red_now)
    ]
    agent_specs = []
    t_all = np.arange(n_total) * cfg.dt - cfg.history
    if rng.uniform() < cfg.p_cross_traffic:
        v_cross = rng.uniform(6.0, 9.0)
        traverse = (2.0 * b + 5.0) / v_cross
        latest_entry = min(t_green, 4.0) - traverse - 0.4
        if t_green > 0.0 and latest_entry > -1.8:
            # traverses the box entirely inside the ego's red window
            t_enter = rng.uniform(-1.8, latest_entry)
            moving = t_all >= t_enter
            ys = np.where(moving, (-b - 2.5) + v_cross * (t_all - t_enter), -b - 2.5)
            pos = np.stack([np.full(n_total, w / 2), ys], axis=1)
            headings = np.full(n_total, math.pi / 2)
            speeds = np.where(moving, v_cross, 0.0)
        else:
            # holds south of the box (their light is red)
            y_hold = -b - 3.5 - rng.uniform(0.0, 4.0)
            pos = np.stack([np.full(n_total, w / 2), np.full(n_total, y_hold)], axis=1)
            headings = np.full(n_total, math.pi / 2)
            speeds = np.zeros(n_total)
        agent_specs.append(("vehicle", 2.3, 1.0, pos, headings, speeds))
        obstacles.append(_Obstacle("vehicle", pos, speeds, headings, 2.3))

    # approach distance tuned so the ego nears the stop line within the window
    approach = v0 * (cfg.history + rng.uniform(0.6, 2.0))
    start_s = max(app + stop_x - approach, 5.0)

    return _Draft(
        drivable=drivable,
        centerlines=centerlines,
        lights=lights,
        route_index=0,
        goal=goal,
        obstacles=obstacles,
        agent_specs=agent_specs,
        v_desired=v0,
        start_s=start_s,
        start_v=v0 * rng.uniform(0.7, 0.95),
    )


def _dedupe(pts: np.ndarray) -> np.ndarray:
    out = [pts[0]]
    for p in pts[1:]:
        if np.hypot(p[0] - out[-1][0], p[1] - out[-1][1]) > 1e-9:
            out.append(p)
    return np.asarray(out)


# ---------------------------------------------------------------------------
# generation entry point
# ---------------------------------------------------------------------------

def generate_scenario(
    geometry_seed: int, style: StyleId, params: GeneratorConfig | None = None
) -> Scenario:
    """Deterministic scenario for (seed, params); style is a pure tag."""
    cfg = params or GeneratorConfig()
    cfg.validate()
    for attempt in range(cfg.max_retries):
        rng = np.random.default_rng(
            np.random.SeedSequence([0x5CE17A, int(geometry_seed), attempt])
        )
        scenario = _attempt_generate(rng, geometry_seed, style, cfg)
        if scenario is not None:
            return scenario
    raise GenerationFailed(
        f"seed {geometry_seed}: no valid scenario in {cfg.max_retries} attempts"
    )


def _attempt_generate(rng, geometry_seed, style, cfg: GeneratorConfig) -> Scenario | None:
    n_total = cfg.n_history + cfg.n_steps - 1
    family = rng.choice(3, p=np.asarray(cfg.family_weights))
    if family == 0:
        draft = _build_straight(rng, cfg, n_total)
    elif family == 1:
        draft = _build_arc(rng, cfg, n_total)
    else:
        draft = _build_intersection(rng, cfg, n_total)

    route = draft.centerlines[draft.route_index]
    # stop-line obstacle needs its arclength along the route
    for obs in draft.obstacles:
        if obs.kind == "stopline":
            light = draft.lights[0]
            mid = light.stop_line.vertices.mean(axis=0)
            obs.stop_s, _, _ = _project_scalar(route, mid[0], mid[1])

    poses = _drive_route(
        route, cfg, draft.v_desired, draft.start_s, draft.start_v, draft.obstacles, n_total
    )
    if not np.all(np.isfinite(poses)):
        return None

    history = Trajectory(cfg.dt, poses[: cfg.n_history])
    expert = Trajectory(cfg.dt, poses[cfg.n_history - 1 :])
    agents = [
        Agent(kind, hl, hw, Trajectory(cfg.dt, _agent_waypoints(pos, headings, cfg)))
        for kind, hl, hw, pos, headings, _ in draft.agent_specs
    ]
    scenario = Scenario(
        geometry_seed=int(geometry_seed),
        style=style,
        drivable=draft.drivable,
        centerlines=draft.centerlines,
        lights=draft.lights,
        agents=agents,
        ego_history=history,
        ego_half_length=cfg.ego_half_length,
        ego_half_width=cfg.ego_half_width,
        expert=expert,
        goal_command=draft.goal,
        route_index=draft.route_index,
    )
    if _expert_is_valid(scenario, poses, cfg):
        return scenario
    return None


def _agent_waypoints(pos, headings, cfg: GeneratorConfig) -> np.ndarray:
    start = cfg.n_history - 1
    wp = np.empty((pos.shape[0] - start, 3))
    wp[:, :2] = pos[start:]
    wp[:, 2] = headings[start:]
    return wp


def _expert_is_valid(s: Scenario, all_poses: np.ndarray, cfg: GeneratorConfig) -> bool:
    ego_rows = s.ego_box_rows(s.expert)
    # collision-free with margin
    for agent in s.agents:
        rows = agent.box_rows()
        rows[:, 3] += 0.15
        rows[:, 4] += 0.15
        if bool(obb_overlap_rows(ego_rows, rows).any()):
            return False
    # drivable-area compliant (all footprint corners, every step)
    corners = box_corners(ego_rows).reshape(-1, 2)
    inside = np.zeros(corners.shape[0], dtype=bool)
    for poly in s.drivable:
        inside |= poly.contains(corners)
    if not inside.all():
        return False
    # never crosses a stop line on red
    if not _expert_respects_lights(s):
        return False
    # stays near its route (lane-keeping headroom)
    lat = np.abs(s.route.project(s.expert.xy)[:, 1])
    if _sustained(lat > 0.45, int(0.9 / cfg.dt)):
        return False
    # comfort bounds over history + plan
    combined = Trajectory(cfg.dt, all_poses)
    prof = dynamics_profile(combined)
    if np.abs(prof.accel).max() > 2.3 or np.abs(prof.jerk).max() > 3.8:
        return False
    if np.abs(prof.yaw_rate).max() > 0.92:
        return False
    return True


def _expert_respects_lights(s: Scenario) -> bool:
    front = _front_points(s, s.expert)
    for light in s.lights:
        v = light.stop_line.vertices
        for step in range(1, len(s.expert)):
            if light.is_red(step) and _segment_hit(front[step - 1], front[step], v[0], v[-1]):
                return False
    return True


def _front_points(s: Scenario, traj: Trajectory) -> np.ndarray:
    wp = traj.waypoints
    out = np.empty((len(traj), 2))
    out[:, 0] = wp[:, 0] + s.ego_half_length * np.cos(wp[:, 2])
    out[:, 1] = wp[:, 1] + s.ego_half_length * np.sin(wp[:, 2])
    return out


def _segment_hit(p1, p2, q1, q2) -> bool:
    from .geom import segments_intersect

    return segments_intersect(p1, p2, q1, q2)


def _sustained(mask: np.ndarray, run: int) -> bool:
    count = 0
    for m in mask:
        count = count + 1 if m else 0
        if count > run:
            return True
    return False


# ---------------------------------------------------------------------------
# dataset split
# ---------------------------------------------------------------------------

@dataclass
class DatasetSplit:
    support_seeds: list[int]
    eval_seeds: list[int]
    seen_styles: list[StyleId]
    unseen_styles: list[StyleId]


def split_dataset(
    seeds: list[int],
    styles: StyleRegistry,
    support_fraction: float,
    seen_count: int,
    rng_seed: int,
) -> DatasetSplit:
    """Disjoint support/evaluation seed sets and seen/unseen style groups."""
    if not 0.0 < support_fraction < 1.0:
        raise InvalidFraction(f"support fraction {support_fraction} outside (0, 1)")
    non_origin = styles.non_origin()
    if not 0 < seen_count < len(non_origin):
        raise InvalidFraction(f"seen count {seen_count} outside (0, {len(non_origin)})")
    rng = np.random.default_rng(np.random.SeedSequence([0x59117, int(rng_seed)]))
    seeds = list(seeds)
    perm = rng.permutation(len(seeds))
    n_support = int(round(support_fraction * len(seeds)))
    support = sorted(seeds[i] for i in perm[:n_support])
    evaluation = sorted(seeds[i] for i in perm[n_support:])
    style_perm = rng.permutation(len(non_origin))
    seen = sorted((non_origin[i] for i in style_perm[:seen_count]), key=lambda s: s.id)
    unseen = sorted((non_origin[i] for i in style_perm[seen_count:]), key=lambda s: s.id)
    return DatasetSplit(support, evaluation, seen, unseen)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _traj_to_dict(t: Trajectory) -> dict:
    return {"dt": t.dt, "waypoints": t.waypoints.tolist()}


def _traj_from_dict(d: dict) -> Trajectory:
    return Trajectory(d["dt"], np.asarray(d["waypoints"], dtype=np.float64))


def scenario_to_dict(s: Scenario) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "geometry_seed": s.geometry_seed,
        "style": {"id": s.style.id, "name": s.style.name},
        "map": {
            "drivable": [p.ring.tolist() for p in s.drivable],
            "centerlines": [c.vertices.tolist() for c in s.centerlines],
        },
        "lights": [
            {"stop_line": l.stop_line.vertices.tolist(), "phase": l.phase.tolist()}
            for l in s.lights
        ],
        "agents": [
            {
                "kind": a.kind,
                "half_length": a.half_length,
                "half_width": a.half_width,
                "trajectory": _traj_to_dict(a.trajectory),
            }
            for a in s.agents
        ],
        "ego": {
            "half_length": s.ego_half_length,
            "half_width": s.ego_half_width,
            "goal": s.goal_command,
            "route_index": s.route_index,
            "history": _traj_to_dict(s.ego_history),
        },
        "expert": _traj_to_dict(s.expert),
    }


def scenario_from_dict(d: dict, registry: StyleRegistry | None = None) -> Scenario:
    registry = registry or StyleRegistry()
    if d.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"schema version {d.get('schema_version')} unsupported")
    try:
        style = registry.by_id(int(d["style"]["id"]))
        scenario = Scenario(
            geometry_seed=int(d["geometry_seed"]),
            style=style,
            drivable=[Polygon(np.asarray(r)) for r in d["map"]["drivable"]],
            centerlines=[Polyline(np.asarray(v)) for v in d["map"]["centerlines"]],
            lights=[
                TrafficLightState(
                    Polyline(np.asarray(l["stop_line"])),
                    np.asarray(l["phase"], dtype=np.int64),
                )
                for l in d["lights"]
            ],
            agents=[
                Agent(a["kind"], a["half_length"], a["half_width"], _traj_from_dict(a["trajectory"]))
                for a in d["agents"]
            ],
            ego_history=_traj_from_dict(d["ego"]["history"]),
            ego_half_length=d["ego"]["half_length"],
            ego_half_width=d["ego"]["half_width"],
            expert=_traj_from_dict(d["expert"]),
            goal_command=d["ego"]["goal"],
            route_index=int(d["ego"]["route_index"]),
        )
    except ValidationError:
        raise
    except (KeyError, ValueError, TypeError) as exc:
        raise ValidationError(str(exc)) from exc
    scenario.validate()
    return scenario


def write_scenario(s: Scenario, path):
    with open(path, "w") as fh:
        json.dump(scenario_to_dict(s), fh)


def read_scenario(path, registry: StyleRegistry | None = None) -> Scenario:
    with open(path) as fh:
        return scenario_from_dict(json.load(fh), registry)


def geometry_fingerprint(s: Scenario) -> str:
    """Hash of every field except the style tag."""
    d = scenario_to_dict(s)
    d["style"] = None
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()
