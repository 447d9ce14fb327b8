"""Open-loop and reactive rollout of an ego plan against scenario agents.

Rollouts are pure: identical inputs give bitwise-identical traces.  The ego
always follows its plan exactly; in reactive mode, background vehicles
re-plan their longitudinal motion each step with the intelligent-driver
car-following law while staying on their logged path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import HorizonMismatch, NonPositiveGap
from .geom import (
    Polyline,
    Trajectory,
    box_corners,
    obb_overlap_rows,
    resample_trajectory,
    segments_intersect,
)
from .scenario import Agent, Scenario

SIM_DT = 0.1
STATIONARY_SPEED = 0.05


@dataclass
class IdmParams:
    """Intelligent-driver car-following parameters (all positive)."""

    desired_speed: float = 10.0
    time_headway: float = 1.5
    min_gap: float = 2.0
    max_accel: float = 1.5
    comfort_decel: float = 2.0
    exponent: float = 4.0

    def __post_init__(self):
        for name in ("desired_speed", "time_headway", "min_gap", "max_accel", "comfort_decel", "exponent"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def idm_accel(speed: float, gap: float, closing_speed: float, p: IdmParams) -> float:
    """IDM acceleration a[1 - (v/v0)^d - (s*/s)^2], s* = s0 + vT + v dv / (2 sqrt(ab)).

    Clamped to [-2b, a]; the free-road limit is recovered as gap grows.
    """
    if gap <= 0:
        raise NonPositiveGap(f"gap must be positive, got {gap}")
    v = max(speed, 0.0)
    s_star = p.min_gap + v * p.time_headway + v * closing_speed / (
        2.0 * math.sqrt(p.max_accel * p.comfort_decel)
    )
    accel = p.max_accel * (1.0 - (v / p.desired_speed) ** p.exponent - (s_star / gap) ** 2)
    return min(max(accel, -2.0 * p.comfort_decel), p.max_accel)


@dataclass
class CollisionEvent:
    t: float
    agent_index: int
    at_fault: bool


@dataclass
class StoplineCrossing:
    t: float
    light_index: int
    phase: int  # 0 red, 1 green at the crossing step


@dataclass
class RolloutTrace:
    """Evidence consumed by the metric engine."""

    ego_states: Trajectory
    agent_states: list[Trajectory]
    agent_dims: list[tuple[float, float]]  # (half_length, half_width) per agent
    collision_events: list[CollisionEvent]
    offroad_steps: np.ndarray
    stopline_crossings: list[StoplineCrossing]
    ego_history: Trajectory
    ego_half_length: float
    ego_half_width: float

    @property
    def n_steps(self) -> int:
        return len(self.ego_states)

    @property
    def dt(self) -> float:
        return self.ego_states.dt


def trace_to_dict(trace: RolloutTrace) -> dict:
    """Serializable trace form (debugging and determinism checks)."""
    return {
        "ego": {"dt": trace.ego_states.dt, "waypoints": trace.ego_states.waypoints.tolist()},
        "agents": [
            {"dt": t.dt, "waypoints": t.waypoints.tolist()} for t in trace.agent_states
        ],
        "collisions": [
            {"t": e.t, "agent_index": e.agent_index, "at_fault": e.at_fault}
            for e in trace.collision_events
        ],
        "offroad_steps": trace.offroad_steps.tolist(),
        "stopline_crossings": [
            {"t": c.t, "light_index": c.light_index, "phase": c.phase}
            for c in trace.stopline_crossings
        ],
    }


# ---------------------------------------------------------------------------
# collision attribution
# ---------------------------------------------------------------------------

def at_fault_rule(ego_stationary: bool, rear_impact: bool, ego_speed: float, agent_closing_speed: float) -> bool:
    """Fault decision table: at fault unless stationary or rear-ended."""
    if ego_stationary:
        return False
    if rear_impact and ego_speed <= agent_closing_speed:
        return False
    return True


def attribute_collision(
    ego: Trajectory, agent_traj: Trajectory, agent: Agent, step: int, ego_half_length: float
) -> bool:
    """Apply the fault rule to a recorded overlap at ``step``."""
    dt = ego.dt
    ego_wp = ego.waypoints
    ag_wp = agent_traj.waypoints
    prev = max(step - 1, 0)
    denom = dt * max(step - prev, 1)
    ego_vel = (ego_wp[step, :2] - ego_wp[prev, :2]) / denom
    agent_vel = (ag_wp[step, :2] - ag_wp[prev, :2]) / denom
    ego_speed = float(np.hypot(*ego_vel))
    heading = ego_wp[step, 2]
    fwd = np.array([math.cos(heading), math.sin(heading)])
    rel = ag_wp[step, :2] - ego_wp[step, :2]
    rear_impact = float(rel @ fwd) <= -ego_half_length
    agent_closing = float(agent_vel @ fwd)
    return at_fault_rule(ego_speed < STATIONARY_SPEED, rear_impact, ego_speed, agent_closing)


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------

def _prepare_plan(s: Scenario, plan: Trajectory) -> Trajectory:
    if plan.duration > s.expert.duration + 1e-9:
        raise HorizonMismatch(
            f"plan covers {plan.duration} s but the scenario horizon is {s.expert.duration} s"
        )
    return resample_trajectory(plan, s.dt, plan.duration)


def _front_points(traj: Trajectory, half_length: float) -> np.ndarray:
    wp = traj.waypoints
    out = np.empty((len(traj), 2))
    out[:, 0] = wp[:, 0] + half_length * np.cos(wp[:, 2])
    out[:, 1] = wp[:, 1] + half_length * np.sin(wp[:, 2])
    return out


def _collect_events(s: Scenario, ego: Trajectory, agent_trajs: list[Trajectory]) -> RolloutTrace:
    n = len(ego)
    ego_rows = s.ego_box_rows(ego)

    collisions: list[CollisionEvent] = []
    for idx, (agent, traj) in enumerate(zip(s.agents, agent_trajs)):
        rows = np.empty((n, 5))
        rows[:, :3] = traj.waypoints[:n]
        rows[:, 3] = agent.half_length
        rows[:, 4] = agent.half_width
        hits = obb_overlap_rows(ego_rows, rows)
        if hits.any():
            step = int(np.argmax(hits))
            at_fault = attribute_collision(ego, traj, agent, step, s.ego_half_length)
            collisions.append(CollisionEvent(t=step * ego.dt, agent_index=idx, at_fault=at_fault))

    corners = box_corners(ego_rows).reshape(-1, 2)
    inside = np.zeros(corners.shape[0], dtype=bool)
    for poly in s.drivable:
        inside |= poly.contains(corners)
    offroad = np.flatnonzero(~inside.reshape(n, 4).all(axis=1))

    crossings: list[StoplineCrossing] = []
    front = _front_points(ego, s.ego_half_length)
    for li, light in enumerate(s.lights):
        verts = light.stop_line.vertices
        for k in range(1, n):
            hit = any(
                segments_intersect(front[k - 1], front[k], verts[j], verts[j + 1])
                for j in range(len(verts) - 1)
            )
            if hit:
                phase_idx = min(k, len(light.phase) - 1)
                crossings.append(
                    StoplineCrossing(t=k * ego.dt, light_index=li, phase=int(light.phase[phase_idx]))
                )
                break  # one crossing per light

    return RolloutTrace(
        ego_states=ego,
        agent_states=agent_trajs,
        agent_dims=[(a.half_length, a.half_width) for a in s.agents],
        collision_events=collisions,
        offroad_steps=offroad,
        stopline_crossings=crossings,
        ego_history=s.ego_history,
        ego_half_length=s.ego_half_length,
        ego_half_width=s.ego_half_width,
    )


def rollout_open_loop(s: Scenario, plan: Trajectory) -> RolloutTrace:
    """Ego follows the plan exactly; agents replay their logged motion."""
    ego = _prepare_plan(s, plan)
    n = len(ego)
    agent_trajs = [
        Trajectory(s.dt, a.trajectory.waypoints[:n].copy()) for a in s.agents
    ]
    return _collect_events(s, ego, agent_trajs)


def rollout_reactive(
    s: Scenario, plan: Trajectory, p: IdmParams, per_agent_desired_speed: bool = True
) -> RolloutTrace:
    """Logged-lane agents re-plan speed each step with IDM (ego included as leader)."""
    ego = _prepare_plan(s, plan)
    n = len(ego)

    paths: list[Polyline | None] = []
    speeds0: list[float] = []
    for a in s.agents:
        wp = a.trajectory.waypoints
        v0 = float(np.hypot(*(wp[1, :2] - wp[0, :2]))) / s.dt
        speeds0.append(v0)
        if a.kind != "vehicle":
            paths.append(None)
            continue
        pts = [wp[0, :2]]
        for q in wp[1:, :2]:
            if np.hypot(*(q - pts[-1])) > 1e-6:
                pts.append(q)
        if len(pts) < 2:
            paths.append(None)  # parked vehicle: replays its log
        else:
            # extend the path so fast agents do not run off its end
            pts = np.asarray(pts)
            tail = pts[-1] - pts[-2]
            tail = tail / np.hypot(*tail)
            pts = np.vstack([pts, pts[-1] + tail * 200.0])
            paths.append(Polyline(pts))

    arclengths = np.zeros(len(s.agents))
    velocities = np.array(speeds0)
    states = np.zeros((len(s.agents), n, 3))
    for idx, (a, path) in enumerate(zip(s.agents, paths)):
        if path is not None:
            row = path.project(a.trajectory.waypoints[0:1, :2])[0]
            arclengths[idx] = row[0]

    for k in range(n):
        # record current states
        for idx, (a, path) in enumerate(zip(s.agents, paths)):
            if path is None:
                states[idx, k] = a.trajectory.waypoints[min(k, len(a.trajectory) - 1)]
            else:
                x, y, h = path.point_at(arclengths[idx])
                states[idx, k] = (x, y, h)
        if k == n - 1:
            break
        # one IDM step per moving vehicle
        for idx, (a, path) in enumerate(zip(s.agents, paths)):
            if path is None:
                continue
            v = velocities[idx]
            v0 = max(speeds0[idx], 0.1) if per_agent_desired_speed else p.desired_speed
            params = IdmParams(
                desired_speed=v0,
                time_headway=p.time_headway,
                min_gap=p.min_gap,
                max_accel=p.max_accel,
                comfort_decel=p.comfort_decel,
                exponent=p.exponent,
            )
            gap, closing = _nearest_leader(
                s, ego, states, paths, arclengths, velocities, idx, k
            )
            if gap is None:
                accel = p.max_accel * (1.0 - (max(v, 0.0) / v0) ** p.exponent)
                accel = min(max(accel, -2.0 * p.comfort_decel), p.max_accel)
            else:
                accel = idm_accel(v, max(gap, 0.05), closing, params)
            velocities[idx] = max(0.0, v + accel * s.dt)
            arclengths[idx] += velocities[idx] * s.dt

    agent_trajs = [Trajectory(s.dt, states[i]) for i in range(len(s.agents))]
    return _collect_events(s, ego, agent_trajs)


def _nearest_leader(s, ego, states, paths, arclengths, velocities, idx, k):
    """Smallest (gap, closing speed) to any obstacle ahead on agent idx's path."""
    path = paths[idx]
    me_s = arclengths[idx]
    me = s.agents[idx]
    best_gap, best_closing = None, 0.0

    def consider(pos, speed_along, half_length):
        nonlocal best_gap, best_closing
        row = path.project(np.asarray(pos, dtype=np.float64)[None, :])[0]
        s_c, lat = row[0], row[1]
        if s_c <= me_s or abs(lat) > 2.0:
            return
        gap = s_c - me_s - me.half_length - half_length
        if gap <= 0:
            gap = 0.05
        if best_gap is None or gap < best_gap:
            best_gap = gap
            best_closing = velocities[idx] - speed_along

    # ego as a potential leader
    ek = min(k, len(ego) - 1)
    prev = max(ek - 1, 0)
    ego_speed = float(np.hypot(*(ego.waypoints[ek, :2] - ego.waypoints[prev, :2]))) / ego.dt if ek > 0 else 0.0
    row = path.project(ego.waypoints[ek : ek + 1, :2])[0]
    tangent = row[2]
    ego_along = ego_speed * math.cos(ego.waypoints[ek, 2] - tangent)
    consider(ego.waypoints[ek, :2], ego_along, s.ego_half_length)
    # other agents
    for j, other in enumerate(s.agents):
        if j == idx:
            continue
        pos = states[j, k, :2]
        if paths[j] is None:
            wp = other.trajectory.waypoints
            kj = min(k, len(other.trajectory) - 1)
            pj = max(kj - 1, 0)
            v_other = float(np.hypot(*(wp[kj, :2] - wp[pj, :2]))) / s.dt if kj > 0 else 0.0
            h_other = wp[kj, 2]
        else:
            v_other = velocities[j]
            h_other = states[j, k, 2]
        row = path.project(np.asarray(pos)[None, :])[0]
        along = v_other * math.cos(h_other - row[2])
        consider(pos, along, other.half_length)
    return best_gap, best_closing
