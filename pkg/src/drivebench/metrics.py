"""EPDMS: nine sub-metrics, the expert penalty filter, aggregation, drop rate.

Penalty terms (no-at-fault collision, drivable area, driving direction,
traffic lights) multiply; the remaining terms average under configurable
weights.  All thresholds live in :class:`MetricConfig`; scores are unit
fractions here and formatted as percentages only in reports.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ZeroOrigin, ZeroWeightSum
from .geom import Trajectory, dynamics_profile, obb_overlap_rows
from .scenario import Scenario
from .sim import RolloutTrace, rollout_open_loop

PENALTY_METRICS = ("nc", "dac", "ddc", "tlc")
WEIGHTED_METRICS = ("ttc", "ep", "lk", "hc", "ec")
ALL_METRICS = PENALTY_METRICS + WEIGHTED_METRICS


@dataclass
class SubMetricScores:
    nc: float = 1.0
    dac: float = 1.0
    ddc: float = 1.0
    tlc: float = 1.0
    ttc: float = 1.0
    ep: float = 1.0
    lk: float = 1.0
    hc: float = 1.0
    ec: float = 1.0

    def as_dict(self) -> dict:
        return {m: getattr(self, m) for m in ALL_METRICS}

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, m) for m in ALL_METRICS])

    def __post_init__(self):
        for m in ALL_METRICS:
            v = getattr(self, m)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{m} score {v} outside [0, 1]")


@dataclass
class EpdmsWeights:
    ttc: float = 5.0
    ep: float = 5.0
    lk: float = 2.0
    hc: float = 1.0
    ec: float = 1.0

    def as_dict(self) -> dict:
        return {m: getattr(self, m) for m in WEIGHTED_METRICS}

    def __post_init__(self):
        vals = [getattr(self, m) for m in WEIGHTED_METRICS]
        if any(v < 0 for v in vals):
            raise ValueError("weights must be nonnegative")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one weight must be positive")


@dataclass
class EpdmsResult:
    scores: SubMetricScores  # post-filter
    epdms: float


@dataclass
class MetricConfig:
    weights: EpdmsWeights = field(default_factory=EpdmsWeights)
    ttc_horizon: float = 1.0
    moving_speed: float = 0.1
    ddc_low: float = 2.0
    ddc_high: float = 6.0
    lk_offset: float = 0.5
    lk_duration: float = 1.0
    hc_accel: float = 2.4
    hc_jerk: float = 4.0
    hc_yaw_rate: float = 0.95
    hc_junction_window: float = 0.5
    ec_rms_accel: float = 1.0
    ec_shift_steps: int = 5
    ep_min_expert_progress: float = 0.1


# ---------------------------------------------------------------------------
# sub-metric scores
# ---------------------------------------------------------------------------

def score_nc(trace: RolloutTrace) -> float:
    """1.0 unless any at-fault collision occurred."""
    return 0.0 if any(e.at_fault for e in trace.collision_events) else 1.0


def score_dac(trace: RolloutTrace, s: Scenario) -> float:
    """1.0 iff every footprint corner stays in the drivable union at every step."""
    return 0.0 if trace.offroad_steps.size else 1.0


def _centerline_projections(trace: RolloutTrace, s: Scenario):
    """Per-step (lateral, tangent) of the nearest centerline."""
    pts = trace.ego_states.xy
    best_lat = None
    best_tan = None
    for line in s.centerlines:
        rows = line.project(pts)
        lat, tan = rows[:, 1], rows[:, 2]
        if best_lat is None:
            best_lat, best_tan = lat, tan
        else:
            closer = np.abs(lat) < np.abs(best_lat)
            best_lat = np.where(closer, lat, best_lat)
            best_tan = np.where(closer, tan, best_tan)
    return best_lat, best_tan


def score_ddc(trace: RolloutTrace, s: Scenario, cfg: MetricConfig | None = None) -> float:
    """Three-level score on distance driven against the lane direction."""
    cfg = cfg or MetricConfig()
    _, tangent = _centerline_projections(trace, s)
    xy = trace.ego_states.xy
    disp = np.diff(xy, axis=0)
    dist = np.hypot(disp[:, 0], disp[:, 1])
    moving = dist / trace.dt > cfg.moving_speed
    motion_heading = np.arctan2(disp[:, 1], disp[:, 0])
    against = np.cos(motion_heading - tangent[:-1]) < 0.0
    counter_dist = float(dist[moving & against].sum())
    if counter_dist <= cfg.ddc_low:
        return 1.0
    if counter_dist <= cfg.ddc_high:
        return 0.5
    return 0.0


def score_tlc(trace: RolloutTrace) -> float:
    """0.0 iff the ego front crossed a stop line on red."""
    return 0.0 if any(c.phase == 0 for c in trace.stopline_crossings) else 1.0


def _finite_velocities(traj: Trajectory) -> np.ndarray:
    xy = traj.xy
    vel = np.empty_like(xy)
    vel[:-1] = (xy[1:] - xy[:-1]) / traj.dt
    vel[-1] = vel[-2]
    return vel


def score_ttc(trace: RolloutTrace, cfg: MetricConfig | None = None) -> float:
    """1.0 iff constant-velocity projections over the horizon never overlap."""
    cfg = cfg or MetricConfig()
    if not trace.agent_states:
        return 1.0
    dt = trace.dt
    n = trace.n_steps
    ego_rows = np.empty((n, 5))
    ego_rows[:, :3] = trace.ego_states.waypoints
    ego_rows[:, 3] = trace.ego_half_length
    ego_rows[:, 4] = trace.ego_half_width
    ego_vel = _finite_velocities(trace.ego_states)
    offsets = np.arange(dt, cfg.ttc_horizon + dt / 2, dt)
    for agent_traj, half_len, half_wid in _agent_boxes(trace):
        rows = np.empty((n, 5))
        rows[:, :3] = agent_traj.waypoints[:n]
        rows[:, 3] = half_len
        rows[:, 4] = half_wid
        vel = _finite_velocities(agent_traj)[:n]
        for tau in offsets:
            e = ego_rows.copy()
            e[:, 0] += ego_vel[:, 0] * tau
            e[:, 1] += ego_vel[:, 1] * tau
            a = rows.copy()
            a[:, 0] += vel[:, 0] * tau
            a[:, 1] += vel[:, 1] * tau
            if bool(obb_overlap_rows(e, a).any()):
                return 0.0
    return 1.0


def _agent_boxes(trace: RolloutTrace):
    # trace.agent_states aligns with the scenario agent list
    for traj, dims in zip(trace.agent_states, trace.agent_dims):
        yield traj, dims[0], dims[1]


def score_ep(trace: RolloutTrace, s: Scenario, cfg: MetricConfig | None = None) -> float:
    """Ego progress along the route centerline relative to the expert's."""
    cfg = cfg or MetricConfig()
    route = s.route
    ego_s = route.project(trace.ego_states.xy)[:, 0]
    expert_s = route.project(s.expert.xy)[:, 0]
    expert_progress = max(float(expert_s[-1] - expert_s[0]), 0.0)
    if expert_progress < cfg.ep_min_expert_progress:
        return 1.0
    ego_progress = max(float(ego_s[-1] - ego_s[0]), 0.0)
    return min(max(ego_progress / expert_progress, 0.0), 1.0)


def score_lk(trace: RolloutTrace, s: Scenario, cfg: MetricConfig | None = None) -> float:
    """0.0 iff |lateral offset| exceeds the limit continuously for too long."""
    cfg = cfg or MetricConfig()
    lat, _ = _centerline_projections(trace, s)
    violating = np.abs(lat) > cfg.lk_offset
    max_run = int(round(cfg.lk_duration / trace.dt))
    count = 0
    for v in violating:
        count = count + 1 if v else 0
        if count > max_run:
            return 0.0
    return 1.0


def score_hc(trace: RolloutTrace, cfg: MetricConfig | None = None) -> float:
    """Comfort bounds over the plan and the history-plan junction window."""
    cfg = cfg or MetricConfig()
    hist = trace.ego_history.waypoints
    combined = Trajectory(trace.dt, np.concatenate([hist[:-1], trace.ego_states.waypoints]))
    prof = dynamics_profile(combined)
    junction = len(hist) - 1
    start = max(junction - int(round(cfg.hc_junction_window / trace.dt)), 0)
    ok = (
        np.abs(prof.accel[start:]).max() <= cfg.hc_accel
        and np.abs(prof.jerk[start:]).max() <= cfg.hc_jerk
        and np.abs(prof.yaw_rate[start:]).max() <= cfg.hc_yaw_rate
    )
    return 1.0 if ok else 0.0


def score_ec(trace: RolloutTrace, prev_plan: Trajectory | None, cfg: MetricConfig | None = None) -> float:
    """Consistency with the previous plan's time-shifted accel profile."""
    cfg = cfg or MetricConfig()
    if prev_plan is None:
        return 1.0
    cur = dynamics_profile(trace.ego_states).accel
    prev = dynamics_profile(prev_plan).accel
    shift = cfg.ec_shift_steps
    n = min(len(cur), len(prev) - shift)
    if n < 2:
        return 1.0
    rms = float(np.sqrt(np.mean((cur[:n] - prev[shift : shift + n]) ** 2)))
    return 1.0 if rms <= cfg.ec_rms_accel else 0.0


# ---------------------------------------------------------------------------
# filter, aggregation, drop rate
# ---------------------------------------------------------------------------

def apply_human_filter(scores: SubMetricScores, expert_scores: SubMetricScores) -> SubMetricScores:
    """Ignore a penalty when the expert commits the same violation."""
    out = replace(scores)
    for m in PENALTY_METRICS:
        if getattr(expert_scores, m) < 1.0:
            setattr(out, m, 1.0)
    return out


def aggregate_epdms(scores: SubMetricScores, w: EpdmsWeights | None = None) -> float:
    """Product of penalty terms times the weighted mean of the quality terms."""
    w = w or EpdmsWeights()
    weight_sum = sum(getattr(w, m) for m in WEIGHTED_METRICS)
    if weight_sum == 0:
        raise ZeroWeightSum("weighted-metric weights sum to zero")
    penalty = 1.0
    for m in PENALTY_METRICS:
        penalty *= getattr(scores, m)
    weighted = sum(getattr(w, m) * getattr(scores, m) for m in WEIGHTED_METRICS) / weight_sum
    return penalty * weighted


def drop_rate(epdms_origin: float, epdms_ood: float) -> float:
    """Relative degradation from origin-style to out-of-distribution styles."""
    if epdms_origin <= 0:
        raise ZeroOrigin(f"origin score must be positive, got {epdms_origin}")
    return (epdms_origin - epdms_ood) / epdms_origin


# ---------------------------------------------------------------------------
# per-scenario evaluation
# ---------------------------------------------------------------------------

def compute_sub_scores(
    trace: RolloutTrace, s: Scenario, cfg: MetricConfig | None = None, prev_plan: Trajectory | None = None
) -> SubMetricScores:
    cfg = cfg or MetricConfig()
    return SubMetricScores(
        nc=score_nc(trace),
        dac=score_dac(trace, s),
        ddc=score_ddc(trace, s, cfg),
        tlc=score_tlc(trace),
        ttc=score_ttc(trace, cfg),
        ep=score_ep(trace, s, cfg),
        lk=score_lk(trace, s, cfg),
        hc=score_hc(trace, cfg),
        ec=score_ec(trace, prev_plan, cfg),
    )


def evaluate_trace(
    trace: RolloutTrace,
    s: Scenario,
    cfg: MetricConfig | None = None,
    expert_scores: SubMetricScores | None = None,
    prev_plan: Trajectory | None = None,
) -> EpdmsResult:
    """Score a trace with the expert penalty filter applied."""
    cfg = cfg or MetricConfig()
    if expert_scores is None:
        expert_scores = expert_sub_scores(s, cfg)
    raw = compute_sub_scores(trace, s, cfg, prev_plan)
    filtered = apply_human_filter(raw, expert_scores)
    return EpdmsResult(scores=filtered, epdms=aggregate_epdms(filtered, cfg.weights))


def expert_sub_scores(s: Scenario, cfg: MetricConfig | None = None) -> SubMetricScores:
    """Sub-metric scores of the expert trajectory itself (open-loop rollout)."""
    return compute_sub_scores(rollout_open_loop(s, s.expert), s, cfg or MetricConfig())


def score_plan(s: Scenario, plan: Trajectory, cfg: MetricConfig | None = None) -> EpdmsResult:
    """Roll out a plan open-loop and score it against the scenario's expert."""
    cfg = cfg or MetricConfig()
    return evaluate_trace(rollout_open_loop(s, plan), s, cfg)
