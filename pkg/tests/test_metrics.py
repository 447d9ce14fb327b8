import math
from dataclasses import replace

import numpy as np
import pytest

from drivebench.errors import ZeroOrigin, ZeroWeightSum
from drivebench.geom import Polyline, Trajectory, resample_trajectory
from drivebench.metrics import (
    ALL_METRICS,
    EpdmsWeights,
    MetricConfig,
    SubMetricScores,
    aggregate_epdms,
    apply_human_filter,
    compute_sub_scores,
    drop_rate,
    evaluate_trace,
    expert_sub_scores,
    score_ddc,
    score_ec,
    score_ep,
    score_hc,
    score_lk,
    score_nc,
    score_plan,
    score_tlc,
    score_ttc,
)
from drivebench.scenario import generate_scenario
from drivebench.sim import CollisionEvent, rollout_open_loop

from conftest import make_straight_scenario, moving_agent, red_light, straight_trajectory


# ---------------------------------------------------------------------------
# aggregation (hand-arithmetic oracle)
# ---------------------------------------------------------------------------

def test_aggregate_all_ones():
    assert aggregate_epdms(SubMetricScores()) == 1.0


def test_aggregate_zero_penalty_zeroes_score():
    assert aggregate_epdms(SubMetricScores(nc=0.0)) == 0.0
    assert aggregate_epdms(SubMetricScores(tlc=0.0, ttc=0.3)) == 0.0


def test_aggregate_hand_case():
    scores = SubMetricScores(ttc=1.0, ep=0.5, lk=1.0, hc=1.0, ec=1.0)
    w = EpdmsWeights(ttc=5, ep=5, lk=2, hc=1, ec=1)
    expected = (5 + 2.5 + 2 + 1 + 1) / 14.0
    assert abs(aggregate_epdms(scores, w) - expected) < 1e-12
    assert abs(aggregate_epdms(scores, w) - 0.8214285714285714) < 1e-12


def test_aggregate_monotone_in_every_subscore():
    rng = np.random.default_rng(0)
    w = EpdmsWeights()
    for _ in range(300):
        vals = rng.uniform(0, 1, 9)
        base = SubMetricScores(**dict(zip(ALL_METRICS, vals)))
        m = ALL_METRICS[rng.integers(9)]
        bumped = replace(base, **{m: min(getattr(base, m) + rng.uniform(0, 0.5), 1.0)})
        assert aggregate_epdms(bumped, w) >= aggregate_epdms(base, w) - 1e-12


def test_aggregate_weight_scaling_invariance():
    rng = np.random.default_rng(1)
    for _ in range(50):
        vals = rng.uniform(0, 1, 9)
        scores = SubMetricScores(**dict(zip(ALL_METRICS, vals)))
        w = EpdmsWeights(ttc=2.0, ep=3.0, lk=0.5, hc=1.5, ec=0.25)
        c = rng.uniform(0.1, 10)
        scaled = EpdmsWeights(ttc=2.0 * c, ep=3.0 * c, lk=0.5 * c, hc=1.5 * c, ec=0.25 * c)
        assert abs(aggregate_epdms(scores, w) - aggregate_epdms(scores, scaled)) < 1e-12


def test_aggregate_zero_weight_sum():
    with pytest.raises(ValueError):
        EpdmsWeights(ttc=0, ep=0, lk=0, hc=0, ec=0)
    w = EpdmsWeights()
    for m in ("ttc", "ep", "lk", "hc", "ec"):
        setattr(w, m, 0.0)
    with pytest.raises(ZeroWeightSum):
        aggregate_epdms(SubMetricScores(), w)


# ---------------------------------------------------------------------------
# human filter
# ---------------------------------------------------------------------------

def test_human_filter_ignores_shared_violation():
    ego = SubMetricScores(dac=0.0)
    expert = SubMetricScores(dac=0.0)
    assert apply_human_filter(ego, expert).dac == 1.0


def test_human_filter_keeps_unshared_violation():
    ego = SubMetricScores(dac=0.0)
    expert = SubMetricScores(dac=1.0)
    assert apply_human_filter(ego, expert).dac == 0.0


def test_human_filter_identity_on_all_ones():
    ego = SubMetricScores()
    assert apply_human_filter(ego, SubMetricScores(nc=0.0, ddc=0.5)) == SubMetricScores()


def test_human_filter_idempotent():
    rng = np.random.default_rng(2)
    for _ in range(100):
        ego = SubMetricScores(**dict(zip(ALL_METRICS, rng.uniform(0, 1, 9))))
        expert = SubMetricScores(**dict(zip(ALL_METRICS, rng.choice([0.0, 0.5, 1.0], 9))))
        once = apply_human_filter(ego, expert)
        twice = apply_human_filter(once, expert)
        assert once == twice


def test_human_filter_leaves_weighted_metrics():
    ego = SubMetricScores(ttc=0.0, ep=0.3)
    expert = SubMetricScores(ttc=0.0, ep=0.1)
    out = apply_human_filter(ego, expert)
    assert out.ttc == 0.0 and out.ep == 0.3


# ---------------------------------------------------------------------------
# drop rate (values from published benchmark table)
# ---------------------------------------------------------------------------

def test_drop_rate_published_pairs():
    assert abs(drop_rate(84.5, 76.0) - 0.1005917159763314) < 1e-12
    assert round(drop_rate(84.5, 76.0) * 100, 1) == 10.1
    assert round(drop_rate(85.7, 84.8) * 100, 1) == 1.1  # rounds to ~1%
    assert abs(drop_rate(85.7, 84.8) - (85.7 - 84.8) / 85.7) < 1e-12


def test_drop_rate_equal_inputs():
    assert drop_rate(80.0, 80.0) == 0.0


def test_drop_rate_zero_origin():
    with pytest.raises(ZeroOrigin):
        drop_rate(0.0, 10.0)


# ---------------------------------------------------------------------------
# sub-metric scores on constructed traces
# ---------------------------------------------------------------------------

def test_nc_cases(origin_scenarios):
    s = origin_scenarios[0]
    trace = rollout_open_loop(s, s.expert)
    assert score_nc(trace) == 1.0
    trace.collision_events.append(CollisionEvent(t=1.0, agent_index=0, at_fault=False))
    assert score_nc(trace) == 1.0  # not-at-fault rear end keeps the score
    trace.collision_events.append(CollisionEvent(t=2.0, agent_index=0, at_fault=True))
    assert score_nc(trace) == 0.0


def test_dac_cases():
    s = make_straight_scenario(half_road=6.0)
    good = rollout_open_loop(s, s.expert)
    assert good.offroad_steps.size == 0
    offset = s.expert.waypoints.copy()
    offset[:, 1] += 7.0  # beyond the road edge
    s_off = make_straight_scenario(expert=Trajectory(0.1, offset), half_road=6.0)
    bad = rollout_open_loop(s_off, s_off.expert)
    assert bad.offroad_steps.size > 0


def test_dac_corner_grazing_boundary_inclusive():
    # footprint corner exactly on the boundary counts as inside; a 1 mm
    # outward shift flips the verdict (perturbation oracle)
    half_road = 6.0
    y_on_edge = half_road - 1.0  # half_width = 1.0
    for dy, expect_clean in ((0.0, True), (-0.001, True), (0.001, False)):
        wp = straight_trajectory(5.0, y=y_on_edge + dy).waypoints
        s = make_straight_scenario(expert=Trajectory(0.1, wp), half_road=half_road)
        trace = rollout_open_loop(s, s.expert)
        assert (trace.offroad_steps.size == 0) == expect_clean


def test_ddc_forward_and_reverse():
    s = make_straight_scenario()
    assert score_ddc(rollout_open_loop(s, s.expert), s) == 1.0
    # full-horizon reverse driving: 20 m against the lane direction
    n = 41
    t = np.arange(n) * 0.1
    wp = np.stack([-5.0 * t, np.zeros(n), np.zeros(n)], axis=1)
    s_rev = make_straight_scenario(expert=Trajectory(0.1, wp))
    assert score_ddc(rollout_open_loop(s_rev, s_rev.expert), s_rev) == 0.0


def test_ddc_three_meter_reverse_is_half():
    # drive backward exactly 3 m, then hold: counter-direction distance = 3
    n = 41
    xs = np.concatenate([-3.0 * np.linspace(0, 1, 16), np.full(n - 16, -3.0)])
    wp = np.stack([xs, np.zeros(n), np.zeros(n)], axis=1)
    s = make_straight_scenario(expert=Trajectory(0.1, wp), ego_speed=0.0)
    trace = rollout_open_loop(s, s.expert)
    # arc-length oracle on the constructed path
    steps = np.abs(np.diff(xs))
    assert abs(steps.sum() - 3.0) < 1e-9
    assert score_ddc(trace, s, MetricConfig(ddc_low=2.0, ddc_high=6.0)) == 0.5


def test_tlc_cases():
    green = red_light(10.0, phase_value=1)
    red = red_light(10.0, phase_value=0)
    s_green = make_straight_scenario(lights=[green])
    assert score_tlc(rollout_open_loop(s_green, s_green.expert)) == 1.0
    s_red = make_straight_scenario(lights=[red])
    assert score_tlc(rollout_open_loop(s_red, s_red.expert)) == 0.0
    # stopping before the line on red keeps the score
    n = 41
    xs = np.minimum(5.0 * np.arange(n) * 0.1, 6.0)  # front stops at 8.3 < 10
    wp = np.stack([xs, np.zeros(n), np.zeros(n)], axis=1)
    s_stop = make_straight_scenario(expert=Trajectory(0.1, wp), lights=[red])
    assert score_tlc(rollout_open_loop(s_stop, s_stop.expert)) == 1.0


def test_ttc_cases():
    s_empty = make_straight_scenario()
    assert score_ttc(rollout_open_loop(s_empty, s_empty.expert)) == 1.0
    # tailgating 2 m behind a lead closing at 10 m/s: projected overlap at ~0.2 s
    lead = moving_agent(2.0 + 4.6 + 10.0 * 0.0, 0.0)
    lead.trajectory = Trajectory(0.1, np.stack(
        [np.full(41, 6.6), np.zeros(41), np.zeros(41)], axis=1))
    s_tail = make_straight_scenario(agents=[lead], ego_speed=10.0,
                                    expert=straight_trajectory(10.0))
    trace = rollout_open_loop(s_tail, s_tail.expert)
    assert score_ttc(trace) == 0.0
    # same speed, 20 m gap: zero closing speed
    pace = moving_agent(20.0 + 4.6, 10.0)
    s_pace = make_straight_scenario(agents=[pace], ego_speed=10.0,
                                    expert=straight_trajectory(10.0))
    assert score_ttc(rollout_open_loop(s_pace, s_pace.expert)) == 1.0


def test_ep_expert_is_one(origin_scenarios):
    for s in origin_scenarios[:4]:
        assert score_ep(rollout_open_loop(s, s.expert), s) == 1.0


def test_ep_linearity_on_straight_road():
    s = make_straight_scenario(ego_speed=8.0, expert=straight_trajectory(8.0))
    for alpha in (0.25, 0.5, 0.75):
        plan = straight_trajectory(8.0 * alpha)
        trace = rollout_open_loop(s, plan)
        assert abs(score_ep(trace, s) - alpha) < 1e-6


def test_ep_curved_road_matches_dense_projection(registry, gen_config):
    # find an arc-family scenario
    s = None
    for seed in range(100):
        cand = generate_scenario(seed, registry.origin, gen_config)
        if cand.goal_command in ("left", "right") and not cand.lights:
            s = cand
            break
    assert s is not None
    partial = Trajectory(s.dt, s.expert.waypoints[:31])
    trace = rollout_open_loop(s, partial)
    got = score_ep(trace, s)
    # dense-projection oracle: nearest point on a 1 cm sampling of the route
    line = s.route
    grid = np.arange(0.0, line.length, 0.01)
    pts = np.array([line.point_at(g)[:2] for g in grid])

    def nearest_s(p):
        return grid[np.argmin(np.hypot(pts[:, 0] - p[0], pts[:, 1] - p[1]))]

    ego_prog = nearest_s(partial.waypoints[-1, :2]) - nearest_s(partial.waypoints[0, :2])
    exp_prog = nearest_s(s.expert.waypoints[-1, :2]) - nearest_s(s.expert.waypoints[0, :2])
    expected = min(max(ego_prog / exp_prog, 0.0), 1.0)
    assert abs(got - expected) < 1e-3


def test_lk_cases():
    s = make_straight_scenario()
    assert score_lk(rollout_open_loop(s, s.expert), s) == 1.0
    # sustained 1 m offset for the full horizon
    off = straight_trajectory(5.0, y=1.0)
    s_off = make_straight_scenario(expert=off)
    assert score_lk(rollout_open_loop(s_off, s_off.expert), s_off) == 0.0
    # 0.8 s excursion at 0.7 m offset: below the 1.0 s duration threshold
    n = 41
    ys = np.zeros(n)
    ys[10:18] = 0.7
    wp = np.stack([5.0 * np.arange(n) * 0.1, ys, np.zeros(n)], axis=1)
    s_burst = make_straight_scenario(expert=Trajectory(0.1, wp))
    assert score_lk(rollout_open_loop(s_burst, s_burst.expert), s_burst) == 1.0


def test_hc_cases(origin_scenarios):
    for s in origin_scenarios[:4]:
        assert score_hc(rollout_open_loop(s, s.expert)) == 1.0
    # step-change velocity: effectively infinite jerk at the junction
    n = 41
    xs = np.concatenate([np.zeros(10), 8.0 * (np.arange(n - 10) * 0.1)])
    wp = np.stack([xs, np.zeros(n), np.zeros(n)], axis=1)
    s_step = make_straight_scenario(expert=Trajectory(0.1, wp), ego_speed=0.0)
    assert score_hc(rollout_open_loop(s_step, s_step.expert)) == 0.0


def test_ec_cases():
    s = make_straight_scenario(ego_speed=6.0, expert=straight_trajectory(6.0))
    trace = rollout_open_loop(s, s.expert)
    assert score_ec(trace, None) == 1.0  # no previous plan
    # previous plan with the same constant-speed profile: zero deviation
    prev = straight_trajectory(6.0, x0=-3.0)
    assert score_ec(trace, prev) == 1.0
    # previous plan with violent stop-and-go: large RMS accel difference
    n = 41
    speeds = 6.0 + 4.0 * np.sign(np.sin(np.arange(n) * 2.2))
    xs = np.concatenate([[0.0], np.cumsum(speeds[:-1] * 0.1)])
    prev_bad = Trajectory(0.1, np.stack([xs, np.zeros(n), np.zeros(n)], axis=1))
    assert score_ec(trace, prev_bad) == 0.0


# ---------------------------------------------------------------------------
# end-to-end scoring
# ---------------------------------------------------------------------------

def test_expert_self_score_penalties_filtered(origin_scenarios):
    # tautology: after the filter, penalties are 1 when expert == plan
    for s in origin_scenarios:
        res = score_plan(s, s.expert)
        assert res.scores.nc == res.scores.dac == res.scores.ddc == res.scores.tlc == 1.0
        assert res.epdms > 0.0


def test_epdms_within_unit_interval(origin_scenarios):
    rng = np.random.default_rng(3)
    for s in origin_scenarios[:6]:
        n = 41
        speed = rng.uniform(0, 12)
        plan = straight_trajectory(speed)
        start = s.expert.waypoints[0]
        wp = plan.waypoints.copy()
        c, si = math.cos(start[2]), math.sin(start[2])
        wp2 = np.empty_like(wp)
        wp2[:, 0] = start[0] + c * wp[:, 0]
        wp2[:, 1] = start[1] + si * wp[:, 0]
        wp2[:, 2] = start[2]
        res = score_plan(s, Trajectory(0.1, wp2))
        assert 0.0 <= res.epdms <= 1.0
