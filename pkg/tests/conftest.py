import numpy as np
import pytest

from drivebench.geom import Polygon, Polyline, Trajectory
from drivebench.scenario import (
    Agent,
    GeneratorConfig,
    Scenario,
    StyleRegistry,
    TrafficLightState,
    generate_scenario,
)

N_STEPS = 41
DT = 0.1


@pytest.fixture(scope="session")
def registry():
    return StyleRegistry()


@pytest.fixture(scope="session")
def gen_config():
    return GeneratorConfig()


@pytest.fixture(scope="session")
def origin_scenarios(registry, gen_config):
    """A small pool of generated scenarios shared across tests."""
    return [generate_scenario(seed, registry.origin, gen_config) for seed in range(12)]


def straight_trajectory(speed, n=N_STEPS, dt=DT, y=0.0, x0=0.0, heading=0.0):
    t = np.arange(n) * dt
    wp = np.stack([x0 + speed * t, np.full(n, y), np.full(n, heading)], axis=1)
    return Trajectory(dt, wp)


def make_straight_scenario(
    agents=(),
    lights=(),
    ego_speed=5.0,
    expert=None,
    registry=None,
    half_road=6.0,
    length=250.0,
):
    """Hand-built straight-road scenario for metric unit tests.

    The history approaches the expert's first pose along its heading at
    ``ego_speed``, so the start-pose invariant holds for any expert.
    """
    registry = registry or StyleRegistry()
    if expert is None:
        expert = straight_trajectory(ego_speed)
    x0, y0, h0 = expert.waypoints[0]
    t_hist = np.arange(21) * DT - 2.0
    history = Trajectory(
        DT,
        np.stack(
            [
                x0 + ego_speed * t_hist * np.cos(h0),
                y0 + ego_speed * t_hist * np.sin(h0),
                np.full(21, h0),
            ],
            axis=1,
        ),
    )
    drivable = [Polygon([(-60, -half_road), (length, -half_road), (length, half_road), (-60, half_road)])]
    centerlines = [Polyline([(-60.0, 0.0), (length, 0.0)])]
    s = Scenario(
        geometry_seed=0,
        style=registry.origin,
        drivable=drivable,
        centerlines=centerlines,
        lights=list(lights),
        agents=list(agents),
        ego_history=history,
        ego_half_length=2.3,
        ego_half_width=1.0,
        expert=expert,
        goal_command="straight",
        route_index=0,
    )
    s.validate()
    return s


def parked_agent(x, y=0.0):
    wp = np.stack([np.full(N_STEPS, x), np.full(N_STEPS, y), np.zeros(N_STEPS)], axis=1)
    return Agent("vehicle", 2.3, 1.0, Trajectory(DT, wp))


def moving_agent(x0, speed, y=0.0, kind="vehicle"):
    t = np.arange(N_STEPS) * DT
    wp = np.stack([x0 + speed * t, np.full(N_STEPS, y), np.zeros(N_STEPS)], axis=1)
    hl, hw = (2.3, 1.0) if kind == "vehicle" else (0.3, 0.3)
    return Agent(kind, hl, hw, Trajectory(DT, wp))


def red_light(x, phase_value=0):
    return TrafficLightState(
        stop_line=Polyline([(x, -4.0), (x, 4.0)]),
        phase=np.full(N_STEPS, phase_value, dtype=np.int64),
    )
