"""Shared planner plumbing: status encoding, configs, feature caching."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import nn
from ..geom import Trajectory, dynamics_profile, refit_headings, resample_trajectory
from ..nn import ParamSet, Tensor, tensor
from ..perception import AdapterConfig, adapt_op, init_adapter
from ..scenario import GOAL_COMMANDS, Scenario

PLAN_HORIZON = 4.0
REGRESSION_DT = 0.5  # 2 Hz output for regression and diffusion heads
SCORING_DT = 0.1  # 10 Hz candidates for the scoring head
N_FUTURE_WP = 8  # future waypoints at 2 Hz
RESIDUAL_SCALE = 5.0  # heads predict residuals in units of this many meters
COORD_SCALE = 30.0  # coordinate normalization for embeddings


@dataclass
class EgoStatus:
    speed: float
    accel: float
    goal: str

    @classmethod
    def from_scenario(cls, s: Scenario) -> "EgoStatus":
        prof = dynamics_profile(s.ego_history)
        return cls(speed=float(prof.speed[-1]), accel=float(prof.accel[-1]), goal=s.goal_command)

    def as_array(self) -> np.ndarray:
        onehot = np.zeros(3)
        onehot[GOAL_COMMANDS.index(self.goal)] = 1.0
        return np.concatenate([[self.speed / 15.0, self.accel / 3.0], onehot])


@dataclass
class PlanOutput:
    trajectory: Trajectory  # includes the t=0 origin pose, ego frame
    scores: np.ndarray | None = None  # per-mode or per-candidate


@dataclass
class PlannerConfig:
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    hidden: int = 96
    use_pos_embedding: bool = True
    n_future_wp: int = N_FUTURE_WP

    @property
    def dim(self) -> int:
        return self.adapter.dim

    @property
    def n_tokens(self) -> int:
        # tokens come from the adapter's (H, W) grid
        return 16 * 16


STATUS_DIM = 5


def init_status_embed(ps: ParamSet, cfg: PlannerConfig):
    ps.add("status.w", (STATUS_DIM, cfg.dim))
    ps.add("status.b", (cfg.dim,), init="zeros")


def status_embed_op(ps: ParamSet, status: np.ndarray) -> Tensor:
    return nn.tanh(nn.affine(tensor(status), ps["status.w"], ps["status.b"]))


def init_backbone(ps: ParamSet, cfg: PlannerConfig):
    """Adapter + positional embedding + status encoder shared by all heads."""
    init_adapter(ps, "adapter.", cfg.adapter)
    if cfg.use_pos_embedding:
        ps.add("posemb", (cfg.n_tokens, cfg.dim))
    init_status_embed(ps, cfg)


def tokens_op(ps: ParamSet, cfg: PlannerConfig, grids: np.ndarray) -> Tensor:
    """(B, H, W, C) grids -> (B, N, d) tokens with positional embedding."""
    z = adapt_op(ps, "adapter.", cfg.adapter, grids)
    if cfg.use_pos_embedding and "posemb" in ps:
        z = nn.add(z, ps["posemb"])
    return z


def apply_pos(ps: ParamSet, cfg: PlannerConfig, tokens: Tensor) -> Tensor:
    """Add the learned positional embedding to precomputed tokens."""
    if cfg.use_pos_embedding and "posemb" in ps:
        return nn.add(tokens, ps["posemb"])
    return tokens


def future_to_trajectory(future_xy: np.ndarray, dt: float = REGRESSION_DT) -> Trajectory:
    """Prepend the ego-frame origin and refit headings from positions."""
    xy = np.vstack([[0.0, 0.0], future_xy.reshape(-1, 2)])
    return Trajectory(dt, np.column_stack([xy, refit_headings(xy)]))


def constant_velocity_future(speed: float, n_wp: int = N_FUTURE_WP, dt: float = REGRESSION_DT) -> np.ndarray:
    """Straight-ahead extrapolation at the current speed, flattened (2 * n_wp)."""
    t = (np.arange(n_wp) + 1) * dt
    return np.stack([speed * t, np.zeros(n_wp)], axis=1).ravel()


def expert_future_flat(s: Scenario, dt: float = REGRESSION_DT) -> np.ndarray:
    """Expert future waypoints in the ego frame, flattened (no origin)."""
    resampled = resample_trajectory(s.expert, dt, PLAN_HORIZON)
    ego_frame = resampled.to_frame(s.current_pose)
    return ego_frame.xy[1:].ravel()


def expert_ego_frame_10hz(s: Scenario) -> Trajectory:
    return s.expert.to_frame(s.current_pose)


class FeatureCache:
    """Memoizes extractor grids per (geometry seed, style); extraction is
    pure so cached entries are exact."""

    def __init__(self, extractor):
        self.extractor = extractor
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    def grid(self, s: Scenario) -> np.ndarray:
        key = (s.geometry_seed, s.style.id)
        hit = self._cache.get(key)
        if hit is None:
            hit = self.extractor(s).grid
            self._cache[key] = hit
        return hit


@dataclass
class TrainingBatchSource:
    """Precomputed training arrays with seeded batch sampling."""

    grids: np.ndarray  # (n, H, W, C)
    status: np.ndarray  # (n, 5)
    expert_2hz: np.ndarray  # (n, 2 * N_FUTURE_WP)
    cv_2hz: np.ndarray  # (n, 2 * N_FUTURE_WP) constant-velocity baselines
    scenarios: list[Scenario]
    rng: np.random.Generator

    @classmethod
    def build(cls, scenarios: list[Scenario], extractor, seed: int) -> "TrainingBatchSource":
        cache = FeatureCache(extractor)
        grids = np.stack([cache.grid(s) for s in scenarios])
        statuses = [EgoStatus.from_scenario(s) for s in scenarios]
        status = np.stack([st.as_array() for st in statuses])
        expert = np.stack([expert_future_flat(s) for s in scenarios])
        cv = np.stack([constant_velocity_future(st.speed) for st in statuses])
        return cls(
            grids=grids,
            status=status,
            expert_2hz=expert,
            cv_2hz=cv,
            scenarios=list(scenarios),
            rng=np.random.default_rng(np.random.SeedSequence([0x7EA1, seed])),
        )

    def batch(self, size: int) -> np.ndarray:
        n = len(self.scenarios)
        return self.rng.choice(n, size=min(size, n), replace=False)
