"""Planning heads over adapted scene tokens, plus a uniform runtime wrapper.

Paradigms: direct waypoint regression, anchored truncated diffusion, and
dense candidate scoring.  Output frequency is 2 Hz for the first two and
10 Hz for the scoring head; rollouts resample as needed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..nn import ParamSet
from ..perception import PerceptionConfig, TokenSequence, adapt_op
from ..scenario import Scenario
from ..vocabulary import TrajectoryVocabulary
from .common import (
    EgoStatus,
    FeatureCache,
    PlanOutput,
    PlannerConfig,
    TrainingBatchSource,
    expert_future_flat,
    future_to_trajectory,
    tokens_op,
)
from .diffusion import (
    NoiseSchedule,
    diffusion_denoise_step,
    diffusion_loss,
    diffusion_plan,
    init_diffusion_params,
    step_update,
    train_diffusion,
)
from .regression import (
    init_regression_params,
    regression_forward,
    regression_loss,
    regression_plan,
    train_regression,
)
from .scoring import (
    DEFAULT_HEAD_WEIGHTS,
    ScoringTrainData,
    aggregate_candidate_scores,
    init_scoring_params,
    path_cell_indices,
    scoring_forward,
    scoring_loss,
    select_best,
    train_scoring,
)
from .targets import (
    candidate_epdms,
    candidate_sub_scores,
    compute_target_table,
    epdms_from_sub_rows,
    targets_cache_key,
)

PARADIGMS = ("regression", "diffusion", "scoring")


@dataclass
class TrainedPlanner:
    """A trained head bundled with its frozen extractor and adapter config."""

    paradigm: str
    ps: ParamSet
    cfg: PlannerConfig
    extractor: object
    vocab: TrajectoryVocabulary | None = None
    schedule: NoiseSchedule | None = None
    pcfg: PerceptionConfig | None = None

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ConfigError(f"unknown paradigm {self.paradigm!r}")
        self._cache = FeatureCache(self.extractor)

    def tokens(self, s: Scenario) -> TokenSequence:
        """Adapted tokens without the positional embedding (heads add it)."""
        grid = self._cache.grid(s)
        out = adapt_op(self.ps, "adapter.", self.cfg.adapter, grid[None, ...])
        h, w, _ = grid.shape
        return TokenSequence(tokens=out.data[0], grid_hw=(h, w))

    def plan(self, s: Scenario, plan_seed: int = 0) -> PlanOutput:
        status = EgoStatus.from_scenario(s)
        z = self.tokens(s)
        if self.paradigm == "regression":
            return regression_plan(z, status, self.ps, self.cfg)
        if self.paradigm == "diffusion":
            return diffusion_plan(
                z, status, self.vocab, self.ps, self.schedule, self.cfg, rng_seed=plan_seed
            )
        sub = scoring_forward(z, self.vocab, status, self.ps, self.cfg, self.pcfg)
        return select_best(aggregate_candidate_scores(sub), self.vocab)
