"""Regression head: a learnable ego query cross-attends the scene tokens and
an MLP decodes future waypoints (imitation of the expert)."""
from __future__ import annotations

import numpy as np

from .. import nn
from ..nn import AdamW, ParamSet, Tensor, backward, tensor
from ..perception import TokenSequence
from .common import (
    RESIDUAL_SCALE,
    EgoStatus,
    PlanOutput,
    PlannerConfig,
    TrainingBatchSource,
    apply_pos,
    constant_velocity_future,
    future_to_trajectory,
    init_backbone,
    status_embed_op,
    tokens_op,
)


def init_regression_params(cfg: PlannerConfig, seed: int) -> ParamSet:
    ps = ParamSet(seed=seed)
    init_backbone(ps, cfg)
    d, h = cfg.dim, cfg.hidden
    ps.add("query", (1, d))
    ps.add("reg.w1", (2 * d, h))
    ps.add("reg.b1", (h,), init="zeros")
    ps.add("reg.w2", (h, h))
    ps.add("reg.b2", (h,), init="zeros")
    ps.add("reg.w3", (h, 2 * cfg.n_future_wp))
    ps.add("reg.b3", (2 * cfg.n_future_wp,), init="zeros")
    return ps


def _decode(ps: ParamSet, cfg: PlannerConfig, att: Tensor, status_emb: Tensor) -> Tensor:
    x = nn.concat_last([att, status_emb])
    x = nn.relu(nn.affine(x, ps["reg.w1"], ps["reg.b1"]))
    x = nn.relu(nn.affine(x, ps["reg.w2"], ps["reg.b2"]))
    return nn.affine(x, ps["reg.w3"], ps["reg.b3"])


def regression_forward(ps: ParamSet, cfg: PlannerConfig, grids: np.ndarray, status: np.ndarray) -> Tensor:
    """(B, H, W, C) grids + (B, 5) status -> (B, 2 * n_future_wp) residuals.

    The head predicts scaled residuals from the constant-velocity baseline;
    the full waypoints are cv + RESIDUAL_SCALE * output.
    """
    b = grids.shape[0]
    z = tokens_op(ps, cfg, grids)
    q = nn.expand_batch(ps["query"], b)
    att = nn.reshape(nn.softmax_attention(q, z, z), (b, cfg.dim))
    return _decode(ps, cfg, att, status_embed_op(ps, status))


def regression_plan(z: TokenSequence, s: EgoStatus, p: ParamSet, cfg: PlannerConfig | None = None) -> PlanOutput:
    """Plan from adapted tokens: ego-query attention, then MLP decoding."""
    cfg = cfg or PlannerConfig()
    tokens = apply_pos(p, cfg, tensor(z.tokens))
    att = nn.softmax_attention(p["query"], tokens, tokens)
    out = _decode(p, cfg, att, status_embed_op(p, s.as_array()[None, :]))
    future = constant_velocity_future(s.speed, cfg.n_future_wp) + RESIDUAL_SCALE * out.data[0]
    return PlanOutput(trajectory=future_to_trajectory(future))


def train_regression(
    source: TrainingBatchSource,
    cfg: PlannerConfig,
    seed: int = 0,
    steps: int = 600,
    batch_size: int = 16,
    lr: float = 3e-3,
    weight_decay: float = 1e-5,
) -> ParamSet:
    """Minimize mean squared waypoint error to the expert future."""
    ps = init_regression_params(cfg, seed)
    opt = AdamW(ps, lr=lr, weight_decay=weight_decay)
    targets = (source.expert_2hz - source.cv_2hz) / RESIDUAL_SCALE
    for _ in range(steps):
        idx = source.batch(batch_size)
        ps.zero_grad()
        pred = regression_forward(ps, cfg, source.grids[idx], source.status[idx])
        loss = nn.mse_loss(pred, targets[idx])
        backward(loss)
        opt.step()
    return ps


def regression_loss(ps: ParamSet, cfg: PlannerConfig, grids, status, targets) -> Tensor:
    """Training loss as a closure target for gradient checking."""
    return nn.mse_loss(regression_forward(ps, cfg, grids, status), targets)
