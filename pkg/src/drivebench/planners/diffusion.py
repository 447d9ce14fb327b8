"""Anchored truncated diffusion head: denoising starts from Gaussians
centered on clustered anchors and runs a short schedule; the denoiser
predicts the clean trajectory and each step interpolates toward it."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import nn
from ..errors import EmptyAnchors, StepOutOfRange
from ..nn import AdamW, ParamSet, Tensor, backward, tensor
from ..perception import TokenSequence
from ..vocabulary import TrajectoryVocabulary
from .common import (
    COORD_SCALE,
    RESIDUAL_SCALE,
    EgoStatus,
    PlanOutput,
    PlannerConfig,
    TrainingBatchSource,
    apply_pos,
    future_to_trajectory,
    init_backbone,
    status_embed_op,
    tokens_op,
)


@dataclass
class NoiseSchedule:
    """sigmas[k] is the noise level entering step k; sigmas[0] = 0."""

    sigmas: np.ndarray

    def __post_init__(self):
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
        if self.sigmas[0] != 0.0:
            raise ValueError("schedule must end at zero noise")
        if np.any(np.diff(self.sigmas) <= 0):
            raise ValueError("sigmas must be strictly decreasing toward step 0")

    @property
    def n_steps(self) -> int:
        return len(self.sigmas) - 1

    @classmethod
    def from_anchors(cls, anchors: np.ndarray, n_steps: int = 2, scale: float = 0.5, ratio: float = 0.25) -> "NoiseSchedule":
        """Terminal noise anchored to the per-coordinate anchor spread."""
        spread = float(np.mean(np.std(anchors, axis=0)))
        sigma_max = max(scale * spread, 1e-3)
        sigmas = [0.0] + [sigma_max * ratio ** (n_steps - k) for k in range(1, n_steps + 1)]
        return cls(np.asarray(sigmas))


def step_update(noisy: np.ndarray, x0: np.ndarray, sigma_k: float, sigma_km1: float) -> np.ndarray:
    """One truncated-schedule update: interpolate toward the clean estimate."""
    if sigma_k == 0.0:
        return x0
    return x0 + (sigma_km1 / sigma_k) * (noisy - x0)


def init_diffusion_params(cfg: PlannerConfig, n_steps: int, seed: int) -> ParamSet:
    ps = ParamSet(seed=seed)
    init_backbone(ps, cfg)
    d, h = cfg.dim, cfg.hidden
    coords = 2 * cfg.n_future_wp
    ps.add("noise_embed.w", (coords, d))
    ps.add("noise_embed.b", (d,), init="zeros")
    ps.add("step_emb", (n_steps + 1, d))
    ps.add("den.w1", (2 * d, h))
    ps.add("den.b1", (h,), init="zeros")
    ps.add("den.w2", (h, h))
    ps.add("den.b2", (h,), init="zeros")
    ps.add("den.w3", (h, coords))
    ps.add("den.b3", (coords,), init="zeros")
    ps.add("conf.w1", (2 * d, h))
    ps.add("conf.b1", (h,), init="zeros")
    ps.add("conf.w2", (h, 1))
    ps.add("conf.b2", (1,), init="zeros")
    return ps


def _attend(ps: ParamSet, cfg: PlannerConfig, query: Tensor, z: Tensor) -> Tensor:
    """(M, d) queries over (N, d) or (M, N, d) tokens -> (M, d) context."""
    m = query.data.shape[0]
    q = nn.reshape(query, (m, 1, cfg.dim))
    kv = nn.expand_batch(z, m) if z.data.ndim == 2 else z
    att = nn.softmax_attention(q, kv, kv)
    return nn.reshape(att, (m, cfg.dim))


def denoise_op(
    ps: ParamSet,
    cfg: PlannerConfig,
    noisy: np.ndarray | Tensor,
    k: int,
    z: Tensor,
    status_emb: Tensor,
    n_steps: int,
) -> Tensor:
    """Clean-trajectory prediction for a batch of noisy coordinate rows."""
    if not 1 <= k <= n_steps:
        raise StepOutOfRange(f"denoise step {k} outside 1..{n_steps}")
    noisy_t = noisy if isinstance(noisy, Tensor) else tensor(noisy)
    emb = nn.tanh(nn.affine(nn.scale(noisy_t, 1.0 / COORD_SCALE), ps["noise_embed.w"], ps["noise_embed.b"]))
    step_row = nn.index_rows(ps["step_emb"], np.full(emb.data.shape[0], k))
    query = nn.add(nn.add(emb, step_row), status_emb)
    att = _attend(ps, cfg, query, z)
    x = nn.concat_last([att, emb])
    x = nn.relu(nn.affine(x, ps["den.w1"], ps["den.b1"]))
    x = nn.relu(nn.affine(x, ps["den.w2"], ps["den.b2"]))
    delta = nn.affine(x, ps["den.w3"], ps["den.b3"])
    # x0-prediction as a scaled correction of the noisy input
    return nn.add(noisy_t, nn.scale(delta, RESIDUAL_SCALE))


def diffusion_denoise_step(
    noisy: np.ndarray,
    k: int,
    z: TokenSequence,
    s: EgoStatus,
    p: ParamSet,
    schedule: NoiseSchedule,
    cfg: PlannerConfig | None = None,
) -> np.ndarray:
    """Denoise one step: predict the clean trajectory, interpolate toward it."""
    cfg = cfg or PlannerConfig()
    status_emb = status_embed_op(p, s.as_array()[None, :])
    zt = apply_pos(p, cfg, tensor(z.tokens))
    x0 = denoise_op(p, cfg, noisy[None, :], k, zt, status_emb, schedule.n_steps)
    return step_update(noisy, x0.data[0], schedule.sigmas[k], schedule.sigmas[k - 1])


def confidence_op(ps: ParamSet, cfg: PlannerConfig, x0: Tensor, z: Tensor) -> Tensor:
    """(M, coords) denoised modes -> (M,) confidence logits."""
    emb = nn.tanh(nn.affine(nn.scale(x0, 1.0 / COORD_SCALE), ps["noise_embed.w"], ps["noise_embed.b"]))
    att = _attend(ps, cfg, emb, z)
    x = nn.concat_last([att, emb])
    x = nn.relu(nn.affine(x, ps["conf.w1"], ps["conf.b1"]))
    return nn.reshape(nn.affine(x, ps["conf.w2"], ps["conf.b2"]), (x.data.shape[0],))


def _run_denoise_loop(ps, cfg, z, status_emb, start: np.ndarray, schedule: NoiseSchedule):
    current = start
    for k in range(schedule.n_steps, 0, -1):
        x0 = denoise_op(ps, cfg, current, k, z, status_emb, schedule.n_steps)
        current = step_update(current, x0.data, schedule.sigmas[k], schedule.sigmas[k - 1])
    return current


def diffusion_plan(
    z: TokenSequence,
    s: EgoStatus,
    anchors: TrajectoryVocabulary,
    p: ParamSet,
    schedule: NoiseSchedule,
    cfg: PlannerConfig | None = None,
    rng_seed: int = 0,
) -> PlanOutput:
    """Denoise one sample per anchor and return the max-confidence mode."""
    cfg = cfg or PlannerConfig()
    if anchors.size == 0:
        raise EmptyAnchors("diffusion planner needs at least one anchor")
    anchor_flat = anchors.flattened()[:, 2:]  # drop the origin waypoint
    m = anchor_flat.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence([0xD1FF, rng_seed]))
    noise = rng.normal(size=anchor_flat.shape)
    start = anchor_flat + schedule.sigmas[schedule.n_steps] * noise
    z_t = apply_pos(p, cfg, tensor(z.tokens))
    status_emb = status_embed_op(p, np.repeat(s.as_array()[None, :], m, axis=0))
    final = _run_denoise_loop(p, cfg, z_t, status_emb, start, schedule)
    logits = confidence_op(p, cfg, tensor(final), z_t).data
    best = int(np.argmax(logits))
    return PlanOutput(trajectory=future_to_trajectory(final[best]), scores=logits)


def train_diffusion(
    source: TrainingBatchSource,
    anchors: TrajectoryVocabulary,
    cfg: PlannerConfig,
    seed: int = 0,
    steps: int = 600,
    batch_size: int = 8,
    lr: float = 3e-3,
    weight_decay: float = 1e-5,
    conf_weight: float = 0.5,
    schedule: NoiseSchedule | None = None,
) -> tuple[ParamSet, NoiseSchedule]:
    """Denoising regression to the expert + mode-confidence classification."""
    anchor_flat = anchors.flattened()[:, 2:]
    schedule = schedule or NoiseSchedule.from_anchors(anchor_flat)
    ps = init_diffusion_params(cfg, schedule.n_steps, seed)
    opt = AdamW(ps, lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([0xD1FF7, seed]))
    m = anchor_flat.shape[0]
    for _ in range(steps):
        idx = source.batch(batch_size)
        b = len(idx)
        experts = source.expert_2hz[idx]
        dists = ((experts[:, None, :] - anchor_flat[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(dists, axis=1)
        k = int(rng.integers(1, schedule.n_steps + 1))
        sig = schedule.sigmas[k]
        blend = sig / schedule.sigmas[schedule.n_steps]
        noisy = (1 - blend) * experts + blend * anchor_flat[labels] + sig * rng.normal(size=experts.shape)

        ps.zero_grad()
        z = tokens_op(ps, cfg, source.grids[idx])  # (B, N, d)
        status_emb = status_embed_op(ps, source.status[idx])
        x0 = denoise_op(ps, cfg, noisy, k, z, status_emb, schedule.n_steps)
        loss = nn.mse_loss(x0, experts)

        # mode confidence: denoise every anchor for each sample, classify the
        # one nearest the expert
        start = np.repeat(anchor_flat[None, :, :], b, axis=0).reshape(b * m, -1)
        start = start + schedule.sigmas[schedule.n_steps] * rng.normal(size=start.shape)
        logits_rows = []
        for bi in range(b):
            zb = nn.reshape(
                nn.index_rows(nn.reshape(z, (b, cfg.n_tokens * cfg.dim)), np.array([bi])),
                (cfg.n_tokens, cfg.dim),
            )
            se = status_embed_op(ps, np.repeat(source.status[idx][bi][None, :], m, axis=0))
            final = _run_denoise_loop(ps, cfg, zb, se, start[bi * m : (bi + 1) * m], schedule)
            logits_rows.append(confidence_op(ps, cfg, tensor(final), zb))
        stacked = nn.reshape(nn.concat_last([nn.reshape(l, (1, m)) for l in logits_rows]), (b, m))
        loss = nn.add(loss, nn.scale(nn.cross_entropy_logits(stacked, labels), conf_weight))
        backward(loss)
        opt.step()
    return ps, schedule


def diffusion_loss(ps, cfg, schedule, grids, status, experts, anchors_flat, k, noise):
    """Deterministic training-style loss for gradient checking."""
    z = tokens_op(ps, cfg, grids)
    status_emb = status_embed_op(ps, status)
    dists = ((experts[:, None, :] - anchors_flat[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(dists, axis=1)
    sig = schedule.sigmas[k]
    blend = sig / schedule.sigmas[schedule.n_steps]
    noisy = (1 - blend) * experts + blend * anchors_flat[labels] + sig * noise
    x0 = denoise_op(ps, cfg, noisy, k, z, status_emb, schedule.n_steps)
    return nn.mse_loss(x0, experts)
