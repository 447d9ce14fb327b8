"""Dense scoring head: tokenize every candidate, attend the scene tokens,
predict per-sub-metric scores, aggregate with fixed weights, pick the argmax.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import nn
from ..errors import DimMismatch
from ..metrics import ALL_METRICS
from ..nn import AdamW, ParamSet, Tensor, backward, tensor
from ..perception import PerceptionConfig, TokenSequence
from ..vocabulary import TrajectoryVocabulary, init_tokenizer, tokenize_op
from .common import (
    COORD_SCALE,
    EgoStatus,
    PlanOutput,
    PlannerConfig,
    TrainingBatchSource,
    apply_pos,
    init_backbone,
    status_embed_op,
    tokens_op,
)

N_HEADS = 9  # one per sub-metric, in ALL_METRICS order

# aggregation weights over the nine heads (nc dac ddc tlc ttc ep lk hc ec)
DEFAULT_HEAD_WEIGHTS = np.array([4.0, 4.0, 2.0, 2.0, 5.0, 5.0, 2.0, 1.0, 1.0])


def init_scoring_params(cfg: PlannerConfig, coords_dim: int, seed: int) -> ParamSet:
    ps = ParamSet(seed=seed)
    init_backbone(ps, cfg)
    d, h = cfg.dim, cfg.hidden
    init_tokenizer(ps, "tokenizer.", coords_dim, d)
    ps.add("sc.w1", (4 * d, h))
    ps.add("sc.b1", (h,), init="zeros")
    ps.add("sc.w2", (h, h))
    ps.add("sc.b2", (h,), init="zeros")
    ps.add("sc.w3", (h, N_HEADS))
    ps.add("sc.b3", (N_HEADS,), init="zeros")
    return ps


def path_cell_indices(vocab: TrajectoryVocabulary, pcfg: PerceptionConfig | None = None) -> np.ndarray:
    """Flat token index of each candidate waypoint in the feature grid."""
    pcfg = pcfg or PerceptionConfig()
    flats = np.stack([c.xy for c in vocab.candidates])  # (K, T, 2)
    cell_x = (pcfg.x_range[1] - pcfg.x_range[0]) / pcfg.grid_h
    cell_y = (pcfg.y_range[1] - pcfg.y_range[0]) / pcfg.grid_w
    i = np.clip(((flats[..., 0] - pcfg.x_range[0]) / cell_x).astype(np.int64), 0, pcfg.grid_h - 1)
    j = np.clip(((flats[..., 1] - pcfg.y_range[0]) / cell_y).astype(np.int64), 0, pcfg.grid_w - 1)
    return (i * pcfg.grid_w + j).reshape(-1)  # (K * T,)


def scoring_logits_op(
    ps: ParamSet,
    cfg: PlannerConfig,
    z: Tensor,
    cand_flats: np.ndarray,
    gather_idx: np.ndarray,
    status: np.ndarray,
    cand_subset: np.ndarray | None = None,
) -> Tensor:
    """(K, N_HEADS) logits for (a subset of) the candidate set."""
    n_wp = gather_idx.size // cand_flats.shape[0]
    if cand_subset is not None:
        cand_flats = cand_flats[cand_subset]
        gather_idx = gather_idx.reshape(-1, n_wp)[cand_subset].reshape(-1)
    k = cand_flats.shape[0]
    emb = tokenize_op(ps, "tokenizer.", cand_flats / COORD_SCALE)  # (K, d)
    att = nn.reshape(
        nn.softmax_attention(nn.reshape(emb, (k, 1, cfg.dim)), nn.expand_batch(z, k), nn.expand_batch(z, k)),
        (k, cfg.dim),
    )
    gathered = nn.mean_axis(nn.reshape(nn.index_rows(z, gather_idx), (k, n_wp, cfg.dim)), 1)
    status_emb = status_embed_op(ps, np.repeat(status[None, :], k, axis=0))
    x = nn.concat_last([emb, att, gathered, status_emb])
    x = nn.relu(nn.affine(x, ps["sc.w1"], ps["sc.b1"]))
    x = nn.relu(nn.affine(x, ps["sc.w2"], ps["sc.b2"]))
    return nn.affine(x, ps["sc.w3"], ps["sc.b3"])


def scoring_forward(
    z: TokenSequence,
    vocab: TrajectoryVocabulary,
    s: EgoStatus,
    p: ParamSet,
    cfg: PlannerConfig | None = None,
    pcfg: PerceptionConfig | None = None,
) -> np.ndarray:
    """Per-candidate sub-metric scores in (0, 1): sigmoid head outputs."""
    cfg = cfg or PlannerConfig()
    tokens = apply_pos(p, cfg, tensor(z.tokens))
    flats = vocab.flattened()
    idx = path_cell_indices(vocab, pcfg)
    logits = scoring_logits_op(p, cfg, tokens, flats, idx, s.as_array())
    return nn.sigmoid(logits).data


def aggregate_candidate_scores(sub: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Weighted sum of per-candidate sub-scores: (K, M) x (M,) -> (K,)."""
    weights = DEFAULT_HEAD_WEIGHTS if weights is None else np.asarray(weights, dtype=np.float64)
    sub = np.asarray(sub, dtype=np.float64)
    if sub.ndim != 2 or sub.shape[1] != weights.size:
        raise DimMismatch(f"scores {sub.shape} incompatible with {weights.size} weights")
    return sub @ weights


def select_best(scores: np.ndarray, vocab: TrajectoryVocabulary) -> PlanOutput:
    """Argmax candidate; ties break to the lowest index."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[0] != vocab.size:
        raise DimMismatch("one score per candidate required")
    best = int(np.argmax(scores))
    return PlanOutput(trajectory=vocab.candidates[best], scores=scores)


@dataclass
class ScoringTrainData:
    source: TrainingBatchSource
    targets: np.ndarray  # (n, K, 9) simulator sub-scores per scenario


def train_scoring(
    data: ScoringTrainData,
    vocab: TrajectoryVocabulary,
    cfg: PlannerConfig,
    seed: int = 0,
    steps: int = 800,
    batch_size: int = 4,
    candidates_per_step: int = 64,
    lr: float = 3e-3,
    weight_decay: float = 1e-5,
    pcfg: PerceptionConfig | None = None,
) -> ParamSet:
    """Binary cross-entropy distillation of simulator sub-metric tables."""
    flats = vocab.flattened()
    gather_idx = path_cell_indices(vocab, pcfg)
    ps = init_scoring_params(cfg, flats.shape[1], seed)
    opt = AdamW(ps, lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([0x5C0, seed]))
    source = data.source
    for _ in range(steps):
        idx = source.batch(batch_size)
        ps.zero_grad()
        z_all = tokens_op(ps, cfg, source.grids[idx])
        losses = []
        for row, si in enumerate(idx):
            cand = rng.choice(vocab.size, size=min(candidates_per_step, vocab.size), replace=False)
            zb = nn.reshape(
                nn.index_rows(nn.reshape(z_all, (len(idx), cfg.n_tokens * cfg.dim)), np.array([row])),
                (cfg.n_tokens, cfg.dim),
            )
            logits = scoring_logits_op(ps, cfg, zb, flats, gather_idx, source.status[si], cand_subset=cand)
            losses.append(nn.bce_with_logits(logits, data.targets[si][cand]))
        loss = nn.scale(nn.concat_last([nn.reshape(l, (1,)) for l in losses]), 1.0)
        loss = nn.scale(nn.sum_all(loss), 1.0 / len(losses))
        backward(loss)
        opt.step()
    return ps


def scoring_loss(ps, cfg, z_tokens, flats, gather_idx, status, targets):
    """Training-style loss closure for gradient checking."""
    logits = scoring_logits_op(ps, cfg, tensor(z_tokens), flats, gather_idx, status)
    return nn.bce_with_logits(logits, targets)
