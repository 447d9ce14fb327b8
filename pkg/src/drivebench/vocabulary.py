"""Trajectory clustering (diffusion anchors, dense scoring set) + tokenizer.

Clustering runs on flattened (x, y) waypoints in the ego frame; headings are
re-fit from positions afterwards.  Everything is a pure function of
(dataset, size, seed).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import TooFewSamples
from .geom import Trajectory, refit_headings
from .nn import ParamSet, Tensor, tensor

VOCAB_VERSION = 1


@dataclass
class TrajectoryVocabulary:
    candidates: list[Trajectory]  # ego frame; shared dt and horizon
    source_hash: str

    @property
    def size(self) -> int:
        return len(self.candidates)

    def flattened(self) -> np.ndarray:
        """(K, 2T) array of xy waypoints."""
        return np.stack([c.xy.ravel() for c in self.candidates])


def _check_same_shape(trajs: list[Trajectory]):
    dt, n = trajs[0].dt, len(trajs[0])
    for t in trajs[1:]:
        if t.dt != dt or len(t) != n:
            raise ValueError("all trajectories must share dt and length")


def _dataset_hash(x: np.ndarray, k: int, seed: int) -> str:
    h = hashlib.sha256()
    h.update(x.tobytes())
    h.update(str((x.shape, k, seed)).encode())
    return h.hexdigest()


def _kmeans(x: np.ndarray, k: int, seed: int, max_iter: int):
    """Seeded k-means++ / Lloyd; empty clusters reseed to the farthest point."""
    n = x.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence([0x4B4D, seed]))
    # k-means++ initialization
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i] = x[rng.integers(n)]
            continue
        centers[i] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((x - centers[i]) ** 2, axis=1))

    history = []
    assign = None
    for _ in range(max_iter):
        dists = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(dists, axis=1)
        point_d2 = dists[np.arange(n), new_assign]
        # reseed empty clusters to the globally farthest points
        empty = [c for c in range(k) if not np.any(new_assign == c)]
        for c in empty:
            far = int(np.argmax(point_d2))
            centers[c] = x[far]
            dists[:, c] = np.sum((x - centers[c]) ** 2, axis=1)
            new_assign = np.argmin(dists, axis=1)
            point_d2 = dists[np.arange(n), new_assign]
        history.append(float(point_d2.sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            centers[c] = x[assign == c].mean(axis=0)
    return centers, history


def _centers_to_trajectories(centers: np.ndarray, dt: float, n_wp: int) -> list[Trajectory]:
    out = []
    for row in centers:
        xy = row.reshape(n_wp, 2)
        wp = np.column_stack([xy, refit_headings(xy)])
        out.append(Trajectory(dt, wp))
    return out


def kmeans_trajectories(
    trajs: list[Trajectory], k: int, seed: int = 0, max_iter: int = 50
) -> TrajectoryVocabulary:
    """Cluster ego-frame trajectories into k representative candidates."""
    if len(trajs) < k:
        raise TooFewSamples(f"need at least {k} trajectories, got {len(trajs)}")
    _check_same_shape(trajs)
    x = np.stack([t.xy.ravel() for t in trajs])
    centers, _ = _kmeans(x, k, seed, max_iter)
    return TrajectoryVocabulary(
        candidates=_centers_to_trajectories(centers, trajs[0].dt, len(trajs[0])),
        source_hash=_dataset_hash(x, k, seed),
    )


def kmeans_objective_history(trajs: list[Trajectory], k: int, seed: int = 0, max_iter: int = 50):
    """Sum-of-squared-distance objective per Lloyd iteration (diagnostics)."""
    _check_same_shape(trajs)
    x = np.stack([t.xy.ravel() for t in trajs])
    _, history = _kmeans(x, k, seed, max_iter)
    return history


def full_stop_trajectory(dt: float, n_wp: int) -> Trajectory:
    return Trajectory(dt, np.zeros((n_wp, 3)))


def build_dense_vocabulary(
    trajs: list[Trajectory], size: int, seed: int = 0, max_iter: int = 50
) -> TrajectoryVocabulary:
    """K-means vocabulary plus the always-included full-stop candidate."""
    vocab = kmeans_trajectories(trajs, size, seed, max_iter)
    stop = full_stop_trajectory(trajs[0].dt, len(trajs[0]))
    is_dup = any(
        np.max(np.abs(c.xy - stop.xy)) < 1e-6 for c in vocab.candidates
    )
    candidates = list(vocab.candidates) if is_dup else list(vocab.candidates) + [stop]
    return TrajectoryVocabulary(candidates=candidates, source_hash=vocab.source_hash)


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------

def init_tokenizer(ps: ParamSet, prefix: str, in_dim: int, d: int):
    ps.add(f"{prefix}w", (in_dim, d))
    ps.add(f"{prefix}b", (d,), init="zeros")


def tokenize_op(ps: ParamSet, prefix: str, flats: np.ndarray) -> Tensor:
    """Differentiable tokenizer: (K, 2T) flattened waypoints -> (K, d)."""
    return nn.tanh(nn.affine(tensor(flats), ps[f"{prefix}w"], ps[f"{prefix}b"]))


def tokenize_trajectory(t: Trajectory, ps: ParamSet, prefix: str = "tokenizer.") -> np.ndarray:
    """Embedding of one trajectory under the learned tokenizer."""
    return tokenize_op(ps, prefix, t.xy.ravel()[None, :]).data[0]


# ---------------------------------------------------------------------------
# serialization (vocabulary files are reused across planner runs)
# ---------------------------------------------------------------------------

def vocabulary_to_dict(v: TrajectoryVocabulary) -> dict:
    return {
        "vocab_version": VOCAB_VERSION,
        "source_hash": v.source_hash,
        "dt": v.candidates[0].dt,
        "candidates": [c.waypoints.tolist() for c in v.candidates],
    }


def vocabulary_from_dict(d: dict) -> TrajectoryVocabulary:
    if d.get("vocab_version") != VOCAB_VERSION:
        raise ValueError(f"unsupported vocabulary version {d.get('vocab_version')}")
    return TrajectoryVocabulary(
        candidates=[Trajectory(d["dt"], np.asarray(w)) for w in d["candidates"]],
        source_hash=d["source_hash"],
    )


def write_vocabulary(v: TrajectoryVocabulary, path):
    with open(path, "w") as fh:
        json.dump(vocabulary_to_dict(v), fh)


def read_vocabulary(path) -> TrajectoryVocabulary:
    with open(path) as fh:
        return vocabulary_from_dict(json.load(fh))
