"""Ground-truth sub-metric tables for scoring-head distillation.

Every vocabulary candidate is rolled out through the simulator and scored by
the metric engine; the resulting (K, 9) tables are the supervision for the
scoring head and the brute-force oracle for selection quality.  Tables
depend only on scenario geometry, so they are cached per geometry seed.
"""
from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from ..metrics import (
    MetricConfig,
    SubMetricScores,
    aggregate_epdms,
    apply_human_filter,
    compute_sub_scores,
    expert_sub_scores,
)
from ..scenario import Scenario
from ..sim import rollout_open_loop
from ..vocabulary import TrajectoryVocabulary

TARGET_CACHE_VERSION = 1


def candidate_sub_scores(
    s: Scenario, vocab: TrajectoryVocabulary, cfg: MetricConfig | None = None
) -> np.ndarray:
    """(K, 9) raw sub-metric scores, one rollout per candidate."""
    cfg = cfg or MetricConfig()
    pose = s.current_pose
    out = np.empty((vocab.size, 9))
    for i, cand in enumerate(vocab.candidates):
        world = cand.from_frame(pose)
        trace = rollout_open_loop(s, world)
        out[i] = compute_sub_scores(trace, s, cfg).as_array()
    return out


def epdms_from_sub_rows(
    rows: np.ndarray, expert: SubMetricScores, cfg: MetricConfig | None = None
) -> np.ndarray:
    """Filtered EPDMS per candidate row (the exhaustive-selection oracle)."""
    cfg = cfg or MetricConfig()
    names = ("nc", "dac", "ddc", "tlc", "ttc", "ep", "lk", "hc", "ec")
    out = np.empty(rows.shape[0])
    for i, row in enumerate(rows):
        scores = SubMetricScores(**dict(zip(names, row)))
        out[i] = aggregate_epdms(apply_human_filter(scores, expert), cfg.weights)
    return out


def candidate_epdms(
    s: Scenario, vocab: TrajectoryVocabulary, cfg: MetricConfig | None = None
) -> np.ndarray:
    cfg = cfg or MetricConfig()
    rows = candidate_sub_scores(s, vocab, cfg)
    return epdms_from_sub_rows(rows, expert_sub_scores(s, cfg), cfg)


def targets_cache_key(seed_list: list[int], vocab: TrajectoryVocabulary, cfg: MetricConfig) -> str:
    h = hashlib.sha256()
    h.update(str(sorted(seed_list)).encode())
    h.update(vocab.source_hash.encode())
    h.update(str(vocab.size).encode())
    h.update(repr(cfg).encode())
    return h.hexdigest()


def compute_target_table(
    scenarios: list[Scenario],
    vocab: TrajectoryVocabulary,
    cfg: MetricConfig | None = None,
    cache_path: str | None = None,
    workers: int = 1,
) -> dict[int, np.ndarray]:
    """Sub-score tables keyed by geometry seed, with an optional disk cache."""
    cfg = cfg or MetricConfig()
    seeds = [s.geometry_seed for s in scenarios]
    key = targets_cache_key(seeds, vocab, cfg)
    if cache_path and os.path.exists(cache_path):
        with open(cache_path) as fh:
            blob = json.load(fh)
        if blob.get("cache_version") == TARGET_CACHE_VERSION and blob.get("key") == key:
            return {int(k): np.asarray(v) for k, v in blob["tables"].items()}

    unique: dict[int, Scenario] = {}
    for s in scenarios:
        unique.setdefault(s.geometry_seed, s)  # tables are style-independent
    items = sorted(unique.items())
    if workers > 1 and len(items) > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(workers) as pool:
            rows = pool.starmap(
                _table_worker, [(s, vocab, cfg) for _, s in items], chunksize=4
            )
        tables = {seed: rows[i] for i, (seed, _) in enumerate(items)}
    else:
        tables = {seed: candidate_sub_scores(s, vocab, cfg) for seed, s in items}

    if cache_path:
        blob = {
            "cache_version": TARGET_CACHE_VERSION,
            "key": key,
            "tables": {str(k): v.tolist() for k, v in tables.items()},
        }
        with open(cache_path, "w") as fh:
            json.dump(blob, fh)
    return tables


def _table_worker(s: Scenario, vocab: TrajectoryVocabulary, cfg: MetricConfig) -> np.ndarray:
    return candidate_sub_scores(s, vocab, cfg)
