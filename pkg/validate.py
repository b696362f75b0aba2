"""
Leaf validation: scoring the candidate templates a forest query returns.

The breadth-first validator scores every surviving candidate on one chunk of
descriptor coordinates per stage, keeps a running mean per candidate, and
only lets candidates above max(median, alpha) into the next stage. The full
validator scores every candidate on every coordinate; it is the reference
the breadth-first validator is checked against.
"""
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from config import ValidationConfig
from features import DISTANCE_TABLE, MAX_DISTANCE

logger = logging.getLogger(__name__)

NEUTRAL_SCORE = 0.5


@lru_cache(maxsize=32)
def _plan(descriptor_len, chunk_size, seed):
    order = np.random.default_rng(seed).permutation(descriptor_len)
    chunks = tuple(order[i:i + chunk_size] for i in range(0, descriptor_len, chunk_size))
    for chunk in chunks:
        chunk.setflags(write=False)
    return chunks


def chunk_plan(descriptor_len, chunk_size, seed=0):
    """Seeded permutation of all coordinates cut into chunks of chunk_size (last may be short)."""
    if descriptor_len < 1 or chunk_size < 1:
        raise ValueError("descriptor_len and chunk_size must be positive")
    return list(_plan(int(descriptor_len), int(chunk_size), int(seed)))


@dataclass
class ChunkScores:
    scores: np.ndarray
    # False where the candidate has no foreground coordinate in the chunk
    informative: np.ndarray
    comparisons: np.ndarray


def score_chunk(window, descriptors, fg_masks, depth_patches, chunk, n_modalities,
                use_depth=True, depth_tolerance=50.0):
    """
    Chunk scores of several candidates (rows of the given matrices) at once.

    Feature term: 1 - sum of distances / (4 * foreground count). Depth term:
    1 - min(|delta depth| / tolerance, 1), averaged over the foreground
    coordinates whose depth is valid in both window and template. With a
    depth term present the two are averaged.
    """
    chunk = np.asarray(chunk)
    query = np.asarray(window.descriptor)[chunk]
    fg = fg_masks[:, chunk]
    distances = DISTANCE_TABLE[query[None, :], descriptors[:, chunk]]
    n_fg = fg.sum(axis=1)
    total = np.where(fg, distances, 0).sum(axis=1, dtype=np.int64)
    informative = n_fg > 0
    feature = np.where(informative, 1.0 - total / (MAX_DISTANCE * np.maximum(n_fg, 1)),
                       NEUTRAL_SCORE)
    scores = feature
    if use_depth and window.depth is not None:
        location = chunk // n_modalities
        query_depth = np.asarray(window.depth, dtype=np.float64)[location]
        template_depth = depth_patches[:, location].astype(np.float64)
        valid = fg & (query_depth[None, :] > 0) & (template_depth > 0)
        n_valid = valid.sum(axis=1)
        closeness = 1.0 - np.minimum(np.abs(template_depth - query_depth[None, :])
                                     / depth_tolerance, 1.0)
        depth_term = np.where(valid, closeness, 0.0).sum(axis=1) / np.maximum(n_valid, 1)
        scores = np.where(n_valid > 0, 0.5 * feature + 0.5 * depth_term, feature)
    return ChunkScores(scores=scores, informative=informative, comparisons=n_fg)


def chunk_score(window, t, chunk, use_depth=True, depth_tolerance=50.0):
    """Score of one template on one chunk; 0.5 when the chunk misses its foreground."""
    result = score_chunk(window, t.descriptor[None, :], t.fg_mask[None, :],
                         t.depth_patch[None, :], chunk, t.n_modalities, use_depth,
                         depth_tolerance)
    return float(result.scores[0])


@dataclass
class ValidationResult:
    # (template id, final score) or None
    winner: Optional[tuple]
    stages_run: int
    survivors_per_stage: list = field(default_factory=list)
    chunk_evaluations: int = 0
    confirm_evaluations: int = 0
    comparisons: int = 0
    n_candidates: int = 0

    def to_record(self, **extra):
        record = {
            "winner": None if self.winner is None else int(self.winner[0]),
            "score": None if self.winner is None else float(self.winner[1]),
            "candidates": self.n_candidates,
            "stages_run": self.stages_run,
            "survivors_per_stage": [int(s) for s in self.survivors_per_stage],
            "chunk_evaluations": self.chunk_evaluations,
            "confirm_evaluations": self.confirm_evaluations,
            "comparisons": self.comparisons,
        }
        record.update(extra)
        return record


def _best(ids, means, judged):
    """Highest mean among `judged` rows; rows are in ascending id order so argmax breaks ties low."""
    if not judged.size:
        return None
    row = judged[int(np.argmax(means[judged]))]
    return int(ids[row]), float(means[row])


def _stage_survivors(means, informed, alpha):
    """
    Positions that pass one stage out of m: informed candidates above
    max(median, alpha) of the informed means, or failing that the ones tied at
    the best mean if it beats alpha; then uninformed candidates while the
    total stays within ceil(m/2). Positions are in ascending id order, so
    every cap keeps the lowest ids.
    """
    m = len(means)
    judged = np.flatnonzero(informed)
    judged_means = means[judged]
    passed = judged[judged_means > max(float(np.median(judged_means)), alpha)]
    if not passed.size and judged_means.max() > alpha:
        passed = judged[judged_means == judged_means.max()][:-(-judged.size // 2)]
    room = -(-m // 2) - passed.size
    waiting = np.flatnonzero(~informed)[:max(room, 0)]
    return np.sort(np.concatenate([passed, waiting]))


def preemptive_validate(window, candidates, store, cfg=None):
    """
    Breadth-first preemptive validation of `candidates` against `window`.

    Stage k scores the next chunk for every survivor and keeps at most half
    of them (see _stage_survivors). A candidate whose foreground has not shown
    up in any chunk yet has no running mean and only fills leftover places. A
    chunk that misses the foreground of every survivor is not a stage.
    """
    cfg = cfg or ValidationConfig()
    ids = np.array(sorted(int(c) for c in candidates), dtype=np.int64)
    if not len(ids):
        raise ValueError("preemptive_validate needs at least one candidate")
    rows = store.rows(ids)
    descriptors = store.descriptors[rows]
    fg_masks = store.fg_masks[rows]
    depth_patches = store.depth_patches[rows]
    plan = chunk_plan(store.descriptor_len, min(cfg.chunk_size, store.descriptor_len),
                      cfg.plan_seed)

    n = len(ids)
    sums = np.zeros(n)
    counts = np.zeros(n, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    survivors_per_stage = []
    chunk_evaluations = comparisons = 0
    stages = consumed = 0

    for chunk in plan:
        active = np.flatnonzero(alive)
        result = score_chunk(window, descriptors[active], fg_masks[active],
                             depth_patches[active], chunk, store.n_modalities,
                             cfg.use_depth, cfg.depth_tolerance)
        consumed += 1
        chunk_evaluations += len(active)
        comparisons += int(result.comparisons.sum())
        sums[active] += np.where(result.informative, result.scores, 0.0)
        counts[active] += result.informative
        if not result.informative.any():
            continue

        stages += 1
        informed = counts[active] > 0
        means = sums[active] / np.maximum(counts[active], 1)
        passed = active[_stage_survivors(means, informed, cfg.alpha)]
        alive[:] = False
        alive[passed] = True
        survivors_per_stage.append(int(alive.sum()))
        # a lone survivor that has not been judged yet keeps going
        if not alive.any() or (alive.sum() == 1 and counts[alive].min() > 0):
            break

    means = np.divide(sums, counts, out=np.zeros(n), where=counts > 0)
    judged = np.flatnonzero(alive & (counts > 0))
    best = _best(ids, means, judged)
    confirm_evaluations = 0
    if best is not None and cfg.confirm_winner and consumed < len(plan):
        row = int(np.searchsorted(ids, best[0]))
        for chunk in plan[consumed:]:
            result = score_chunk(window, descriptors[row:row + 1], fg_masks[row:row + 1],
                                 depth_patches[row:row + 1], chunk, store.n_modalities,
                                 cfg.use_depth, cfg.depth_tolerance)
            confirm_evaluations += 1
            comparisons += int(result.comparisons.sum())
            if result.informative[0]:
                sums[row] += result.scores[0]
                counts[row] += 1
        best = (best[0], float(sums[row] / counts[row]))

    winner = best if best is not None and best[1] > cfg.alpha else None
    return ValidationResult(
        winner=winner,
        stages_run=stages,
        survivors_per_stage=survivors_per_stage,
        chunk_evaluations=chunk_evaluations,
        confirm_evaluations=confirm_evaluations,
        comparisons=comparisons,
        n_candidates=n,
    )


def full_scores(window, candidates, store, use_depth=True, depth_tolerance=50.0):
    """(ids ascending, scores) of every candidate over all coordinates."""
    ids = np.array(sorted(int(c) for c in candidates), dtype=np.int64)
    rows = store.rows(ids)
    everything = np.arange(store.descriptor_len)
    result = score_chunk(window, store.descriptors[rows], store.fg_masks[rows],
                         store.depth_patches[rows], everything, store.n_modalities,
                         use_depth, depth_tolerance)
    return ids, result.scores


def full_validate(window, candidates, store, use_depth=True, depth_tolerance=50.0):
    """Exhaustive scoring; returns (template id, score), ties to the lowest id."""
    if not len(candidates):
        raise ValueError("full_validate needs at least one candidate")
    ids, scores = full_scores(window, candidates, store, use_depth, depth_tolerance)
    best = int(np.argmax(scores))
    return int(ids[best]), float(scores[best])


def full_validation_cost(candidates, store, chunk_size):
    """(chunk evaluations, comparisons) full scoring would spend, in chunk units."""
    n_chunks = -(-store.descriptor_len // chunk_size)
    rows = store.rows(candidates)
    return len(rows) * n_chunks, int(store.fg_masks[rows].sum())
