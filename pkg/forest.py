"""
Fuzzy decision forest over template descriptors.

Every node carries a preemptive background rejector: a lookup table of the
feature values its templates actually show on a few coordinates. A query
whose values on those coordinates are mostly unknown is dropped on the spot.
Internal nodes split with an exemplar test: the distance between the query
and a training template on a small coordinate subset, minus a threshold.
During training, templates whose margin falls inside [-xi, xi] are copied
into both children; at query time a descriptor follows a single path.
"""
import dataclasses
import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Union

import numpy as np

from config import ForestConfig
from errors import CompatibilityError
from features import DISTANCE_TABLE, N_BINS

logger = logging.getLogger(__name__)


class Route(Enum):
    LEFT = "left"
    RIGHT = "right"
    BOTH = "both"


@dataclass(frozen=True, eq=False)
class SplitParams:
    selector: np.ndarray
    exemplar: np.ndarray
    tau: float
    fuzzy_margin: float

    def __post_init__(self):
        selector = np.asarray(self.selector, dtype=np.int64)
        exemplar = np.asarray(self.exemplar, dtype=np.uint8)
        if selector.ndim != 1 or len(selector) == 0:
            raise ValueError("selector needs at least one coordinate")
        if len(np.unique(selector)) != len(selector):
            raise ValueError("selector coordinates must be distinct")
        if exemplar.shape != selector.shape:
            raise ValueError("exemplar must have one value per selected coordinate")
        if self.fuzzy_margin < 0:
            raise ValueError("fuzzy_margin must be >= 0")
        object.__setattr__(self, "selector", selector)
        object.__setattr__(self, "exemplar", exemplar)


@dataclass(frozen=True, eq=False)
class RejectorParams:
    """
    known_table[j, i] is True when value i was seen often enough (density > rho)
    on selector[j] among the node's templates. Column 0 (missing) is never known.
    """
    selector: np.ndarray
    known_table: np.ndarray
    accept_floor: float
    density_floor: float

    def __post_init__(self):
        selector = np.asarray(self.selector, dtype=np.int64)
        known = np.asarray(self.known_table, dtype=bool)
        if known.shape != (len(selector), N_BINS + 1):
            raise ValueError(f"known_table must have shape ({len(selector)}, {N_BINS + 1})")
        object.__setattr__(self, "selector", selector)
        object.__setattr__(self, "known_table", known)

    @property
    def always_accepts(self):
        return self.accept_floor <= 0.0


def always_accept_rejector(density_floor=0.05):
    known = np.ones((1, N_BINS + 1), dtype=bool)
    known[:, 0] = False
    return RejectorParams(selector=np.array([0]), known_table=known, accept_floor=0.0,
                          density_floor=density_floor)


@dataclass(frozen=True, eq=False)
class Leaf:
    template_ids: tuple


@dataclass(frozen=True, eq=False)
class Split:
    params: SplitParams
    left: "TreeNode"
    right: "TreeNode"


@dataclass(frozen=True, eq=False)
class TreeNode:
    rejector: RejectorParams
    body: Union[Split, Leaf]

    @property
    def is_leaf(self):
        return isinstance(self.body, Leaf)


@dataclass(frozen=True)
class Rejected:
    depth: int
    comparisons: int = 0
    lookups: int = 0


@dataclass(frozen=True)
class Candidates:
    ids: frozenset
    comparisons: int = 0
    lookups: int = 0
    depth: int = 0


# --- node statistics ---------------------------------------------------------

def node_distribution(descriptors, selector):
    """
    D(i) for i in 0..8 over the selected coordinates of every template.

    Index 0 (missing) is always 0 but missing values still count in the
    denominator |S| * d'.
    """
    values = np.asarray(descriptors)[:, np.asarray(selector)].ravel()
    counts = np.bincount(values, minlength=N_BINS + 1).astype(np.float64)
    counts[0] = 0.0
    return counts / max(values.size, 1)


def distribution_entropy(distribution):
    p = np.asarray(distribution, dtype=np.float64)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def entropy(descriptors, selector):
    """Unsupervised entropy of the node distribution (natural log)."""
    return distribution_entropy(node_distribution(descriptors, selector))


def split_margin(v, p):
    distance = DISTANCE_TABLE[p.exemplar, np.asarray(v)[p.selector]].sum(dtype=np.int64)
    return float(distance) - p.tau


def split_margins(descriptors, p):
    distances = DISTANCE_TABLE[p.exemplar[None, :], np.asarray(descriptors)[:, p.selector]]
    return distances.sum(axis=1, dtype=np.int64) - p.tau


def route(v, p):
    margin = split_margin(v, p)
    if margin < -p.fuzzy_margin:
        return Route.LEFT
    if margin > p.fuzzy_margin:
        return Route.RIGHT
    return Route.BOTH


def _partition(margins, fuzzy_margin):
    return margins <= fuzzy_margin, margins >= -fuzzy_margin


def _weighted_entropy(values, weights):
    counts = np.bincount(values.ravel(), weights=np.repeat(weights, values.shape[1]),
                         minlength=N_BINS + 1)
    counts[0] = 0.0
    return distribution_entropy(counts / (weights.sum() * values.shape[1]))


def split_energy(descriptors, fg_masks, p):
    """
    Foreground-weighted information gain of a fuzzy split.

    A template inside the fuzzy interval goes to both children with weight
    1/2 in each, so child masses add up to |S| and the gain is never
    negative. A split that leaves a child empty or equal to the parent
    scores 0.
    """
    descriptors = np.asarray(descriptors)
    n = len(descriptors)
    left, right = _partition(split_margins(descriptors, p), p.fuzzy_margin)
    n_left, n_right = int(left.sum()), int(right.sum())
    if n_left in (0, n) or n_right in (0, n):
        return 0.0
    weight = int(np.asarray(fg_masks)[:, p.selector].sum())
    if weight == 0:
        return 0.0
    values = descriptors[:, p.selector]
    shares = np.where(left & right, 0.5, 1.0)
    w_left, w_right = shares[left], shares[right]
    gain = (entropy(descriptors, p.selector)
            - (w_left.sum() * _weighted_entropy(values[left], w_left)
               + w_right.sum() * _weighted_entropy(values[right], w_right)) / n)
    return weight * max(gain, 0.0)


# --- rejector ----------------------------------------------------------------

def known_values(descriptors, selector, density_floor):
    """Per-coordinate known table: value i is known on coordinate j iff D_j(i) > rho."""
    table = np.zeros((len(selector), N_BINS + 1), dtype=bool)
    for j, coordinate in enumerate(selector):
        table[j] = node_distribution(descriptors, [coordinate]) > density_floor
    table[:, 0] = False
    return table


def known_fractions(descriptors, rejector):
    """Share of selected values marked known, for every row of `descriptors`."""
    values = np.asarray(descriptors)[..., rejector.selector]
    rows = np.arange(len(rejector.selector))
    return rejector.known_table[rows, values].mean(axis=-1)


def reject(v, r):
    """True when fewer than accept_floor of the selected values are known."""
    return bool(known_fractions(v, r) < r.accept_floor)


def _foreground_stats(descriptors, fg_masks, selector):
    values = descriptors[:, selector]
    fg = fg_masks[:, selector]
    fg_values = values[fg]
    counts = np.bincount(fg_values, minlength=N_BINS + 1).astype(np.float64)
    counts[0] = 0.0
    fg_entropy = distribution_entropy(counts / max(fg_values.size, 1))
    bg_values = values[~fg]
    bg_counts = np.bincount(bg_values, minlength=N_BINS + 1).astype(np.float64)
    bg_counts[0] = 0.0
    bg_entropy = distribution_entropy(bg_counts / max(bg_values.size, 1))
    return int(fg_values.size), fg_entropy, bg_entropy


def train_rejector(descriptors, fg_masks, candidates, accept_floor, density_floor,
                   min_coverage=0.5, objective="entropy"):
    """
    Choose the rejector selector from `candidates`.

    A candidate must accept every template at the node. Among those, selectors
    whose foreground share reaches `min_coverage` are preferred, then the
    lowest foreground entropy ("entropy") or the lowest foreground/background
    information gain ("gain"), then candidate order.
    """
    descriptors = np.asarray(descriptors)
    fg_masks = np.asarray(fg_masks, dtype=bool)
    best_key, best = None, None
    for index, selector in enumerate(candidates):
        selector = np.asarray(selector, dtype=np.int64)
        n_fg, fg_entropy, bg_entropy = _foreground_stats(descriptors, fg_masks, selector)
        if n_fg == 0:
            continue
        table = known_values(descriptors, selector, density_floor)
        rejector = RejectorParams(selector, table, accept_floor, density_floor)
        if (known_fractions(descriptors, rejector) < accept_floor).any():
            continue
        occurrences = descriptors.shape[0] * len(selector)
        coverage = n_fg / occurrences
        if objective == "gain":
            n_bg = occurrences - n_fg
            score = (entropy(descriptors, selector)
                     - (n_fg * fg_entropy + n_bg * bg_entropy) / occurrences)
        else:
            score = fg_entropy
        key = (coverage < min_coverage, score, index)
        if best_key is None or key < best_key:
            best_key, best = key, rejector
    if best is None:
        logger.debug("No admissible rejector among %d candidates; node accepts everything",
                     len(candidates))
        return always_accept_rejector(density_floor)
    return best


# --- training ----------------------------------------------------------------

def sample_split_candidates(descriptors, fg_masks, cfg, rng):
    """Draw |Theta| exemplar splits whose selectors lie on the node's foreground support."""
    n, length = descriptors.shape
    support = np.flatnonzero(fg_masks.any(axis=0))
    if len(support) < cfg.d_prime:
        support = np.arange(length)
    d_prime = min(cfg.d_prime, len(support))
    candidates = []
    for _ in range(cfg.n_candidates):
        selector = rng.choice(support, size=d_prime, replace=False)
        exemplar = descriptors[int(rng.integers(n)), selector]
        sample = rng.choice(n, size=min(n, cfg.tau_subsample), replace=False)
        distances = DISTANCE_TABLE[exemplar[None, :], descriptors[sample][:, selector]].sum(axis=1)
        low, high = float(distances.min()), float(distances.max())
        tau = low if low == high else float(rng.uniform(low, high))
        candidates.append(SplitParams(selector, exemplar, tau, cfg.fuzzy_margin))
    return candidates


def _train_node(descriptors, fg_masks, ids, rows, depth, cfg, rng):
    node_desc = descriptors[rows]
    node_fg = fg_masks[rows]
    candidates = sample_split_candidates(node_desc, node_fg, cfg, rng)
    rejector = train_rejector(node_desc, node_fg, [c.selector for c in candidates],
                              cfg.accept_floor, cfg.density_floor,
                              cfg.rejector_min_coverage, cfg.rejector_objective)
    if depth >= cfg.max_depth or len(rows) <= cfg.min_leaf:
        return TreeNode(rejector, Leaf(tuple(int(i) for i in ids[rows])))

    energies = [split_energy(node_desc, node_fg, c) for c in candidates]
    best = int(np.argmax(energies))
    if energies[best] <= 0:
        return TreeNode(rejector, Leaf(tuple(int(i) for i in ids[rows])))

    params = candidates[best]
    left, right = _partition(split_margins(node_desc, params), params.fuzzy_margin)
    return TreeNode(rejector, Split(
        params,
        _train_node(descriptors, fg_masks, ids, rows[left], depth + 1, cfg, rng),
        _train_node(descriptors, fg_masks, ids, rows[right], depth + 1, cfg, rng),
    ))


def _resolve_depth(cfg, store):
    return dataclasses.replace(cfg, max_depth=cfg.depth_for(store.n_objects))


def train_tree(store, cfg=None, seed=0):
    """Grow one fuzzy tree over every template of `store`."""
    cfg = _resolve_depth(cfg or ForestConfig(), store)
    rng = np.random.default_rng(seed)
    rows = np.arange(len(store))
    return _train_node(store.descriptors, store.fg_masks, store.ids, rows, 0, cfg, rng)


def _train_tree_job(args):
    store, cfg, seed = args
    return train_tree(store, cfg, seed)


# --- querying ----------------------------------------------------------------

def descend(tree, v):
    """
    Follow one path. A margin inside the fuzzy interval goes to the child on
    whose side it lies (margin <= 0 goes left).
    """
    node, depth = tree, 0
    comparisons = lookups = 0
    while True:
        if not node.rejector.always_accepts:
            lookups += len(node.rejector.selector)
            if reject(v, node.rejector):
                return Rejected(depth, comparisons, lookups)
        if node.is_leaf:
            return Candidates(frozenset(node.body.template_ids), comparisons, lookups, depth)
        params = node.body.params
        comparisons += len(params.selector)
        node = node.body.left if split_margin(v, params) <= 0 else node.body.right
        depth += 1


def iter_nodes(tree, depth=0):
    """Pre-order (node, depth) pairs."""
    yield tree, depth
    if not tree.is_leaf:
        yield from iter_nodes(tree.body.left, depth + 1)
        yield from iter_nodes(tree.body.right, depth + 1)


@dataclass(frozen=True, eq=False)
class Forest:
    trees: tuple
    descriptor_len: int
    # (patch_size, n_modalities, locations) of the template store it was trained on
    layout: tuple
    params: dict

    def query(self, v):
        return forest_query(self, v)

    def check_layout(self, store):
        if store.descriptor_len != self.descriptor_len or store.layout() != self.layout:
            raise CompatibilityError(
                f"forest descriptor layout (length {self.descriptor_len}) does not match the "
                f"template store (length {store.descriptor_len})")

    def stats(self):
        """Per-tree node counts, leaf depth histogram and leaf sizes."""
        report = []
        for tree in self.trees:
            leaves = [(node, depth) for node, depth in iter_nodes(tree) if node.is_leaf]
            sizes = [len(node.body.template_ids) for node, _ in leaves]
            report.append({
                "nodes": sum(1 for _ in iter_nodes(tree)),
                "leaves": len(leaves),
                "max_depth": max(depth for _, depth in leaves),
                "depth_histogram": dict(sorted(Counter(depth for _, depth in leaves).items())),
                "leaf_size_min": min(sizes),
                "leaf_size_mean": float(np.mean(sizes)),
                "leaf_size_max": max(sizes),
                "leaf_size_total": sum(sizes),
            })
        return report


def forest_query(forest, v):
    """Rejected (shallowest depth) if every tree rejects, else the union of the leaves reached."""
    results = [descend(tree, v) for tree in forest.trees]
    comparisons = sum(r.comparisons for r in results)
    lookups = sum(r.lookups for r in results)
    accepted = [r for r in results if isinstance(r, Candidates)]
    if not accepted:
        return Rejected(min(r.depth for r in results), comparisons, lookups)
    ids = frozenset().union(*(r.ids for r in accepted))
    return Candidates(ids, comparisons, lookups, max(r.depth for r in accepted))


def train_forest(store, cfg=None, seed=0, workers=1):
    """
    Train cfg.n_trees trees with seeds spawned from `seed`. With workers > 1
    the trees are grown in a process pool; the result does not depend on it.
    """
    cfg = _resolve_depth(cfg or ForestConfig(), store)
    if isinstance(seed, np.random.SeedSequence):
        # fresh copy: spawning advances the caller's sequence otherwise
        seed = np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key)
    else:
        seed = np.random.SeedSequence(seed)
    seeds = seed.spawn(cfg.n_trees)
    jobs = [(store, cfg, s) for s in seeds]
    if workers > 1 and cfg.n_trees > 1:
        with ProcessPoolExecutor(max_workers=min(workers, cfg.n_trees)) as pool:
            trees = list(pool.map(_train_tree_job, jobs))
    else:
        trees = [_train_tree_job(job) for job in jobs]
    forest = Forest(trees=tuple(trees), descriptor_len=store.descriptor_len,
                    layout=store.layout(), params=forest_params(cfg))
    for i, tree_stats in enumerate(forest.stats()):
        logger.info("Tree %d: %d nodes, %d leaves, depth %d", i, tree_stats["nodes"],
                    tree_stats["leaves"], tree_stats["max_depth"])
    return forest


def forest_params(cfg):
    return {
        "n_trees": cfg.n_trees,
        "d_prime": cfg.d_prime,
        "n_candidates": cfg.n_candidates,
        "fuzzy_margin": cfg.fuzzy_margin,
        "accept_floor": cfg.accept_floor,
        "density_floor": cfg.density_floor,
        "max_depth": cfg.max_depth,
        "min_leaf": cfg.min_leaf,
    }


def leaf_sets(tree):
    """Template-id tuples of every leaf, left to right."""
    return [node.body.template_ids for node, _ in iter_nodes(tree) if node.is_leaf]
