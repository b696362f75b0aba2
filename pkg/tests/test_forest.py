import math
import os
import sys
import unittest
from collections import Counter

import numpy as np

# Add parent directory to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import ForestConfig
from errors import CompatibilityError
from features import PoseSample, Template, TemplateStore, template_locations
from forest import (Candidates, Forest, Leaf, Rejected, RejectorParams, Route, Split, SplitParams,
                    TreeNode, always_accept_rejector, descend, distribution_entropy, entropy,
                    forest_query, known_values, leaf_sets, node_distribution, reject, route,
                    split_energy, split_margin, train_forest, train_rejector, train_tree)


def make_store(n, seed=0, patch=8, step=2, fg_rate=0.6, n_objects=3):
    rng = np.random.default_rng(seed)
    locations = template_locations((patch, patch), step)
    templates = []
    for i in range(n):
        fg = np.repeat(rng.random(len(locations)) < fg_rate, 3)
        templates.append(Template(
            id=i, object_id=i % n_objects, pose=PoseSample(i, 0, 0, 1),
            patch_size=(patch, patch),
            locations=locations, descriptor=rng.integers(1, 9, size=3 * len(locations)),
            fg_mask=fg, depth_patch=np.zeros(len(locations))))
    return TemplateStore(templates)


def brute_entropy(rows, weights=None):
    if weights is None:
        weights = [1.0] * len(rows)
    counts, total = Counter(), 0.0
    for row, w in zip(rows, weights):
        for v in row:
            total += w
            if v != 0:
                counts[v] += w
    return -sum((c / total) * math.log(c / total) for c in counts.values())


def full_known(selector_len):
    known = np.ones((selector_len, 9), dtype=bool)
    known[:, 0] = False
    return known


class TestNodeStatistics(unittest.TestCase):
    def test_point_mass(self):
        descriptors = np.full((3, 4), 5)
        distribution = node_distribution(descriptors, [0, 2])
        self.assertEqual(distribution[5], 1.0)
        self.assertEqual(distribution.sum(), 1.0)
        self.assertEqual(entropy(descriptors, [0, 2]), 0.0)

    def test_uniform_over_all_bins(self):
        descriptors = np.arange(1, 9)[None, :]
        distribution = node_distribution(descriptors, range(8))
        self.assertTrue(np.allclose(distribution[1:], 1 / 8))
        self.assertEqual(distribution[0], 0.0)
        self.assertAlmostEqual(entropy(descriptors, range(8)), math.log(8), places=9)

    def test_three_to_one(self):
        descriptors = np.array([[3, 3], [3, 7]])
        distribution = node_distribution(descriptors, [0, 1])
        self.assertAlmostEqual(distribution[3], 0.75)
        self.assertAlmostEqual(distribution[7], 0.25)
        self.assertAlmostEqual(distribution_entropy(distribution), 0.5623351446, places=9)

    def test_missing_values_count_in_denominator(self):
        descriptors = np.array([[0, 4]])
        distribution = node_distribution(descriptors, [0, 1])
        self.assertEqual(distribution[0], 0.0)
        self.assertEqual(distribution[4], 0.5)


class TestSplits(unittest.TestCase):
    def setUp(self):
        self.descriptors = np.array([[1, 1, 2, 2],
                                     [1, 2, 2, 3],
                                     [5, 5, 6, 6],
                                     [5, 6, 7, 7]])
        self.fg = np.ones_like(self.descriptors, dtype=bool)

    def test_margin_examples(self):
        p = SplitParams(selector=[0, 1, 2], exemplar=[1, 1, 1], tau=3, fuzzy_margin=1)
        self.assertEqual(split_margin([1, 1, 1], p), -3)
        q = SplitParams(selector=[0, 1, 2], exemplar=[1, 0, 5], tau=2, fuzzy_margin=1)
        self.assertEqual(split_margin([2, 5, 5], q), 3)

    def test_route(self):
        p = SplitParams(selector=[0], exemplar=[1], tau=2.5, fuzzy_margin=1.0)
        self.assertEqual(route([1], p), Route.LEFT)      # margin -2.5
        self.assertEqual(route([4], p), Route.BOTH)      # margin 0.5
        self.assertEqual(route([5], p), Route.RIGHT)     # margin 1.5

    def test_invalid_split_params(self):
        with self.assertRaises(ValueError):
            SplitParams(selector=[1, 1], exemplar=[2, 2], tau=1, fuzzy_margin=0)
        with self.assertRaises(ValueError):
            SplitParams(selector=[], exemplar=[], tau=1, fuzzy_margin=0)
        with self.assertRaises(ValueError):
            SplitParams(selector=[0], exemplar=[2], tau=1, fuzzy_margin=-1)

    def expected_energy(self, left, right, selector, both=()):
        rows = self.descriptors[:, selector]
        n = len(rows)
        share = {i: (0.5 if i in both else 1.0) for i in range(n)}
        w_left = [share[i] for i in left]
        w_right = [share[i] for i in right]
        gain = brute_entropy(rows) - (sum(w_left) * brute_entropy(rows[left], w_left)
                                      + sum(w_right) * brute_entropy(rows[right], w_right)) / n
        return int(self.fg[:, selector].sum()) * gain

    def test_crisp_energy(self):
        # distances to [1, 1] are 0, 1, 8, 7
        p = SplitParams(selector=[0, 1], exemplar=[1, 1], tau=4, fuzzy_margin=1)
        expected = self.expected_energy([0, 1], [2, 3], [0, 1])
        self.assertAlmostEqual(split_energy(self.descriptors, self.fg, p), expected, places=9)
        self.assertGreater(expected, 0)

    def test_fuzzy_energy_copies_boundary_templates(self):
        # margins -4, -3, 4, 3: rows 1 and 3 lie inside [-3.5, 3.5]
        p = SplitParams(selector=[0, 1], exemplar=[1, 1], tau=4, fuzzy_margin=3.5)
        expected = self.expected_energy([0, 1, 3], [1, 2, 3], [0, 1], both=(1, 3))
        self.assertAlmostEqual(split_energy(self.descriptors, self.fg, p), expected, places=9)
        self.assertGreater(expected, 0)

    def test_fuzzy_energy_is_never_negative(self):
        store = make_store(200, seed=4)
        rng = np.random.default_rng(0)
        energies = []
        for _ in range(60):
            selector = rng.choice(store.descriptor_len, size=8, replace=False)
            exemplar = store.descriptors[int(rng.integers(len(store))), selector]
            p = SplitParams(selector, exemplar, tau=float(rng.uniform(6, 18)),
                            fuzzy_margin=float(rng.choice([1.0, 2.0, 3.0])))
            energies.append(split_energy(store.descriptors, store.fg_masks, p))
        self.assertGreaterEqual(min(energies), 0.0)
        self.assertGreater(max(energies), 0.0)

    def test_degenerate_splits_score_zero(self):
        everything_both = SplitParams(selector=[0, 1], exemplar=[1, 1], tau=4, fuzzy_margin=10)
        self.assertEqual(split_energy(self.descriptors, self.fg, everything_both), 0.0)
        background = np.zeros_like(self.fg)
        p = SplitParams(selector=[0, 1], exemplar=[1, 1], tau=4, fuzzy_margin=1)
        self.assertEqual(split_energy(self.descriptors, background, p), 0.0)


class TestRejector(unittest.TestCase):
    def test_known_table(self):
        descriptors = np.array([[3], [3], [3], [7]])
        table = known_values(descriptors, [0], 0.5)
        self.assertEqual(np.flatnonzero(table[0]).tolist(), [3])

    def test_zero_query_rejected(self):
        r = RejectorParams(selector=np.arange(10), known_table=full_known(10),
                           accept_floor=0.6, density_floor=0.05)
        self.assertTrue(reject(np.zeros(12, dtype=np.uint8), r))
        self.assertFalse(reject(np.ones(12, dtype=np.uint8), r))

    def test_six_of_ten_known_below_floor(self):
        known = np.zeros((10, 9), dtype=bool)
        known[:6, 1] = True
        query = np.ones(10, dtype=np.uint8)
        self.assertTrue(reject(query, RejectorParams(np.arange(10), known, 0.7, 0.05)))
        self.assertFalse(reject(query, RejectorParams(np.arange(10), known, 0.6, 0.05)))

    def test_lower_floor_never_rejects_more(self):
        rng = np.random.default_rng(1)
        known = rng.random((8, 9)) < 0.5
        known[:, 0] = False
        strict = RejectorParams(np.arange(8), known, 0.6, 0.05)
        loose = RejectorParams(np.arange(8), known, 0.4, 0.05)
        for _ in range(200):
            query = rng.integers(0, 9, size=8)
            if not reject(query, strict):
                self.assertFalse(reject(query, loose))

    def test_shared_value_selector_wins(self):
        rng = np.random.default_rng(4)
        descriptors = rng.integers(1, 9, size=(4, 6))
        descriptors[:, 1] = [1, 3, 5, 7]
        descriptors[:, 0] = 3
        descriptors[:, 5] = 3
        fg = np.ones_like(descriptors, dtype=bool)
        r = train_rejector(descriptors, fg, [[1, 2], [0, 5]], 0.6, 0.05)
        self.assertEqual(r.selector.tolist(), [0, 5])
        for row in descriptors:
            self.assertFalse(reject(row, r))

    def test_low_coverage_selector_loses(self):
        rng = np.random.default_rng(4)
        descriptors = rng.integers(1, 9, size=(4, 6))
        descriptors[:, 1] = [1, 3, 5, 7]
        descriptors[:, 0] = 3
        descriptors[:, 5] = 3
        fg = np.ones_like(descriptors, dtype=bool)
        fg[1:, [0, 5]] = False
        r = train_rejector(descriptors, fg, [[1, 2], [0, 5]], 0.6, 0.05)
        self.assertEqual(r.selector.tolist(), [1, 2])

    def test_identical_templates_all_accepted(self):
        descriptors = np.tile(np.arange(1, 9), (5, 2))
        fg = np.ones_like(descriptors, dtype=bool)
        rng = np.random.default_rng(0)
        candidates = [rng.choice(16, size=4, replace=False) for _ in range(8)]
        r = train_rejector(descriptors, fg, candidates, 0.6, 0.05)
        self.assertFalse(r.always_accepts)
        for row in descriptors:
            self.assertFalse(reject(row, r))

    def test_falls_back_to_accepting_everything(self):
        descriptors = np.tile(np.arange(1, 9), (5, 1))
        r = train_rejector(descriptors, np.zeros_like(descriptors, dtype=bool), [[0, 1]], 0.6, 0.05)
        self.assertTrue(r.always_accepts)
        self.assertFalse(reject(np.zeros(8, dtype=np.uint8), r))


class TestTrees(unittest.TestCase):
    def setUp(self):
        self.store = make_store(40, seed=2)
        self.cfg = ForestConfig(n_candidates=16, max_depth=6, min_leaf=2, fuzzy_margin=0)

    def test_single_template_is_single_leaf(self):
        tree = train_tree(make_store(1), self.cfg)
        self.assertTrue(tree.is_leaf)
        self.assertEqual(tree.body.template_ids, (0,))

    def test_crisp_tree_partitions_templates(self):
        tree = train_tree(self.store, self.cfg, seed=1)
        ids = sorted(i for leaf in leaf_sets(tree) for i in leaf)
        self.assertEqual(ids, list(range(40)))

    def test_fuzzy_tree_covers_templates(self):
        cfg = ForestConfig(n_candidates=16, max_depth=6, min_leaf=2, fuzzy_margin=2)
        tree = train_tree(self.store, cfg, seed=1)
        ids = [i for leaf in leaf_sets(tree) for i in leaf]
        self.assertEqual(set(ids), set(range(40)))
        self.assertGreaterEqual(len(ids), 40)

    def test_training_templates_reach_their_leaf(self):
        for margin in (0, 1, 3):
            cfg = ForestConfig(n_candidates=16, max_depth=6, min_leaf=2, fuzzy_margin=margin)
            tree = train_tree(self.store, cfg, seed=3)
            for t in self.store:
                result = descend(tree, t.descriptor)
                self.assertIsInstance(result, Candidates)
                self.assertIn(t.id, result.ids)

    def test_default_config_tree_splits(self):
        store = make_store(320, seed=6)
        for seed in range(3):
            tree = train_tree(store, ForestConfig(), seed=seed)
            self.assertGreater(len(leaf_sets(tree)), 1)

    def test_deeper_trees_return_fewer_candidates(self):
        store = make_store(320, seed=6)

        def mean_candidates(max_depth):
            tree = train_tree(store, ForestConfig(max_depth=max_depth), seed=0)
            return np.mean([len(descend(tree, t.descriptor).ids) for t in store])

        shallow, middle, deep = mean_candidates(1), mean_candidates(3), mean_candidates(8)
        self.assertGreater(shallow, middle)
        self.assertGreater(middle, deep)
        self.assertLess(deep, len(store) / 4)

    def test_default_depth_follows_object_count(self):
        single = make_store(40, seed=2, n_objects=1)
        several = make_store(40, seed=2, n_objects=3)
        self.assertEqual(train_forest(single).params["max_depth"], 8)
        self.assertEqual(train_forest(several).params["max_depth"], 9)
        self.assertEqual(train_forest(several, ForestConfig(max_depth=4)).params["max_depth"], 4)

    def test_depth_is_bounded(self):
        forest = train_forest(self.store, ForestConfig(max_depth=3, min_leaf=1), seed=0)
        self.assertLessEqual(forest.stats()[0]["max_depth"], 3)

    def test_same_seed_same_tree(self):
        a = train_tree(self.store, self.cfg, seed=9)
        b = train_tree(self.store, self.cfg, seed=9)
        self.assertEqual(leaf_sets(a), leaf_sets(b))

    def test_descent_rejects_at_root(self):
        rejector = RejectorParams(np.arange(3), full_known(3), 0.6, 0.05)
        tree = TreeNode(rejector, Leaf((0,)))
        result = descend(tree, np.zeros(6, dtype=np.uint8))
        self.assertEqual(result, Rejected(depth=0, comparisons=0, lookups=3))

    def test_always_accept_leaf_returns_its_set(self):
        tree = TreeNode(always_accept_rejector(), Leaf((3, 4)))
        result = descend(tree, np.zeros(6, dtype=np.uint8))
        self.assertEqual(result.ids, frozenset({3, 4}))
        self.assertEqual(result.lookups, 0)


class TestForest(unittest.TestCase):
    def setUp(self):
        self.store = make_store(30, seed=5)
        self.cfg = ForestConfig(n_trees=3, n_candidates=16, max_depth=5, min_leaf=2)

    def test_identical_trees_union_is_single_leaf(self):
        tree = train_tree(self.store, self.cfg, seed=0)
        forest = Forest(trees=(tree,) * 5, descriptor_len=self.store.descriptor_len,
                        layout=self.store.layout(), params={})
        for t in self.store:
            self.assertEqual(forest.query(t.descriptor).ids, descend(tree, t.descriptor).ids)

    def test_all_trees_reject_reports_shallowest(self):
        rejecting = RejectorParams(np.arange(3), full_known(3), 0.6, 0.05)
        shallow = TreeNode(rejecting, Leaf((0,)))
        split = SplitParams(selector=[0], exemplar=[1], tau=10, fuzzy_margin=0)
        deep = TreeNode(always_accept_rejector(),
                        Split(split, TreeNode(rejecting, Leaf((0,))), TreeNode(rejecting, Leaf((1,)))))
        forest = Forest(trees=(deep, shallow), descriptor_len=6, layout=(), params={})
        self.assertEqual(descend(deep, np.zeros(6, dtype=np.uint8)).depth, 1)
        result = forest_query(forest, np.zeros(6, dtype=np.uint8))
        self.assertIsInstance(result, Rejected)
        self.assertEqual(result.depth, 0)

    def test_union_over_trees(self):
        forest = train_forest(self.store, self.cfg, seed=4)
        for t in self.store:
            result = forest.query(t.descriptor)
            expected = frozenset().union(*(descend(tree, t.descriptor).ids for tree in forest.trees))
            self.assertEqual(result.ids, expected)
            self.assertIn(t.id, result.ids)

    def test_worker_count_does_not_change_forest(self):
        serial = train_forest(self.store, self.cfg, seed=4, workers=1)
        pooled = train_forest(self.store, self.cfg, seed=4, workers=2)
        self.assertEqual([leaf_sets(t) for t in serial.trees], [leaf_sets(t) for t in pooled.trees])

    def test_seed_sequence_can_be_reused(self):
        seed = np.random.SeedSequence(12)
        a = train_forest(self.store, self.cfg, seed=seed)
        b = train_forest(self.store, self.cfg, seed=seed)
        self.assertEqual([leaf_sets(t) for t in a.trees], [leaf_sets(t) for t in b.trees])

    def test_layout_check(self):
        forest = train_forest(self.store, ForestConfig(n_trees=1), seed=0)
        forest.check_layout(self.store)
        with self.assertRaises(CompatibilityError):
            forest.check_layout(make_store(5, step=4))

    def test_stats(self):
        forest = train_forest(make_store(1), ForestConfig(n_trees=2), seed=0)
        for stats in forest.stats():
            self.assertEqual(stats["leaves"], 1)
            self.assertEqual(stats["max_depth"], 0)
            self.assertEqual(stats["leaf_size_total"], 1)


if __name__ == '__main__':
    unittest.main()
