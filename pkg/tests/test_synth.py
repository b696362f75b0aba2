import os
import sys
import unittest

import numpy as np

# Add parent directory to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import PoseGridConfig, RunConfig, config_from_dict
from errors import PoseRangeError, SceneSpecError
from features import PoseSample, similarity
from synth import (Catalogue, Placement, SceneSpec, SyntheticObject, build_dataset,
                   build_template_set, compose_scene, make_object, pose_grid, random_scene_spec,
                   render_view)

SMALL_GRID = PoseGridConfig(yaw_steps=4, yaw_range=(-30, 30), pitch_steps=2,
                            pitch_range=(-20, 20), rolls=(0, 90), scales=(1.0,))


def square_object(patch=16):
    half = 5.0
    return SyntheticObject(object_id=0, seed=0, patch_size=patch,
                           silhouette=[[-half, -half], [half, -half], [half, half], [-half, half]],
                           profile_height=30.0, base_hue=1)


class TestObjects(unittest.TestCase):
    def test_same_seed_same_object(self):
        a = make_object(0, 16, 42)
        b = make_object(0, 16, 42)
        self.assertTrue(np.array_equal(a.silhouette, b.silhouette))
        self.assertEqual(a.profile_height, b.profile_height)
        self.assertEqual(a.texture_edges, b.texture_edges)

    def test_silhouette_covers_enough_of_the_patch(self):
        for seed in range(10):
            obj = make_object(seed, 16, seed)
            self.assertGreaterEqual(obj.silhouette_area(), 0.2 * 16 * 16)
            self.assertTrue(1 <= obj.base_hue <= 8)

    def test_tiny_silhouette_rejected(self):
        with self.assertRaises(PoseRangeError):
            SyntheticObject(object_id=0, seed=0, patch_size=16,
                            silhouette=[[0, 0], [1, 0], [1, 1]], profile_height=10.0, base_hue=1)


class TestRenderView(unittest.TestCase):
    def test_rendering_is_deterministic(self):
        obj = make_object(0, 16, 3)
        a = render_view(obj, (10, -5, 90, 1.0))
        b = render_view(obj, (10, -5, 90, 1.0))
        self.assertTrue(np.array_equal(a.rgb, b.rgb))
        self.assertTrue(np.array_equal(a.depth, b.depth))
        self.assertTrue(np.array_equal(a.mask, b.mask))

    def test_identity_pose_is_canonical_silhouette(self):
        obj = square_object()
        view = render_view(obj, (0, 0, 0, 1.0))
        expected = np.zeros((16, 16), dtype=bool)
        expected[3:13, 3:13] = True
        self.assertTrue(np.array_equal(view.mask, expected))
        self.assertTrue((view.depth[~expected] == 0).all())
        self.assertTrue((view.depth[expected] > 0).all())

    def test_half_turn_of_symmetric_object(self):
        obj = square_object()
        upright = render_view(obj, (0, 0, 0, 1.0))
        turned = render_view(obj, (0, 0, 180, 1.0))
        self.assertTrue(np.array_equal(upright.mask, turned.mask))

    def test_opposite_yaw_changes_depth(self):
        obj = make_object(0, 16, 9)
        left = render_view(obj, (-20, 0, 0, 1.0))
        right = render_view(obj, (20, 0, 0, 1.0))
        self.assertTrue(np.array_equal(left.mask, right.mask))
        self.assertFalse(np.array_equal(left.depth, right.depth))

    def test_out_of_range_poses(self):
        obj = make_object(0, 16, 1)
        with self.assertRaises(PoseRangeError):
            render_view(obj, (80, 0, 0, 1.0))
        with self.assertRaises(PoseRangeError):
            render_view(obj, (0, 0, 0, 2.0))
        with self.assertRaises(PoseRangeError):
            render_view(obj, (75, 75, 0, 0.5))


class TestTemplateSet(unittest.TestCase):
    def test_default_grid_size(self):
        grid = PoseGridConfig()
        poses = pose_grid(grid)
        self.assertEqual(len(poses), 320)
        self.assertEqual(len(set(poses)), 320)
        self.assertEqual(grid.size, 320)

    def test_yaw_varies_fastest(self):
        poses = pose_grid(SMALL_GRID)
        self.assertEqual([p.yaw for p in poses[:4]], [-30.0, -10.0, 10.0, 30.0])
        self.assertEqual(poses[4].pitch, 20.0)
        self.assertEqual(poses[8].roll, 90.0)

    def test_templates_are_dense_and_labelled(self):
        objects = [make_object(0, 16, 1), make_object(1, 16, 2)]
        poses = pose_grid(SMALL_GRID)
        templates = build_template_set(objects, poses, location_step=2, seed=5)
        self.assertEqual([t.id for t in templates], list(range(32)))
        self.assertEqual(len({t.label for t in templates}), 32)
        self.assertEqual(templates[16].object_id, 1)
        for t in templates:
            self.assertEqual(len(t.descriptor), 16 * 3)
            self.assertGreaterEqual(t.foreground_fraction, 0.2)
            background = t.descriptor[~t.fg_mask]
            self.assertTrue(((background >= 1) & (background <= 8)).all())

    def test_template_set_is_reproducible(self):
        objects = [make_object(0, 16, 1)]
        poses = pose_grid(SMALL_GRID)
        a = build_template_set(objects, poses, seed=5)
        b = build_template_set(objects, poses, seed=5)
        for ta, tb in zip(a, b):
            self.assertTrue(np.array_equal(ta.descriptor, tb.descriptor))
            self.assertTrue(np.array_equal(ta.fg_mask, tb.fg_mask))

    def test_empty_inputs_rejected(self):
        with self.assertRaises(ValueError):
            build_template_set([], pose_grid(SMALL_GRID))
        with self.assertRaises(ValueError):
            build_template_set([make_object(0, 16, 1)], [])


class TestScenes(unittest.TestCase):
    def setUp(self):
        self.poses = pose_grid(SMALL_GRID)
        self.catalogue = Catalogue([make_object(0, 16, 1), make_object(1, 16, 2)], self.poses)
        self.templates = {t.id: t for t in self.catalogue.build_templates(seed=3)}

    def spec(self, **kwargs):
        defaults = dict(name="s", size=(48, 48),
                        placed_objects=[Placement(1, self.poses[5], 20, 8)], seed=4)
        defaults.update(kwargs)
        return SceneSpec(**defaults)

    def test_noiseless_view_matches_its_template(self):
        scene, truth = compose_scene(self.spec(), self.catalogue)
        self.assertEqual(len(truth), 1)
        gt = truth[0]
        self.assertEqual(gt.template_id, 16 + 5)
        self.assertEqual((gt.x, gt.y, gt.width, gt.height), (20, 8, 16, 16))
        self.assertEqual(similarity(scene, self.templates[gt.template_id], (gt.x, gt.y)), 1.0)
        self.assertEqual(gt.centre, (28.0, 16.0))

    def test_empty_scene_has_no_ground_truth(self):
        scene, truth = compose_scene(self.spec(placed_objects=[]), self.catalogue)
        self.assertEqual(truth, [])
        self.assertEqual((scene.width, scene.height), (48, 48))

    def test_composition_is_deterministic(self):
        spec = self.spec(clutter_density=0.5, noise_rate=0.1, occlusion_fraction=0.25)
        a, _ = compose_scene(spec, self.catalogue)
        b, _ = compose_scene(spec, self.catalogue)
        self.assertTrue(np.array_equal(a.values, b.values))
        self.assertTrue(np.array_equal(a.depth, b.depth))

    def test_noise_rate_flips_expected_share(self):
        clean, _ = compose_scene(self.spec(size=(64, 64)), self.catalogue)
        noisy, _ = compose_scene(self.spec(size=(64, 64), noise_rate=0.1), self.catalogue)
        changed = float((clean.values != noisy.values).mean())
        # replacement bins are uniform, so 1/8 of the flips keep their value
        self.assertAlmostEqual(changed, 0.1 * 7 / 8, delta=0.02)

    def test_noise_lowers_similarity(self):
        def mean_score(rate):
            scores = []
            for seed in range(10):
                scene, truth = compose_scene(self.spec(noise_rate=rate, seed=seed), self.catalogue)
                gt = truth[0]
                scores.append(similarity(scene, self.templates[gt.template_id], (gt.x, gt.y)))
            return np.mean(scores)
        self.assertGreater(mean_score(0.1), mean_score(0.3))

    def test_occluders_overwrite_part_of_the_view(self):
        clean, truth = compose_scene(self.spec(), self.catalogue)
        occluded, truth2 = compose_scene(self.spec(occlusion_fraction=0.5), self.catalogue)
        self.assertEqual(truth, truth2)
        window = (slice(8, 24), slice(20, 36))
        self.assertFalse(np.array_equal(clean.values[window], occluded.values[window]))

    def test_bad_placements_raise(self):
        with self.assertRaises(SceneSpecError):
            compose_scene(self.spec(placed_objects=[Placement(0, self.poses[0], 40, 0)]),
                          self.catalogue)
        with self.assertRaises(SceneSpecError):
            compose_scene(self.spec(placed_objects=[Placement(0, self.poses[0], 0, 0),
                                                    Placement(1, self.poses[1], 8, 8)]),
                          self.catalogue)
        with self.assertRaises(SceneSpecError) as ctx:
            compose_scene(self.spec(name="bad-scene",
                                    placed_objects=[Placement(7, self.poses[0], 0, 0)]),
                          self.catalogue)
        self.assertIn("bad-scene", str(ctx.exception))

    def test_random_placements_do_not_overlap(self):
        rng = np.random.default_rng(0)
        spec = random_scene_spec("r", self.catalogue, (64, 64), 3, rng)
        self.assertEqual(len(spec.placed_objects), 3)
        _, truth = compose_scene(spec, self.catalogue)
        for i, a in enumerate(truth):
            for b in truth[:i]:
                self.assertTrue(abs(a.x - b.x) >= 16 or abs(a.y - b.y) >= 16)
            self.assertEqual(a.pose, PoseSample(*a.pose))


class TestBuildDataset(unittest.TestCase):
    def config(self):
        return config_from_dict({
            "master_seed": 11,
            "dataset": {
                "n_objects": 2,
                "pose_grid": {"yaw_steps": 2, "pitch_steps": 1, "rolls": [0], "scales": [1.0]},
                "scenes": [{"name": "a", "size": [40, 40],
                            "placements": [{"object_id": 1, "pose_index": 0, "x": 4, "y": 4}]},
                           {"name": "b", "size": [40, 40], "random_objects": 1}],
            },
        })

    def test_dataset_is_reproducible(self):
        a = build_dataset(self.config())
        b = build_dataset(self.config())
        self.assertEqual(len(a.templates), 4)
        for ta, tb in zip(a.templates, b.templates):
            self.assertTrue(np.array_equal(ta.descriptor, tb.descriptor))
        for (_, fa, ga), (_, fb, gb) in zip(a.scenes, b.scenes):
            self.assertTrue(np.array_equal(fa.values, fb.values))
            self.assertEqual(ga, gb)
        self.assertEqual(a.scenes[0][2][0].template_id, 2)

    def test_master_seed_changes_objects(self):
        config = self.config()
        other = self.config()
        other.master_seed = 12
        a = build_dataset(config)
        b = build_dataset(other)
        self.assertFalse(np.array_equal(a.catalogue.objects[0].silhouette,
                                        b.catalogue.objects[0].silhouette))

    def test_unknown_pose_index_names_scene(self):
        config = RunConfig()
        config.dataset = self.config().dataset
        config.dataset.scenes[0].placements[0]["pose_index"] = 99
        with self.assertRaises(SceneSpecError) as ctx:
            build_dataset(config)
        self.assertIn("'a'", str(ctx.exception))


if __name__ == '__main__':
    unittest.main()
