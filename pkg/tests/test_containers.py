import io
import json
import os
import struct
import sys
import tempfile
import unittest

import numpy as np

# Add parent directory to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import TOOL_VERSION, ForestConfig, RunConfig
from containers import (decode_feature_map, decode_forest, decode_templates, encode_feature_map,
                        encode_forest, encode_templates, inspect_container, load_templates,
                        read_ground_truth, reject_map_image, save_feature_map, save_forest,
                        save_templates, templates_from_json, templates_to_json, write_detections,
                        write_ground_truth, write_jsonl, write_pgm)
from errors import DataError
from features import FeatureMap, PoseSample, Template, TemplateStore, template_locations
from forest import Candidates, train_forest
from pipeline import Detection
from synth import GroundTruth


def make_store(n=12, seed=0):
    rng = np.random.default_rng(seed)
    locations = template_locations((8, 8), 2)
    return TemplateStore([
        Template(id=i, object_id=i % 2, pose=PoseSample(10.0 * i, -5.0, 90.0, 0.9),
                 patch_size=(8, 8), locations=locations,
                 descriptor=rng.integers(0, 9, size=48),
                 fg_mask=np.repeat(rng.random(16) < 0.7, 3),
                 depth_patch=rng.uniform(600, 800, size=16))
        for i in range(n)])


class TestTemplateContainer(unittest.TestCase):
    def setUp(self):
        self.store = make_store()
        self.snapshot = RunConfig().snapshot()
        self.data = encode_templates(self.store, self.snapshot)

    def test_round_trip_is_byte_stable(self):
        store, meta = decode_templates(self.data)
        self.assertEqual(encode_templates(store, self.snapshot), self.data)
        self.assertEqual(meta["count"], 12)
        self.assertEqual(meta["config"], self.snapshot)
        self.assertTrue(np.array_equal(store.descriptors, self.store.descriptors))
        self.assertEqual(store[3].pose, self.store[3].pose)

    def test_json_interchange(self):
        document = json.loads(json.dumps(templates_to_json(self.store)))
        store = templates_from_json(document)
        self.assertEqual(encode_templates(store, self.snapshot), self.data)

    def test_bad_magic(self):
        with self.assertRaises(DataError):
            decode_templates(b"XXXX" + self.data[4:])

    def test_unsupported_version(self):
        with self.assertRaises(DataError):
            decode_templates(self.data[:4] + struct.pack("<H", 2) + self.data[6:])

    def test_truncated_and_trailing(self):
        with self.assertRaises(DataError):
            decode_templates(self.data[:-5])
        with self.assertRaises(DataError):
            decode_templates(self.data[:3])
        with self.assertRaises(DataError):
            decode_templates(self.data + b"\x00")

    def test_wrong_kind(self):
        with self.assertRaises(DataError):
            decode_forest(self.data)

    def test_missing_file(self):
        with self.assertRaises(DataError):
            load_templates("/nonexistent/templates.tmpl")

    def test_invalid_json_document(self):
        with self.assertRaises(DataError):
            templates_from_json({"templates": [{"id": 1}]})


class TestFeatureMapContainer(unittest.TestCase):
    def test_round_trip_with_depth(self):
        rng = np.random.default_rng(1)
        fmap = FeatureMap(rng.integers(0, 9, size=(10, 14, 3)), depth=rng.uniform(0, 900, (10, 14)))
        decoded, meta = decode_feature_map(encode_feature_map(fmap, "s1"))
        self.assertEqual(meta["name"], "s1")
        self.assertTrue(np.array_equal(decoded.values, fmap.values))
        self.assertTrue(np.array_equal(decoded.depth, fmap.depth))

    def test_round_trip_without_depth(self):
        fmap = FeatureMap(np.ones((4, 6, 3)))
        decoded, _ = decode_feature_map(encode_feature_map(fmap))
        self.assertIsNone(decoded.depth)
        self.assertEqual((decoded.width, decoded.height), (6, 4))


class TestForestContainer(unittest.TestCase):
    def test_round_trip(self):
        store = make_store(30, seed=4)
        forest = train_forest(store, ForestConfig(n_trees=2, n_candidates=8, min_leaf=2), seed=1)
        data = encode_forest(forest)
        decoded, meta = decode_forest(data)
        self.assertEqual(encode_forest(decoded), data)
        self.assertEqual(meta["n_trees"], 2)
        decoded.check_layout(store)
        for t in store:
            a, b = forest.query(t.descriptor), decoded.query(t.descriptor)
            self.assertIsInstance(b, Candidates)
            self.assertEqual(a, b)


class TestSidecars(unittest.TestCase):
    def test_ground_truth_round_trip(self):
        truth = [GroundTruth(object_id=1, pose=PoseSample(10.0, 0.0, 90.0, 1.0), x=3, y=4,
                             width=16, height=16, template_id=7)]
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "s.gt.json")
            write_ground_truth(path, "s", truth, {"master_seed": 1})
            scene, loaded = read_ground_truth(path)
        self.assertEqual(scene, "s")
        self.assertEqual(loaded, truth)

    def test_pgm_levels(self):
        codes = np.array([[-1, -2], [0, 8]])
        self.assertEqual(reject_map_image(codes, 8).tolist(), [[0, 0], [77, 255]])
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "map.pgm")
            write_pgm(path, codes, 8, {"master_seed": 3})
            with open(path, "rb") as f:
                expected = (f"P5\n# tool_version={TOOL_VERSION} config={{\"master_seed\": 3}}\n"
                            "2 2\n255\n").encode("ascii")
                self.assertEqual(f.read(), expected + bytes([0, 0, 77, 255]))

    def test_detection_lines(self):
        stream = io.StringIO()
        write_detections(stream, [Detection(x=1, y=2, template_id=3, object_id=0,
                                            pose=PoseSample(0, 0, 0, 1), score=0.9,
                                            width=16, height=16)], {"master_seed": 3})
        header, record = [json.loads(line) for line in stream.getvalue().splitlines()]
        self.assertEqual(header, {"tool_version": TOOL_VERSION, "config": {"master_seed": 3}})
        self.assertEqual((record["x"], record["y"], record["template_id"]), (1, 2, 3))

    def test_trace_lines_start_with_run_header(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "trace.jsonl")
            write_jsonl(path, [{"x": 1}, {"x": 2}], {"master_seed": 3})
            with open(path, encoding="utf-8") as f:
                lines = [json.loads(line) for line in f]
        self.assertEqual(lines, [{"tool_version": TOOL_VERSION, "config": {"master_seed": 3}},
                                 {"x": 1}, {"x": 2}])

    def test_inspect_every_kind(self):
        store = make_store(6)
        forest = train_forest(store, ForestConfig(), seed=0)
        with tempfile.TemporaryDirectory() as tmp:
            paths = {name: os.path.join(tmp, name) for name in ("t.tmpl", "f.frst", "s.fmap")}
            save_templates(paths["t.tmpl"], store)
            save_forest(paths["f.frst"], forest)
            save_feature_map(paths["s.fmap"], FeatureMap(np.zeros((4, 4, 3))))
            self.assertEqual(inspect_container(paths["t.tmpl"])["templates"], 6)
            self.assertEqual(len(inspect_container(paths["f.frst"])["trees"]), 1)
            self.assertEqual(inspect_container(paths["s.fmap"])["kind"], "feature_map")


if __name__ == '__main__':
    unittest.main()
