"""
Command line front end.

    python cli.py gen     CONFIG   [--out DIR]
    python cli.py train   --templates FILE [--config CONFIG] [--out FILE]
    python cli.py detect  SCENE --templates FILE --forest FILE [--trace FILE] [--reject-map FILE]
    python cli.py bench   CONFIG   [--out DIR] [--suite NAME ...]
    python cli.py inspect FILE

Global options go before the command: --verbose, --quiet, --seed N, --threads N.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 descriptor
layout mismatch, 1 any other matcher error.
"""
import argparse
import json
import logging
import os
import sys

from bench import SUITE_ORDER, print_report, run_bench, write_results
from config import RunConfig, config_from_dict, load_config
from containers import (inspect_container, load_feature_map, load_forest, load_templates,
                        read_ground_truth, save_feature_map, save_forest, save_templates,
                        write_detections, write_ground_truth, write_jsonl, write_pgm)
from errors import ConfigError, MatcherError
from features import TemplateStore
from forest import train_forest
from pipeline import Detector, EvalCriterion, evaluate
from search import get_search
from synth import build_dataset

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _apply_overrides(config, args):
    if args.seed is not None:
        config.master_seed = args.seed
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        config.pipeline.workers = args.threads
    return config


def _embedded_config(meta, path):
    raw = meta.get("config") or {}
    if not raw:
        logger.warning("%s carries no config snapshot; using defaults", path)
        return RunConfig()
    return config_from_dict(raw)


def _progress(args):
    return not args.quiet and sys.stderr.isatty()


def cmd_gen(args):
    config = _apply_overrides(load_config(args.config), args)
    out_dir = args.out or config.output.directory
    dataset = build_dataset(config, progress=_progress(args))
    snapshot = config.snapshot()
    os.makedirs(out_dir, exist_ok=True)

    written = [os.path.join(out_dir, "templates.tmpl")]
    save_templates(written[0], TemplateStore(dataset.templates), snapshot)
    for spec, fmap, ground_truth in dataset.scenes:
        scene_path = os.path.join(out_dir, f"{spec.name}.fmap")
        truth_path = os.path.join(out_dir, f"{spec.name}.gt.json")
        save_feature_map(scene_path, fmap, spec.name, snapshot)
        write_ground_truth(truth_path, spec.name, ground_truth, snapshot)
        written += [scene_path, truth_path]

    print("=" * 40)
    print(f"GENERATED: {len(dataset.templates)} templates, {len(dataset.scenes)} scene(s)")
    print("=" * 40)
    for path in written:
        print(f"  {path}")
    return 0


def cmd_train(args):
    store, meta = load_templates(args.templates)
    config = load_config(args.config) if args.config else _embedded_config(meta, args.templates)
    config = _apply_overrides(config, args)
    forest = train_forest(store, config.forest, seed=config.master_seed,
                          workers=config.pipeline.worker_count)
    out = args.out or os.path.join(config.output.directory, "forest.frst")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    save_forest(out, forest, config.snapshot())

    print("=" * 40)
    print(f"FOREST: {len(forest.trees)} tree(s) over {len(store)} templates -> {out}")
    print("=" * 40)
    for i, stats in enumerate(forest.stats()):
        print(f"Tree {i}: {stats['nodes']} nodes, {stats['leaves']} leaves, "
              f"max depth {stats['max_depth']}")
        print(f"  Leaf sizes: min {stats['leaf_size_min']}, mean {stats['leaf_size_mean']:.1f}, "
              f"max {stats['leaf_size_max']}, total {stats['leaf_size_total']}")
        print("  Leaf depths:")
        for depth, count in stats["depth_histogram"].items():
            print(f"    {depth:>2}: {count}")
    print("=" * 40)
    return 0


def cmd_detect(args):
    scene, scene_meta = load_feature_map(args.scene)
    store, meta = load_templates(args.templates)
    forest, _ = load_forest(args.forest)
    config = load_config(args.config) if args.config else _embedded_config(meta, args.templates)
    config = _apply_overrides(config, args)

    search = get_search(args.search, store, forest)
    if args.search != "forest":
        forest.check_layout(store)
    detector = Detector(store, forest, config.validation, config.pipeline, search=search)
    result = detector.detect(scene, trace=bool(args.trace))
    snapshot = config.snapshot()
    write_detections(sys.stdout, result.detections, snapshot)

    if args.trace:
        write_jsonl(args.trace, result.traces, snapshot)
        logger.info("Wrote %d validation traces to %s", len(result.traces), args.trace)
    if args.reject_map:
        write_pgm(args.reject_map, result.reject_map,
                  int(forest.params.get("max_depth", config.forest.depth_for(store.n_objects))),
                  snapshot)
        logger.info("Wrote rejection-depth map to %s", args.reject_map)

    stats = result.stats
    logger.info("%s: %d windows, %.1f%% rejected, %d validated, %d detection(s)",
                scene_meta.get("name", args.scene), stats.windows,
                100.0 * stats.rejection_fraction, stats.validated, len(result.detections))
    if args.ground_truth:
        _, ground_truth = read_ground_truth(args.ground_truth)
        criterion = EvalCriterion(config.pipeline.k_m, config.pipeline.pose_tolerance)
        metrics = evaluate(result.detections, ground_truth, criterion, stats)
        logger.info("Metrics: %s", json.dumps(metrics.to_record(), sort_keys=True))
    return 0


def cmd_bench(args):
    config = _apply_overrides(load_config(args.config), args)
    unknown = set(args.suite or ()) - set(SUITE_ORDER)
    if unknown:
        raise ConfigError(f"unknown suites {sorted(unknown)}")
    results = run_bench(config, suites=args.suite, workers=config.pipeline.worker_count,
                        progress=_progress(args), baseline=not args.no_baseline)
    paths = write_results(results, args.out or config.output.directory, config.snapshot())
    print_report(results)
    for path in paths:
        print(f"  {path}")
    return 0


def cmd_inspect(args):
    summary = inspect_container(args.path)
    meta = summary.pop("meta")
    print("=" * 40)
    print(f"{summary.pop('kind').upper()}: {summary.pop('path')}")
    print("=" * 40)
    print(f"Container version: {summary.pop('version')}  ({summary.pop('bytes')} bytes)")
    print(f"Tool version:      {meta.get('tool_version')}")
    trees = summary.pop("trees", None)
    for key, value in summary.items():
        print(f"{key}: {value}")
    if "layout" in meta:
        layout = meta["layout"]
        print(f"Layout: patch {layout['patch_size']}, {layout['n_modalities']} modalities, "
              f"{len(layout['locations'])} locations")
    for i, stats in enumerate(trees or []):
        print(f"Tree {i}: {stats['nodes']} nodes, depth {stats['max_depth']}, "
              f"leaf depths {stats['depth_histogram']}")
    print("-" * 40)
    print("Config snapshot:")
    print(json.dumps(meta.get("config", {}), sort_keys=True, indent=1))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(description="Fuzzy-forest template matcher")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    parser.add_argument("--quiet", action="store_true", help="Warnings only, no progress bars")
    parser.add_argument("--seed", type=int, help="Override master_seed")
    parser.add_argument("--threads", type=int,
                        help="Worker threads for detection, processes for training and bench")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="Generate templates and scenes from a config")
    gen.add_argument("config", help="YAML run configuration")
    gen.add_argument("--out", help="Output directory (default: output.directory)")
    gen.set_defaults(func=cmd_gen)

    train = sub.add_parser("train", help="Train a forest over a template container")
    train.add_argument("--templates", required=True, help="Template container")
    train.add_argument("--config", help="YAML run configuration (default: embedded snapshot)")
    train.add_argument("--out", help="Forest container to write")
    train.set_defaults(func=cmd_train)

    detect = sub.add_parser("detect", help="Detect templates in a scene")
    detect.add_argument("scene", help="Scene feature-map container")
    detect.add_argument("--templates", required=True, help="Template container")
    detect.add_argument("--forest", required=True, help="Forest container")
    detect.add_argument("--config", help="YAML run configuration (default: embedded snapshot)")
    detect.add_argument("--search", default="forest", choices=["forest", "exhaustive"],
                        help="Candidate search strategy")
    detect.add_argument("--ground-truth", help="Ground-truth sidecar; logs evaluation metrics")
    detect.add_argument("--trace", help="Write validation diagnostics as JSON lines")
    detect.add_argument("--reject-map", help="Write the rejection-depth map as a PGM image")
    detect.set_defaults(func=cmd_detect)

    bench = sub.add_parser("bench", help="Run benchmark suites")
    bench.add_argument("config", help="YAML run configuration")
    bench.add_argument("--out", help="Output directory (default: output.directory)")
    bench.add_argument("--suite", action="append", help=f"One of {', '.join(SUITE_ORDER)}")
    bench.add_argument("--no-baseline", action="store_true",
                       help="Skip the exhaustive-scan baseline in the templates suite")
    bench.set_defaults(func=cmd_bench)

    inspect = sub.add_parser("inspect", help="Summarise a container file")
    inspect.add_argument("path", help="Template, scene or forest container")
    inspect.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)
    try:
        return args.func(args)
    except MatcherError as exc:
        logger.error("%s", exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
