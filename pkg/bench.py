"""
Benchmark suites.

Each suite builds its own seeded data, measures comparison counts and
accuracy, and returns rows for a CSV table plus named acceptance checks.
Comparison counts are hardware independent; wall-clock numbers are kept
apart (bench_timings.json) so the CSV and JSON outputs are reproducible
byte for byte.
"""
import csv
import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from config import TOOL_VERSION
from features import N_BINS, TemplateStore, Window
from forest import Candidates, Rejected, train_forest
from pipeline import Detector, EvalCriterion, evaluate, validation_recall
from search import ExhaustiveSearch
from synth import compose_scene, make_catalogue, random_scene_spec
from validate import full_validate, full_validation_cost, preemptive_validate

logger = logging.getLogger(__name__)

SUITE_ORDER = ("templates", "trees", "objects", "validation", "oracle", "rejection")


@dataclass
class Check:
    name: str
    value: float
    threshold: str
    passed: bool

    def to_record(self):
        return {"name": self.name, "value": _round(self.value), "threshold": self.threshold,
                "passed": self.passed}


@dataclass
class SuiteResult:
    name: str
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    seconds: float = 0.0


def _round(value):
    if isinstance(value, float):
        return round(value, 6)
    return value


def _suite_seed(config, name):
    return np.random.SeedSequence([config.master_seed, SUITE_ORDER.index(name)])


def _noisy(descriptor, noise_rate, rng):
    noisy = np.array(descriptor, copy=True)
    flip = rng.random(noisy.shape) < noise_rate
    noisy[flip] = rng.integers(1, N_BINS + 1, size=int(flip.sum()))
    return noisy


def _query_window(template, noise_rate, rng):
    descriptor = _noisy(template.descriptor, noise_rate, rng) if noise_rate else template.descriptor
    return Window(x=0, y=0, descriptor=descriptor, depth=template.depth_patch)


def _catalogue_store(config, n_objects, seed):
    object_seq, fill_seq = seed.spawn(2)
    catalogue = make_catalogue(n_objects, config.dataset, config.features, object_seq)
    templates = catalogue.build_templates(config.dataset.location_step, seed=fill_seq)
    return catalogue, templates


def _scenes(config, catalogue, n_objects, rng, noise_rate=None, clutter_density=None):
    bench = config.bench
    scenes = []
    for i in range(bench.n_scenes):
        spec = random_scene_spec(
            f"bench-{i}", catalogue, bench.scene_size, n_objects, rng,
            clutter_density=bench.clutter_density if clutter_density is None else clutter_density,
            noise_rate=bench.noise_rate if noise_rate is None else noise_rate,
            occlusion_fraction=bench.occlusion_fraction)
        scenes.append(compose_scene(spec, catalogue))
    return scenes


def _detect_all(config, detector, scenes, progress, desc):
    criterion = EvalCriterion(config.pipeline.k_m, config.pipeline.pose_tolerance)
    totals = {"true_positives": 0, "ground_truth": 0, "detections": 0, "correct": 0,
              "windows": 0, "in_range": 0, "rejected": 0, "validated": 0,
              "traversal_comparisons": 0, "validation_comparisons": 0, "chunk_evaluations": 0}
    reached = 0.0
    for scene, ground_truth in tqdm(scenes, desc=desc, disable=not progress):
        result = detector.detect(scene)
        metrics = evaluate(result.detections, ground_truth, criterion, result.stats)
        totals["true_positives"] += metrics.true_positives
        totals["ground_truth"] += metrics.n_ground_truth
        totals["detections"] += metrics.n_detections
        totals["correct"] += round(metrics.accuracy * metrics.n_ground_truth)
        for key in ("windows", "in_range", "rejected", "validated", "traversal_comparisons",
                    "validation_comparisons", "chunk_evaluations"):
            totals[key] += getattr(result.stats, key)
        reached += validation_recall(result.reject_map, ground_truth) * len(ground_truth)
    gt = totals["ground_truth"]
    return {
        "scenes": len(scenes),
        "ground_truth": gt,
        "detections": totals["detections"],
        "recall": totals["true_positives"] / gt if gt else 1.0,
        "precision": totals["true_positives"] / totals["detections"] if totals["detections"] else 1.0,
        "accuracy": totals["correct"] / gt if gt else 1.0,
        "rejection_fraction": totals["rejected"] / totals["in_range"] if totals["in_range"] else 0.0,
        "validation_recall": reached / gt if gt else 1.0,
        "traversal_comparisons": totals["traversal_comparisons"],
        "validation_comparisons": totals["validation_comparisons"],
        "chunk_evaluations": totals["chunk_evaluations"],
        "traversal_share": (totals["traversal_comparisons"] / totals["validation_comparisons"]
                            if totals["validation_comparisons"] else 0.0),
    }


def _slope(sizes, values):
    if len(sizes) < 2 or min(values) <= 0:
        return float("nan")
    return float(np.polyfit(np.log(sizes), np.log(values), 1)[0])


# --- suites -------------------------------------------------------------------

def suite_templates(config, workers, progress, baseline=True):
    """Comparisons per window against template count, forest vs exhaustive scan."""
    bench = config.bench
    seed = _suite_seed(config, "templates")
    data_seed, forest_seed, query_seed = seed.spawn(3)
    n_poses = config.dataset.pose_grid.size
    n_objects = math.ceil(max(bench.template_sizes) / n_poses)
    _, templates = _catalogue_store(config, n_objects, data_seed)
    result = SuiteResult("templates")
    forest_costs, exhaustive_costs = [], []
    sizes = sorted(bench.template_sizes)
    for size in tqdm(sizes, desc="templates", disable=not progress):
        store = TemplateStore(templates[:size])
        forest = train_forest(store, config.forest, forest_seed, workers)
        rng = np.random.default_rng(query_seed)
        exhaustive = ExhaustiveSearch(store)
        traversal = validation = rejected = hits = candidates = 0
        baseline_cost = 0
        for _ in range(bench.queries_per_size):
            template = store.templates[int(rng.integers(len(store)))]
            window = _query_window(template, bench.noise_rate, rng)
            found = forest.query(window.descriptor)
            traversal += found.comparisons
            if isinstance(found, Rejected):
                rejected += 1
            else:
                candidates += len(found.ids)
                checked = preemptive_validate(window, found.ids, store, config.validation)
                validation += checked.comparisons
                hits += checked.winner is not None and checked.winner[0] == template.id
            if baseline:
                baseline_cost += exhaustive.find(window.descriptor).comparisons
        q = bench.queries_per_size
        forest_costs.append((traversal + validation) / q)
        exhaustive_costs.append(baseline_cost / q)
        result.rows.append({
            "templates": size,
            "forest_comparisons": _round(forest_costs[-1]),
            "traversal_comparisons": _round(traversal / q),
            "validation_comparisons": _round(validation / q),
            "exhaustive_comparisons": _round(exhaustive_costs[-1]) if baseline else "",
            "exhaustive_expected": int(store.fg_masks.sum()),
            "mean_candidates": _round(candidates / max(q - rejected, 1)),
            "rejected_fraction": _round(rejected / q),
            "top1": _round(hits / q),
        })
    forest_slope = _slope(sizes, forest_costs)
    result.summary = {"forest_slope": _round(forest_slope)}
    result.checks.append(Check("forest log-log slope", forest_slope, "< 0.5", forest_slope < 0.5))
    if baseline:
        exhaustive_slope = _slope(sizes, exhaustive_costs)
        result.summary["exhaustive_slope"] = _round(exhaustive_slope)
        result.checks.append(Check("exhaustive log-log slope", exhaustive_slope, "1.0 +- 0.05",
                                   abs(exhaustive_slope - 1.0) <= 0.05))
    return result


def suite_trees(config, workers, progress):
    """Recall and cost with 1 vs 5 trees on noisy cluttered scenes."""
    bench = config.bench
    data_seed, forest_seed, scene_seed = _suite_seed(config, "trees").spawn(3)
    catalogue, templates = _catalogue_store(config, config.dataset.n_objects, data_seed)
    store = TemplateStore(templates)
    scenes = _scenes(config, catalogue, bench.objects_per_scene, np.random.default_rng(scene_seed))
    result = SuiteResult("trees")
    for n_trees in bench.tree_counts:
        forest_cfg = dataclasses.replace(config.forest, n_trees=n_trees)
        forest = train_forest(store, forest_cfg, forest_seed, workers)
        detector = Detector(store, forest, config.validation, config.pipeline)
        row = {"trees": n_trees}
        row.update(_detect_all(config, detector, scenes, progress, f"{n_trees} tree(s)"))
        result.rows.append({k: _round(v) for k, v in row.items()})
    if len(result.rows) >= 2:
        first, last = result.rows[0], result.rows[-1]
        result.checks.append(Check(f"recall({last['trees']}) - recall({first['trees']})",
                                   last["recall"] - first["recall"], ">= 0",
                                   last["recall"] >= first["recall"]))
    share = result.rows[0]["traversal_share"]
    result.checks.append(Check("traversal / validation comparisons", share, "<= 0.05",
                               share <= 0.05))
    return result


def suite_objects(config, workers, progress):
    """Single- vs multi-object template sets; multi-object forests grow one level deeper."""
    bench = config.bench
    seed = _suite_seed(config, "objects")
    result = SuiteResult("objects")
    for n_objects, child in zip(bench.object_counts, seed.spawn(len(bench.object_counts))):
        data_seed, forest_seed, scene_seed = child.spawn(3)
        catalogue, templates = _catalogue_store(config, n_objects, data_seed)
        store = TemplateStore(templates)
        max_depth = config.forest.depth_for(n_objects)
        forest = train_forest(store, dataclasses.replace(config.forest, max_depth=max_depth),
                              forest_seed, workers)
        detector = Detector(store, forest, config.validation, config.pipeline)
        scenes = _scenes(config, catalogue, bench.objects_per_scene,
                         np.random.default_rng(scene_seed))
        row = {"objects": n_objects, "templates": len(store), "max_depth": max_depth}
        row.update(_detect_all(config, detector, scenes, progress, f"{n_objects} object(s)"))
        result.rows.append({k: _round(v) for k, v in row.items()})
    return result


def _halves(result):
    n = result.n_candidates
    if n < 2:
        return True
    within = all(s <= math.ceil(n / 2 ** k)
                 for k, s in enumerate(result.survivors_per_stage, start=1))
    return within and result.stages_run <= math.ceil(math.log2(n)) + 1


def suite_validation(config, workers, progress):
    """Breadth-first vs full validation on the same noisy forest candidates."""
    bench = config.bench
    data_seed, forest_seed, query_seed = _suite_seed(config, "validation").spawn(3)
    _, templates = _catalogue_store(config, config.dataset.n_objects, data_seed)
    store = TemplateStore(templates)
    forest = train_forest(store, config.forest, forest_seed, workers)
    rng = np.random.default_rng(query_seed)
    vcfg = config.validation
    trials = 0
    totals = {"preemptive_chunks": 0, "full_chunks": 0, "preemptive_comparisons": 0,
              "full_comparisons": 0, "preemptive_correct": 0, "full_correct": 0, "agree": 0,
              "violations": 0, "halving_violations": 0}
    for _ in tqdm(range(bench.queries_per_size), desc="validation", disable=not progress):
        template = store.templates[int(rng.integers(len(store)))]
        window = _query_window(template, bench.noise_rate, rng)
        found = forest.query(window.descriptor)
        if not isinstance(found, Candidates):
            continue
        trials += 1
        fast = preemptive_validate(window, found.ids, store, vcfg)
        full_id, full_score = full_validate(window, found.ids, store, vcfg.use_depth,
                                            vcfg.depth_tolerance)
        full_chunks, full_comparisons = full_validation_cost(sorted(found.ids), store,
                                                             vcfg.chunk_size)
        fast_id = fast.winner[0] if fast.winner else None
        totals["preemptive_chunks"] += fast.chunk_evaluations + fast.confirm_evaluations
        totals["full_chunks"] += full_chunks
        totals["preemptive_comparisons"] += fast.comparisons
        totals["full_comparisons"] += full_comparisons
        totals["preemptive_correct"] += fast_id == template.id
        totals["full_correct"] += full_id == template.id
        totals["agree"] += fast_id == (full_id if full_score > vcfg.alpha else None)
        totals["violations"] += fast.chunk_evaluations > full_chunks
        totals["halving_violations"] += not _halves(fast)
    result = SuiteResult("validation")
    n = max(trials, 1)
    row = {"trials": trials,
           "preemptive_chunk_evaluations": _round(totals["preemptive_chunks"] / n),
           "full_chunk_evaluations": _round(totals["full_chunks"] / n),
           "preemptive_comparisons": _round(totals["preemptive_comparisons"] / n),
           "full_comparisons": _round(totals["full_comparisons"] / n),
           "preemptive_top1": _round(totals["preemptive_correct"] / n),
           "full_top1": _round(totals["full_correct"] / n),
           "agreement": _round(totals["agree"] / n)}
    result.rows.append(row)
    result.checks.append(Check("chunk evaluations above full scoring", totals["violations"],
                               "== 0", totals["violations"] == 0))
    result.checks.append(Check("survivors above ceil(n / 2^k)", totals["halving_violations"],
                               "== 0", totals["halving_violations"] == 0))
    return result


def suite_oracle(config, workers, progress):
    """Noiseless equivalence with the exhaustive nearest template, then noisy agreement."""
    bench = config.bench
    vcfg = config.validation
    data_seed, forest_seed, query_seed = _suite_seed(config, "oracle").spawn(3)
    _, templates = _catalogue_store(config, config.dataset.n_objects, data_seed)
    store = TemplateStore(templates)
    forest = train_forest(store, config.forest, forest_seed, workers)
    rng = np.random.default_rng(query_seed)
    everything = [int(i) for i in store.ids]

    exact = reachable = 0
    for _ in tqdm(range(bench.oracle_windows), desc="oracle", disable=not progress):
        template = store.templates[int(rng.integers(len(store)))]
        window = _query_window(template, 0.0, rng)
        found = forest.query(window.descriptor)
        if not isinstance(found, Candidates) or template.id not in found.ids:
            continue
        reachable += 1
        fast = preemptive_validate(window, found.ids, store, vcfg)
        _, best_score = full_validate(window, everything, store, vcfg.use_depth,
                                      vcfg.depth_tolerance)
        exact += fast.winner is not None and abs(fast.winner[1] - best_score) < 1e-12

    agree = trials = 0
    for _ in tqdm(range(bench.agreement_trials), desc="agreement", disable=not progress):
        template = store.templates[int(rng.integers(len(store)))]
        window = _query_window(template, bench.noise_rate, rng)
        found = forest.query(window.descriptor)
        if not isinstance(found, Candidates):
            continue
        trials += 1
        fast = preemptive_validate(window, found.ids, store, vcfg)
        full_id, full_score = full_validate(window, found.ids, store, vcfg.use_depth,
                                            vcfg.depth_tolerance)
        expected = full_id if full_score > vcfg.alpha else None
        agree += (fast.winner[0] if fast.winner else None) == expected

    windows = bench.oracle_windows
    result = SuiteResult("oracle")
    result.rows.append({"windows": windows, "reachable": reachable, "exact": exact,
                        "noisy_trials": trials, "noisy_agree": agree})
    reach_rate = reachable / windows if windows else 1.0
    exact_rate = exact / windows if windows else 1.0
    agreement = agree / trials if trials else 1.0
    result.summary = {"reach_rate": _round(reach_rate), "exact_rate": _round(exact_rate),
                      "agreement": _round(agreement)}
    result.checks.append(Check("training views reach their own leaf", reach_rate, "== 1.0",
                               reach_rate == 1.0))
    result.checks.append(Check("noiseless oracle equivalence", exact_rate, "== 1.0",
                               exact_rate == 1.0))
    result.checks.append(Check("noisy winner agreement", agreement, ">= 0.95", agreement >= 0.95))
    return result


def suite_rejection(config, workers, progress):
    """Background rejection on clutter-only scenes, foreground recall on planted ones."""
    data_seed, forest_seed, scene_seed = _suite_seed(config, "rejection").spawn(3)
    catalogue, templates = _catalogue_store(config, config.dataset.n_objects, data_seed)
    store = TemplateStore(templates)
    forest = train_forest(store, config.forest, forest_seed, workers)
    detector = Detector(store, forest, config.validation, config.pipeline)
    rng = np.random.default_rng(scene_seed)
    clutter = _detect_all(config, detector, _scenes(config, catalogue, 0, rng), progress,
                          "clutter")
    planted = _detect_all(config, detector,
                          _scenes(config, catalogue, config.bench.objects_per_scene, rng,
                                  noise_rate=0.0),
                          progress, "planted")
    result = SuiteResult("rejection")
    result.rows.append({"scenes": "clutter", **{k: _round(v) for k, v in clutter.items()}})
    result.rows.append({"scenes": "planted", **{k: _round(v) for k, v in planted.items()}})
    result.checks.append(Check("clutter windows rejected", clutter["rejection_fraction"],
                               ">= 0.9", clutter["rejection_fraction"] >= 0.9))
    result.checks.append(Check("planted windows reaching validation",
                               planted["validation_recall"], ">= 0.99",
                               planted["validation_recall"] >= 0.99))
    return result


SUITES = {
    "templates": suite_templates,
    "trees": suite_trees,
    "objects": suite_objects,
    "validation": suite_validation,
    "oracle": suite_oracle,
    "rejection": suite_rejection,
}


def run_bench(config, suites=None, workers=1, progress=False, baseline=True):
    """Run the selected suites (default: config.bench.suites) in a fixed order."""
    wanted = set(suites or config.bench.suites)
    results = []
    for name in SUITE_ORDER:
        if name not in wanted:
            continue
        logger.info("Running bench suite '%s'", name)
        started = time.perf_counter()
        if name == "templates":
            result = suite_templates(config, workers, progress, baseline)
        else:
            result = SUITES[name](config, workers, progress)
        result.seconds = time.perf_counter() - started
        results.append(result)
    return results


def write_results(results, out_dir, snapshot):
    """bench_<suite>.csv per suite, bench.json aggregate, bench_timings.json wall clock."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for result in results:
        if not result.rows:
            continue
        path = os.path.join(out_dir, f"bench_{result.name}.csv")
        columns = list(result.rows[0])
        with open(path, "w", newline="", encoding="utf-8") as f:
            f.write(f"# tool_version={TOOL_VERSION} config={json.dumps(snapshot, sort_keys=True)}\n")
            writer = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
            writer.writeheader()
            writer.writerows(result.rows)
        paths.append(path)
    document = {
        "tool_version": TOOL_VERSION,
        "config": snapshot,
        "suites": {r.name: {"summary": r.summary, "rows": r.rows,
                            "checks": [c.to_record() for c in r.checks]} for r in results},
    }
    path = os.path.join(out_dir, "bench.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, sort_keys=True, indent=1)
        f.write("\n")
    paths.append(path)
    path = os.path.join(out_dir, "bench_timings.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump({r.name: round(r.seconds, 3) for r in results}, f, sort_keys=True, indent=1)
        f.write("\n")
    paths.append(path)
    return paths


def print_report(results):
    print("\n" + "=" * 40)
    print("BENCH REPORT")
    print("=" * 40)
    for result in results:
        print(f"[{result.name}] ({result.seconds:.1f}s)")
        for row in result.rows:
            print("  " + ", ".join(f"{k}={v}" for k, v in row.items()))
        for check in result.checks:
            flag = "PASS" if check.passed else "FAIL"
            print(f"  {flag}  {check.name}: {_round(check.value)} (want {check.threshold})")
        print("-" * 40)
    failed = sum(not c.passed for r in results for c in r.checks)
    total = sum(len(r.checks) for r in results)
    print(f"Checks passed: {total - failed}/{total}")
    print("=" * 40)
