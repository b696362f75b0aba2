"""
End-to-end detection over a scene FeatureMap.

The Detector slides the template window over every position, gates windows
by depth, asks the candidate search (normally the forest) for candidates and
validates them. With the pyramid enabled, a stride-2 coarse level decides
first which fine positions are worth a look.
"""
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from config import PipelineConfig, ValidationConfig
from errors import CompatibilityError, ShapeError
from features import PoseSample
from forest import Rejected
from search import ForestSearch
from validate import preemptive_validate

logger = logging.getLogger(__name__)

VALIDATED = -1
OUT_OF_RANGE = -2


@dataclass(frozen=True)
class Detection:
    x: int
    y: int
    template_id: int
    object_id: int
    pose: PoseSample
    score: float
    width: int
    height: int
    rejected_at_depth: Optional[int] = None

    @property
    def centre(self):
        return (self.x + 0.5 * self.width, self.y + 0.5 * self.height)

    @property
    def box(self):
        return (self.x, self.y, self.x + self.width, self.y + self.height)

    def to_record(self):
        return {"x": self.x, "y": self.y, "template_id": self.template_id,
                "object_id": self.object_id, "pose": list(self.pose),
                "score": round(self.score, 6), "width": self.width, "height": self.height}


def _angle_error(a, b):
    diff = abs(a - b) % 360.0
    return min(diff, 360.0 - diff)


@dataclass(frozen=True)
class EvalCriterion:
    k_m: float = 0.1
    pose_tolerance: float = 15.0

    def is_correct(self, detection, truth):
        if detection.object_id != truth.object_id:
            return False
        (dx, dy), (gx, gy) = detection.centre, truth.centre
        extent = max(truth.width, truth.height)
        if math.hypot(dx - gx, dy - gy) > self.k_m * extent:
            return False
        pose, true_pose = PoseSample(*detection.pose), PoseSample(*truth.pose)
        worst = max(_angle_error(pose.yaw, true_pose.yaw),
                    _angle_error(pose.pitch, true_pose.pitch),
                    _angle_error(pose.roll, true_pose.roll))
        return worst <= self.pose_tolerance


@dataclass
class FrameStats:
    windows: int = 0
    in_range: int = 0
    rejected: int = 0
    validated: int = 0
    coarse_windows: int = 0
    coarse_rejected: int = 0
    raw_detections: int = 0
    traversal_comparisons: int = 0
    rejector_lookups: int = 0
    validation_comparisons: int = 0
    chunk_evaluations: int = 0
    confirm_evaluations: int = 0
    timings: dict = field(default_factory=dict)

    def add(self, other):
        for name in ("rejected", "validated", "traversal_comparisons", "rejector_lookups",
                     "validation_comparisons", "chunk_evaluations", "confirm_evaluations"):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        for key, value in other.timings.items():
            self.timings[key] = self.timings.get(key, 0.0) + value

    @property
    def rejection_fraction(self):
        return self.rejected / self.in_range if self.in_range else 0.0

    def counters(self):
        record = asdict(self)
        record.pop("timings")
        record["rejection_fraction"] = self.rejection_fraction
        return record


@dataclass
class DetectionResult:
    detections: list
    # per window position: depth >= 0 rejected, -1 validated, -2 out of depth range
    reject_map: np.ndarray
    stats: FrameStats
    traces: list = field(default_factory=list)


def _window_depth_medians(scene, locations, ny, nx):
    xs = np.arange(nx)[None, :, None] + locations[None, None, :, 0]
    ys = np.arange(ny)[:, None, None] + locations[None, None, :, 1]
    samples = scene.depth[ys, xs].astype(np.float64)
    valid = samples > 0
    samples = np.where(valid, samples, np.nan)
    samples[~valid.any(axis=-1)] = 0.0
    return np.nanmedian(samples, axis=-1)


class Detector:
    """
    Runs the detection pipeline for one template store.

    The detector holds only read-only state (store, search, configs), so one
    instance can serve any number of scenes and threads.
    """

    def __init__(self, store, forest=None, validation=None, pipeline=None, search=None):
        self.store = store
        self.validation = validation or ValidationConfig()
        self.pipeline = pipeline or PipelineConfig()
        if search is None:
            if forest is None:
                raise ValueError("Detector needs a forest or a search")
            search = ForestSearch(store, forest)
        self.search = search
        self.forest = forest
        self.locations = store.locations
        self.patch_size = store.patch_size

    def _check_scene(self, scene):
        if scene.n_modalities != self.store.n_modalities:
            raise CompatibilityError(
                f"scene has {scene.n_modalities} modalities, templates have {self.store.n_modalities}")
        width, height = self.patch_size
        if scene.width < width or scene.height < height:
            raise ShapeError(f"scene {scene.width}x{scene.height} is smaller than the "
                             f"{width}x{height} template patch")

    def _depth_gate(self, scene, ny, nx):
        in_range = np.ones((ny, nx), dtype=bool)
        if scene.depth is None or self.pipeline.depth_range is None:
            return in_range
        near, far = self.pipeline.depth_range
        medians = _window_depth_medians(scene, self.locations, ny, nx)
        return (medians >= near) & (medians <= far)

    def _coarse_codes(self, scene, stats):
        """Forest verdicts on the stride-2 level: depth >= 0 rejected, -1 nominated."""
        coarse = scene.downsample()
        locations = self.locations // 2
        extent_x = int(locations[:, 0].max()) + 1
        extent_y = int(locations[:, 1].max()) + 1
        ncy, ncx = coarse.height - extent_y + 1, coarse.width - extent_x + 1
        if ncy < 1 or ncx < 1:
            return None
        codes = np.full((ncy, ncx), VALIDATED, dtype=np.int16)
        for cy in range(ncy):
            for cx in range(ncx):
                result = self.search.find(coarse.window(cx, cy, locations).descriptor)
                stats.traversal_comparisons += result.comparisons
                stats.rejector_lookups += result.lookups
                if isinstance(result, Rejected):
                    codes[cy, cx] = result.depth
        stats.coarse_windows = codes.size
        stats.coarse_rejected = int((codes >= 0).sum())
        return codes

    def _scan_row(self, scene, y, xs, trace):
        stats = FrameStats()
        codes, detections, traces = [], [], []
        search_time = validate_time = 0.0
        width, height = self.patch_size
        for x in xs:
            window = scene.window(int(x), y, self.locations, self.patch_size)
            started = time.perf_counter()
            result = self.search.find(window.descriptor)
            search_time += time.perf_counter() - started
            stats.traversal_comparisons += result.comparisons
            stats.rejector_lookups += result.lookups
            if isinstance(result, Rejected):
                stats.rejected += 1
                codes.append((x, result.depth))
                continue
            started = time.perf_counter()
            validation = preemptive_validate(window, result.ids, self.store, self.validation)
            validate_time += time.perf_counter() - started
            stats.validated += 1
            stats.validation_comparisons += validation.comparisons
            stats.chunk_evaluations += validation.chunk_evaluations
            stats.confirm_evaluations += validation.confirm_evaluations
            codes.append((x, VALIDATED))
            if trace:
                traces.append(validation.to_record(x=int(x), y=y))
            if validation.winner is None:
                continue
            template_id, score = validation.winner
            if score < self.pipeline.min_score or score <= self.validation.alpha:
                continue
            template = self.store[template_id]
            detections.append(Detection(
                x=int(x), y=y, template_id=template_id, object_id=template.object_id,
                pose=template.pose, score=score, width=width, height=height))
        stats.timings = {"search_s": search_time, "validate_s": validate_time}
        return codes, detections, traces, stats

    def detect(self, scene, trace=False):
        """Detections (after NMS), the rejection-depth grid and cost counters for one scene."""
        started = time.perf_counter()
        self._check_scene(scene)
        width, height = self.patch_size
        ny, nx = scene.height - height + 1, scene.width - width + 1
        stats = FrameStats(windows=ny * nx)
        reject_map = np.full((ny, nx), VALIDATED, dtype=np.int16)

        in_range = self._depth_gate(scene, ny, nx)
        reject_map[~in_range] = OUT_OF_RANGE
        stats.in_range = int(in_range.sum())

        # 1. Coarse level nominates fine positions
        evaluate = in_range.copy()
        coarse = self._coarse_codes(scene, stats) if self.pipeline.use_pyramid else None
        if coarse is not None:
            nominated = ndimage.binary_dilation(
                coarse == VALIDATED, structure=ndimage.generate_binary_structure(2, 1))
            ys, xs = np.nonzero(in_range)
            covered = (ys // 2 < coarse.shape[0]) & (xs // 2 < coarse.shape[1])
            cy, cx = ys[covered] // 2, xs[covered] // 2
            skipped = ~nominated[cy, cx]
            reject_map[ys[covered][skipped], xs[covered][skipped]] = coarse[cy[skipped], cx[skipped]]
            evaluate[ys[covered][skipped], xs[covered][skipped]] = False
            stats.rejected += int(skipped.sum())

        # 2. Fine level: forest query + validation, one task per row
        rows = [(y, np.flatnonzero(evaluate[y])) for y in range(ny)]
        rows = [(y, xs) for y, xs in rows if len(xs)]
        workers = self.pipeline.worker_count
        if workers > 1 and len(rows) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(lambda row: self._scan_row(scene, row[0], row[1], trace),
                                        rows))
        else:
            results = [self._scan_row(scene, y, xs, trace) for y, xs in rows]

        detections, traces = [], []
        for (y, _), (codes, row_detections, row_traces, row_stats) in zip(rows, results):
            for x, code in codes:
                reject_map[y, x] = code
            detections.extend(row_detections)
            traces.extend(row_traces)
            stats.add(row_stats)

        stats.raw_detections = len(detections)
        detections = nms(detections, self.pipeline.nms_overlap)
        stats.timings["total_s"] = time.perf_counter() - started
        logger.debug("Scene %dx%d: %d windows, %d rejected, %d validated, %d detections",
                     scene.width, scene.height, stats.windows, stats.rejected, stats.validated,
                     len(detections))
        return DetectionResult(detections=detections, reject_map=reject_map, stats=stats,
                               traces=traces)


def box_iou(a, b):
    """IoU of two (x0, y0, x1, y1) boxes with exclusive far corners."""
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def nms(detections, overlap_threshold=0.5):
    """Greedy non-maximum suppression by descending score, ties to the lowest template id."""
    ordered = sorted(detections, key=lambda d: (-d.score, d.template_id, d.y, d.x))
    kept = []
    for detection in ordered:
        if all(box_iou(detection.box, k.box) <= overlap_threshold for k in kept):
            kept.append(detection)
    return kept


@dataclass
class EvalMetrics:
    n_detections: int
    n_ground_truth: int
    true_positives: int
    precision: float
    recall: float
    accuracy: float
    # no detections at all: precision is reported as 1.0
    precision_undefined: bool
    rejection_fraction: float = 0.0
    traversal_comparisons: int = 0
    validation_comparisons: int = 0
    chunk_evaluations: int = 0
    timings: dict = field(default_factory=dict)

    def to_record(self, with_timings=False):
        record = asdict(self)
        if not with_timings:
            record.pop("timings")
        return record


def evaluate(detections, ground_truth, criterion=None, stats=None):
    """
    One-to-one greedy matching by score. A detection matches the unmatched
    ground truth it is correct for whose centre is closest.
    """
    criterion = criterion or EvalCriterion()
    matched = set()
    true_positives = 0
    for detection in sorted(detections, key=lambda d: (-d.score, d.template_id, d.y, d.x)):
        best, best_distance = None, None
        for i, truth in enumerate(ground_truth):
            if i in matched or not criterion.is_correct(detection, truth):
                continue
            distance = math.dist(detection.centre, truth.centre)
            if best is None or distance < best_distance:
                best, best_distance = i, distance
        if best is not None:
            matched.add(best)
            true_positives += 1

    # accuracy: the strongest detection overlapping each ground truth must be correct
    correct = 0
    for truth in ground_truth:
        truth_box = (truth.x, truth.y, truth.x + truth.width, truth.y + truth.height)
        overlapping = [d for d in detections if box_iou(d.box, truth_box) >= 0.5]
        if overlapping:
            top = min(overlapping, key=lambda d: (-d.score, d.template_id))
            correct += criterion.is_correct(top, truth)

    n_det, n_gt = len(detections), len(ground_truth)
    metrics = EvalMetrics(
        n_detections=n_det,
        n_ground_truth=n_gt,
        true_positives=true_positives,
        precision=true_positives / n_det if n_det else 1.0,
        recall=true_positives / n_gt if n_gt else 1.0,
        accuracy=correct / n_gt if n_gt else 1.0,
        precision_undefined=n_det == 0,
    )
    if stats is not None:
        metrics.rejection_fraction = stats.rejection_fraction
        metrics.traversal_comparisons = stats.traversal_comparisons
        metrics.validation_comparisons = stats.validation_comparisons
        metrics.chunk_evaluations = stats.chunk_evaluations
        metrics.timings = dict(stats.timings)
    return metrics


def validation_recall(reject_map, ground_truth):
    """Share of ground-truth windows that reached validation."""
    if not ground_truth:
        return 1.0
    reached = sum(int(reject_map[gt.y, gt.x] == VALIDATED) for gt in ground_truth)
    return reached / len(ground_truth)
