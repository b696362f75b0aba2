"""
Procedural objects, pose-sampled template sets and cluttered test scenes.

Objects are flat star-shaped silhouettes with a dome-shaped depth profile, a
single base hue and a few darker texture chords. Out-of-plane rotation is
approximated by foreshortening the silhouette (cos of yaw/pitch) and tilting
the depth surface (sin of yaw/pitch); roll rotates in plane and scale scales
the view and moves it closer to the camera.

Scenes are composed directly in feature space: views are rendered once,
quantized with `extract_features`, and pasted into a noisy background grid.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from matplotlib.colors import hsv_to_rgb
from matplotlib.path import Path
from tqdm import tqdm

from config import FeatureConfig
from errors import PoseRangeError, SceneSpecError
from features import (N_BINS, DESCRIPTOR_MODALITIES, FeatureMap, PoseSample, Template,
                      extract_features, template_locations)

logger = logging.getLogger(__name__)

__all__ = ["PoseSample", "SyntheticObject", "make_object", "render_view", "pose_grid",
           "build_template_set", "Catalogue", "Placement", "SceneSpec", "GroundTruth",
           "compose_scene", "random_scene_spec", "build_dataset"]

N_VERTICES = 12
RADIUS_RANGE = (0.40, 0.48)     # fraction of the patch size
MIN_AREA_FRACTION = 0.2
MAX_TILT = 75.0                 # degrees, for both yaw and pitch
SCALE_RANGE = (0.5, 0.5 / RADIUS_RANGE[1])
TILT_GAIN = 4.0                 # mm of depth per pixel per unit sin(angle)
SATURATION = 0.85
VALUE = 0.8


@dataclass(frozen=True, eq=False)
class SyntheticObject:
    """A procedural object in canonical (identity pose) patch coordinates."""
    object_id: int
    seed: int
    patch_size: int
    # (K, 2) polygon vertices, centred on the patch
    silhouette: np.ndarray
    # dome height in mm at the patch centre
    profile_height: float
    base_hue: int
    # [((x0, y0), (x1, y1), contrast), ...]
    texture_edges: tuple = field(default_factory=tuple)

    def __post_init__(self):
        silhouette = np.array(self.silhouette, dtype=np.float64)
        silhouette.setflags(write=False)
        object.__setattr__(self, "silhouette", silhouette)
        if self.silhouette_area() < MIN_AREA_FRACTION * self.patch_size ** 2:
            raise PoseRangeError(f"object {self.object_id}: silhouette covers less than "
                                 f"{MIN_AREA_FRACTION:.0%} of the patch")
        if not 1 <= self.base_hue <= N_BINS:
            raise ValueError(f"base_hue must lie in [1, {N_BINS}]")

    def silhouette_area(self):
        x, y = self.silhouette[:, 0], self.silhouette[:, 1]
        return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))

    def profile(self, u, v):
        """Dome height (mm) at canonical offsets (u, v) from the patch centre."""
        radius = 0.5 * self.patch_size
        return self.profile_height * np.clip(1.0 - (u * u + v * v) / (radius * radius), 0.0, None)


def make_object(object_id, patch_size, seed):
    """Draw a star-shaped object; same (object_id, patch_size, seed) gives the same object."""
    rng = np.random.default_rng(seed)
    step = 2 * np.pi / N_VERTICES
    angles = np.arange(N_VERTICES) * step + rng.uniform(-0.3, 0.3, N_VERTICES) * step
    radii = rng.uniform(*RADIUS_RANGE, N_VERTICES) * patch_size
    silhouette = np.column_stack([radii * np.cos(angles), radii * np.sin(angles)])

    # chords through the inner disc stay inside a star polygon of this radius range
    inner = 0.3 * patch_size
    edges = []
    for _ in range(int(rng.integers(2, 4))):
        a = rng.uniform(0, 2 * np.pi)
        b = a + np.pi + rng.uniform(-0.6, 0.6)
        start = (inner * math.cos(a), inner * math.sin(a))
        end = (inner * math.cos(b), inner * math.sin(b))
        edges.append((start, end, float(rng.uniform(0.35, 0.6))))

    return SyntheticObject(
        object_id=object_id,
        seed=int(seed),
        patch_size=patch_size,
        silhouette=silhouette,
        profile_height=float(rng.uniform(20.0, 40.0)),
        base_hue=1 + (object_id * 3) % N_BINS,
        texture_edges=tuple(edges),
    )


class RenderedView(NamedTuple):
    rgb: np.ndarray
    depth: np.ndarray
    mask: np.ndarray


def _exact_trig(degrees):
    # quarter turns come out exact so symmetric silhouettes map onto themselves
    radians = math.radians(degrees)
    return round(math.cos(radians), 12), round(math.sin(radians), 12)


def _segment_distance(px, py, start, end):
    (x0, y0), (x1, y1) = start, end
    dx, dy = x1 - x0, y1 - y0
    t = np.clip(((px - x0) * dx + (py - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))


def render_view(obj, pose, base_distance=700.0):
    """
    Render `obj` under `pose` into a patch of obj.patch_size pixels.

    Returns RGB on a 0-255 scale, depth in mm (0 off the object) and the
    silhouette mask. Pixels are sampled at their centres through the inverse
    transform, so the identity pose reproduces the canonical view exactly.
    """
    pose = PoseSample(*pose)
    if abs(pose.yaw) > MAX_TILT or abs(pose.pitch) > MAX_TILT:
        raise PoseRangeError(f"yaw/pitch must lie within +-{MAX_TILT} degrees, got {tuple(pose)}")
    if not SCALE_RANGE[0] <= pose.scale <= SCALE_RANGE[1] + 1e-9:
        raise PoseRangeError(f"scale {pose.scale} outside [{SCALE_RANGE[0]}, {SCALE_RANGE[1]:.3f}]")
    cos_yaw, sin_yaw = _exact_trig(pose.yaw)
    cos_pitch, sin_pitch = _exact_trig(pose.pitch)
    cos_roll, sin_roll = _exact_trig(pose.roll)
    sx, sy = pose.scale * cos_yaw, pose.scale * cos_pitch
    if sx * sy < 0.05:
        raise PoseRangeError(f"pose {tuple(pose)} collapses the silhouette")

    size = obj.patch_size
    centre = 0.5 * size
    py, px = np.mgrid[0:size, 0:size] + 0.5
    px, py = px - centre, py - centre
    # undo roll, then undo foreshortening and scale
    u = (cos_roll * px + sin_roll * py) / sx
    v = (-sin_roll * px + cos_roll * py) / sy

    mask = Path(obj.silhouette).contains_points(
        np.column_stack([u.ravel(), v.ravel()])).reshape(size, size)

    depth = (base_distance / pose.scale - obj.profile(u, v)
             + (u * sin_yaw + v * sin_pitch) * TILT_GAIN)
    depth = np.where(mask, depth, 0.0).astype(np.float32)

    brightness = np.full((size, size), VALUE)
    for start, end, contrast in obj.texture_edges:
        on_edge = _segment_distance(u, v, start, end) < 0.5
        brightness = np.where(on_edge, VALUE * (1.0 - contrast), brightness)
    hue = (obj.base_hue - 0.5) / N_BINS
    hsv = np.stack([np.full((size, size), hue), np.full((size, size), SATURATION), brightness],
                   axis=-1)
    rgb = np.round(hsv_to_rgb(hsv) * 255.0)
    rgb = np.where(mask[..., None], rgb, 0.0)
    return RenderedView(rgb=rgb, depth=depth, mask=mask)


def pose_grid(grid):
    """Expand a PoseGridConfig into a list of PoseSample, yaw varying fastest."""
    yaws = np.linspace(grid.yaw_range[0], grid.yaw_range[1], grid.yaw_steps)
    pitches = np.linspace(grid.pitch_range[0], grid.pitch_range[1], grid.pitch_steps)
    return [PoseSample(float(yaw), float(pitch), float(roll), float(scale))
            for scale in grid.scales
            for roll in grid.rolls
            for pitch in pitches
            for yaw in yaws]


class ViewFeatures(NamedTuple):
    values: np.ndarray
    depth: np.ndarray
    mask: np.ndarray


def view_features(obj, pose, base_distance=700.0, features=None):
    """Render one view and quantize it. values is (P, P, 3) uint8."""
    features = features or FeatureConfig()
    view = render_view(obj, pose, base_distance)
    fmap = extract_features(view.rgb, view.depth,
                            magnitude_threshold=features.magnitude_threshold,
                            saturation_floor=features.saturation_floor,
                            normal_threshold=features.normal_threshold)
    return ViewFeatures(values=fmap.values, depth=view.depth, mask=view.mask)


def make_template(template_id, obj, pose, locations, view, rng):
    """Crop a quantized view into a Template, filling off-object coordinates with noise."""
    n_mod = len(DESCRIPTOR_MODALITIES)
    xs, ys = locations[:, 0], locations[:, 1]
    descriptor = view.values[ys, xs, :].reshape(-1).copy()
    fg_mask = np.repeat(view.mask[ys, xs], n_mod)
    background = ~fg_mask
    descriptor[background] = rng.integers(1, N_BINS + 1, size=int(background.sum()))
    return Template(
        id=template_id,
        object_id=obj.object_id,
        pose=pose,
        patch_size=(obj.patch_size, obj.patch_size),
        locations=locations,
        descriptor=descriptor,
        fg_mask=fg_mask,
        depth_patch=view.depth[ys, xs],
    )


def build_template_set(objects, poses, location_step=2, base_distance=700.0, features=None,
                       seed=0, progress=False):
    """One template per (object, pose); ids are dense, object-major."""
    if not objects:
        raise ValueError("build_template_set needs at least one object")
    if not poses:
        raise ValueError("build_template_set needs at least one pose")
    patch = objects[0].patch_size
    locations = template_locations((patch, patch), location_step)
    rng = np.random.default_rng(seed)
    templates = []
    pairs = [(obj, pose) for obj in objects for pose in poses]
    for template_id, (obj, pose) in enumerate(tqdm(pairs, desc="templates", disable=not progress)):
        view = view_features(obj, pose, base_distance, features)
        templates.append(make_template(template_id, obj, pose, locations, view, rng))
    logger.info("Built %d templates (%d objects x %d poses)", len(templates), len(objects), len(poses))
    return templates


class Catalogue:
    """
    The objects and pose grid of a dataset, with a cache of quantized views.
    Template ids follow build_template_set: object_index * n_poses + pose_index.
    """

    def __init__(self, objects, poses, base_distance=700.0, features=None):
        self.objects = {obj.object_id: obj for obj in objects}
        self.poses = list(poses)
        self.base_distance = base_distance
        self.features = features or FeatureConfig()
        self._order = [obj.object_id for obj in objects]
        self._pose_index = {pose: i for i, pose in enumerate(self.poses)}
        self._views = {}

    def __contains__(self, object_id):
        return object_id in self.objects

    @property
    def patch_size(self):
        return self._first().patch_size

    def _first(self):
        return self.objects[self._order[0]]

    def view(self, object_id, pose):
        key = (object_id, PoseSample(*pose))
        if key not in self._views:
            self._views[key] = view_features(self.objects[object_id], key[1],
                                             self.base_distance, self.features)
        return self._views[key]

    def template_id(self, object_id, pose):
        pose_index = self._pose_index.get(PoseSample(*pose))
        if pose_index is None or object_id not in self.objects:
            return None
        return self._order.index(object_id) * len(self.poses) + pose_index

    def build_templates(self, location_step=2, seed=0, progress=False):
        return build_template_set([self.objects[i] for i in self._order], self.poses,
                                  location_step, self.base_distance, self.features, seed,
                                  progress)


class Placement(NamedTuple):
    object_id: int
    pose: PoseSample
    x: int
    y: int


@dataclass
class SceneSpec:
    name: str
    size: tuple
    placed_objects: list = field(default_factory=list)
    clutter_density: float = 0.0
    noise_rate: float = 0.0
    occlusion_fraction: float = 0.0
    background_depth: float = 900.0
    seed: int = 0


@dataclass(frozen=True)
class GroundTruth:
    object_id: int
    pose: PoseSample
    x: int
    y: int
    width: int
    height: int
    template_id: Optional[int] = None

    @property
    def centre(self):
        return (self.x + 0.5 * self.width, self.y + 0.5 * self.height)

    def to_record(self):
        return {"object_id": self.object_id, "template_id": self.template_id,
                "pose": list(self.pose), "x": self.x, "y": self.y,
                "width": self.width, "height": self.height}


def _check_placements(spec, catalogue):
    width, height = spec.size
    patch = catalogue.patch_size
    for i, p in enumerate(spec.placed_objects):
        if p.object_id not in catalogue:
            raise SceneSpecError(spec.name, f"placement {i} uses unknown object {p.object_id}")
        if p.x < 0 or p.y < 0 or p.x + patch > width or p.y + patch > height:
            raise SceneSpecError(spec.name, f"placement {i} at ({p.x}, {p.y}) exceeds the "
                                            f"{width}x{height} scene")
        for j, q in enumerate(spec.placed_objects[:i]):
            if abs(p.x - q.x) < patch and abs(p.y - q.y) < patch:
                raise SceneSpecError(spec.name, f"placements {j} and {i} overlap")


def _paste(values, depth, x, y, view, mask=None):
    mask = view.mask if mask is None else mask
    size = mask.shape[0]
    region = values[y:y + size, x:x + size]
    region[mask] = view.values[mask]
    depth[y:y + size, x:x + size][mask] = view.depth[mask]


def _add_clutter(spec, catalogue, values, depth, rng):
    width, height = spec.size
    patch = catalogue.patch_size
    if width < patch or height < patch:
        return
    count = int(round(spec.clutter_density * width * height / (patch * patch)))
    ids = list(catalogue.objects)
    for k in range(count):
        x = int(rng.integers(0, width - patch + 1))
        y = int(rng.integers(0, height - patch + 1))
        if k % 2 == 0:
            # re-hued view of another object
            object_id = int(rng.choice(ids))
            obj = catalogue.objects[object_id]
            pose = catalogue.poses[int(rng.integers(len(catalogue.poses)))]
            view = catalogue.view(object_id, pose)
            new_hue = int(rng.choice([h for h in range(1, N_BINS + 1) if h != obj.base_hue]))
            hued = view.values.copy()
            hue = hued[..., 2]
            hue[hue > 0] = new_hue
            _paste(values, depth, x, y, ViewFeatures(hued, view.depth, view.mask))
        else:
            # random-bin noise block with a constant hue
            w = int(rng.integers(patch // 2, patch + 1))
            h = int(rng.integers(patch // 2, patch + 1))
            block = values[y:y + h, x:x + w]
            block[..., :2] = rng.integers(1, N_BINS + 1, size=block[..., :2].shape)
            block[..., 2] = int(rng.integers(1, N_BINS + 1))
            depth[y:y + h, x:x + w] = spec.background_depth - rng.uniform(50.0, 250.0)


def _add_occluders(spec, ground_truth, values, depth, rng):
    for gt in ground_truth:
        band = int(round(spec.occlusion_fraction * gt.height))
        if band == 0:
            continue
        x, y, size = gt.x, gt.y, gt.width
        side = int(rng.integers(4))
        if side == 0:
            rows, cols = slice(y, y + band), slice(x, x + size)
        elif side == 1:
            rows, cols = slice(y + size - band, y + size), slice(x, x + size)
        elif side == 2:
            rows, cols = slice(y, y + size), slice(x, x + band)
        else:
            rows, cols = slice(y, y + size), slice(x + size - band, x + size)
        region = values[rows, cols]
        region[...] = rng.integers(1, N_BINS + 1, size=region.shape)
        window_depth = depth[y:y + size, x:x + size]
        depth[rows, cols] = float(np.median(window_depth[window_depth > 0])) - 100.0


def compose_scene(spec, catalogue):
    """
    Build the FeatureMap of a scene plus its ground truth.

    Layers, bottom to top: uniform background bins, clutter patches, placed
    objects (pasted under their masks), occluder bands, per-coordinate noise.
    Each layer draws from its own stream of SeedSequence(spec.seed).
    """
    width, height = spec.size
    _check_placements(spec, catalogue)
    base_rng, clutter_rng, occlusion_rng, noise_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(4))

    n_mod = len(DESCRIPTOR_MODALITIES)
    values = base_rng.integers(1, N_BINS + 1, size=(height, width, n_mod)).astype(np.uint8)
    depth = np.full((height, width), spec.background_depth, dtype=np.float32)
    _add_clutter(spec, catalogue, values, depth, clutter_rng)

    patch = catalogue.patch_size
    ground_truth = []
    for p in spec.placed_objects:
        _paste(values, depth, p.x, p.y, catalogue.view(p.object_id, p.pose))
        ground_truth.append(GroundTruth(
            object_id=p.object_id, pose=PoseSample(*p.pose), x=p.x, y=p.y,
            width=patch, height=patch, template_id=catalogue.template_id(p.object_id, p.pose)))

    if spec.occlusion_fraction > 0:
        _add_occluders(spec, ground_truth, values, depth, occlusion_rng)

    if spec.noise_rate > 0:
        flip = noise_rng.random(values.shape) < spec.noise_rate
        values[flip] = noise_rng.integers(1, N_BINS + 1, size=int(flip.sum()))

    logger.debug("Composed scene '%s' (%dx%d, %d objects)", spec.name, width, height,
                 len(ground_truth))
    return FeatureMap(values, DESCRIPTOR_MODALITIES, depth), ground_truth


def random_scene_spec(name, catalogue, size, n_objects, rng, clutter_density=0.0,
                      noise_rate=0.0, occlusion_fraction=0.0, background_depth=900.0,
                      max_attempts=1000):
    """Place `n_objects` random (object, grid pose) views without overlap."""
    width, height = size
    patch = catalogue.patch_size
    if n_objects and (width < patch or height < patch):
        raise SceneSpecError(name, f"scene {width}x{height} is smaller than the {patch}px patch")
    ids = sorted(catalogue.objects)
    placements = []
    attempts = 0
    while len(placements) < n_objects:
        attempts += 1
        if attempts > max_attempts:
            raise SceneSpecError(name, f"could not place {n_objects} objects without overlap")
        x = int(rng.integers(0, width - patch + 1))
        y = int(rng.integers(0, height - patch + 1))
        if any(abs(x - q.x) < patch and abs(y - q.y) < patch for q in placements):
            continue
        object_id = int(rng.choice(ids))
        pose = catalogue.poses[int(rng.integers(len(catalogue.poses)))]
        placements.append(Placement(object_id, pose, x, y))
    return SceneSpec(name=name, size=tuple(size), placed_objects=placements,
                     clutter_density=clutter_density, noise_rate=noise_rate,
                     occlusion_fraction=occlusion_fraction, background_depth=background_depth,
                     seed=int(rng.integers(2 ** 31)))


def make_catalogue(n_objects, dataset, features, seed):
    """Objects 0..n_objects-1 with seeds spawned from `seed`."""
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    children = seed.spawn(n_objects)
    objects = [make_object(i, dataset.patch_size, int(child.generate_state(1)[0]))
               for i, child in enumerate(children)]
    return Catalogue(objects, pose_grid(dataset.pose_grid), dataset.base_distance, features)


def scene_spec_from_config(scene, catalogue, rng):
    """Turn a SceneConfig into a SceneSpec (explicit placements or random ones)."""
    if scene.placements:
        placements = []
        for i, raw in enumerate(scene.placements):
            object_id, pose_index = int(raw["object_id"]), int(raw["pose_index"])
            if object_id not in catalogue:
                raise SceneSpecError(scene.name, f"placement {i} uses unknown object {object_id}")
            if not 0 <= pose_index < len(catalogue.poses):
                raise SceneSpecError(scene.name, f"placement {i} uses unknown pose {pose_index}")
            placements.append(Placement(object_id, catalogue.poses[pose_index],
                                        int(raw["x"]), int(raw["y"])))
        return SceneSpec(name=scene.name, size=scene.size, placed_objects=placements,
                         clutter_density=scene.clutter_density, noise_rate=scene.noise_rate,
                         occlusion_fraction=scene.occlusion_fraction,
                         background_depth=scene.background_depth,
                         seed=int(rng.integers(2 ** 31)))
    return random_scene_spec(scene.name, catalogue, scene.size, scene.random_objects, rng,
                             scene.clutter_density, scene.noise_rate, scene.occlusion_fraction,
                             scene.background_depth)


@dataclass
class Dataset:
    catalogue: Catalogue
    templates: list
    # [(SceneSpec, FeatureMap, [GroundTruth])]
    scenes: list


def build_dataset(config, progress=False):
    """Objects, templates and scenes of a RunConfig, deterministic in master_seed."""
    object_seq, fill_seq, scene_seq = np.random.SeedSequence(config.master_seed).spawn(3)
    catalogue = make_catalogue(config.dataset.n_objects, config.dataset, config.features,
                               object_seq)
    templates = catalogue.build_templates(config.dataset.location_step,
                                          seed=fill_seq, progress=progress)
    scene_rng = np.random.default_rng(scene_seq)
    scenes = []
    for scene in config.dataset.scenes:
        spec = scene_spec_from_config(scene, catalogue, scene_rng)
        fmap, ground_truth = compose_scene(spec, catalogue)
        scenes.append((spec, fmap, ground_truth))
    return Dataset(catalogue=catalogue, templates=templates, scenes=scenes)
