"""
Quantized multi-modal descriptors.

A scene or a rendered object view becomes a `FeatureMap`: a grid where every
pixel carries one quantized value per modality. Values are bin indices in
[0, 8]; 0 means the feature was not significant (flat colour, missing depth,
grey pixel). A `Template` is a fixed sample of such a grid, flattened into a
descriptor vector.

Descriptor layout is location-major, modality-minor:

    index = location_index * n_modalities + modality_index

so the same index names the same (location, modality) pair in every template
built with the same location list.
"""
import logging
from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple, Optional

import numpy as np
from matplotlib.colors import rgb_to_hsv
from scipy import ndimage

from errors import CompatibilityError, DataError, ShapeError

logger = logging.getLogger(__name__)

N_BINS = 8
MISSING = 0
MISSING_PENALTY = 4
MAX_DISTANCE = 4


class Modality(IntEnum):
    COLOUR_GRADIENT = 0
    SURFACE_NORMAL = 1
    HUE = 2
    # Validation-stage only, never part of a descriptor.
    DEPTH = 3


DESCRIPTOR_MODALITIES = (Modality.COLOUR_GRADIENT, Modality.SURFACE_NORMAL, Modality.HUE)


class PoseSample(NamedTuple):
    """Viewpoint label of a rendered view (angles in degrees)."""
    yaw: float
    pitch: float
    roll: float
    scale: float


def dim_distance(a, b):
    """
    Distance between two quantized values.

    Both missing -> 0, one missing -> 4, otherwise circular bin distance.
    """
    a, b = int(a), int(b)
    if a == MISSING and b == MISSING:
        return 0
    if a == MISSING or b == MISSING:
        return MISSING_PENALTY
    diff = abs(a - b)
    return min(diff, N_BINS - diff)


def _build_distance_table():
    table = np.zeros((N_BINS + 1, N_BINS + 1), dtype=np.uint8)
    for a in range(N_BINS + 1):
        for b in range(N_BINS + 1):
            table[a, b] = dim_distance(a, b)
    table.setflags(write=False)
    return table


# DISTANCE_TABLE[a, b] == dim_distance(a, b); index with uint8 arrays.
DISTANCE_TABLE = _build_distance_table()


def _frozen(array, dtype):
    array = np.array(array, dtype=dtype)
    array.setflags(write=False)
    return array


def template_locations(patch_size, step):
    """Sample offsets (dx, dy) inside a patch, row by row."""
    width, height = patch_size
    ys, xs = np.mgrid[0:height:step, 0:width:step]
    return np.column_stack([xs.ravel(), ys.ravel()]).astype(np.int32)


@dataclass(frozen=True, eq=False)
class Window:
    """Descriptor (and per-location depth) read from a FeatureMap at (x, y)."""
    x: int
    y: int
    descriptor: np.ndarray
    depth: Optional[np.ndarray] = None


class FeatureMap:
    """
    Immutable grid of quantized values: `values[y, x, m]` for modality m.
    `depth`, when present, is the raw depth in millimetres (0 = invalid).
    """

    def __init__(self, values, modalities=DESCRIPTOR_MODALITIES, depth=None):
        values = np.asarray(values)
        modalities = tuple(Modality(m) for m in modalities)
        if values.ndim != 3 or values.shape[2] != len(modalities):
            raise ShapeError(
                f"values must have shape (height, width, {len(modalities)}), got {values.shape}")
        if Modality.DEPTH in modalities:
            raise ShapeError("depth is carried separately, not as a quantized modality")
        if values.size and (values.min() < 0 or values.max() > N_BINS):
            raise ShapeError("quantized values must lie in [0, 8]")
        self.values = _frozen(values, np.uint8)
        self.modalities = modalities
        if depth is not None:
            depth = np.asarray(depth, dtype=np.float32)
            if depth.shape != values.shape[:2]:
                raise ShapeError(f"depth shape {depth.shape} does not match grid {values.shape[:2]}")
            if depth.size and depth.min() < 0:
                raise ShapeError("depth values must be >= 0")
            depth = _frozen(depth, np.float32)
        self.depth = depth

    def __repr__(self):
        return (f"FeatureMap({self.width}x{self.height}, "
                f"{[m.name for m in self.modalities]}, depth={self.depth is not None})")

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def n_modalities(self):
        return len(self.modalities)

    def window(self, x, y, locations, patch_size=None):
        """Read the descriptor of the window whose top-left corner is (x, y)."""
        locations = np.asarray(locations)
        if patch_size is not None:
            extent_x, extent_y = patch_size
        else:
            extent_x = int(locations[:, 0].max()) + 1
            extent_y = int(locations[:, 1].max()) + 1
        if x < 0 or y < 0 or x + extent_x > self.width or y + extent_y > self.height:
            raise ShapeError(
                f"window at ({x}, {y}) of size {extent_x}x{extent_y} leaves the "
                f"{self.width}x{self.height} grid")
        xs = x + locations[:, 0]
        ys = y + locations[:, 1]
        descriptor = self.values[ys, xs, :].reshape(-1)
        depth = self.depth[ys, xs] if self.depth is not None else None
        return Window(x=x, y=y, descriptor=descriptor, depth=depth)

    def downsample(self):
        """
        Stride-2 pyramid level. Each 2x2 block keeps its most frequent value
        per modality; ties go to the block's top-left value. Depth keeps the
        top-left sample.
        """
        h2, w2 = self.height // 2, self.width // 2
        m = self.n_modalities
        blocks = self.values[:2 * h2, :2 * w2].reshape(h2, 2, w2, 2, m)
        # (h2, w2, m, 4) with member 0 the top-left pixel
        blocks = blocks.transpose(0, 2, 4, 1, 3).reshape(h2, w2, m, 4)
        counts = (blocks[..., :, None] == blocks[..., None, :]).sum(axis=-1)
        best = counts.max(axis=-1)
        choice = np.where(counts[..., 0] == best, 0, counts.argmax(axis=-1))
        coarse = np.take_along_axis(blocks, choice[..., None], axis=-1)[..., 0]
        depth = None
        if self.depth is not None:
            depth = self.depth[:2 * h2:2, :2 * w2:2]
        return FeatureMap(coarse, self.modalities, depth)


@dataclass(frozen=True, eq=False)
class Template:
    """
    One object view as a descriptor.

    `fg_mask[i]` says whether descriptor coordinate i lies on the object;
    coordinates off the object hold uniform noise in [1, 8].
    """
    id: int
    object_id: int
    pose: PoseSample
    patch_size: tuple
    locations: np.ndarray
    descriptor: np.ndarray
    fg_mask: np.ndarray
    depth_patch: np.ndarray

    def __post_init__(self):
        locations = _frozen(self.locations, np.int32).reshape(-1, 2)
        descriptor = _frozen(self.descriptor, np.uint8)
        fg_mask = _frozen(self.fg_mask, bool)
        depth_patch = _frozen(self.depth_patch, np.float32)
        if len(locations) == 0 or len(descriptor) % len(locations):
            raise ShapeError("descriptor length must be a multiple of the location count")
        if len(fg_mask) != len(descriptor):
            raise ShapeError("fg_mask and descriptor lengths differ")
        if len(depth_patch) != len(locations):
            raise ShapeError("depth_patch needs one value per location")
        if descriptor.max(initial=0) > N_BINS:
            raise ShapeError("descriptor values must lie in [0, 8]")
        object.__setattr__(self, "locations", locations)
        object.__setattr__(self, "descriptor", descriptor)
        object.__setattr__(self, "fg_mask", fg_mask)
        object.__setattr__(self, "depth_patch", depth_patch)
        object.__setattr__(self, "pose", PoseSample(*map(float, self.pose)))
        object.__setattr__(self, "patch_size", tuple(int(v) for v in self.patch_size))

    def __repr__(self):
        return f"Template(id={self.id}, object={self.object_id}, pose={tuple(self.pose)})"

    @property
    def label(self):
        return self.object_id, self.pose

    @property
    def n_modalities(self):
        return len(self.descriptor) // len(self.locations)

    @property
    def foreground_fraction(self):
        return float(self.fg_mask.mean())


def descriptor_similarity(query, descriptor, fg_mask):
    """Normalised foreground score of one template descriptor against a query descriptor."""
    fg = np.asarray(fg_mask, dtype=bool)
    n_fg = int(fg.sum())
    if n_fg == 0:
        return 0.5
    distances = DISTANCE_TABLE[np.asarray(query)[fg], np.asarray(descriptor)[fg]]
    return 1.0 - float(distances.sum(dtype=np.int64)) / (MAX_DISTANCE * n_fg)


def descriptor_similarities(query, descriptors, fg_masks):
    """Vectorised `descriptor_similarity` over the rows of a descriptor matrix."""
    distances = DISTANCE_TABLE[np.asarray(query)[None, :], descriptors]
    totals = np.where(fg_masks, distances, 0).sum(axis=1, dtype=np.int64)
    n_fg = fg_masks.sum(axis=1)
    scores = 1.0 - totals / (MAX_DISTANCE * np.maximum(n_fg, 1))
    return np.where(n_fg > 0, scores, 0.5)


def similarity(scene, t, c):
    """
    Similarity of template `t` against the scene window whose top-left
    corner is c = (x, y). 1.0 means every foreground coordinate matches.
    """
    x, y = c
    window = scene.window(x, y, t.locations, patch_size=t.patch_size)
    return descriptor_similarity(window.descriptor, t.descriptor, t.fg_mask)


def _orientation_bins(angle, period):
    bins = np.floor(angle / (period / N_BINS)).astype(np.int64)
    return np.clip(bins, 0, N_BINS - 1) + 1


def extract_features(rgb, depth, magnitude_threshold=40.0, saturation_floor=0.2,
                     normal_threshold=2.0):
    """
    Quantize an RGB-D image into colour-gradient, surface-normal and hue bins.

    rgb is (H, W, 3) on a 0-255 scale, depth is (H, W) in millimetres with
    0 marking invalid pixels.

    Colour gradient: orientation of the strongest channel's Sobel gradient,
    folded to [0, 180) degrees, 8 bins of 22.5 degrees starting at the
    horizontal direction (bin 1). Surface normal: direction of the depth
    gradient over [0, 360), 8 bins of 45 degrees. Hue: 8 bins of 45 degrees
    starting at red (bin 1).
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeError(f"rgb must have shape (height, width, 3), got {rgb.shape}")
    if depth.shape != rgb.shape[:2]:
        raise ShapeError(f"rgb {rgb.shape[:2]} and depth {depth.shape} dimensions differ")

    gx = np.stack([ndimage.sobel(rgb[..., c], axis=1, mode="nearest") for c in range(3)])
    gy = np.stack([ndimage.sobel(rgb[..., c], axis=0, mode="nearest") for c in range(3)])
    magnitude = np.hypot(gx, gy)
    strongest = magnitude.argmax(axis=0)[None]
    gx = np.take_along_axis(gx, strongest, axis=0)[0]
    gy = np.take_along_axis(gy, strongest, axis=0)[0]
    magnitude = np.take_along_axis(magnitude, strongest, axis=0)[0]
    colour_gradient = _orientation_bins(np.mod(np.arctan2(gy, gx), np.pi), np.pi)
    colour_gradient[magnitude < magnitude_threshold] = MISSING

    valid = depth > 0
    # a normal needs valid depth all around it
    interior = ndimage.minimum_filter(valid.astype(np.uint8), size=3, mode="nearest") > 0
    dzx = ndimage.sobel(depth, axis=1, mode="nearest")
    dzy = ndimage.sobel(depth, axis=0, mode="nearest")
    normal = _orientation_bins(np.mod(np.arctan2(dzy, dzx), 2 * np.pi), 2 * np.pi)
    normal[~interior | (np.hypot(dzx, dzy) < normal_threshold)] = MISSING

    hsv = rgb_to_hsv(np.clip(rgb / 255.0, 0.0, 1.0))
    hue = _orientation_bins(hsv[..., 0], 1.0)
    hue[hsv[..., 1] < saturation_floor] = MISSING

    values = np.stack([colour_gradient, normal, hue], axis=-1).astype(np.uint8)
    return FeatureMap(values, DESCRIPTOR_MODALITIES, np.where(valid, depth, 0.0))


class TemplateStore:
    """
    Read-only collection of templates sharing one descriptor layout, packed
    into matrices for the forest and the validation stage.
    """

    def __init__(self, templates):
        templates = sorted(templates, key=lambda t: t.id)
        if not templates:
            raise DataError("template store is empty")
        first = templates[0]
        for t in templates[1:]:
            if (t.patch_size != first.patch_size or len(t.descriptor) != len(first.descriptor)
                    or not np.array_equal(t.locations, first.locations)):
                raise CompatibilityError(
                    f"template {t.id} does not share the descriptor layout of template {first.id}")
        ids = [t.id for t in templates]
        if len(set(ids)) != len(ids):
            raise DataError("template ids are not unique")
        self.templates = tuple(templates)
        self.ids = _frozen(ids, np.int64)
        self.descriptors = _frozen(np.stack([t.descriptor for t in templates]), np.uint8)
        self.fg_masks = _frozen(np.stack([t.fg_mask for t in templates]), bool)
        self.depth_patches = _frozen(np.stack([t.depth_patch for t in templates]), np.float32)
        self._row = {tid: row for row, tid in enumerate(ids)}

    def __len__(self):
        return len(self.templates)

    def __iter__(self):
        return iter(self.templates)

    def __getitem__(self, template_id):
        return self.templates[self._row[template_id]]

    def __contains__(self, template_id):
        return template_id in self._row

    def __repr__(self):
        return f"TemplateStore({len(self)} templates, descriptor_len={self.descriptor_len})"

    def rows(self, template_ids):
        return np.fromiter((self._row[int(t)] for t in template_ids), dtype=np.int64)

    @property
    def patch_size(self):
        return self.templates[0].patch_size

    @property
    def locations(self):
        return self.templates[0].locations

    @property
    def descriptor_len(self):
        return self.descriptors.shape[1]

    @property
    def n_modalities(self):
        return self.templates[0].n_modalities

    def layout(self):
        """Hashable description of the descriptor layout, for compatibility checks."""
        return (tuple(self.patch_size), self.n_modalities,
                tuple(map(tuple, self.locations.tolist())))

    def subset(self, template_ids):
        return TemplateStore([self[int(t)] for t in template_ids])

    @property
    def n_objects(self):
        return len({t.object_id for t in self.templates})
