"""
On-disk formats.

Binary containers share one header, little-endian:

    magic     4 bytes   b"TMPL" templates, b"FMAP" feature map, b"FRST" forest
    version   uint16
    meta_len  uint32
    meta      meta_len bytes of UTF-8 JSON (sorted keys): tool version,
              config snapshot and kind-specific fields
    payload   kind-specific, see the writers below

JSON forms are used for the template interchange format, ground-truth
sidecars and detection lists (one JSON object per line).
"""
import json
import logging
import struct

import numpy as np

from config import TOOL_VERSION
from errors import DataError
from features import FeatureMap, Modality, Template, TemplateStore
from forest import Forest, Leaf, RejectorParams, Split, SplitParams, TreeNode
from synth import GroundTruth, PoseSample

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
TEMPLATES_MAGIC = b"TMPL"
FEATURE_MAP_MAGIC = b"FMAP"
FOREST_MAGIC = b"FRST"
KINDS = {TEMPLATES_MAGIC: "templates", FEATURE_MAP_MAGIC: "feature_map", FOREST_MAGIC: "forest"}

_HEADER = struct.Struct("<4sHI")
_TEMPLATE_RECORD = struct.Struct("<qi4dHHII")
_LEAF, _SPLIT = 0, 1


class _Reader:
    """Cursor over a container's bytes; every short read is a DataError."""

    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.offset = 0

    def read(self, fmt):
        try:
            values = struct.unpack_from(fmt, self.data, self.offset)
        except struct.error as exc:
            raise DataError(f"{self.path}: truncated at byte {self.offset}") from exc
        self.offset += struct.calcsize(fmt)
        return values

    def read_bytes(self, count):
        end = self.offset + count
        if end > len(self.data):
            raise DataError(f"{self.path}: truncated at byte {self.offset}")
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def read_array(self, dtype, count):
        dtype = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.read_bytes(dtype.itemsize * count), dtype=dtype).copy()

    def expect_end(self):
        if self.offset != len(self.data):
            raise DataError(f"{self.path}: {len(self.data) - self.offset} trailing bytes")


def _le(array, dtype):
    return np.ascontiguousarray(array, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()


def _pack(magic, meta, payload):
    meta = dict(meta, tool_version=TOOL_VERSION)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    return _HEADER.pack(magic, FORMAT_VERSION, len(meta_bytes)) + meta_bytes + payload


def _unpack(data, path, magic=None):
    reader = _Reader(data, path)
    found, version, meta_len = reader.read(_HEADER.format)
    if found not in KINDS or (magic is not None and found != magic):
        expected = KINDS.get(magic, "a known container")
        raise DataError(f"{path}: bad magic {found!r}, expected {expected}")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    try:
        meta = json.loads(reader.read_bytes(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt metadata") from exc
    return found, meta, reader


def _read_file(path):
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _write_file(path, data):
    with open(path, "wb") as f:
        f.write(data)
    logger.debug("Wrote %s (%d bytes)", path, len(data))


# --- templates ----------------------------------------------------------------

def encode_templates(store, snapshot=None):
    payload = bytearray(struct.pack("<I", len(store)))
    for t in store:
        payload += _TEMPLATE_RECORD.pack(t.id, t.object_id, *t.pose, t.patch_size[0],
                                         t.patch_size[1], len(t.locations), len(t.descriptor))
        payload += _le(t.locations, np.int32)
        payload += _le(t.descriptor, np.uint8)
        payload += _le(t.fg_mask, np.uint8)
        payload += _le(t.depth_patch, np.float32)
    meta = {"kind": "templates", "count": len(store), "config": snapshot or {}}
    return _pack(TEMPLATES_MAGIC, meta, bytes(payload))


def decode_templates(data, path="<bytes>"):
    _, meta, reader = _unpack(data, path, TEMPLATES_MAGIC)
    (count,) = reader.read("<I")
    templates = []
    for _ in range(count):
        tid, object_id, yaw, pitch, roll, scale, pw, ph, n_loc, n_desc = reader.read(
            _TEMPLATE_RECORD.format)
        locations = reader.read_array(np.int32, 2 * n_loc).reshape(n_loc, 2)
        descriptor = reader.read_array(np.uint8, n_desc)
        fg_mask = reader.read_array(np.uint8, n_desc).astype(bool)
        depth_patch = reader.read_array(np.float32, n_loc)
        try:
            templates.append(Template(id=tid, object_id=object_id,
                                      pose=PoseSample(yaw, pitch, roll, scale),
                                      patch_size=(pw, ph), locations=locations,
                                      descriptor=descriptor, fg_mask=fg_mask,
                                      depth_patch=depth_patch))
        except ValueError as exc:
            raise DataError(f"{path}: invalid template record {tid}: {exc}") from exc
    reader.expect_end()
    return TemplateStore(templates), meta


def save_templates(path, store, snapshot=None):
    _write_file(path, encode_templates(store, snapshot))


def load_templates(path):
    return decode_templates(_read_file(path), path)


def templates_to_json(store):
    """Human-readable interchange form; decodes back to identical templates."""
    return {
        "tool_version": TOOL_VERSION,
        "templates": [{
            "id": t.id,
            "object_id": t.object_id,
            "pose": list(t.pose),
            "patch_size": list(t.patch_size),
            "locations": t.locations.tolist(),
            "descriptor": t.descriptor.tolist(),
            "fg_mask": t.fg_mask.astype(int).tolist(),
            "depth_patch": [float(v) for v in t.depth_patch],
        } for t in store],
    }


def templates_from_json(document):
    try:
        return TemplateStore([
            Template(id=int(r["id"]), object_id=int(r["object_id"]), pose=PoseSample(*r["pose"]),
                     patch_size=tuple(r["patch_size"]), locations=np.array(r["locations"]),
                     descriptor=np.array(r["descriptor"]), fg_mask=np.array(r["fg_mask"], bool),
                     depth_patch=np.array(r["depth_patch"], np.float32))
            for r in document["templates"]])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"invalid template document: {exc}") from exc


# --- feature maps -------------------------------------------------------------

def encode_feature_map(fmap, name="scene", snapshot=None):
    meta = {"kind": "feature_map", "name": name, "width": fmap.width, "height": fmap.height,
            "modalities": [m.name for m in fmap.modalities],
            "has_depth": fmap.depth is not None, "config": snapshot or {}}
    payload = _le(fmap.values, np.uint8)
    if fmap.depth is not None:
        payload += _le(fmap.depth, np.float32)
    return _pack(FEATURE_MAP_MAGIC, meta, payload)


def decode_feature_map(data, path="<bytes>"):
    _, meta, reader = _unpack(data, path, FEATURE_MAP_MAGIC)
    try:
        width, height = int(meta["width"]), int(meta["height"])
        modalities = [Modality[name] for name in meta["modalities"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: incomplete feature map metadata") from exc
    values = reader.read_array(np.uint8, width * height * len(modalities))
    depth = None
    if meta.get("has_depth"):
        depth = reader.read_array(np.float32, width * height).reshape(height, width)
    reader.expect_end()
    try:
        fmap = FeatureMap(values.reshape(height, width, len(modalities)), modalities, depth)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return fmap, meta


def save_feature_map(path, fmap, name="scene", snapshot=None):
    _write_file(path, encode_feature_map(fmap, name, snapshot))


def load_feature_map(path):
    return decode_feature_map(_read_file(path), path)


# --- forests ------------------------------------------------------------------

def _encode_rejector(r):
    return (struct.pack("<H", len(r.selector)) + _le(r.selector, np.int32)
            + _le(r.known_table, np.uint8) + struct.pack("<dd", r.accept_floor, r.density_floor))


def _encode_node(node, out):
    out += _encode_rejector(node.rejector)
    if node.is_leaf:
        ids = node.body.template_ids
        out += struct.pack("<BI", _LEAF, len(ids)) + _le(ids, np.int64)
        return
    p = node.body.params
    out += (struct.pack("<BH", _SPLIT, len(p.selector)) + _le(p.selector, np.int32)
            + _le(p.exemplar, np.uint8) + struct.pack("<dd", p.tau, p.fuzzy_margin))
    _encode_node(node.body.left, out)
    _encode_node(node.body.right, out)


def _decode_rejector(reader):
    (n,) = reader.read("<H")
    selector = reader.read_array(np.int32, n).astype(np.int64)
    known = reader.read_array(np.uint8, n * 9).reshape(n, 9).astype(bool)
    accept_floor, density_floor = reader.read("<dd")
    return RejectorParams(selector, known, accept_floor, density_floor)


def _decode_node(reader, depth=0):
    if depth > 64:
        raise DataError(f"{reader.path}: node stream nests deeper than 64")
    rejector = _decode_rejector(reader)
    (tag,) = reader.read("<B")
    if tag == _LEAF:
        (count,) = reader.read("<I")
        ids = tuple(int(i) for i in reader.read_array(np.int64, count))
        return TreeNode(rejector, Leaf(ids))
    if tag != _SPLIT:
        raise DataError(f"{reader.path}: unknown node tag {tag}")
    (n,) = reader.read("<H")
    selector = reader.read_array(np.int32, n).astype(np.int64)
    exemplar = reader.read_array(np.uint8, n)
    tau, fuzzy_margin = reader.read("<dd")
    params = SplitParams(selector, exemplar, tau, fuzzy_margin)
    left = _decode_node(reader, depth + 1)
    right = _decode_node(reader, depth + 1)
    return TreeNode(rejector, Split(params, left, right))


def _layout_to_json(layout):
    patch, n_modalities, locations = layout
    return {"patch_size": list(patch), "n_modalities": n_modalities,
            "locations": [list(l) for l in locations]}


def _layout_from_json(raw):
    return (tuple(raw["patch_size"]), int(raw["n_modalities"]),
            tuple(tuple(l) for l in raw["locations"]))


def encode_forest(forest, snapshot=None):
    payload = bytearray(struct.pack("<I", len(forest.trees)))
    for tree in forest.trees:
        _encode_node(tree, payload)
    meta = {"kind": "forest", "n_trees": len(forest.trees),
            "descriptor_len": forest.descriptor_len, "layout": _layout_to_json(forest.layout),
            "params": forest.params, "config": snapshot or {}}
    return _pack(FOREST_MAGIC, meta, bytes(payload))


def decode_forest(data, path="<bytes>"):
    _, meta, reader = _unpack(data, path, FOREST_MAGIC)
    (n_trees,) = reader.read("<I")
    try:
        trees = tuple(_decode_node(reader) for _ in range(n_trees))
    except ValueError as exc:
        raise DataError(f"{path}: invalid node: {exc}") from exc
    reader.expect_end()
    try:
        forest = Forest(trees=trees, descriptor_len=int(meta["descriptor_len"]),
                        layout=_layout_from_json(meta["layout"]), params=meta["params"])
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: incomplete forest metadata") from exc
    return forest, meta


def save_forest(path, forest, snapshot=None):
    _write_file(path, encode_forest(forest, snapshot))


def load_forest(path):
    return decode_forest(_read_file(path), path)


# --- sidecars and outputs -----------------------------------------------------

def write_ground_truth(path, scene_name, ground_truth, snapshot=None):
    document = {"scene": scene_name, "tool_version": TOOL_VERSION, "config": snapshot or {},
                "objects": [gt.to_record() for gt in ground_truth]}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, sort_keys=True, indent=1)
        f.write("\n")


def read_ground_truth(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
        objects = [GroundTruth(object_id=int(o["object_id"]), pose=PoseSample(*o["pose"]),
                               x=int(o["x"]), y=int(o["y"]), width=int(o["width"]),
                               height=int(o["height"]), template_id=o.get("template_id"))
                   for o in document["objects"]]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: invalid ground truth: {exc}") from exc
    return document["scene"], objects


def run_header(snapshot):
    """First record of every line-oriented output: who wrote it and with what config."""
    return {"tool_version": TOOL_VERSION, "config": snapshot or {}}


def write_detections(stream, detections, snapshot):
    stream.write(json.dumps(run_header(snapshot), sort_keys=True) + "\n")
    for detection in detections:
        stream.write(json.dumps(detection.to_record(), sort_keys=True) + "\n")


def write_jsonl(path, records, snapshot):
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(run_header(snapshot), sort_keys=True) + "\n")
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def reject_map_image(reject_map, max_depth):
    """Grey levels: black for validated / out of range, brighter for deeper rejections."""
    codes = np.asarray(reject_map, dtype=np.float64)
    grey = np.where(codes >= 0, 55.0 + 200.0 * (codes + 1.0) / (max_depth + 1.0), 0.0)
    return np.clip(np.round(grey), 0, 255).astype(np.uint8)


def write_pgm(path, reject_map, max_depth, snapshot):
    image = reject_map_image(reject_map, max_depth)
    height, width = image.shape
    comment = f"# tool_version={TOOL_VERSION} config={json.dumps(snapshot or {}, sort_keys=True)}"
    header = f"P5\n{comment}\n{width} {height}\n255\n"
    _write_file(path, header.encode("ascii") + image.tobytes())


def inspect_container(path):
    """Kind, version, metadata and a few derived numbers for any binary container."""
    data = _read_file(path)
    magic, meta, _ = _unpack(data, path)
    summary = {"path": str(path), "kind": KINDS[magic], "version": FORMAT_VERSION,
               "bytes": len(data), "meta": meta}
    if magic == TEMPLATES_MAGIC:
        store, _ = decode_templates(data, path)
        summary["templates"] = len(store)
        summary["objects"] = len({t.object_id for t in store})
        summary["descriptor_len"] = store.descriptor_len
        summary["foreground_fraction"] = float(store.fg_masks.mean())
    elif magic == FOREST_MAGIC:
        forest, _ = decode_forest(data, path)
        summary["trees"] = forest.stats()
    else:
        fmap, _ = decode_feature_map(data, path)
        summary["size"] = [fmap.width, fmap.height]
        summary["has_depth"] = fmap.depth is not None
    return summary
