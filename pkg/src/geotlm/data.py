"""Triplet datasets (image, anchor features, text) and a synthetic generator.

On disk a dataset directory looks like::

    d1.jsonl  d2.jsonl  d2_eval.jsonl  vocab.json  synthetic_spec.json
    images/<id>.pgm     anchors/<id>.tnsr     store/aef_<year>.aefs

Records are line-delimited JSON. Images are plain PGM; anchor tables and the
embedding store use the binary containers in ``tensorio`` and ``geo``.
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimensionMismatch, GeoTlmError, MissingFile, ParseError
from .geo import (
    EMBED_DIMS,
    AnchorFeatureSet,
    EmbeddingFieldStore,
    SpatioTemporalBox,
    YearRaster,
    build_feature_set,
    write_aefs,
)
from .metrics import BoundingBox, cells_from_boxes
from .model import TripletSample
from .tensorio import read_tensor, write_tensor
from .tlm import PriorBatch

VOCAB_SIZE = 64
SPECIALS = ("<pad>", "<bos>", "<eos>")
TASK_WORDS = ("scene", "targets", "how-many", "what-scene")
DIGITS = tuple(str(d) for d in range(10))


class Vocabulary:
    def __init__(self, words):
        words = list(words)
        if len(words) > VOCAB_SIZE:
            raise ValueError(f"vocabulary has {len(words)} words, limit is {VOCAB_SIZE}")
        if len(set(words)) != len(words):
            raise ValueError("duplicate vocabulary words")
        self.words = words + [f"<unused{i}>" for i in range(VOCAB_SIZE - len(words))]
        self.index = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def for_classes(cls, classes):
        return cls(list(SPECIALS) + list(TASK_WORDS) + list(DIGITS) + list(classes))

    @property
    def bos(self):
        return self.index["<bos>"]

    @property
    def eos(self):
        return self.index["<eos>"]

    def encode(self, text):
        try:
            return [self.index[w] for w in text.split()]
        except KeyError as exc:
            raise ValueError(f"word {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids):
        return " ".join(self.words[i] for i in ids)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.words, fh, indent=0)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls(json.load(fh))


# --- PGM images -------------------------------------------------------------

PGM_SCALE = 1000.0  # stored grey level = round(intensity * scale)
PGM_MAXVAL = 65535


def write_pgm(path, image, scale=PGM_SCALE):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or np.any(image < 0) or np.any(~np.isfinite(image)):
        raise ValueError("PGM images must be finite, non-negative 2-D arrays")
    levels = np.minimum(np.rint(image * scale), PGM_MAXVAL).astype(np.int64)
    h, w = levels.shape
    rows = "\n".join(" ".join(str(v) for v in row) for row in levels)
    with open(path, "w") as fh:
        fh.write(f"P2\n# scale {scale!r}\n{w} {h}\n{PGM_MAXVAL}\n{rows}\n")


def read_pgm(path):
    with open(path) as fh:
        text = fh.read()
    scale = 1.0
    tokens = []
    for line in text.splitlines():
        body, _, comment = line.partition("#")
        parts = comment.split()
        if len(parts) == 2 and parts[0] == "scale":
            scale = float(parts[1])
        tokens.extend(body.split())
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{path}: not a plain PGM (P2) file")
    w, h, maxval = (int(t) for t in tokens[1:4])
    vals = tokens[4:]
    if len(vals) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, found {len(vals)}")
    levels = np.array([int(v) for v in vals], dtype=np.float64).reshape(h, w)
    if np.any(levels < 0) or np.any(levels > maxval):
        raise ValueError(f"{path}: pixel values outside [0, {maxval}]")
    return levels / scale


# --- records ----------------------------------------------------------------

@dataclass
class TripletRecord:
    image_id: str
    image_path: str
    box: SpatioTemporalBox
    feature_set_path: str = None
    features: list = None  # inline [[lon, lat, px, py, [64 floats]], ...]
    description: str = None
    instruction: str = None
    answer: str = None
    annotations: dict = field(default_factory=dict)

    def to_json(self):
        d = {"image_id": self.image_id, "image_path": self.image_path, "box": self.box.as_list()}
        for key in ("feature_set_path", "features", "description", "instruction", "answer"):
            val = getattr(self, key)
            if val is not None:
                d[key] = val
        if self.annotations:
            d["annotations"] = self.annotations
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, obj):
        if not isinstance(obj, dict):
            raise ValueError("record must be a JSON object")
        unknown = set(obj) - {"image_id", "image_path", "box", "feature_set_path", "features",
                              "description", "instruction", "answer", "annotations"}
        if unknown:
            raise ValueError(f"unknown fields {sorted(unknown)}")
        for key in ("image_id", "image_path", "box"):
            if key not in obj:
                raise ValueError(f"missing field {key!r}")
        return cls(
            image_id=str(obj["image_id"]),
            image_path=obj["image_path"],
            box=SpatioTemporalBox.from_list(obj["box"]),
            feature_set_path=obj.get("feature_set_path"),
            features=obj.get("features"),
            description=obj.get("description"),
            instruction=obj.get("instruction"),
            answer=obj.get("answer"),
            annotations=obj.get("annotations") or {},
        )

    @property
    def stage(self):
        return 1 if self.description is not None else 2


def _inline_features(rows, box):
    table = []
    for k, row in enumerate(rows):
        if len(row) != 5 or len(row[4]) != EMBED_DIMS:
            raise DimensionMismatch(
                f"feature record {k} must be [lon, lat, px, py, <{EMBED_DIMS} floats>]"
            )
        table.append([row[0], row[1], row[2], row[3], *row[4]])
    table = np.asarray(table, dtype=np.float64)
    for col, name in ((2, "px"), (3, "py")):
        bad = np.flatnonzero((table[:, col] < 0) | (table[:, col] > 1))
        if bad.size:
            raise ValueError(
                f"feature record {bad[0]}: {name}={table[bad[0], col]!r} violates {name} in [0, 1]"
            )
    return AnchorFeatureSet.from_array(table, box)


def record_features(record, root):
    if record.features is not None:
        if not record.features:
            raise ValueError("inline feature set is empty")
        return _inline_features(record.features, record.box)
    if record.feature_set_path is None:
        raise ValueError("record has neither features nor feature_set_path")
    path = os.path.join(root, record.feature_set_path)
    if not os.path.exists(path):
        raise MissingFile(f"feature set {path} does not exist")
    fs = AnchorFeatureSet.from_array(read_tensor(path), record.box)
    if len(fs) == 0:
        raise ValueError("feature set is empty")
    return fs


def record_image(record, root):
    path = os.path.join(root, record.image_path)
    if not os.path.exists(path):
        raise MissingFile(f"image {path} does not exist")
    return read_pgm(path)


def _validate(record, root, check_files):
    if record.description is None and (record.instruction is None or record.answer is None):
        raise ValueError("record needs a description or an instruction/answer pair")
    if record.description is not None and record.instruction is not None:
        raise ValueError("record mixes stage-1 description with stage-2 instruction")
    if record.features is not None:
        _inline_features(record.features, record.box)
    if check_files:
        record_features(record, root)
        record_image(record, root)


def load_dataset(path, check_files=True):
    """Read and validate every record; all invalid lines are reported together."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise MissingFile(f"dataset {path} does not exist")
    root = os.path.dirname(os.path.abspath(path))
    records, problems = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = TripletRecord.from_json(json.loads(line))
                _validate(rec, root, check_files)
            except (ValueError, KeyError, TypeError, GeoTlmError, OSError) as exc:
                problems.append((lineno, str(exc)))
                continue
            records.append(rec)
    if problems:
        raise ParseError(problems)
    return records


def save_dataset(records, path):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def to_sample(record, root, vocab, features=None):
    """Turn a record into a model-ready TripletSample (teacher-forced)."""
    fs = features if features is not None else record_features(record, root)
    image = record_image(record, root)
    if record.description is not None:
        ids = vocab.encode(record.description)
        mask = [1.0] * len(ids)
    else:
        inst = vocab.encode(record.instruction)
        ans = vocab.encode(record.answer)
        ids = inst + ans
        mask = [0.0] * len(inst) + [1.0] * len(ans)
    inputs = [vocab.bos] + ids[:-1]
    return TripletSample(image, PriorBatch.from_feature_set(fs), inputs, ids, mask)


def load_samples(path, vocab):
    records = load_dataset(path)
    root = os.path.dirname(os.path.abspath(path))
    return records, [to_sample(r, root, vocab) for r in records]


# --- synthetic data ---------------------------------------------------------

@dataclass
class SyntheticSpec:
    seed: int = 0
    n_samples: int = 256
    n_eval: int = 128
    grid: tuple = (8, 8)  # (n_lon, n_lat) anchors per scene
    classes: tuple = ("farmland", "harbor", "urban", "forest")
    max_count: int = 4
    noise: float = 0.3
    image_size: int = 16
    year: int = 2024
    cells_per_degree: float = 100.0
    origin: tuple = (100.0, 30.0)  # (lon, lat) of the store's south-west corner

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        self.classes = tuple(self.classes)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.grid) != 2 or min(self.grid) < 2:
            raise ValueError("grid must be (n_lon, n_lat) with both >= 2")
        if not self.classes:
            raise ValueError("need at least one scene class")
        if not 0 <= self.max_count <= min(9, self.grid[0] * self.grid[1]):
            raise ValueError("max_count must fit in one digit token and in the anchor grid")
        if self.n_samples < 1 or self.n_eval < 0:
            raise ValueError("n_samples >= 1 and n_eval >= 0 required")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["grid"] = list(self.grid)
        d["classes"] = list(self.classes)
        d["origin"] = list(self.origin)
        return d


@dataclass
class Scene:
    image_id: str
    box: SpatioTemporalBox
    scene_class: str
    count: int
    target_anchors: list  # anchor indices (latitude-major) carrying a target
    image: np.ndarray


@dataclass
class SyntheticData:
    d1: list
    d2: list
    d2_eval: list
    store: EmbeddingFieldStore
    scenes: list
    features: dict  # image_id -> AnchorFeatureSet
    vocab: Vocabulary
    spec: SyntheticSpec


def _speckle_image(rng, size):
    # single-look speckle on a smooth label-independent texture
    coarse = rng.normal(0.0, 1.0, size=(4, 4))
    texture = np.kron(coarse, np.ones((size // 4 + 1, size // 4 + 1)))[:size, :size]
    return rng.exponential(1.0, size=(size, size)) * (1.0 + 0.1 * np.tanh(texture))


def target_boxes(scene, spec, features):
    """Pixel-space boxes (2 px wide) around each planted target."""
    s = spec.image_size
    boxes = []
    for k in scene.target_anchors:
        cx, cy = features.px[k] * s, features.py[k] * s
        x1, x2 = max(cx - 1.0, 0.0), min(cx + 1.0, float(s))
        y1, y2 = max(cy - 1.0, 0.0), min(cy + 1.0, float(s))
        boxes.append(BoundingBox(x1, y1, x2, y2, "target"))
    return boxes


def generate_synthetic(spec):
    """Scenes whose labels live only in the embedding field, never in the image.

    Every scene occupies its own tile of a shared store. Tile cells carry the
    scene-class prototype plus noise; anchors holding a target also carry a
    fixed target marker. Descriptions and answers are derived from those
    planted values.
    """
    rng = np.random.default_rng(spec.seed)
    n_lon, n_lat = spec.grid
    n_total = spec.n_samples + spec.n_eval
    slot_x, slot_y = n_lon + 2, n_lat + 2  # one margin cell on every side
    tiles_x = math.ceil(math.sqrt(n_total))
    tiles_y = math.ceil(n_total / tiles_x)
    res = spec.cells_per_degree
    cells_x, cells_y = tiles_x * slot_x, tiles_y * slot_y
    lon0, lat0 = spec.origin
    store_box = SpatioTemporalBox(lon0, lat0, lon0 + cells_x / res, lat0 + cells_y / res, spec.year)

    class_protos = rng.normal(0.0, 1.0, size=(len(spec.classes), EMBED_DIMS))
    marker = rng.normal(0.0, 1.0, size=EMBED_DIMS)
    data = rng.normal(0.0, spec.noise, size=(cells_y, cells_x, EMBED_DIMS))

    def center(row, col):
        return lon0 + (col + 0.5) / res, lat0 + cells_y / res - (row + 0.5) / res

    scenes = []
    for t in range(n_total):
        tx, ty = t % tiles_x, t // tiles_x
        col0, row0 = tx * slot_x + 1, ty * slot_y + 1
        k = int(rng.integers(len(spec.classes)))
        count = int(rng.integers(spec.max_count + 1))
        targets = sorted(int(i) for i in rng.choice(n_lon * n_lat, size=count, replace=False))
        tile = data[row0:row0 + n_lat, col0:col0 + n_lon]
        tile += class_protos[k]
        for a in targets:
            # anchor a = j * n_lon + i, with j counted from the south edge
            j, i = divmod(a, n_lon)
            tile[n_lat - 1 - j, i] += marker
        west, north = center(row0, col0)
        east, south = center(row0 + n_lat - 1, col0 + n_lon - 1)
        box = SpatioTemporalBox(west, south, east, north, spec.year)
        image = _speckle_image(rng, spec.image_size)
        scenes.append(Scene(f"s{t:05d}", box, spec.classes[k], count, targets, image))

    store = EmbeddingFieldStore([YearRaster(store_box, data.astype(np.float32))])
    vocab = Vocabulary.for_classes(spec.classes)
    features = {s.image_id: build_feature_set(s.box, n_lon, n_lat, store) for s in scenes}

    d1, d2, d2_eval = [], [], []
    for idx, sc in enumerate(scenes):
        fs = features[sc.image_id]
        boxes = target_boxes(sc, spec, fs)
        ann = {
            "scene": sc.scene_class,
            "count": sc.count,
            "cells": sorted(cells_from_boxes(boxes, spec.image_size, spec.image_size)),
            "boxes": [b.to_json() for b in boxes],
        }
        base = dict(image_id=sc.image_id, image_path=f"images/{sc.image_id}.pgm",
                    box=sc.box, feature_set_path=f"anchors/{sc.image_id}.tnsr", annotations=ann)
        qa = [
            TripletRecord(**base, instruction="how-many", answer=f"{sc.count} <eos>"),
            TripletRecord(**base, instruction="what-scene", answer=f"{sc.scene_class} <eos>"),
        ]
        if idx < spec.n_samples:
            desc = f"scene {sc.scene_class} targets {sc.count} <eos>"
            d1.append(TripletRecord(**base, description=desc))
            d2.extend(qa)
        else:
            d2_eval.extend(qa)
    return SyntheticData(d1, d2, d2_eval, store, scenes, features, vocab, spec)


def write_synthetic(data, out_dir):
    """Write a generated dataset as a self-contained directory."""
    for sub in ("images", "anchors", "store"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    for year in data.store.years:
        write_aefs(os.path.join(out_dir, "store", f"aef_{year}.aefs"), data.store.raster(year))
    for sc in data.scenes:
        write_pgm(os.path.join(out_dir, "images", f"{sc.image_id}.pgm"), sc.image)
        write_tensor(os.path.join(out_dir, "anchors", f"{sc.image_id}.tnsr"),
                     data.features[sc.image_id].to_array())
    save_dataset(data.d1, os.path.join(out_dir, "d1.jsonl"))
    save_dataset(data.d2, os.path.join(out_dir, "d2.jsonl"))
    save_dataset(data.d2_eval, os.path.join(out_dir, "d2_eval.jsonl"))
    data.vocab.save(os.path.join(out_dir, "vocab.json"))
    with open(os.path.join(out_dir, "synthetic_spec.json"), "w") as fh:
        json.dump(data.spec.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def recount_targets(feature_set, threshold=4.0):
    """Count anchors whose embedding departs strongly from the scene median.

    Independent of the generator's internals: it only looks at stored vectors.
    """
    emb = feature_set.embeddings
    resid = emb - np.median(emb, axis=0)
    return int(np.sum(np.linalg.norm(resid, axis=1) > threshold))


def synthetic_samples(data, records):
    """Samples for in-memory synthetic records (skips the PGM quantization)."""
    images = {s.image_id: s.image for s in data.scenes}
    out = []
    for rec in records:
        fs = data.features[rec.image_id]
        if rec.description is not None:
            ids = data.vocab.encode(rec.description)
            mask = [1.0] * len(ids)
        else:
            inst, ans = data.vocab.encode(rec.instruction), data.vocab.encode(rec.answer)
            ids = inst + ans
            mask = [0.0] * len(inst) + [1.0] * len(ans)
        out.append(TripletSample(images[rec.image_id], PriorBatch.from_feature_set(fs),
                                 [data.vocab.bos] + ids[:-1], ids, mask))
    return out
