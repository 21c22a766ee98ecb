"""Synthetic shapes detection dataset and its on-disk format.

Layout of a dataset directory::

    images/<id>.f64          int32 LE C, H, W  followed by C*H*W float64 LE (row-major)
    annotations_<split>.json {"split", "classes", "items": [{"id", "labels", "boxes"}]}

Boxes are normalised corner boxes (xmin, ymin, xmax, ymax) in [0, 1].
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

CLASSES = ("circle", "square", "triangle")
IMAGE_SIZE = 64
MIN_SHAPE, MAX_SHAPE = 12, 28
NOISE_MAX = 0.2
_HEADER = struct.Struct("<3i")


@dataclass
class GroundTruth:
    boxes: np.ndarray   # [G, 4] normalised corners
    labels: np.ndarray  # [G] foreground class ids, 0..K-1

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.labels):
            raise ValidationError(f"{len(self.boxes)} boxes but {len(self.labels)} labels")


@dataclass
class Item:
    id: str
    image: np.ndarray
    truth: GroundTruth


@dataclass
class Dataset:
    items: list
    split: str = "train"
    classes: tuple = CLASSES
    by_id: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        ids = [it.id for it in self.items]
        if len(set(ids)) != len(ids):
            raise ValidationError("dataset ids are not unique")
        self.by_id = {it.id: it for it in self.items}

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def images(self, idx=None):
        items = self.items if idx is None else [self.items[i] for i in idx]
        return np.stack([it.image for it in items])

    def truths(self, idx=None):
        items = self.items if idx is None else [self.items[i] for i in idx]
        return [it.truth for it in items]

    def subset(self, n):
        return Dataset(self.items[:n], self.split, self.classes)


def _shape_mask(kind, size):
    c = (np.arange(size) + 0.5)
    yy, xx = np.meshgrid(c, c, indexing="ij")
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    if kind == "circle":
        r = size / 2.0
        return (xx - r) ** 2 + (yy - r) ** 2 <= r * r
    if kind == "triangle":
        # apex top-centre, base along the bottom edge
        return np.abs(xx - size / 2.0) <= yy / 2.0
    raise ValidationError(f"unknown shape class {kind!r}")


def _overlaps(box, boxes):
    x0, y0, x1, y1 = box
    return any(x0 < b[2] and b[0] < x1 and y0 < b[3] and b[1] < y1 for b in boxes)


def _render(rng, classes):
    img = rng.uniform(0.0, NOISE_MAX, size=(3, IMAGE_SIZE, IMAGE_SIZE))
    n_shapes = int(rng.integers(1, 4))
    boxes, labels = [], []
    for _ in range(n_shapes):
        cls = int(rng.integers(len(classes)))
        color = rng.uniform(0.5, 1.0, size=3)
        for _attempt in range(30):
            size = int(rng.integers(MIN_SHAPE, MAX_SHAPE + 1))
            x0 = int(rng.integers(0, IMAGE_SIZE - size + 1))
            y0 = int(rng.integers(0, IMAGE_SIZE - size + 1))
            if not _overlaps((x0, y0, x0 + size, y0 + size), boxes):
                break
        else:
            continue
        mask = _shape_mask(classes[cls], size)
        region = img[:, y0:y0 + size, x0:x0 + size]
        region[:, mask] = color[:, None]
        rows, cols = np.flatnonzero(mask.any(axis=1)), np.flatnonzero(mask.any(axis=0))
        boxes.append((x0 + cols[0], y0 + rows[0], x0 + cols[-1] + 1, y0 + rows[-1] + 1))
        labels.append(cls)
    return img, GroundTruth(np.array(boxes, dtype=np.float64) / IMAGE_SIZE, labels)


def _generate(n, rng, split, classes):
    items = []
    for i in range(n):
        img, truth = _render(rng, classes)
        items.append(Item(f"{split}_{i:05d}", img, truth))
    return Dataset(items, split, tuple(classes))


def generate_shapes_dataset(n_train, n_test, classes=CLASSES, seed=0):
    """Deterministic (train, test) pair; each split draws from its own seeded stream."""
    if n_train < 1 or n_test < 1:
        raise ValidationError(f"n_train and n_test must be >= 1, got {n_train}, {n_test}")
    classes = tuple(classes)
    train_ss, test_ss = np.random.SeedSequence(seed).spawn(2)
    return (_generate(n_train, np.random.default_rng(train_ss), "train", classes),
            _generate(n_test, np.random.default_rng(test_ss), "test", classes))


def class_histogram(dataset):
    counts = np.zeros(len(dataset.classes), dtype=int)
    for it in dataset:
        np.add.at(counts, it.truth.labels, 1)
    return counts


# -- I/O ----------------------------------------------------------------------

def write_image(path, image):
    image = np.asarray(image, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(*image.shape))
        fh.write(image.astype("<f8").tobytes())


def read_image(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValidationError(f"{path}: truncated image header")
    shape = _HEADER.unpack_from(raw)
    expected = _HEADER.size + 8 * int(np.prod(shape))
    if len(raw) != expected:
        raise ValidationError(f"{path}: expected {expected} bytes for shape {shape}, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(shape).astype(np.float64)


def save_dataset(dataset, path):
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for it in dataset:
        write_image(root / "images" / f"{it.id}.f64", it.image)
        records.append({
            "id": it.id,
            "labels": [dataset.classes[c] for c in it.truth.labels],
            "boxes": [[float(v) for v in b] for b in it.truth.boxes],
        })
    doc = {"split": dataset.split, "classes": list(dataset.classes), "items": records}
    (root / f"annotations_{dataset.split}.json").write_text(json.dumps(doc, indent=1))


def _check_box(box, where):
    if not isinstance(box, list) or len(box) != 4 or not all(isinstance(v, (int, float)) for v in box):
        raise ValidationError(f"{where}: expected [xmin, ymin, xmax, ymax], got {box!r}")
    x0, y0, x1, y1 = box
    if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
        raise ValidationError(f"{where}: invalid box {box!r} (need 0 <= min < max <= 1)")
    # at least 4 pixels of area at 64x64
    if (x1 - x0) * (y1 - y0) * IMAGE_SIZE * IMAGE_SIZE < 4:
        raise ValidationError(f"{where}: box {box!r} smaller than 4 pixels")


def load_dataset(path, split="train"):
    root = Path(path)
    ann = root / f"annotations_{split}.json"
    try:
        doc = json.loads(ann.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{ann}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    except FileNotFoundError:
        raise ValidationError(f"{ann}: annotation file not found") from None
    for key in ("split", "classes", "items"):
        if key not in doc:
            raise ValidationError(f"{ann}: missing field {key!r}")
    classes = tuple(doc["classes"])
    items = []
    for i, rec in enumerate(doc["items"]):
        where = f"{ann.name}: items[{i}]"
        for key in ("id", "labels", "boxes"):
            if key not in rec:
                raise ValidationError(f"{where}: missing field {key!r}")
        if len(rec["labels"]) != len(rec["boxes"]):
            raise ValidationError(f"{where}: {len(rec['labels'])} labels but {len(rec['boxes'])} boxes")
        labels = []
        for j, name in enumerate(rec["labels"]):
            if name not in classes:
                raise ValidationError(f"{where}.labels[{j}]: unknown class {name!r}")
            labels.append(classes.index(name))
        for j, box in enumerate(rec["boxes"]):
            _check_box(box, f"{where}.boxes[{j}]")
        img_path = root / "images" / f"{rec['id']}.f64"
        if not img_path.exists():
            raise ValidationError(f"{where}: image file for id {rec['id']!r} is missing ({img_path})")
        items.append(Item(rec["id"], read_image(img_path), GroundTruth(rec["boxes"], labels)))
    return Dataset(items, doc["split"], classes)
