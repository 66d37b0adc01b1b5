"""Dataset containers, synthetic scene rendering, PPM image IO, and the
geometry-preserving preprocessing shared by training and inference."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .assign import GroundTruth
from .errors import DataError

PAD_VALUE = 114  # letterbox fill, also used by scale jitter

SHAPE_NAMES = ("square", "disk", "triangle")
SHAPE_COLORS = ((225, 64, 64), (64, 205, 88), (80, 96, 235))


@dataclass
class Sample:
    image: np.ndarray  # (h, w, 3) uint8
    gt: GroundTruth
    image_id: int
    path: str | None = None


@dataclass
class Dataset:
    samples: list
    class_names: tuple
    split: str = "train"

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        nc = len(self.class_names)
        for s in self.samples:
            if len(s.gt) and int(s.gt.class_ids.max()) >= nc:
                raise DataError(
                    f"image {s.image_id} has class id {int(s.gt.class_ids.max())} "
                    f"but only {nc} classes are declared"
                )

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i) -> Sample:
        return self.samples[i]


# -------------------------------------------------------------------------
# synthetic scenes
# -------------------------------------------------------------------------

def _shape_mask(kind, size, box):
    """Boolean coverage mask: pixel centers inside the analytic shape."""
    x1, y1, x2, y2 = box
    ys, xs = np.mgrid[0:size, 0:size]
    cx = xs + 0.5
    cy = ys + 0.5
    if kind == "square":
        return (cx > x1) & (cx < x2) & (cy > y1) & (cy < y2)
    if kind == "disk":
        ox = (x1 + x2) / 2.0
        oy = (y1 + y2) / 2.0
        r = (x2 - x1) / 2.0
        return (cx - ox) ** 2 + (cy - oy) ** 2 <= r * r
    if kind == "triangle":
        # apex top-center, base along the bottom edge of the box
        ax, ay = (x1 + x2) / 2.0, y1
        bx, by = x1, y2
        ex, ey = x2, y2
        d1 = (cx - bx) * (ay - by) - (cy - by) * (ax - bx)
        d2 = (cx - ex) * (by - ey) - (cy - ey) * (bx - ex)
        d3 = (cx - ax) * (ey - ay) - (cy - ay) * (ex - ax)
        return (d1 <= 0) & (d2 <= 0) & (d3 <= 0)
    raise DataError(f"unknown shape class: {kind}")


def _render_scene(rng, size, classes, objects_range):
    img = np.empty((size, size, 3), dtype=np.float64)
    base = rng.uniform(25, 60)
    ramp = np.linspace(0.0, rng.uniform(10, 35), size)[:, None]
    img[:] = (base + ramp + rng.uniform(0, 22, size=(size, size)))[:, :, None]

    lo, hi = objects_range
    boxes, ids = [], []
    for _ in range(int(rng.integers(lo, hi + 1))):
        cid = int(rng.integers(0, len(classes)))
        for _attempt in range(20):
            side = rng.uniform(0.15, 0.7) * size
            x1 = rng.uniform(0.0, size - side)
            y1 = rng.uniform(0.0, size - side)
            box = (x1, y1, x1 + side, y1 + side)
            if all(_box_iou(box, b) < 0.25 for b in boxes):
                break
        else:
            continue
        kind = classes[cid]
        color = np.array(SHAPE_COLORS[SHAPE_NAMES.index(kind)], dtype=np.float64)
        color = color * rng.uniform(0.82, 1.08)
        mask = _shape_mask(kind, size, box)
        img[mask] = color
        boxes.append(box)
        ids.append(cid)

    image = np.clip(img, 0, 255).astype(np.uint8)
    gt = GroundTruth(np.array(boxes, dtype=np.float64).reshape(-1, 4),
                     np.array(ids, dtype=np.int64))
    return image, gt


def _box_iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua


def gen_synthetic(seed, n_images, image_size=160, classes=SHAPE_NAMES,
                  objects_per_image=(1, 3), split="train") -> Dataset:
    """Deterministic renderer: bright shapes on a dim noisy background,
    ground truth boxes from the analytic shape extents."""
    for c in classes:
        if c not in SHAPE_NAMES:
            raise DataError(f"unknown shape class: {c}")
    if objects_per_image[0] < 0 or objects_per_image[1] < objects_per_image[0]:
        raise DataError(f"bad objects_per_image range: {objects_per_image}")
    rng = np.random.default_rng(seed)
    samples = []
    for idx in range(n_images):
        image, gt = _render_scene(rng, image_size, tuple(classes), objects_per_image)
        samples.append(Sample(image=image, gt=gt, image_id=idx))
    return Dataset(samples=samples, class_names=tuple(classes), split=split)


# -------------------------------------------------------------------------
# PPM (P6) image files
# -------------------------------------------------------------------------

def write_ppm(path, image: np.ndarray):
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"expected (h, w, 3) uint8 image, got {image.dtype} {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(image).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] != b"P6":
        raise DataError(f"{path}: not a binary PPM file")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise DataError(f"{path}: malformed PPM header")
        fields.append(int(raw[start:pos]))
    w, h, maxval = fields
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PPM supported, maxval {maxval}")
    pos += 1  # single whitespace byte separates header from pixels
    need = w * h * 3
    if len(raw) - pos < need:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(raw[pos:pos + need], dtype=np.uint8).reshape(h, w, 3).copy()


# -------------------------------------------------------------------------
# COCO-style annotation ingestion
# -------------------------------------------------------------------------

def load_coco_json(annotations_path, images_dir, split="val") -> Dataset:
    try:
        with open(annotations_path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot parse {annotations_path}: {e}") from e

    images = {}
    for rec in doc.get("images", []):
        iid = rec["id"]
        if iid in images:
            raise DataError(f"duplicate image id {iid}")
        images[iid] = rec

    cats = sorted(doc.get("categories", []), key=lambda c: c["id"])
    if not cats:
        raise DataError("no categories declared")
    cat_to_idx = {c["id"]: i for i, c in enumerate(cats)}
    class_names = tuple(c["name"] for c in cats)

    per_image = {iid: ([], []) for iid in images}
    for ann in doc.get("annotations", []):
        iid = ann["image_id"]
        if iid not in images:
            raise DataError(f"annotation references unknown image id {iid}")
        cid = ann["category_id"]
        if cid not in cat_to_idx:
            raise DataError(f"annotation references unknown category id {cid}")
        x, y, bw, bh = ann["bbox"]
        if bw <= 0 or bh <= 0:
            raise DataError(f"degenerate bbox {ann['bbox']} on image {iid}")
        boxes, ids = per_image[iid]
        boxes.append([x, y, x + bw, y + bh])
        ids.append(cat_to_idx[cid])

    samples = []
    for iid in sorted(images):
        rec = images[iid]
        path = os.path.join(images_dir, rec["file_name"])
        image = read_ppm(path)
        if image.shape[0] != rec["height"] or image.shape[1] != rec["width"]:
            raise DataError(
                f"{path}: file is {image.shape[1]}x{image.shape[0]} but the "
                f"annotation says {rec['width']}x{rec['height']}"
            )
        boxes, ids = per_image[iid]
        gt = GroundTruth(np.array(boxes, dtype=np.float64).reshape(-1, 4),
                         np.array(ids, dtype=np.int64))
        samples.append(Sample(image=image, gt=gt, image_id=iid, path=path))
    return Dataset(samples=samples, class_names=class_names, split=split)


def save_dataset(dataset: Dataset, out_dir) -> str:
    """Write a dataset as images/*.ppm plus annotations.json in the COCO
    subset that load_coco_json reads back.  Returns the annotations path."""
    images_dir = os.path.join(out_dir, "images")
    os.makedirs(images_dir, exist_ok=True)
    images, annotations = [], []
    ann_id = 1
    for s in dataset.samples:
        name = f"{s.image_id:06d}.ppm"
        write_ppm(os.path.join(images_dir, name), s.image)
        h, w = s.image.shape[:2]
        images.append({"id": int(s.image_id), "file_name": name,
                       "width": int(w), "height": int(h)})
        for box, cid in zip(s.gt.boxes, s.gt.class_ids):
            x1, y1, x2, y2 = (float(v) for v in box)
            annotations.append({
                "id": ann_id, "image_id": int(s.image_id),
                "category_id": int(cid) + 1,
                "bbox": [x1, y1, x2 - x1, y2 - y1],
            })
            ann_id += 1
    doc = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": i + 1, "name": n}
                       for i, n in enumerate(dataset.class_names)],
    }
    path = os.path.join(out_dir, "annotations.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
    return path


def load_dataset_dir(path, split="train") -> Dataset:
    """Read a directory produced by save_dataset."""
    return load_coco_json(os.path.join(path, "annotations.json"),
                          os.path.join(path, "images"), split=split)


# -------------------------------------------------------------------------
# preprocessing
# -------------------------------------------------------------------------

def _resize_nearest(image, out_h, out_w):
    h, w = image.shape[:2]
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return image[rows[:, None], cols[None, :]]


@dataclass(frozen=True)
class LetterboxTransform:
    scale: float
    pad_x: float
    pad_y: float
    orig_w: int
    orig_h: int

    def apply_boxes(self, boxes):
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        shift = np.array([self.pad_x, self.pad_y, self.pad_x, self.pad_y])
        return b * self.scale + shift

    def invert_boxes(self, boxes, clip=True):
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        shift = np.array([self.pad_x, self.pad_y, self.pad_x, self.pad_y])
        b = (b - shift) / self.scale
        if clip:
            b[:, [0, 2]] = np.clip(b[:, [0, 2]], 0.0, self.orig_w)
            b[:, [1, 3]] = np.clip(b[:, [1, 3]], 0.0, self.orig_h)
        return b


def letterbox(image, target_size):
    """Aspect-preserving resize onto a gray square canvas.

    Returns ((3, t, t) float32 in [0, 1], transform record).
    """
    h, w = image.shape[:2]
    t = int(target_size)
    if h < 1 or w < 1 or t < 1:
        raise DataError(f"cannot letterbox {w}x{h} to {t}")
    scale = min(t / w, t / h)
    new_w = max(1, round(w * scale))
    new_h = max(1, round(h * scale))
    resized = _resize_nearest(image, new_h, new_w)
    canvas = np.full((t, t, 3), PAD_VALUE, dtype=np.uint8)
    left = (t - new_w) // 2
    top = (t - new_h) // 2
    canvas[top:top + new_h, left:left + new_w] = resized
    chw = canvas.astype(np.float32).transpose(2, 0, 1) / 255.0
    return chw, LetterboxTransform(scale=scale, pad_x=float(left),
                                   pad_y=float(top), orig_w=w, orig_h=h)


def augment(image, gt: GroundTruth, rng, flip_p=0.5, scale_range=(0.75, 1.25)):
    """Horizontal flip plus scale jitter about the image center."""
    h, w = image.shape[:2]
    boxes = gt.boxes.copy()
    ids = gt.class_ids.copy()

    if rng.uniform() < flip_p:
        image = image[:, ::-1]
        boxes[:, [0, 2]] = w - boxes[:, [2, 0]]

    s = rng.uniform(*scale_range)
    nh = max(1, round(h * s))
    nw = max(1, round(w * s))
    if (nh, nw) != (h, w):
        resized = _resize_nearest(image, nh, nw)
        canvas = np.full((h, w, 3), PAD_VALUE, dtype=np.uint8)
        sy, dy = max(0, (nh - h) // 2), max(0, (h - nh) // 2)
        sx, dx = max(0, (nw - w) // 2), max(0, (w - nw) // 2)
        ch, cw = min(h, nh), min(w, nw)
        canvas[dy:dy + ch, dx:dx + cw] = resized[sy:sy + ch, sx:sx + cw]
        image = canvas
        boxes = boxes * np.array([nw / w, nh / h, nw / w, nh / h])
        boxes += np.array([dx - sx, dy - sy, dx - sx, dy - sy], dtype=np.float64)

    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0.0, w)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0.0, h)
    keep = (boxes[:, 2] - boxes[:, 0] > 2.0) & (boxes[:, 3] - boxes[:, 1] > 2.0)
    return np.ascontiguousarray(image), GroundTruth(boxes[keep], ids[keep])


def collate(samples, input_size, rng=None, train_augment=False,
            flip_p=0.5, scale_range=(0.75, 1.25)):
    """Stack samples into an input batch: (n, 3, s, s) float32 plus the
    per-image ground truths mapped through the same transforms."""
    images, gts = [], []
    for s in samples:
        image, gt = s.image, s.gt
        if train_augment:
            if rng is None:
                raise DataError("augmentation needs a random generator")
            image, gt = augment(image, gt, rng, flip_p, scale_range)
        chw, tf = letterbox(image, input_size)
        images.append(chw)
        gts.append(GroundTruth(tf.apply_boxes(gt.boxes), gt.class_ids))
    return np.stack(images), gts
