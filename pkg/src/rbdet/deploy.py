"""Inference-form pipeline: whole-model fusion, prediction decoding,
greedy suppression, single-image inference and wall-clock benchmarking."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .data import letterbox, read_ppm
from .errors import CheckpointError, DataError, TensorError
from .geometry import decode_dfl_np, decode_naive_np, iou_matrix, make_anchors
from .network import Model, build_model, strip_auxiliary
from .tensor import Tensor, no_grad
from .trainer import Checkpoint, apply_state, state_dict


@dataclass(frozen=True)
class Detection:
    box: tuple  # (x1, y1, x2, y2) in original-image pixels
    class_id: int
    score: float

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise DataError(f"degenerate detection box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise DataError(f"detection score {self.score} outside [0, 1]")

    def line(self) -> str:
        x1, y1, x2, y2 = self.box
        return (f"class={self.class_id} score={self.score:.4f} "
                f"box={x1:.1f},{y1:.1f},{x2:.1f},{y2:.1f}")

    def to_coco(self, image_id) -> dict:
        x1, y1, x2, y2 = self.box
        return {"image_id": image_id, "category_id": int(self.class_id),
                "bbox": [float(x1), float(y1), float(x2 - x1), float(y2 - y1)],
                "score": float(self.score)}


# -------------------------------------------------------------------------
# fusion
# -------------------------------------------------------------------------

def fuse_model(ckpt: Checkpoint) -> Checkpoint:
    """Train-form checkpoint -> deploy-form: branch merge on every Rep
    unit, norm folding everywhere, auxiliary branches removed."""
    if ckpt.form == "deploy":
        raise CheckpointError("checkpoint is already deploy-form")
    model = ckpt.build_model()
    hb = model.config.head_branches
    if hb.anchor_based_aux or (hb.enhanced_dfl_aux and hb.naive_reg):
        strip_auxiliary(model)
    fused = model.fuse()
    return Checkpoint(
        config=dataclasses.replace(model.config),
        params=state_dict(fused),
        epoch=ckpt.epoch,
        form="deploy",
        train_config=ckpt.train_config,
    )


def _deploy_skeleton(config) -> Model:
    """Construct the fused module tree for a config.

    Built by calibrating a throwaway train-form model on noise and fusing
    it; the parameter values are then overwritten by the checkpoint."""
    model = build_model(config, seed=0)
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((1, 3, 64, 64)).astype(np.float32))
    with no_grad():
        model.forward(x, mode="deploy", training=True)
    return model.fuse()


def load_deploy_model(ckpt: Checkpoint) -> Model:
    if ckpt.form != "deploy":
        raise CheckpointError(f"expected a deploy-form checkpoint, got {ckpt.form!r}")
    model = _deploy_skeleton(ckpt.config)
    apply_state(model, ckpt.params)
    return model


# -------------------------------------------------------------------------
# decoding and suppression
# -------------------------------------------------------------------------

def _np_sigmoid(x):
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def decode(outputs, input_size=None, use_naive=None):
    """Raw head maps -> (boxes (n, a, 4), scores (n, a, c)) numpy arrays.

    Distances come from the expectation of the per-side bin distribution
    when the distribution branch is present, from the direct regression
    outputs otherwise; ``use_naive=True`` forces the latter.  Boxes are
    clipped to [0, input_size] when a size is given.
    """
    level_hw = outputs.level_hw()
    centers, stride_pa, _priors, _slices = make_anchors(level_hw, outputs.strides)

    if use_naive is None:
        use_naive = outputs.af_reg_dist is None
    if use_naive and outputs.af_reg_naive is None:
        raise TensorError("no naive regression outputs to decode")
    if not use_naive and outputs.af_reg_dist is None:
        raise TensorError("no distribution regression outputs to decode")

    def flat(levels):
        cols = []
        for t in levels:
            d = t.data if isinstance(t, Tensor) else np.asarray(t)
            n, c, h, w = d.shape
            cols.append(d.transpose(0, 2, 3, 1).reshape(n, h * w, c))
        return np.concatenate(cols, axis=1)

    cls = flat(outputs.af_cls)
    reg = flat(outputs.af_reg_naive if use_naive else outputs.af_reg_dist)
    n = cls.shape[0]
    boxes = np.empty((n, len(centers), 4), dtype=np.float64)
    for i in range(n):
        if use_naive:
            boxes[i] = decode_naive_np(reg[i], centers, stride_pa)
        else:
            boxes[i] = decode_dfl_np(reg[i], centers, stride_pa)
    if input_size is not None:
        boxes = np.clip(boxes, 0.0, float(input_size))
    return boxes, _np_sigmoid(cls)


def nms(boxes, scores, conf_thresh=0.25, iou_thresh=0.65, class_aware=True):
    """Greedy score-descending suppression for one image.

    ``boxes`` is (a, 4); ``scores`` is (a, c) per-class probabilities.
    Returns Detections sorted by descending score, index-stable on ties.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != boxes.shape[0]:
        raise TensorError(
            f"scores {scores.shape} do not match boxes {boxes.shape}")

    anchor, cls = np.nonzero(scores >= conf_thresh)
    if not len(anchor):
        return []
    sc = scores[anchor, cls]
    order = np.lexsort((anchor, -sc))  # score desc, anchor index on ties
    anchor, cls, sc = anchor[order], cls[order], sc[order]
    cand = boxes[anchor]
    # drop degenerate candidates before suppression
    ok = (cand[:, 2] > cand[:, 0]) & (cand[:, 3] > cand[:, 1])
    anchor, cls, sc, cand = anchor[ok], cls[ok], sc[ok], cand[ok]

    kept = []
    suppressed = np.zeros(len(anchor), dtype=bool)
    for i in range(len(anchor)):
        if suppressed[i]:
            continue
        kept.append(i)
        rest = np.arange(i + 1, len(anchor))
        if not len(rest):
            continue
        iou = iou_matrix(cand[i:i + 1], cand[rest])[0]
        hit = iou > iou_thresh
        if class_aware:
            hit &= cls[rest] == cls[i]
        suppressed[rest[hit]] = True
    return [Detection(box=tuple(cand[i]), class_id=int(cls[i]), score=float(sc[i]))
            for i in kept]


# -------------------------------------------------------------------------
# inference and benchmarking
# -------------------------------------------------------------------------

def _as_model(model_or_ckpt) -> Model:
    if isinstance(model_or_ckpt, Checkpoint):
        ckpt = model_or_ckpt
        return load_deploy_model(ckpt) if ckpt.form == "deploy" else ckpt.build_model()
    return model_or_ckpt


def infer(model_or_ckpt, image, input_size=64, conf_thresh=0.25,
          iou_thresh=0.65) -> list:
    """Letterbox -> forward -> decode -> suppress -> map back to
    original-image pixels.  ``image`` is a PPM path or an (h, w, 3) array."""
    model = _as_model(model_or_ckpt)
    if isinstance(image, (str, bytes)) or hasattr(image, "__fspath__"):
        image = read_ppm(image)
    chw, tf = letterbox(image, input_size)
    with no_grad():
        out = model.forward(Tensor(chw[None]), mode="deploy", training=False)
    boxes, scores = decode(out, input_size=input_size)
    dets = nms(boxes[0], scores[0], conf_thresh, iou_thresh, class_aware=True)
    final = []
    for d in dets:
        x1, y1, x2, y2 = tf.invert_boxes(np.array([d.box]))[0]
        if x2 - x1 < 1e-3 or y2 - y1 < 1e-3:
            continue  # entirely inside the padding
        final.append(Detection(box=(x1, y1, x2, y2), class_id=d.class_id,
                               score=d.score))
    return final


def benchmark(model_or_ckpt, input_size=64, batch_size=1, iterations=20,
              warmup=3, mode="deploy") -> dict:
    """Wall-clock forward latency; warm-up iterations excluded."""
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    model = _as_model(model_or_ckpt)
    rng = np.random.default_rng(0)
    x = Tensor(rng.uniform(0.0, 1.0, size=(batch_size, 3, input_size,
                                           input_size)).astype(np.float32))
    with no_grad():
        for _ in range(warmup):
            model.forward(x, mode=mode, training=False)
        times = np.empty(iterations)
        for i in range(iterations):
            t0 = time.perf_counter()
            model.forward(x, mode=mode, training=False)
            times[i] = time.perf_counter() - t0
    mean = float(times.mean())
    return {
        "mean_s": mean,
        "p50_s": float(np.percentile(times, 50)),
        "p99_s": float(np.percentile(times, 99)),
        "min_s": float(times.min()),
        "max_s": float(times.max()),
        "throughput_ips": batch_size / mean,
        "batch_size": batch_size,
        "input_size": input_size,
        "iterations": iterations,
    }
