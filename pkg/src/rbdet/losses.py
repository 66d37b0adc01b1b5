"""Training losses and their composition.

Classification is a varifocal-style weighted BCE, box regression is GIoU,
distribution regression is the two-bin cross-entropy (DFL), and distillation
is a KL term with a cosine-decayed weight.  ``DetectionObjective`` wires
them to head outputs: assignments per enabled branch, one scalar out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .assign import AssignmentResult, GroundTruth, atss_assign, tal_assign
from .errors import TensorError
from .geometry import (boxes_to_distances, dfl_expectation, distances_to_boxes,
                       flatten_levels, make_anchors)
from .tensor import Tensor


# -------------------------------------------------------------------------
# stable primitives
# -------------------------------------------------------------------------

def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    # the detached shift cancels analytically; gradients are unaffected
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    z = x - shift
    return z - T.log(T.exp(z).sum(axis=axis, keepdims=True))


def log_sigmoid(x: Tensor) -> Tensor:
    ax = T.relu(x) + T.relu(-x)
    return -(T.relu(-x) + T.log(T.exp(-ax) + 1.0))


def bce_with_logits(x: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy from logits, overflow-safe."""
    t = Tensor(np.asarray(target, dtype=np.float32))
    ax = T.relu(x) + T.relu(-x)
    return T.relu(x) - x * t + T.log(T.exp(-ax) + 1.0)


def _xlogx(p: np.ndarray) -> np.ndarray:
    return np.where(p > 0.0, p * np.log(np.clip(p, 1e-300, None)), 0.0)


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))


def _np_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


# -------------------------------------------------------------------------
# individual losses
# -------------------------------------------------------------------------

def giou_terms(pred: Tensor, target: np.ndarray) -> Tensor:
    """Per-pair GIoU loss 1 - IoU + (hull - union)/hull for (M,4) boxes.

    Predicted widths/heights clip at zero so early degenerate predictions
    stay finite; targets must be valid boxes, which keeps union positive.
    """
    tb = np.asarray(target, dtype=np.float32).reshape(-1, 4)
    px1, py1, px2, py2 = pred[:, 0], pred[:, 1], pred[:, 2], pred[:, 3]
    tx1, ty1, tx2, ty2 = (Tensor(tb[:, i]) for i in range(4))

    iw = T.clip(T.minimum(px2, tx2) - T.maximum(px1, tx1), 0.0, None)
    ih = T.clip(T.minimum(py2, ty2) - T.maximum(py1, ty1), 0.0, None)
    inter = iw * ih
    pa = T.clip(px2 - px1, 0.0, None) * T.clip(py2 - py1, 0.0, None)
    ta = Tensor((tb[:, 2] - tb[:, 0]) * (tb[:, 3] - tb[:, 1]))
    union = pa + ta - inter
    hw = T.maximum(px2, tx2) - T.minimum(px1, tx1)
    hh = T.maximum(py2, ty2) - T.minimum(py1, ty1)
    hull = hw * hh
    return 1.0 - inter / union + (hull - union) / hull


def iou_loss(pred: Tensor, target: np.ndarray, weights: np.ndarray | None = None,
             normalizer: float | None = None) -> Tensor:
    terms = giou_terms(pred, target)
    if weights is None:
        return terms.mean()
    w = Tensor(np.asarray(weights, dtype=np.float32))
    denom = normalizer if normalizer is not None else max(float(np.sum(weights)), 1.0)
    return (terms * w).sum() * (1.0 / denom)


def dfl_loss(pred_logits: Tensor, target: np.ndarray,
             weights: np.ndarray | None = None,
             normalizer: float | None = None) -> Tensor:
    """Distribution-bin cross-entropy against the two bins bracketing each
    target distance, linearly weighted; averaged over sides and anchors."""
    if pred_logits.ndim == 2:
        pred_logits = pred_logits.reshape(pred_logits.shape[0], 4, -1)
    bins = pred_logits.shape[-1]
    if bins < 2:
        raise TensorError(f"distribution regression needs >= 2 bins, got {bins}")
    reg_max = bins - 1
    t = np.clip(np.asarray(target, dtype=np.float64), 0.0, reg_max)
    tl = np.minimum(np.floor(t), reg_max - 1).astype(np.int64)
    tr = tl + 1
    wl = (tr - t).astype(np.float32)
    wr = (t - tl).astype(np.float32)

    logp = log_softmax(pred_logits, axis=-1)
    eye = np.eye(bins, dtype=np.float32)
    lp_l = (logp * Tensor(eye[tl])).sum(axis=-1)
    lp_r = (logp * Tensor(eye[tr])).sum(axis=-1)
    per = -(lp_l * Tensor(wl) + lp_r * Tensor(wr))  # (M, 4)
    if weights is None:
        return per.mean()
    w = Tensor(np.asarray(weights, dtype=np.float32))
    denom = normalizer if normalizer is not None else max(float(np.sum(weights)), 1.0)
    return (per.mean(axis=1) * w).sum() * (1.0 / denom)


def cls_loss(pred_logits: Tensor, target_scores: np.ndarray,
             normalizer: float | None = None) -> Tensor:
    """Varifocal-style classification loss.

    Positives weight their BCE by the (soft) target score, negatives by the
    squared predicted probability; normalized by the summed target scores.
    The focal weights are treated as constants.
    """
    t = np.asarray(target_scores, dtype=np.float32)
    if t.shape != pred_logits.shape:
        raise TensorError(
            f"target scores shape {t.shape} does not match logits {pred_logits.shape}"
        )
    p = _np_sigmoid(pred_logits.data)
    w = np.where(t > 0.0, t, (p * p).astype(np.float32))
    bce = bce_with_logits(pred_logits, t)
    denom = normalizer if normalizer is not None else max(float(t.sum()), 1.0)
    return (bce * Tensor(w)).sum() * (1.0 / denom)


def kd_loss(teacher_cls_logits: np.ndarray | None, student_cls_logits: Tensor | None,
            teacher_reg_logits: np.ndarray | None = None,
            student_reg_logits: Tensor | None = None,
            temperature: float = 1.0) -> Tensor:
    """KL(teacher || student) averaged over anchors.

    Classification treats every class as an independent Bernoulli (sigmoid
    pair); regression compares per-side distribution-bin softmaxes.  Either
    side may be omitted by passing None for its teacher logits.  Both
    sides' logits are scaled by 1/temperature.  Teacher inputs are plain
    arrays, so gradients cannot reach the teacher.
    """
    if teacher_cls_logits is None and teacher_reg_logits is None:
        raise TensorError("kd_loss needs at least one of cls/reg logits")
    inv_t = 1.0 / float(temperature)
    total = Tensor(np.float32(0.0))
    n = None

    if teacher_cls_logits is not None:
        t_cls = np.asarray(teacher_cls_logits, dtype=np.float64)
        if student_cls_logits is None or t_cls.shape != student_cls_logits.shape:
            raise TensorError(
                f"teacher/student class logits disagree: {t_cls.shape} vs "
                f"{None if student_cls_logits is None else student_cls_logits.shape}"
            )
        n = t_cls.shape[0]
        if n == 0:
            return Tensor(np.float32(0.0))
        pt = _np_sigmoid(t_cls * inv_t)
        ent = (_xlogx(pt) + _xlogx(1.0 - pt)).astype(np.float32)
        xs = student_cls_logits * inv_t
        cross = Tensor(pt.astype(np.float32)) * log_sigmoid(xs) \
            + Tensor((1.0 - pt).astype(np.float32)) * log_sigmoid(-xs)
        total = total + (Tensor(ent) - cross).sum()

    if teacher_reg_logits is not None:
        t_reg = np.asarray(teacher_reg_logits, dtype=np.float64)
        if student_reg_logits is None or t_reg.shape != student_reg_logits.shape:
            raise TensorError("teacher/student regression logits disagree")
        if n is not None and t_reg.shape[0] != n:
            raise TensorError(
                f"regression anchors ({t_reg.shape[0]}) do not match "
                f"classification anchors ({n})"
            )
        n = t_reg.shape[0]
        if n == 0:
            return Tensor(np.float32(0.0))
        pt_reg = _np_softmax(t_reg * inv_t)
        ent_reg = float(_xlogx(pt_reg).sum())
        ls = log_softmax(student_reg_logits * inv_t, axis=-1)
        cross_reg = (Tensor(pt_reg.astype(np.float32)) * ls).sum()
        total = total + (ent_reg - cross_reg)

    return total * (1.0 / n)


@dataclass
class DistillSchedule:
    """Cosine decay of the distillation weight over training epochs."""

    e_max: int
    e_i: int = 0

    def __post_init__(self):
        if self.e_max < 1:
            raise ValueError(f"e_max must be >= 1, got {self.e_max}")
        if not 0 <= self.e_i <= self.e_max:
            raise ValueError(f"e_i {self.e_i} outside [0, {self.e_max}]")

    def alpha(self) -> float:
        return cosine_alpha(self.e_i, self.e_max)


def cosine_alpha(e_i: int, e_max: int) -> float:
    if e_max < 1:
        raise ValueError(f"e_max must be >= 1, got {e_max}")
    if not 0 <= e_i <= e_max:
        raise ValueError(f"epoch {e_i} outside [0, {e_max}]")
    return -0.99 * ((1.0 - math.cos(math.pi * e_i / e_max)) / 2.0) + 1.0


def total_loss(l_det: Tensor, l_kd: Tensor | None = None,
               alpha: float = 0.0) -> Tensor:
    if l_kd is None:
        return l_det
    return l_det + float(alpha) * l_kd


# -------------------------------------------------------------------------
# objective orchestration
# -------------------------------------------------------------------------

@dataclass
class LossWeights:
    cls: float = 1.0
    iou: float = 2.5
    dfl: float = 0.5
    aux: float = 1.0  # multiplier on the whole anchor-based branch


@dataclass
class AssignerSettings:
    warmup_epochs: int = 4
    atss_topk: int = 9
    tal_topk: int = 13
    tal_alpha: float = 1.0
    tal_beta: float = 6.0
    prior_scale: float = 4.0


def _ab_decode(raw: Tensor, priors: np.ndarray) -> Tensor:
    """Anchor-based deltas (dx,dy,dw,dh) against prior boxes -> xyxy."""
    p = np.asarray(priors, dtype=np.float32)
    pw = Tensor(p[:, 2] - p[:, 0])
    ph = Tensor(p[:, 3] - p[:, 1])
    pcx = Tensor((p[:, 0] + p[:, 2]) / 2.0)
    pcy = Tensor((p[:, 1] + p[:, 3]) / 2.0)
    cx = pcx + raw[:, 0] * pw
    cy = pcy + raw[:, 1] * ph
    bw = pw * T.exp(T.clip(raw[:, 2], -4.0, 4.0))
    bh = ph * T.exp(T.clip(raw[:, 3], -4.0, 4.0))
    half_w = bw * 0.5
    half_h = bh * 0.5
    cols = [cx - half_w, cy - half_h, cx + half_w, cy + half_h]
    return T.concat([c.reshape(-1, 1) for c in cols], axis=1)


class DetectionObjective:
    """Assignment + loss composition for one batch of head outputs.

    The anchor-free branch is assigned by the warm-up assigner for the
    first ``warmup_epochs`` epochs and the task-aligned assigner after;
    the anchor-based auxiliary runs the same protocol against its prior
    boxes.  Every enabled branch contributes cls/iou(/dfl) terms with
    shared weights; auxiliary terms are scaled by ``weights.aux``.
    """

    def __init__(self, config, weights: LossWeights | None = None,
                 assigner: AssignerSettings | None = None):
        self.cfg = config
        self.weights = weights or LossWeights()
        self.assigner = assigner or AssignerSettings()
        self._anchor_cache = {}

    def anchors(self, level_hw):
        key = tuple(level_hw)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = make_anchors(
                level_hw, self.cfg.strides, self.assigner.prior_scale)
        return self._anchor_cache[key]

    def _assign(self, epoch, cls_probs, boxes, centers, centers_by_level,
                priors, gt) -> AssignmentResult:
        a = self.assigner
        if epoch < a.warmup_epochs:
            return atss_assign(priors, centers_by_level, gt, a.atss_topk)
        return tal_assign(cls_probs, boxes, centers, gt,
                          a.tal_alpha, a.tal_beta, a.tal_topk)

    def assign_anchor_free(self, outputs, gts, epoch):
        """Per-image anchor-free assignments (also used to pick the
        distillation foreground from a teacher's outputs)."""
        level_hw = outputs.level_hw()
        centers, stride_pa, priors, slices = self.anchors(level_hw)
        centers_by_level = [centers[s] for s in slices]
        flat_cls = flatten_levels(outputs.af_cls)
        if outputs.af_reg_dist is not None:
            flat_reg = flatten_levels(outputs.af_reg_dist)
            decode = lambda r: distances_to_boxes(dfl_expectation(r), centers, stride_pa)
        else:
            flat_reg = flatten_levels(outputs.af_reg_naive)
            decode = lambda r: distances_to_boxes(r, centers, stride_pa)
        results = []
        for i, gt in enumerate(gts):
            with T.no_grad():
                boxes = decode(flat_reg[i]).data
            probs = _np_sigmoid(flat_cls[i].data)
            results.append(self._assign(epoch, probs, boxes, centers,
                                        centers_by_level, priors, gt))
        return results

    def __call__(self, outputs, gts, epoch: int):
        """Returns (total loss Tensor, {component: float}).

        ``gts`` is one GroundTruth per image; components are averaged over
        the batch.
        """
        w = self.weights
        level_hw = outputs.level_hw()
        centers, stride_pa, priors, slices = self.anchors(level_hw)
        centers_by_level = [centers[s] for s in slices]
        n = outputs.af_cls[0].shape[0]
        if len(gts) != n:
            raise TensorError(f"{n} images in outputs but {len(gts)} ground truths")
        nc = self.cfg.num_classes
        reg_max = self.cfg.reg_max

        flat_cls = flatten_levels(outputs.af_cls)
        flat_dist = (flatten_levels(outputs.af_reg_dist)
                     if outputs.af_reg_dist is not None else None)
        flat_naive = (flatten_levels(outputs.af_reg_naive)
                      if outputs.af_reg_naive is not None else None)
        flat_ab_cls = (flatten_levels(outputs.ab_cls)
                       if outputs.ab_cls is not None else None)
        flat_ab_reg = (flatten_levels(outputs.ab_reg)
                       if outputs.ab_reg is not None else None)

        zero = Tensor(np.float32(0.0))
        comp = {"cls": zero, "iou": zero, "dfl": zero,
                "aux_cls": zero, "aux_iou": zero}

        for i, gt in enumerate(gts):
            cls_i = flat_cls[i]
            if flat_dist is not None:
                reg_i = flat_dist[i]
                boxes_i = distances_to_boxes(dfl_expectation(reg_i), centers, stride_pa)
            else:
                reg_i = None
                boxes_i = distances_to_boxes(flat_naive[i], centers, stride_pa)
            naive_boxes_i = (distances_to_boxes(flat_naive[i], centers, stride_pa)
                             if flat_naive is not None and flat_dist is not None
                             else None)

            res = self._assign(epoch, _np_sigmoid(cls_i.data), boxes_i.data,
                               centers, centers_by_level, priors, gt)
            comp = self._accumulate(comp, "cls", "iou", "dfl", cls_i, boxes_i,
                                    reg_i, naive_boxes_i, res, nc, reg_max,
                                    centers, stride_pa)

            if flat_ab_cls is not None:
                ab_cls_i = flat_ab_cls[i]
                ab_boxes_i = _ab_decode(flat_ab_reg[i], priors)
                res_ab = self._assign(epoch, _np_sigmoid(ab_cls_i.data),
                                      ab_boxes_i.data, centers,
                                      centers_by_level, priors, gt)
                comp = self._accumulate(comp, "aux_cls", "aux_iou", None,
                                        ab_cls_i, ab_boxes_i, None, None,
                                        res_ab, nc, reg_max, centers, stride_pa)

        inv_n = 1.0 / n
        comp = {k: v * inv_n for k, v in comp.items()}
        det = w.cls * comp["cls"] + w.iou * comp["iou"] + w.dfl * comp["dfl"] \
            + w.aux * (w.cls * comp["aux_cls"] + w.iou * comp["aux_iou"])
        parts = {k: float(v.data) for k, v in comp.items()}
        parts["det"] = float(det.data)
        return det, parts

    def _accumulate(self, comp, k_cls, k_iou, k_dfl, cls_i, boxes_i, reg_i,
                    naive_boxes_i, res, nc, reg_max, centers, stride_pa):
        targets = np.zeros((len(centers), nc), dtype=np.float32)
        fg = np.nonzero(res.fg_mask)[0]
        ts = res.target_score[fg]
        if len(fg):
            targets[fg, res.target_cls[fg]] = ts
        denom = max(float(ts.sum()), 1.0)
        comp = dict(comp)
        comp[k_cls] = comp[k_cls] + cls_loss(cls_i, targets, normalizer=denom)
        if len(fg):
            tb = res.target_box[fg]
            comp[k_iou] = comp[k_iou] + iou_loss(boxes_i[fg], tb, ts, denom)
            if naive_boxes_i is not None:
                comp[k_iou] = comp[k_iou] + iou_loss(naive_boxes_i[fg], tb, ts, denom)
            if k_dfl is not None and reg_i is not None:
                tdist = boxes_to_distances(tb, centers[fg], stride_pa[fg])
                comp[k_dfl] = comp[k_dfl] + dfl_loss(
                    reg_i[fg], np.clip(tdist, 0.0, reg_max), ts, denom)
        return comp
