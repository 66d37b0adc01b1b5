"""Label assignment: a distance/statistics warm-up assigner and the
task-aligned main assigner.

Both are pure numpy functions over one image's anchors and ground truth;
they never touch the autodiff graph.  Ties break toward the lowest index
everywhere (stable sorts, first-occurrence argmax), which keeps assignments
reproducible bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .geometry import iou_matrix


@dataclass
class GroundTruth:
    """Boxes in input-pixel xyxy with integer class ids."""

    boxes: np.ndarray
    class_ids: np.ndarray

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.class_ids):
            raise DataError(
                f"{len(self.boxes)} boxes but {len(self.class_ids)} class ids"
            )
        if len(self.boxes) and (np.any(self.boxes[:, 2] <= self.boxes[:, 0])
                                or np.any(self.boxes[:, 3] <= self.boxes[:, 1])):
            raise DataError("ground-truth boxes must have x2 > x1 and y2 > y1")
        if np.any(self.class_ids < 0):
            raise DataError("negative class id in ground truth")

    def __len__(self):
        return len(self.boxes)


@dataclass
class AssignmentResult:
    """Per-anchor targets: background anchors carry matched_gt == -1,
    target_score 0 and a zero box."""

    fg_mask: np.ndarray
    matched_gt: np.ndarray
    target_score: np.ndarray
    target_box: np.ndarray
    target_cls: np.ndarray

    @property
    def num_fg(self) -> int:
        return int(self.fg_mask.sum())


def _background(num_anchors: int) -> AssignmentResult:
    return AssignmentResult(
        fg_mask=np.zeros(num_anchors, dtype=bool),
        matched_gt=np.full(num_anchors, -1, dtype=np.int64),
        target_score=np.zeros(num_anchors, dtype=np.float64),
        target_box=np.zeros((num_anchors, 4), dtype=np.float64),
        target_cls=np.full(num_anchors, -1, dtype=np.int64),
    )


def _centers_inside(centers: np.ndarray, box: np.ndarray) -> np.ndarray:
    return ((centers[:, 0] > box[0]) & (centers[:, 0] < box[2])
            & (centers[:, 1] > box[1]) & (centers[:, 1] < box[3]))


def _finalize(num_anchors: int, gt: GroundTruth, claim: np.ndarray,
              quality: np.ndarray, score_fn) -> AssignmentResult:
    """Resolve multi-claim anchors by ``quality`` (rows: GTs) and fill targets.

    score_fn(gt_index, anchor_indices) -> per-anchor target scores.
    """
    res = _background(num_anchors)
    claimed = claim.any(axis=0)
    if not claimed.any():
        return res
    # anchors claimed by several GTs go to the highest-quality claim;
    # argmax takes the first (lowest GT index) on exact ties
    masked = np.where(claim, quality, -np.inf)
    winner = masked.argmax(axis=0)
    res.fg_mask = claimed
    idx = np.nonzero(claimed)[0]
    own = winner[idx]
    res.matched_gt[idx] = own
    res.target_box[idx] = gt.boxes[own]
    res.target_cls[idx] = gt.class_ids[own]
    for j in range(len(gt)):
        mine = idx[own == j]
        if len(mine):
            res.target_score[mine] = score_fn(j, mine)
    return res


def atss_assign(anchor_boxes: np.ndarray, centers_by_level,
                gt: GroundTruth, topk: int = 9) -> AssignmentResult:
    """Warm-up assigner.

    Per GT: take the ``topk`` anchors closest to the GT center on each
    level (L2 over cell centers), pool their prior-box IoUs, and keep
    candidates with IoU >= mean + std whose centers fall inside the GT.
    Anchors claimed by several GTs go to the highest IoU.  Foreground
    target scores are 1.
    """
    anchor_boxes = np.asarray(anchor_boxes, dtype=np.float64)
    centers_by_level = [np.asarray(c, dtype=np.float64) for c in centers_by_level]
    centers = np.concatenate(centers_by_level)
    num_anchors = len(anchor_boxes)
    if len(centers) != num_anchors:
        raise DataError(
            f"{num_anchors} anchor boxes but {len(centers)} centers across levels"
        )
    if len(gt) == 0:
        return _background(num_anchors)

    ious = iou_matrix(gt.boxes, anchor_boxes)  # (M, A)
    gt_centers = (gt.boxes[:, :2] + gt.boxes[:, 2:]) / 2.0
    claim = np.zeros((len(gt), num_anchors), dtype=bool)
    for j in range(len(gt)):
        cand = []
        off = 0
        for level_centers in centers_by_level:
            d = np.linalg.norm(level_centers - gt_centers[j], axis=1)
            k = min(topk, len(level_centers))
            order = np.argsort(d, kind="stable")[:k]
            cand.append(order + off)
            off += len(level_centers)
        cand = np.concatenate(cand)
        cand_ious = ious[j, cand]
        thr = cand_ious.mean() + cand_ious.std()
        keep = cand[(cand_ious >= thr) & _centers_inside(centers[cand], gt.boxes[j])]
        claim[j, keep] = True

    return _finalize(num_anchors, gt, claim, ious,
                     lambda j, mine: np.ones(len(mine)))


def tal_assign(pred_scores: np.ndarray, pred_boxes: np.ndarray,
               centers: np.ndarray, gt: GroundTruth,
               alpha_exp: float = 1.0, beta_exp: float = 6.0,
               topk: int = 13) -> AssignmentResult:
    """Task-aligned assigner.

    Alignment metric m = score^alpha_exp * IoU^beta_exp, with score the
    predicted probability of the GT's class.  Candidates are anchors whose
    center lies inside the GT; the ``topk`` by metric are claimed (stable
    sort: ties keep the lowest anchor index).  Multi-claim anchors go to
    the highest metric.  Target scores are m / max_m * max_iou per GT, so
    the best-aligned anchor of each GT scores its best IoU.
    """
    pred_scores = np.asarray(pred_scores, dtype=np.float64)
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    num_anchors = len(pred_boxes)
    if pred_scores.shape[0] != num_anchors or len(centers) != num_anchors:
        raise DataError("pred_scores, pred_boxes and centers disagree on anchor count")
    if len(gt) == 0:
        return _background(num_anchors)
    if np.any(gt.class_ids >= pred_scores.shape[1]):
        raise DataError("ground-truth class id outside the predicted class range")

    ious = iou_matrix(gt.boxes, pred_boxes)  # (M, A)
    cls_scores = pred_scores[:, gt.class_ids].T  # (M, A)
    metric = np.power(cls_scores, alpha_exp) * np.power(ious, beta_exp)

    claim = np.zeros((len(gt), num_anchors), dtype=bool)
    for j in range(len(gt)):
        inside = _centers_inside(centers, gt.boxes[j])
        m = np.where(inside, metric[j], -np.inf)
        if not inside.any():
            continue
        k = min(topk, int(inside.sum()))
        order = np.argsort(-m, kind="stable")[:k]
        claim[j, order] = True

    def score_fn(j, mine):
        m = metric[j, mine]
        max_m = m.max()
        max_iou = ious[j, mine].max()
        if max_m <= 0.0:
            return np.zeros(len(mine))
        return m / max_m * max_iou

    return _finalize(num_anchors, gt, claim, metric, score_fn)
