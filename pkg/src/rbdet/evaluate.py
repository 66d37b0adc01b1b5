"""Average-precision evaluation: greedy matching per IoU threshold,
101-point interpolated precision, size-bucket breakdown."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .geometry import iou_matrix

IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
SIZE_RANGES = {
    "small": (0.0, 32.0 ** 2),
    "medium": (32.0 ** 2, 96.0 ** 2),
    "large": (96.0 ** 2, float("inf")),
}


@dataclass
class EvalReport:
    ap: float
    ap50: float
    ap_small: float
    ap_medium: float
    ap_large: float
    per_class: dict = field(default_factory=dict)
    num_images: int = 0
    num_gts: int = 0
    num_detections: int = 0

    def to_dict(self):
        return {
            "ap": self.ap, "ap50": self.ap50,
            "ap_small": self.ap_small, "ap_medium": self.ap_medium,
            "ap_large": self.ap_large,
            "per_class": dict(self.per_class),
            "num_images": self.num_images, "num_gts": self.num_gts,
            "num_detections": self.num_detections,
        }

    def lines(self):
        out = [
            f"AP      {self.ap:.4f}",
            f"AP50    {self.ap50:.4f}",
            f"AP_s    {self.ap_small:.4f}",
            f"AP_m    {self.ap_medium:.4f}",
            f"AP_l    {self.ap_large:.4f}",
        ]
        for name, v in self.per_class.items():
            out.append(f"  {name:<12s} {v:.4f}")
        out.append(f"images {self.num_images}  gts {self.num_gts}  "
                   f"detections {self.num_detections}")
        return out


def _interp_ap(recall, precision):
    """Mean of the right-envelope precision at 101 recall points."""
    if len(recall) == 0:
        return 0.0
    env = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(vals.mean())


def _det_key(d):
    b = d.box
    return (-float(d.score), float(b[0]), float(b[1]), float(b[2]), float(b[3]))


def _normalize(detections, dataset):
    if isinstance(detections, dict):
        known = {s.image_id for s in dataset.samples}
        unknown = sorted(set(detections) - known)
        if unknown:
            raise DataError(f"detections reference unknown image ids {unknown}")
        return [list(detections.get(s.image_id, [])) for s in dataset.samples]
    if len(detections) != len(dataset.samples):
        raise DataError(
            f"{len(detections)} detection lists for {len(dataset.samples)} images"
        )
    return [list(d) for d in detections]


def evaluate_ap(detections, dataset, iou_thresholds=None, max_dets=100,
                input_size=None) -> EvalReport:
    """Detections are per-image lists (aligned with the dataset) or a dict
    keyed by image id.  Size buckets use box areas scaled into network
    input pixels when ``input_size`` is given, raw image pixels otherwise.
    """
    thresholds = np.asarray(iou_thresholds if iou_thresholds is not None
                            else IOU_THRESHOLDS, dtype=np.float64)
    dets_per_image = _normalize(detections, dataset)
    nc = len(dataset.class_names)
    n_images = len(dataset.samples)

    # per-image letterbox scale for the bucket areas
    area_scale = np.ones(n_images)
    if input_size is not None:
        for i, s in enumerate(dataset.samples):
            h, w = s.image.shape[:2]
            area_scale[i] = (input_size / max(h, w)) ** 2

    n_dets_total = 0
    for i, dets in enumerate(dets_per_image):
        for d in dets:
            if not 0 <= d.class_id < nc:
                raise DataError(
                    f"detection class {d.class_id} out of range on image "
                    f"{dataset.samples[i].image_id}"
                )
        n_dets_total += len(dets)

    nt = len(thresholds)
    class_ap = np.full((nc, nt), np.nan)
    bucket_ap = {name: np.full((nc, nt), np.nan) for name in SIZE_RANGES}

    for c in range(nc):
        gt_boxes = []
        gt_areas = []
        for i, s in enumerate(dataset.samples):
            sel = s.gt.class_ids == c
            b = s.gt.boxes[sel]
            gt_boxes.append(b)
            gt_areas.append((b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1]) * area_scale[i])
        n_gt = sum(len(b) for b in gt_boxes)
        if n_gt == 0:
            continue  # class absent from the ground truth: excluded

        entries = []  # (sort key, image index, box, det area)
        for i, dets in enumerate(dets_per_image):
            mine = sorted((d for d in dets if d.class_id == c), key=_det_key)
            for d in mine[:max_dets]:
                b = np.asarray(d.box, dtype=np.float64)
                area = (b[2] - b[0]) * (b[3] - b[1]) * area_scale[i]
                entries.append(((-float(d.score), i) + tuple(b), i, b, area))
        entries.sort(key=lambda e: e[0])

        ious = []
        for _, i, b, _a in entries:
            ious.append(iou_matrix(b[None, :], gt_boxes[i])[0]
                        if len(gt_boxes[i]) else np.zeros(0))

        for ti, t in enumerate(thresholds):
            taken = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
            matched = np.full(len(entries), -1, dtype=np.int64)
            for ei, (_, i, b, _a) in enumerate(entries):
                iou = ious[ei]
                if not len(iou):
                    continue
                free = ~taken[i]
                cand = np.where(free, iou, -1.0)
                j = int(np.argmax(cand))
                if cand[j] >= t:
                    matched[ei] = j
                    taken[i][j] = True

            tp = matched >= 0
            cum_tp = np.cumsum(tp)
            cum_fp = np.cumsum(~tp)
            recall = cum_tp / n_gt
            precision = cum_tp / np.maximum(cum_tp + cum_fp, 1)
            class_ap[c, ti] = _interp_ap(recall, precision)

            for name, (lo, hi) in SIZE_RANGES.items():
                in_bucket = [(a >= lo) & (a < hi) for a in gt_areas]
                n_gt_b = sum(int(m.sum()) for m in in_bucket)
                if n_gt_b == 0:
                    continue
                keep_tp = []
                keep_fp = []
                for ei, (_, i, _b, a) in enumerate(entries):
                    if matched[ei] >= 0:
                        if in_bucket[i][matched[ei]]:
                            keep_tp.append(True)
                            keep_fp.append(False)
                        # matched outside the bucket: ignored entirely
                    elif lo <= a < hi:
                        keep_tp.append(False)
                        keep_fp.append(True)
                if not keep_tp:
                    bucket_ap[name][c, ti] = 0.0
                    continue
                ctp = np.cumsum(keep_tp)
                cfp = np.cumsum(keep_fp)
                rec = ctp / n_gt_b
                prec = ctp / np.maximum(ctp + cfp, 1)
                bucket_ap[name][c, ti] = _interp_ap(rec, prec)

    def _mean(a):
        return float(np.nanmean(a)) if np.any(~np.isnan(a)) else 0.0

    t50 = int(np.argmin(np.abs(thresholds - 0.5)))
    per_class = {}
    for c in range(nc):
        if np.any(~np.isnan(class_ap[c])):
            per_class[dataset.class_names[c]] = _mean(class_ap[c])

    return EvalReport(
        ap=_mean(class_ap),
        ap50=_mean(class_ap[:, t50]),
        ap_small=_mean(bucket_ap["small"]),
        ap_medium=_mean(bucket_ap["medium"]),
        ap_large=_mean(bucket_ap["large"]),
        per_class=per_class,
        num_images=n_images,
        num_gts=sum(len(s.gt) for s in dataset.samples),
        num_detections=n_dets_total,
    )
