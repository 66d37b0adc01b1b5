"""Shared test utilities: finite-difference gradient checking and literal
scalar-loop references for the assignment and suppression algorithms."""

import numpy as np

from rbdet.assign import GroundTruth
from rbdet.geometry import iou_matrix, make_anchors
from rbdet.tensor import Tensor


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar-valued f at x (float64)."""
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        hi = f(x)
        flat[i] = keep - h
        lo = f(x)
        flat[i] = keep
        gflat[i] = (hi - lo) / (2.0 * h)
    return g


def check_grad(build, x0: np.ndarray, rtol: float = 1e-4, h: float = 1e-5):
    """Compare autodiff gradient of ``build`` against finite differences.

    ``build`` maps a Tensor to a scalar Tensor.  Runs in float64 to keep the
    finite-difference noise floor below the tolerance.
    """
    t = Tensor(x0.astype(np.float64), requires_grad=True)
    build(t).backward()
    got = t.grad
    want = numeric_grad(lambda a: float(build(Tensor(a)).data), x0, h)
    scale = max(np.abs(want).max(), np.abs(got).max(), 1e-8)
    err = np.abs(got - want).max() / scale
    assert err < rtol, f"gradient mismatch: max rel err {err:.3e}\ngot {got}\nwant {want}"
    return err


def atss_oracle(anchor_boxes, centers_by_level, gt, topk):
    """Literal reading of the warm-up rule, scalar loops only."""
    centers = np.concatenate(centers_by_level)
    a = len(anchor_boxes)
    m = len(gt)
    iou = iou_matrix(gt.boxes, anchor_boxes)
    claims = [[] for _ in range(a)]
    for j in range(m):
        gcx = (gt.boxes[j, 0] + gt.boxes[j, 2]) / 2.0
        gcy = (gt.boxes[j, 1] + gt.boxes[j, 3]) / 2.0
        cand = []
        off = 0
        for lc in centers_by_level:
            ds = sorted(
                (np.hypot(lc[i, 0] - gcx, lc[i, 1] - gcy), i) for i in range(len(lc)))
            cand.extend(off + i for _, i in ds[:min(topk, len(lc))])
            off += len(lc)
        vals = np.array([iou[j, c] for c in cand])
        thr = vals.mean() + vals.std()
        for c in cand:
            cx, cy = centers[c]
            inside = gt.boxes[j, 0] < cx < gt.boxes[j, 2] and \
                gt.boxes[j, 1] < cy < gt.boxes[j, 3]
            if iou[j, c] >= thr and inside:
                claims[c].append(j)
    fg = np.zeros(a, dtype=bool)
    matched = np.full(a, -1, dtype=np.int64)
    for c in range(a):
        if claims[c]:
            best = max(claims[c], key=lambda j: (iou[j, c], -j))
            fg[c] = True
            matched[c] = best
    return fg, matched


def tal_oracle(scores, boxes, centers, gt, alpha, beta, topk):
    """Literal reading of the aligned-assignment rule, scalar loops only."""
    a = len(boxes)
    m = len(gt)
    iou = iou_matrix(gt.boxes, boxes)
    claims = [[] for _ in range(a)]
    metric = np.zeros((m, a))
    for j in range(m):
        cand = []
        for i in range(a):
            metric[j, i] = scores[i, gt.class_ids[j]] ** alpha * iou[j, i] ** beta
            cx, cy = centers[i]
            if gt.boxes[j, 0] < cx < gt.boxes[j, 2] and \
                    gt.boxes[j, 1] < cy < gt.boxes[j, 3]:
                cand.append(i)
        ranked = sorted(cand, key=lambda i: (-metric[j, i], i))
        for i in ranked[:min(topk, len(ranked))]:
            claims[i].append(j)
    fg = np.zeros(a, dtype=bool)
    matched = np.full(a, -1, dtype=np.int64)
    for i in range(a):
        if claims[i]:
            matched[i] = max(claims[i], key=lambda j: (metric[j, i], -j))
            fg[i] = True
    score = np.zeros(a)
    for j in range(m):
        mine = [i for i in range(a) if matched[i] == j]
        if mine:
            mm = max(metric[j, i] for i in mine)
            mi = max(iou[j, i] for i in mine)
            if mm > 0:
                for i in mine:
                    score[i] = metric[j, i] / mm * mi
    return fg, matched, score


def scene_anchors():
    level_hw = [(8, 8), (4, 4)]
    return make_anchors(level_hw, (8, 16))


def random_scene(rng, max_gts=3, num_classes=3):
    m = int(rng.integers(0, max_gts + 1))
    boxes = []
    for _ in range(m):
        x1 = rng.uniform(0, 44)
        y1 = rng.uniform(0, 44)
        boxes.append([x1, y1, x1 + rng.uniform(6, 20), y1 + rng.uniform(6, 20)])
    boxes = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    return GroundTruth(boxes, rng.integers(0, num_classes, size=m))


def nms_oracle(boxes, scores, conf, iou_t, class_aware):
    """Literal O(n^2) greedy suppression."""
    cand = []
    for a in range(scores.shape[0]):
        for c in range(scores.shape[1]):
            if scores[a, c] >= conf and boxes[a, 2] > boxes[a, 0] \
                    and boxes[a, 3] > boxes[a, 1]:
                cand.append((a, c, scores[a, c]))
    cand.sort(key=lambda t: (-t[2], t[0]))
    kept = []
    for a, c, s in cand:
        ok = True
        for (ka, kc, _ks) in kept:
            if class_aware and kc != c:
                continue
            iou = iou_matrix(boxes[a:a + 1], boxes[ka:ka + 1])[0, 0]
            if iou > iou_t:
                ok = False
                break
        if ok:
            kept.append((a, c, s))
    return kept
