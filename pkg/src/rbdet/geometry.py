"""Box geometry and anchor-grid helpers.

Plain numpy for assignment-side work (no gradients) plus differentiable
decoding of head outputs into boxes.  Anchor order is fixed: levels in
ascending stride, row-major cells within a level; every per-anchor array in
the package follows it.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (M,4) and (N,4) xyxy boxes -> (M,N)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    tl = np.maximum(a[:, None, :2], b[None, :, :2])
    br = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(br - tl, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def iou_pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU between equal-length box lists -> (M,)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    tl = np.maximum(a[:, :2], b[:, :2])
    br = np.minimum(a[:, 2:], b[:, 2:])
    wh = np.clip(br - tl, 0.0, None)
    inter = wh[:, 0] * wh[:, 1]
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a + area_b - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def level_centers(h: int, w: int, stride: int) -> np.ndarray:
    """Cell-center coordinates of an h x w grid in input pixels, row-major."""
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cx = (xs.reshape(-1) + 0.5) * stride
    cy = (ys.reshape(-1) + 0.5) * stride
    return np.stack([cx, cy], axis=1).astype(np.float64)


def make_anchors(level_hw, strides, prior_scale: float = 4.0):
    """Anchor layout for a pyramid.

    Returns (centers (A,2), stride_per_anchor (A,), prior_boxes (A,4),
    level_slices).  Priors are squares of side ``prior_scale * stride``
    centered on the cells; the anchor-based branch and the warm-up assigner
    use them, the anchor-free branch only needs the centers.
    """
    centers, stride_arr, priors, slices = [], [], [], []
    off = 0
    for (h, w), s in zip(level_hw, strides):
        c = level_centers(h, w, s)
        centers.append(c)
        stride_arr.append(np.full(len(c), float(s)))
        half = prior_scale * s / 2.0
        priors.append(np.concatenate([c - half, c + half], axis=1))
        slices.append(slice(off, off + len(c)))
        off += len(c)
    return (np.concatenate(centers), np.concatenate(stride_arr),
            np.concatenate(priors), slices)


def flatten_level(t: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, H*W, C] keeping row-major cell order."""
    n, c, h, w = t.shape
    return t.transpose(0, 2, 3, 1).reshape(n, h * w, c)


def flatten_levels(tensors) -> Tensor:
    return T.concat([flatten_level(t) for t in tensors], axis=1)


def dfl_expectation(reg_logits: Tensor) -> Tensor:
    """[..., 4*(R+1)] logits -> [..., 4] expected distances (stride units)."""
    r1 = reg_logits.shape[-1] // 4
    shaped = reg_logits.reshape(*reg_logits.shape[:-1], 4, r1)
    probs = T.softmax(shaped, axis=-1)
    bins = Tensor(np.arange(r1, dtype=np.float32))
    return (probs * bins).sum(axis=-1)


def distances_to_boxes(dist: Tensor, centers: np.ndarray,
                       stride_per_anchor: np.ndarray) -> Tensor:
    """(l,t,r,b) in stride units at each anchor -> xyxy boxes in pixels."""
    scaled = dist * Tensor(stride_per_anchor.reshape(-1, 1).astype(np.float32))
    cx = Tensor(centers[:, 0].astype(np.float32))
    cy = Tensor(centers[:, 1].astype(np.float32))
    x1 = cx - scaled[:, 0]
    y1 = cy - scaled[:, 1]
    x2 = cx + scaled[:, 2]
    y2 = cy + scaled[:, 3]
    return T.concat([x1.reshape(-1, 1), y1.reshape(-1, 1),
                     x2.reshape(-1, 1), y2.reshape(-1, 1)], axis=1)


def boxes_to_distances(boxes: np.ndarray, centers: np.ndarray,
                       stride_per_anchor: np.ndarray) -> np.ndarray:
    """Inverse of distances_to_boxes for targets (numpy, no grad)."""
    s = stride_per_anchor.reshape(-1, 1)
    lt = (centers - boxes[:, :2]) / s
    rb = (boxes[:, 2:] - centers) / s
    return np.concatenate([lt, rb], axis=1)


def decode_dfl_np(reg_logits: np.ndarray, centers: np.ndarray,
                  stride_per_anchor: np.ndarray) -> np.ndarray:
    """Fast non-differentiable decode of (A, 4*(R+1)) logits to (A,4) boxes."""
    a = reg_logits.shape[0]
    r1 = reg_logits.shape[-1] // 4
    shaped = reg_logits.reshape(a, 4, r1)
    shifted = shaped - shaped.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)
    dist = (probs * np.arange(r1)).sum(axis=-1) * stride_per_anchor.reshape(-1, 1)
    return np.concatenate([centers - dist[:, :2], centers + dist[:, 2:]], axis=1)


def decode_naive_np(dist: np.ndarray, centers: np.ndarray,
                    stride_per_anchor: np.ndarray,
                    clamp: bool = True) -> np.ndarray:
    """Decode direct (A,4) distance predictions to boxes."""
    d = np.clip(dist, 0.0, None) if clamp else dist
    d = d * stride_per_anchor.reshape(-1, 1)
    return np.concatenate([centers - d[:, :2], centers + d[:, 2:]], axis=1)
