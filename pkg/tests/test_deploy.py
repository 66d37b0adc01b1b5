"""Fusion pipeline, decoding, suppression, inference plumbing."""

import numpy as np
import pytest

from rbdet.data import gen_synthetic, write_ppm
from rbdet.deploy import (Detection, benchmark, decode, fuse_model, infer,
                          load_deploy_model, nms)
from rbdet.errors import CheckpointError, DataError, FusionError, TensorError
from helpers import nms_oracle
from rbdet.network import HeadBranches, HeadOutputs, ModelConfig, build_model
from rbdet.tensor import Tensor, no_grad
from rbdet.trainer import TrainConfig, make_checkpoint, train

SMALL = dict(num_classes=2, width_multiple=0.5)


def trained_checkpoint(branches=None, seed=1, epochs=1):
    cfg = ModelConfig(head_branches=branches or HeadBranches(anchor_based_aux=True),
                      **SMALL)
    ds = gen_synthetic(seed=5, n_images=8, image_size=64,
                       classes=("square", "disk"), objects_per_image=(1, 2))
    model = build_model(cfg, seed=seed)
    return train(TrainConfig(epochs=epochs, batch_size=4, seed=0), model, ds), ds


def test_detection_invariants():
    with pytest.raises(DataError):
        Detection(box=(5.0, 0.0, 4.0, 2.0), class_id=0, score=0.5)
    with pytest.raises(DataError):
        Detection(box=(0.0, 0.0, 4.0, 2.0), class_id=0, score=1.5)
    d = Detection(box=(1.0, 2.0, 3.0, 4.0), class_id=1, score=0.5)
    assert d.to_coco(7) == {"image_id": 7, "category_id": 1,
                            "bbox": [1.0, 2.0, 2.0, 2.0], "score": 0.5}
    assert "class=1" in d.line()


# -------------------------------------------------------------------------
# decode
# -------------------------------------------------------------------------

def one_level_outputs(cls_map, reg_map, stride=8):
    return HeadOutputs(strides=(stride,), af_cls=[Tensor(cls_map)],
                       af_reg_dist=[Tensor(reg_map)])


def test_decode_one_hot_worked_example():
    reg = np.full((1, 36, 1, 1), -40.0, dtype=np.float32)
    for side in range(4):
        reg[0, side * 9 + 3] = 40.0
    cls = np.zeros((1, 2, 1, 1), dtype=np.float32)
    boxes, scores = decode(one_level_outputs(cls, reg))
    assert np.allclose(boxes[0, 0], [-20.0, -20.0, 28.0, 28.0], atol=1e-4)
    assert np.allclose(scores, 0.5)


def test_decode_uniform_bins_give_midpoint_distance():
    reg = np.zeros((1, 36, 1, 1), dtype=np.float32)  # uniform over 0..8
    cls = np.zeros((1, 2, 1, 1), dtype=np.float32)
    boxes, _ = decode(one_level_outputs(cls, reg))
    # distance 4 bins * stride 8 = 32 around center (4, 4)
    assert np.allclose(boxes[0, 0], [4 - 32, 4 - 32, 4 + 32, 4 + 32], atol=1e-4)


def test_decode_encode_round_trip():
    rng = np.random.default_rng(0)
    h = w = 4
    reg = np.full((1, 36, h, w), -40.0, dtype=np.float32)
    bins = rng.integers(0, 9, size=(4, h, w))
    for side in range(4):
        for i in range(h):
            for j in range(w):
                reg[0, side * 9 + bins[side, i, j], i, j] = 40.0
    cls = np.zeros((1, 2, h, w), dtype=np.float32)
    boxes, _ = decode(one_level_outputs(cls, reg))
    centers = np.stack(np.meshgrid(np.arange(w), np.arange(h)), -1) * 8 + 4
    flat_bins = bins.reshape(4, -1).T.astype(np.float64) * 8.0
    flat_centers = centers.reshape(-1, 2)
    want = np.concatenate([flat_centers - flat_bins[:, :2],
                           flat_centers + flat_bins[:, 2:]], axis=1)
    assert np.abs(boxes[0] - want).max() < 1e-5


def test_decode_clips_to_input_size():
    reg = np.zeros((1, 36, 1, 1), dtype=np.float32)
    cls = np.zeros((1, 2, 1, 1), dtype=np.float32)
    boxes, _ = decode(one_level_outputs(cls, reg), input_size=8)
    assert boxes.min() >= 0.0 and boxes.max() <= 8.0


def test_decode_distances_are_nonnegative():
    rng = np.random.default_rng(3)
    reg = rng.standard_normal((2, 36, 4, 4)).astype(np.float32) * 5
    cls = rng.standard_normal((2, 2, 4, 4)).astype(np.float32)
    boxes, _ = decode(one_level_outputs(cls, reg))
    centers = np.stack(np.meshgrid(np.arange(4), np.arange(4)), -1).reshape(-1, 2) * 8 + 4
    assert np.all(boxes[:, :, 0] <= centers[None, :, 0] + 1e-9)
    assert np.all(boxes[:, :, 2] >= centers[None, :, 0] - 1e-9)


def test_decode_requires_a_regression_branch():
    cls = np.zeros((1, 2, 1, 1), dtype=np.float32)
    out = HeadOutputs(strides=(8,), af_cls=[Tensor(cls)])
    with pytest.raises(TensorError):
        decode(out)
    with pytest.raises(TensorError):
        decode(one_level_outputs(cls, np.zeros((1, 36, 1, 1), np.float32)),
               use_naive=True)


# -------------------------------------------------------------------------
# suppression
# -------------------------------------------------------------------------

def test_nms_identical_boxes_keep_highest():
    boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10.0]])
    scores = np.array([[0.8], [0.9]])
    out = nms(boxes, scores, conf_thresh=0.25, iou_thresh=0.65)
    assert len(out) == 1 and out[0].score == 0.9


def test_nms_disjoint_boxes_both_kept():
    boxes = np.array([[0, 0, 10, 10], [50, 50, 60, 60.0]])
    scores = np.array([[0.8], [0.9]])
    out = nms(boxes, scores)
    assert len(out) == 2
    assert out[0].score == 0.9  # sorted by descending score


def test_nms_class_awareness():
    boxes = np.array([[0, 0, 10, 10], [1, 1, 11, 11.0]])
    scores = np.array([[0.9, 0.0], [0.0, 0.8]])
    aware = nms(boxes, scores, class_aware=True)
    assert len(aware) == 2  # different classes never suppress each other
    blind = nms(boxes, scores, class_aware=False)
    assert len(blind) == 1


def test_nms_confidence_gate():
    boxes = np.array([[0, 0, 10, 10.0]])
    scores = np.array([[0.2]])
    assert nms(boxes, scores, conf_thresh=0.25) == []


def test_nms_matches_bruteforce_oracle():
    rng = np.random.default_rng(10)
    for trial in range(25):
        n = 200
        xy = rng.uniform(0, 80, size=(n, 2))
        wh = rng.uniform(4, 30, size=(n, 2))
        boxes = np.concatenate([xy, xy + wh], axis=1)
        scores = rng.uniform(0, 1, size=(n, 3))
        class_aware = bool(trial % 2)
        got = nms(boxes, scores, 0.25, 0.65, class_aware)
        want = nms_oracle(boxes, scores, 0.25, 0.65, class_aware)
        assert len(got) == len(want)
        for d, (a, c, s) in zip(got, want):
            assert d.class_id == c and d.score == pytest.approx(s)
            assert np.allclose(d.box, boxes[a])


def test_nms_order_independence():
    rng = np.random.default_rng(4)
    xy = rng.uniform(0, 40, size=(30, 2))
    boxes = np.concatenate([xy, xy + rng.uniform(5, 20, size=(30, 2))], axis=1)
    scores = rng.uniform(0.3, 1.0, size=(30, 2))
    base = nms(boxes, scores)
    perm = rng.permutation(30)
    shuffled = nms(boxes[perm], scores[perm])
    assert sorted((d.box, d.class_id, d.score) for d in base) == \
        sorted((d.box, d.class_id, d.score) for d in shuffled)


# -------------------------------------------------------------------------
# fusion pipeline
# -------------------------------------------------------------------------

def test_fuse_model_end_to_end_equivalence():
    ck, _ = trained_checkpoint()
    deploy_ck = fuse_model(ck)
    assert deploy_ck.form == "deploy"
    assert len(deploy_ck.params) < len(ck.params)
    assert not any(".bn." in n for n in deploy_ck.params)

    train_model = ck.build_model()
    from rbdet.network import strip_auxiliary
    strip_auxiliary(train_model)
    deploy_model = load_deploy_model(deploy_ck)
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(10):
        x = Tensor(rng.uniform(0, 1, size=(1, 3, 64, 64)).astype(np.float32))
        with no_grad():
            a = train_model.forward(x, mode="deploy", training=False)
            b = deploy_model.forward(x, mode="deploy", training=False)
        for ta, tb in zip(a.af_cls + a.af_reg_dist, b.af_cls + b.af_reg_dist):
            worst = max(worst, float(np.abs(ta.data - tb.data).max()))
    assert worst <= 1e-4, worst


def test_double_fuse_rejected():
    ck, _ = trained_checkpoint()
    deploy_ck = fuse_model(ck)
    with pytest.raises(CheckpointError):
        fuse_model(deploy_ck)


def test_fusing_uncalibrated_model_raises():
    model = build_model(ModelConfig(**SMALL), seed=0)
    ck = make_checkpoint(model, 0)
    with pytest.raises(FusionError):
        fuse_model(ck)


def test_load_deploy_model_rejects_train_form():
    ck, _ = trained_checkpoint()
    with pytest.raises(CheckpointError):
        load_deploy_model(ck)


# -------------------------------------------------------------------------
# inference plumbing
# -------------------------------------------------------------------------

class StubModel:
    """Emits a fixed one-hot box at one cell of an 8x8 stride-8 grid."""

    def __init__(self, cell=(3, 2), bins=(2, 1, 2, 1), cls_logit=4.0, nc=2):
        self.cell = cell
        self.bins = bins
        self.cls_logit = cls_logit
        self.nc = nc

    def forward(self, x, mode="deploy", training=False):
        n, _c, h, w = x.shape
        gh, gw = h // 8, w // 8
        cls = np.full((n, self.nc, gh, gw), -12.0, dtype=np.float32)
        reg = np.full((n, 36, gh, gw), -40.0, dtype=np.float32)
        i, j = self.cell
        cls[:, 1, i, j] = self.cls_logit
        for side, b in enumerate(self.bins):
            reg[:, side * 9 + b, i, j] = 40.0
        for ii in range(gh):  # benign distributions elsewhere
            for jj in range(gw):
                if (ii, jj) != (i, j):
                    reg[:, ::9, ii, jj] = 40.0
        return HeadOutputs(strides=(8,), af_cls=[Tensor(cls)],
                           af_reg_dist=[Tensor(reg)])


def test_infer_maps_back_to_original_pixels(tmp_path):
    # square image at the input size: transform is the identity
    img = np.zeros((64, 64, 3), dtype=np.uint8)
    model = StubModel(cell=(3, 2), bins=(2, 1, 2, 1))
    dets = infer(model, img, input_size=64)
    assert len(dets) == 1
    d = dets[0]
    # cell (3,2) center = (20, 28); l=16 t=8 r=16 b=8 in pixels
    assert np.allclose(d.box, (4.0, 20.0, 36.0, 36.0), atol=1e-3)
    assert d.class_id == 1

    p = tmp_path / "img.ppm"
    write_ppm(p, img)
    from_file = infer(model, str(p), input_size=64)
    assert np.allclose(from_file[0].box, d.box)


def test_infer_padding_side_invariance():
    # a wide image gets symmetric top/bottom pads; coordinates must come
    # back in the unpadded frame
    img = np.zeros((32, 64, 3), dtype=np.uint8)
    model = StubModel(cell=(3, 2), bins=(2, 1, 2, 1))
    dets = infer(model, img, input_size=64)
    assert len(dets) == 1
    x1, y1, x2, y2 = dets[0].box
    # input-frame box (4, 20, 36, 36) minus 16px top pad
    assert np.allclose((x1, y1, x2, y2), (4.0, 4.0, 36.0, 20.0), atol=1e-3)
    assert 0 <= y1 < y2 <= 32


def test_infer_blank_image_empty_at_default_confidence():
    ck, ds = trained_checkpoint()
    deploy_ck = fuse_model(ck)
    blank = np.full((64, 64, 3), 40, dtype=np.uint8)
    assert infer(deploy_ck, blank, input_size=64) == []


def test_infer_drops_detections_fully_in_padding():
    img = np.zeros((32, 64, 3), dtype=np.uint8)  # rows 0..15 are padding
    model = StubModel(cell=(0, 2), bins=(1, 1, 1, 1))
    dets = infer(model, img, input_size=64)
    assert dets == []  # box (12..28, -4..12) clips to zero height band


# -------------------------------------------------------------------------
# benchmark
# -------------------------------------------------------------------------

def test_benchmark_reports_consistent_stats():
    ck, _ = trained_checkpoint()
    deploy_ck = fuse_model(ck)
    out = benchmark(deploy_ck, input_size=64, batch_size=2, iterations=6,
                    warmup=1)
    assert out["min_s"] <= out["mean_s"] <= out["max_s"]
    assert out["min_s"] <= out["p50_s"] <= out["p99_s"] <= out["max_s"]
    assert out["throughput_ips"] == pytest.approx(2 / out["mean_s"])
    with pytest.raises(ValueError):
        benchmark(deploy_ck, iterations=0)
