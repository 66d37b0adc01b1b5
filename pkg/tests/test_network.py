"""Model assembly tests: config validation, pyramid shape laws, branch
wiring, auxiliary stripping and whole-model fusion."""

import warnings

import numpy as np
import pytest

from rbdet.network import (HeadBranches, Model, ModelConfig, Neck, build_model,
                           strip_auxiliary)
from rbdet.errors import TensorError
from rbdet.tensor import Tensor


def rand_image(rng, size=64, n=1):
    return Tensor(rng.standard_normal((n, 3, size, size)).astype(np.float32))


def dld_branches(**kw):
    return HeadBranches(anchor_based_aux=True, enhanced_dfl_aux=True,
                        naive_reg=True, **kw)


# -------------------------------------------------------------------------
# config
# -------------------------------------------------------------------------

def test_config_defaults():
    cfg = ModelConfig()
    assert cfg.strides == (8, 16, 32)
    assert cfg.reg_max == 8
    assert ModelConfig(use_p6=True).strides == (8, 16, 32, 64)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(strides=(8, 8, 16))
    with pytest.raises(ValueError):
        ModelConfig(strides=(8, 12, 16))
    with pytest.raises(ValueError):
        ModelConfig(reg_max=0)
    with pytest.raises(ValueError):
        ModelConfig(num_classes=0)
    with pytest.raises(ValueError):
        ModelConfig(head_branches=HeadBranches(anchor_free=False))
    with pytest.raises(ValueError):
        # a distribution branch marked auxiliary needs a surviving branch
        ModelConfig(head_branches=HeadBranches(enhanced_dfl_aux=True))
    with pytest.raises(ValueError):
        ModelConfig(spp_variant="sppf")
    with pytest.raises(ValueError):
        ModelConfig(block_family="elan")


def test_config_round_trips_through_dict():
    cfg = ModelConfig(num_classes=2, use_p6=True, head_branches=dld_branches())
    again = ModelConfig.from_dict(cfg.to_dict())
    assert again == cfg


# -------------------------------------------------------------------------
# build determinism and parameter counts
# -------------------------------------------------------------------------

def test_build_is_deterministic_and_count_frozen():
    a = build_model(ModelConfig(), seed=0)
    b = build_model(ModelConfig(), seed=0)
    # construction audit, frozen: widths (16,32,64,128), depths 1, 80 classes
    assert a.param_count() == 975052
    pa, pb = dict(a.named_parameters()), dict(b.named_parameters())
    assert pa.keys() == pb.keys()
    for k in pa:
        assert np.array_equal(pa[k].data, pb[k].data), k
    c = build_model(ModelConfig(), seed=1)
    assert any(not np.array_equal(pa[k].data, p.data)
               for k, p in c.named_parameters())


def test_width_doubling_roughly_quadruples_conv_params():
    def conv_params(m):
        return sum(p.size for n, p in m.named_parameters() if n.endswith("weight"))

    ratio = conv_params(build_model(ModelConfig(width_multiple=2.0))) / \
        conv_params(build_model(ModelConfig()))
    assert 3.5 < ratio < 4.5


def test_depth_multiple_scales_units():
    shallow = build_model(ModelConfig(num_classes=2))
    deep = build_model(ModelConfig(num_classes=2, depth_multiple=2.0))
    assert deep.param_count() > shallow.param_count()
    names = {n for n, _ in deep.named_parameters()}
    assert any("block.units.1" in n for n in names)


# -------------------------------------------------------------------------
# backbone
# -------------------------------------------------------------------------

def test_backbone_shape_law_64():
    m = build_model(ModelConfig(num_classes=2), seed=0)
    feats = m.backbone.forward(rand_image(np.random.default_rng(0)))
    assert feats["C2"].shape == (1, 16, 16, 16)
    assert feats["C3"].shape == (1, 32, 8, 8)
    assert feats["C4"].shape == (1, 64, 4, 4)
    assert feats["C5"].shape == (1, 128, 2, 2)


def test_backbone_zero_image_gives_zero_features():
    m = build_model(ModelConfig(num_classes=2), seed=0)
    feats = m.backbone.forward(Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32)))
    for lvl, t in feats.items():
        assert np.all(t.data == 0.0), lvl


def test_backbone_rejects_bad_input():
    m = build_model(ModelConfig(num_classes=2), seed=0)
    with pytest.raises(TensorError):
        m.backbone.forward(Tensor(np.zeros((1, 1, 64, 64), dtype=np.float32)))


def test_csp_block_family_builds_and_runs():
    m = build_model(ModelConfig(num_classes=2, block_family="csp"), seed=0)
    out = m.forward(rand_image(np.random.default_rng(1)), mode="deploy")
    assert out.af_cls[0].shape == (1, 2, 8, 8)
    assert any("pairs.0" in n for n, _ in m.named_parameters())


# -------------------------------------------------------------------------
# neck
# -------------------------------------------------------------------------

def leaf_pyramid(requires_grad=True, size=64):
    rng = np.random.default_rng(7)
    widths = {2: 16, 3: 32, 4: 64, 5: 128}
    feats = {}
    for lvl, w in widths.items():
        s = size // (1 << lvl)
        feats[f"C{lvl}"] = Tensor(
            rng.standard_normal((1, w, s, s)).astype(np.float32),
            requires_grad=requires_grad)
    return feats


def test_neck_shape_law():
    m = build_model(ModelConfig(num_classes=2), seed=0)
    outs = m.neck.forward(leaf_pyramid(False))
    assert [t.shape for t in outs] == [(1, 32, 8, 8), (1, 64, 4, 4), (1, 128, 2, 2)]


def test_neck_missing_c2_with_bic_errors():
    m = build_model(ModelConfig(num_classes=2), seed=0)
    feats = leaf_pyramid(False)
    del feats["C2"]
    with pytest.raises(TensorError) as ei:
        m.neck.forward(feats)
    assert "C2" in str(ei.value)
    # without the three-level fusion the same inputs are sufficient
    m2 = build_model(ModelConfig(num_classes=2, use_bic=False), seed=0)
    outs = m2.neck.forward(feats)
    assert outs[0].shape == (1, 32, 8, 8)


def test_bic_toggle_changes_parameter_names():
    with_bic = {n for n, _ in build_model(ModelConfig(num_classes=2)).named_parameters()}
    without = {n for n, _ in build_model(
        ModelConfig(num_classes=2, use_bic=False)).named_parameters()}
    assert any("fuse3.proj_prev" in n for n in with_bic)
    assert any("fuse3.down_prev" in n for n in with_bic)
    assert not any("proj_prev" in n or "down_prev" in n for n in without)
    assert any("fuse3.proj_cur" in n for n in without)


def test_gradient_reaches_c2_leaf_iff_bic():
    for use_bic in (True, False):
        m = build_model(ModelConfig(num_classes=2, use_bic=use_bic), seed=0)
        feats = leaf_pyramid(True)
        outs = m.neck.forward(feats)
        outs[0].sum().backward()  # loss on the stride-8 level only
        if use_bic:
            assert feats["C2"].grad is not None
            assert np.abs(feats["C2"].grad).max() > 0.0
        else:
            assert feats["C2"].grad is None


# -------------------------------------------------------------------------
# head
# -------------------------------------------------------------------------

def test_head_channel_laws():
    cfg = ModelConfig(num_classes=7, reg_max=12, head_branches=dld_branches())
    m = build_model(cfg, seed=0)
    out = m.forward(rand_image(np.random.default_rng(2)), mode="train")
    for i in range(3):
        assert out.af_cls[i].shape[1] == 7
        assert out.af_reg_dist[i].shape[1] == 4 * 13
        assert out.af_reg_naive[i].shape[1] == 4
        assert out.ab_cls[i].shape[1] == 7
        assert out.ab_reg[i].shape[1] == 4


def test_head_branch_combinations():
    out = build_model(ModelConfig(num_classes=2), seed=0).forward(
        rand_image(np.random.default_rng(3)))
    assert out.af_reg_dist is not None and out.af_reg_naive is None

    deployed_dld = ModelConfig(num_classes=2,
                               head_branches=HeadBranches(naive_reg=True))
    out = build_model(deployed_dld, seed=0).forward(rand_image(np.random.default_rng(3)))
    assert out.af_reg_dist is None and out.af_reg_naive is not None


def test_deploy_mode_emits_no_anchor_based_outputs():
    cfg = ModelConfig(num_classes=2, head_branches=dld_branches())
    m = build_model(cfg, seed=0)
    x = rand_image(np.random.default_rng(4))
    train_out = m.forward(x, mode="train")
    deploy_out = m.forward(x, mode="deploy")
    assert train_out.ab_cls is not None
    assert deploy_out.ab_cls is None and deploy_out.ab_reg is None
    for a, b in zip(train_out.af_cls, deploy_out.af_cls):
        assert np.array_equal(a.data, b.data)


def test_classification_bias_initialised_to_prior():
    m = build_model(ModelConfig(num_classes=2), seed=0)
    b = getattr(m.head, "level8").af_cls.bias.data
    assert np.allclose(b, -np.log(99.0), atol=1e-5)


# -------------------------------------------------------------------------
# stripping
# -------------------------------------------------------------------------

def test_strip_auxiliary_preserves_outputs_exactly():
    cfg = ModelConfig(num_classes=2, head_branches=dld_branches())
    m = build_model(cfg, seed=0)
    rng = np.random.default_rng(5)
    images = [rand_image(rng) for _ in range(10)]
    before = [m.forward(x, mode="deploy") for x in images]
    n_before = m.param_count()
    strip_auxiliary(m)
    n_after = m.param_count()
    assert n_after < n_before
    assert not m.config.head_branches.anchor_based_aux
    assert not m.config.head_branches.enhanced_dfl_aux
    assert m.config.head_branches.naive_reg
    for x, ref in zip(images, before):
        out = m.forward(x, mode="deploy")
        assert out.af_reg_dist is None  # the distribution branch was auxiliary
        for a, b in zip(ref.af_cls, out.af_cls):
            assert np.array_equal(a.data, b.data)
        for a, b in zip(ref.af_reg_naive, out.af_reg_naive):
            assert np.array_equal(a.data, b.data)


def test_strip_without_auxiliaries_warns_and_noops():
    m = build_model(ModelConfig(num_classes=2), seed=0)
    n = m.param_count()
    with pytest.warns(UserWarning):
        strip_auxiliary(m)
    assert m.param_count() == n


def test_double_strip_is_idempotent():
    cfg = ModelConfig(num_classes=2, head_branches=dld_branches())
    m = build_model(cfg, seed=0)
    strip_auxiliary(m)
    n = m.param_count()
    with pytest.warns(UserWarning):
        strip_auxiliary(m)
    assert m.param_count() == n


def test_stripped_config_rebuilds_same_shape():
    cfg = ModelConfig(num_classes=2, head_branches=dld_branches())
    m = build_model(cfg, seed=0)
    strip_auxiliary(m)
    rebuilt = build_model(m.config, seed=0)
    assert {n for n, _ in rebuilt.named_parameters()} == \
        {n for n, _ in m.named_parameters()}


# -------------------------------------------------------------------------
# gradient audit and whole-model fusion
# -------------------------------------------------------------------------

def test_every_parameter_reachable_from_training_loss():
    cfg = ModelConfig(num_classes=2, head_branches=dld_branches())
    m = build_model(cfg, seed=3)
    x = rand_image(np.random.default_rng(6), n=2)
    out = m.forward(x, mode="train", training=True)
    total = None
    for group in (out.af_cls, out.af_reg_dist, out.af_reg_naive, out.ab_cls, out.ab_reg):
        for t in group:
            s = (t * t).sum()
            total = s if total is None else total + s
    total.backward()
    dead = [n for n, p in m.named_parameters()
            if p.grad is None or np.abs(p.grad).max() == 0.0]
    assert not dead, f"parameters with no gradient: {dead}"


def test_fused_model_matches_calibrated_eval():
    cfg = ModelConfig(num_classes=2)
    m = build_model(cfg, seed=0)
    rng = np.random.default_rng(8)
    for _ in range(25):  # settle the running statistics
        m.forward(rand_image(rng), mode="train", training=True)
    x = rand_image(rng)
    a = m.forward(x, mode="deploy", training=False)
    fused = m.fuse()
    b = fused.forward(x, mode="deploy", training=False)
    for ta, tb in zip(a.af_cls + a.af_reg_dist, b.af_cls + b.af_reg_dist):
        scale = max(np.abs(ta.data).max(), 1.0)
        assert np.abs(ta.data - tb.data).max() / scale <= 1e-5
    # the fused model carries no norm layers
    assert not any("bn." in n for n, _ in fused.named_parameters())
