"""Detector assembly: backbone, bidirectional-concat PAN neck and the
decoupled head with anchor-free, anchor-based auxiliary and distribution
regression branches.

Construction is deterministic given (config, seed); parameter names follow
``backbone.stage{i}.{block}.{param}`` and stay stable across versions, which
is what checkpoints key on.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import (BiC, ConvBN, CSPStackRep, Module, PanFuse, RepBlock,
                     RepConv, SimCSPSPPF, SimSPPF)
from .errors import TensorError
from .tensor import Tensor

PRIOR_PROB = 0.01  # initial foreground rate for classification bias


@dataclass
class HeadBranches:
    anchor_free: bool = True
    anchor_based_aux: bool = False
    enhanced_dfl_aux: bool = False
    naive_reg: bool = False


@dataclass
class ModelConfig:
    num_classes: int = 80
    width_multiple: float = 1.0
    depth_multiple: float = 1.0
    use_p6: bool = False
    reg_max: int = 8
    spp_variant: str = "simsppf"
    use_bic: bool = True
    block_family: str = "rep"
    head_branches: HeadBranches = field(default_factory=HeadBranches)
    base_widths: tuple = (16, 32, 64, 128)
    strides: tuple = ()

    def __post_init__(self):
        if isinstance(self.head_branches, dict):
            self.head_branches = HeadBranches(**self.head_branches)
        if not self.strides:
            self.strides = (8, 16, 32, 64) if self.use_p6 else (8, 16, 32)
        self.strides = tuple(int(s) for s in self.strides)
        for a, b in zip(self.strides, self.strides[1:]):
            if b <= a:
                raise ValueError(f"strides must be strictly increasing, got {self.strides}")
        for s in self.strides:
            if s < 1 or s & (s - 1):
                raise ValueError(f"stride {s} is not a power of two")
        if self.reg_max < 1:
            raise ValueError(f"reg_max must be >= 1, got {self.reg_max}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if not self.head_branches.anchor_free:
            raise ValueError("the anchor-free branch cannot be disabled")
        if self.head_branches.enhanced_dfl_aux and not self.head_branches.naive_reg:
            raise ValueError(
                "enhanced_dfl_aux marks the distribution branch as auxiliary; "
                "that requires naive_reg so a regression branch survives stripping"
            )
        if self.spp_variant not in ("simsppf", "simcspsppf"):
            raise ValueError(f"unknown spp_variant {self.spp_variant!r}")
        if self.block_family not in ("rep", "csp"):
            raise ValueError(f"unknown block_family {self.block_family!r}")

    # -- derived structure --------------------------------------------
    def c_levels(self) -> tuple:
        return (2, 3, 4, 5, 6) if self.use_p6 else (2, 3, 4, 5)

    def widths(self) -> dict:
        base = dict(zip((2, 3, 4, 5), self.base_widths))
        if self.use_p6:
            base[6] = 2 * base[5]
        return {lvl: max(1, round(w * self.width_multiple)) for lvl, w in base.items()}

    def stage_depth(self) -> int:
        return max(1, round(self.depth_multiple))

    def head_levels(self) -> list:
        # head level i sees stride 2**i; strides (8,16,32) map to levels 3..5
        return [int(np.log2(s)) for s in self.strides]

    def has_dist_branch(self) -> bool:
        hb = self.head_branches
        return hb.enhanced_dfl_aux or not hb.naive_reg

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["base_widths"] = list(self.base_widths)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["base_widths"] = tuple(d.get("base_widths", (16, 32, 64, 128)))
        d["strides"] = tuple(d.get("strides", ()))
        return cls(**d)


@dataclass
class HeadOutputs:
    """Per-level raw head maps; lists are ordered by ascending stride."""

    strides: tuple
    af_cls: list
    af_reg_dist: list | None = None
    af_reg_naive: list | None = None
    ab_cls: list | None = None
    ab_reg: list | None = None

    def level_hw(self) -> list:
        return [(t.shape[2], t.shape[3]) for t in self.af_cls]


class Stage(Module):
    """Stride-2 downsample followed by the stage block family."""

    def __init__(self, cin, cout, depth, family, rng, dtype=np.float32):
        self.down = RepConv(cin, cout, stride=2, rng=rng, dtype=dtype)
        if family == "rep":
            self.block = RepBlock(cout, cout, n=depth, rng=rng, dtype=dtype)
        else:
            self.block = CSPStackRep(cout, cout, n=depth, rng=rng, dtype=dtype)

    def forward(self, x, training=False):
        return self.block.forward(self.down.forward(x, training), training)

    def fuse(self):
        out = Stage.__new__(Stage)
        out.down = self.down.fuse()
        out.block = self.block.fuse()
        return out


class Backbone(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        widths = cfg.widths()
        depth = cfg.stage_depth()
        stem_w = max(1, widths[2] // 2)
        self.stem = RepConv(3, stem_w, stride=2, rng=rng, dtype=dtype)
        prev = stem_w
        for lvl in cfg.c_levels():
            setattr(self, f"stage{lvl}",
                    Stage(prev, widths[lvl], depth, cfg.block_family, rng, dtype))
            prev = widths[lvl]
        spp_cls = SimSPPF if cfg.spp_variant == "simsppf" else SimCSPSPPF
        self.spp = spp_cls(prev, prev, rng=rng, dtype=dtype)
        self.levels = cfg.c_levels()

    def forward(self, images: Tensor, training=False) -> dict:
        if images.ndim != 4 or images.shape[1] != 3:
            raise TensorError(
                f"backbone expects images of shape [N,3,H,W], got {images.shape}"
            )
        x = self.stem.forward(images, training)
        feats = {}
        for lvl in self.levels:
            x = getattr(self, f"stage{lvl}").forward(x, training)
            feats[f"C{lvl}"] = x
        feats[f"C{self.levels[-1]}"] = self.spp.forward(x, training)
        return feats

    def fuse(self):
        out = Backbone.__new__(Backbone)
        out.stem = self.stem.fuse()
        for lvl in self.levels:
            setattr(out, f"stage{lvl}", getattr(self, f"stage{lvl}").fuse())
        out.spp = self.spp.fuse()
        out.levels = self.levels
        return out


class Neck(Module):
    """Top-down pathway with three-level concat fusion (or plain two-input
    fusion when disabled), then a bottom-up PAN pathway.

    The top C level is reduced by 1x1 conv before upsampling; the reduced
    maps double as the bottom-up laterals.
    """

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        widths = cfg.widths()
        depth = cfg.stage_depth()
        self.top = cfg.c_levels()[-1]
        self.use_bic = cfg.use_bic
        for lvl in range(self.top - 1, 2, -1):
            setattr(self, f"reduce{lvl + 1}",
                    ConvBN(widths[lvl + 1], widths[lvl], 1, rng=rng, dtype=dtype))
            if cfg.use_bic:
                fuse = BiC(widths[lvl - 1], widths[lvl], widths[lvl], rng=rng, dtype=dtype)
            else:
                fuse = PanFuse(widths[lvl], widths[lvl], rng=rng, dtype=dtype)
            setattr(self, f"fuse{lvl}", fuse)
            setattr(self, f"td{lvl}", RepBlock(widths[lvl], widths[lvl], n=depth,
                                               rng=rng, dtype=dtype))
        for lvl in range(3, self.top):
            setattr(self, f"down{lvl}",
                    ConvBN(widths[lvl], widths[lvl], 3, stride=2, rng=rng, dtype=dtype))
            setattr(self, f"bu{lvl + 1}",
                    RepBlock(2 * widths[lvl], widths[lvl + 1], n=depth, rng=rng,
                             dtype=dtype))

    def forward(self, feats: dict, training=False) -> list:
        if self.use_bic and "C2" not in feats:
            raise TensorError(
                "three-level concat fusion needs the C2 feature map; it is "
                "missing from the backbone outputs"
            )
        for lvl in range(3, self.top + 1):
            if f"C{lvl}" not in feats:
                raise TensorError(f"neck input is missing level C{lvl}")
        cur = feats[f"C{self.top}"]
        reduced = {}
        pyramid = {}
        for lvl in range(self.top - 1, 2, -1):
            r = getattr(self, f"reduce{lvl + 1}").forward(cur, training)
            reduced[lvl + 1] = r
            fuse = getattr(self, f"fuse{lvl}")
            if self.use_bic:
                merged = fuse.forward(feats[f"C{lvl - 1}"], feats[f"C{lvl}"], r, training)
            else:
                merged = fuse.forward(feats[f"C{lvl}"], r, training)
            cur = getattr(self, f"td{lvl}").forward(merged, training)
            pyramid[lvl] = cur
        outs = [pyramid[3]]
        cur = pyramid[3]
        for lvl in range(3, self.top):
            d = getattr(self, f"down{lvl}").forward(cur, training)
            cat = T.concat([d, reduced[lvl + 1]], axis=1)
            cur = getattr(self, f"bu{lvl + 1}").forward(cat, training)
            outs.append(cur)
        return outs

    def fuse(self):
        out = Neck.__new__(Neck)
        out.top = self.top
        out.use_bic = self.use_bic
        for name, child in self._entries():
            if isinstance(child, Module):
                setattr(out, name, child.fuse())
        return out


class HeadLevel(Module):
    """One pyramid level: shared 3x3 stem, then 1x1 branch heads.

    Branches split after the stem, so deleting auxiliaries cannot change the
    surviving outputs.
    """

    def __init__(self, cin, cfg: ModelConfig, rng, dtype=np.float32):
        nc = cfg.num_classes
        hb = cfg.head_branches
        cls_bias = -float(np.log((1.0 - PRIOR_PROB) / PRIOR_PROB))
        self.stem = ConvBN(cin, cin, 3, rng=rng, dtype=dtype)
        self.af_cls = ConvBN(cin, nc, 1, act=None, with_bn=False,
                             bias_init=cls_bias, rng=rng, dtype=dtype)
        if cfg.has_dist_branch():
            self.af_reg_dist = ConvBN(cin, 4 * (cfg.reg_max + 1), 1, act=None,
                                      with_bn=False, rng=rng, dtype=dtype)
        if hb.naive_reg:
            # bias 1.0: every anchor starts as a valid 2-stride box, so the
            # box loss has gradient everywhere; a zero init decodes to
            # degenerate points whose clipped overlap terms are flat
            self.af_reg_naive = ConvBN(cin, 4, 1, act=None, with_bn=False,
                                       bias_init=1.0, rng=rng, dtype=dtype)
        if hb.anchor_based_aux:
            self.ab_cls = ConvBN(cin, nc, 1, act=None, with_bn=False,
                                 bias_init=cls_bias, rng=rng, dtype=dtype)
            self.ab_reg = ConvBN(cin, 4, 1, act=None, with_bn=False, rng=rng,
                                 dtype=dtype)

    def forward(self, x, mode="train", training=False) -> dict:
        s = self.stem.forward(x, training)
        out = {"af_cls": self.af_cls.forward(s, training)}
        for name in ("af_reg_dist", "af_reg_naive"):
            if hasattr(self, name):
                out[name] = getattr(self, name).forward(s, training)
        if mode == "train":
            for name in ("ab_cls", "ab_reg"):
                if hasattr(self, name):
                    out[name] = getattr(self, name).forward(s, training)
        return out

    def fuse(self):
        out = HeadLevel.__new__(HeadLevel)
        for name, child in self._entries():
            if isinstance(child, Module):
                setattr(out, name, child.fuse())
        return out


class Head(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        widths = cfg.widths()
        self.strides = cfg.strides
        for stride, lvl in zip(cfg.strides, cfg.head_levels()):
            setattr(self, f"level{stride}", HeadLevel(widths[lvl], cfg, rng, dtype))

    def forward(self, pyramid: list, mode="train", training=False) -> HeadOutputs:
        per_level = []
        for stride, feat in zip(self.strides, pyramid):
            per_level.append(getattr(self, f"level{stride}").forward(feat, mode, training))
        keys = per_level[0].keys()
        cols = {k: [d[k] for d in per_level] for k in keys}
        return HeadOutputs(
            strides=self.strides,
            af_cls=cols["af_cls"],
            af_reg_dist=cols.get("af_reg_dist"),
            af_reg_naive=cols.get("af_reg_naive"),
            ab_cls=cols.get("ab_cls"),
            ab_reg=cols.get("ab_reg"),
        )

    def fuse(self):
        out = Head.__new__(Head)
        out.strides = self.strides
        for stride in self.strides:
            setattr(out, f"level{stride}", getattr(self, f"level{stride}").fuse())
        return out


class Model(Module):
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(config, rng, dtype)
        self.neck = Neck(config, rng, dtype)
        self.head = Head(config, rng, dtype)
        self.config = dataclasses.replace(
            config, head_branches=dataclasses.replace(config.head_branches))
        self.seed = seed

    def forward(self, images: Tensor, mode="train", training=False) -> HeadOutputs:
        feats = self.backbone.forward(images, training)
        pyramid = self.neck.forward(feats, training)
        return self.head.forward(pyramid, mode, training)

    def fuse(self) -> "Model":
        out = Model.__new__(Model)
        out.backbone = self.backbone.fuse()
        out.neck = self.neck.fuse()
        out.head = self.head.fuse()
        out.config = dataclasses.replace(
            self.config, head_branches=dataclasses.replace(self.config.head_branches))
        out.seed = self.seed
        return out


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    return Model(config, seed, dtype)


def strip_auxiliary(model: Model) -> Model:
    """Delete train-only branches in place.

    Anchor-based heads always go; when the distribution branch was marked
    auxiliary (a retained naive branch exists), it goes too.  Surviving
    branch outputs are untouched because branches share nothing except the
    stem.  Stripping a model with nothing to strip warns and no-ops.
    """
    hb = model.config.head_branches
    drop_dist = hb.enhanced_dfl_aux and hb.naive_reg
    stripped = False
    for stride in model.head.strides:
        level = getattr(model.head, f"level{stride}")
        for name in ("ab_cls", "ab_reg"):
            if hasattr(level, name):
                delattr(level, name)
                stripped = True
        if drop_dist and hasattr(level, "af_reg_dist"):
            delattr(level, "af_reg_dist")
            stripped = True
    if not stripped:
        warnings.warn("model has no auxiliary branches to strip", stacklevel=2)
        return model
    model.config.head_branches = dataclasses.replace(
        hb, anchor_based_aux=False,
        enhanced_dfl_aux=False if drop_dist else hb.enhanced_dfl_aux)
    return model
