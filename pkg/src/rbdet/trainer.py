"""Optimization loops and checkpointing.

Three entry points share one loop: plain training (optionally with the
anchor-based auxiliary), self-distillation against a frozen teacher with a
cosine-decayed mixing weight, and the decoupled protocol where only the
distribution branch receives distillation and is stripped afterwards.

Determinism contract: the per-epoch random stream is derived from
(seed, epoch), so resuming from a checkpoint replays exactly the batches
and augmentations an uninterrupted run would have seen.
"""

from __future__ import annotations

import dataclasses
import io
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import tensor as T
from .data import collate
from .errors import CheckpointError, NumericError
from .geometry import flatten_levels
from .losses import (AssignerSettings, DetectionObjective, LossWeights,
                     cosine_alpha, kd_loss, total_loss)
from .network import Model, ModelConfig, build_model, strip_auxiliary
from .tensor import Tensor

CHECKPOINT_MAGIC = b"RBCK"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    input_size: int = 64
    lr0: float = 0.02
    lr_f: float = 0.002
    momentum: float = 0.937
    weight_decay: float = 5e-4
    lr_warmup_epochs: int = 3
    seed: int = 0
    aat_enabled: bool = True
    distill: str = "off"  # off | standard | dld
    teacher_checkpoint: str | None = None
    kd_temperature: float = 1.0
    kd_foreground_only: bool = True
    dld_cls_kd: bool = True
    augment: bool = True
    flip_p: float = 0.5
    scale_jitter: tuple = (0.75, 1.25)
    weights: LossWeights = field(default_factory=LossWeights)
    assigner: AssignerSettings = field(default_factory=AssignerSettings)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.assigner, dict):
            self.assigner = AssignerSettings(**self.assigner)
        self.scale_jitter = tuple(self.scale_jitter)
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        if self.distill not in ("off", "standard", "dld"):
            raise ValueError(f"unknown distill mode {self.distill!r}")
        if self.distill != "off" and not self.teacher_checkpoint:
            raise ValueError(f"distill={self.distill!r} requires teacher_checkpoint")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scale_jitter"] = list(self.scale_jitter)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**dict(d))


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Cosine decay lr0 -> lr_f across the run, scaled by a linear ramp
    over the first warm-up epochs."""
    span = max(cfg.epochs - 1, 1)
    t = min(epoch, span) / span
    lr = cfg.lr_f + (cfg.lr0 - cfg.lr_f) * (1.0 + math.cos(math.pi * t)) / 2.0
    if cfg.lr_warmup_epochs > 0 and epoch < cfg.lr_warmup_epochs:
        lr *= (epoch + 1) / cfg.lr_warmup_epochs
    return lr


class SGD:
    """Momentum SGD; weight decay only on convolution kernels."""

    def __init__(self, model: Model, momentum=0.937, weight_decay=5e-4):
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self._params = list(model.named_parameters())
        self._velocity = OrderedDict(
            (name, np.zeros_like(p.data)) for name, p in self._params)

    def step(self, lr: float):
        for name, p in self._params:
            g = p.grad
            if g is None:
                continue
            g = g.astype(p.data.dtype, copy=True)
            if self.weight_decay and p.data.ndim == 4:
                g += self.weight_decay * p.data
            v = self._velocity[name]
            v *= self.momentum
            v += g
            p.data -= lr * v

    def state(self) -> OrderedDict:
        return OrderedDict((n, v.copy()) for n, v in self._velocity.items())

    def load_state(self, state: dict):
        missing = sorted(set(self._velocity) - set(state))
        extra = sorted(set(state) - set(self._velocity))
        if missing or extra:
            raise CheckpointError(
                f"optimizer state mismatch; missing {missing}, unexpected {extra}")
        for n, v in state.items():
            self._velocity[n][...] = v


# -------------------------------------------------------------------------
# checkpoints
# -------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    params: OrderedDict  # parameters and buffers, float32
    epoch: int
    form: str = "train"  # train | deploy
    opt_state: OrderedDict = field(default_factory=OrderedDict)
    train_config: dict | None = None

    def build_model(self) -> Model:
        model = build_model(self.config, seed=0)
        apply_state(model, self.params)
        return model


def state_dict(model: Model) -> OrderedDict:
    out = OrderedDict()
    for name, p in model.named_parameters():
        out[name] = p.data.astype(np.float32)
    for name, b in model.named_buffers():
        out[name] = b.astype(np.float32)
    return out


def apply_state(model: Model, params: dict):
    have = OrderedDict(model.named_parameters())
    bufs = OrderedDict(model.named_buffers())
    want = set(have) | set(bufs)
    missing = sorted(want - set(params))
    extra = sorted(set(params) - want)
    if missing or extra:
        raise CheckpointError(
            f"parameter names do not match the model; "
            f"missing {missing[:8]}{'...' if len(missing) > 8 else ''}, "
            f"unexpected {extra[:8]}{'...' if len(extra) > 8 else ''}"
        )
    for name, p in have.items():
        v = np.asarray(params[name])
        if v.shape != p.data.shape:
            raise CheckpointError(
                f"{name}: checkpoint shape {v.shape} vs model {p.data.shape}")
        p.data[...] = v.astype(p.data.dtype)
    for name, b in bufs.items():
        v = np.asarray(params[name])
        if v.shape != b.shape:
            raise CheckpointError(
                f"{name}: checkpoint shape {v.shape} vs model {b.shape}")
        b[...] = v.astype(b.dtype)


def make_checkpoint(model: Model, epoch: int, opt: SGD | None = None,
                    train_config: TrainConfig | None = None,
                    form: str = "train") -> Checkpoint:
    return Checkpoint(
        config=dataclasses.replace(model.config),
        params=state_dict(model),
        epoch=int(epoch),
        form=form,
        opt_state=opt.state() if opt is not None else OrderedDict(),
        train_config=train_config.to_dict() if train_config else None,
    )


def _write_record(f, name: str, arr: np.ndarray):
    encoded = name.encode("utf-8")
    data = np.asarray(arr, dtype="<f4", order="C")
    f.write(struct.pack("<H", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<B", data.ndim))
    for d in data.shape:
        f.write(struct.pack("<I", d))
    f.write(data.tobytes())


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = {
        "form": ckpt.form,
        "epoch": ckpt.epoch,
        "model_config": ckpt.config.to_dict(),
        "train_config": ckpt.train_config,
    }
    meta_b = yaml.safe_dump(meta, sort_keys=True).encode("utf-8")
    f = io.BytesIO()
    f.write(CHECKPOINT_MAGIC)
    f.write(struct.pack("<I", CHECKPOINT_VERSION))
    f.write(struct.pack("<Q", len(meta_b)))
    f.write(meta_b)
    records = [("model." + n, a) for n, a in ckpt.params.items()]
    records += [("opt." + n, a) for n, a in ckpt.opt_state.items()]
    f.write(struct.pack("<I", len(records)))
    for name, arr in records:
        _write_record(f, name, arr)
    return f.getvalue()


def save_checkpoint(ckpt: Checkpoint, path):
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(ckpt))


def _read_exact(f, n, what):
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return b


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (meta_len,) = struct.unpack("<Q", _read_exact(f, 8, "metadata length"))
        try:
            meta = yaml.safe_load(_read_exact(f, meta_len, "metadata").decode("utf-8"))
        except yaml.YAMLError as e:
            raise CheckpointError(f"{path}: bad metadata block: {e}") from e
        (n_records,) = struct.unpack("<I", _read_exact(f, 4, "record count"))
        params = OrderedDict()
        opt_state = OrderedDict()
        for _ in range(n_records):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, "rank"))
            shape = tuple(struct.unpack("<I", _read_exact(f, 4, "dim"))[0]
                          for _ in range(ndim))
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            arr = np.frombuffer(_read_exact(f, 4 * count, name), dtype="<f4")
            arr = arr.reshape(shape).copy()
            if name.startswith("model."):
                params[name[len("model."):]] = arr
            elif name.startswith("opt."):
                opt_state[name[len("opt."):]] = arr
            else:
                raise CheckpointError(f"{path}: unknown record {name!r}")
    return Checkpoint(
        config=ModelConfig.from_dict(meta["model_config"]),
        params=params,
        epoch=int(meta["epoch"]),
        form=meta["form"],
        opt_state=opt_state,
        train_config=meta.get("train_config"),
    )


# -------------------------------------------------------------------------
# training loops
# -------------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    loss: float
    parts: dict
    lr: float
    alpha: float = 0.0


def _epoch_rng(seed: int, epoch: int):
    return np.random.default_rng(np.random.SeedSequence([seed, epoch]))


def _forward_mode(cfg: TrainConfig, model: Model) -> str:
    use_aux = cfg.aat_enabled and model.config.head_branches.anchor_based_aux
    return "train" if use_aux else "deploy"


def distill_loss(objective: DetectionObjective, teacher_out, student_out,
                 gts, epoch: int, cfg: TrainConfig, dld: bool) -> Tensor:
    """Batch-mean KL against the teacher on teacher-foreground anchors.

    Classification distills the anchor-free class logits; regression
    distills the distribution branch (the enhanced branch under the
    decoupled protocol - the naive branch never appears here, so no
    distillation gradient can reach it).
    """
    use_cls = (not dld) or cfg.dld_cls_kd
    t_cls = flatten_levels(teacher_out.af_cls).data
    s_cls = flatten_levels(student_out.af_cls)
    use_reg = (teacher_out.af_reg_dist is not None
               and student_out.af_reg_dist is not None)
    if use_reg:
        t_reg = flatten_levels(teacher_out.af_reg_dist).data
        s_reg = flatten_levels(student_out.af_reg_dist)
        bins = t_reg.shape[-1] // 4
    if not use_cls and not use_reg:
        return Tensor(np.float32(0.0))

    if cfg.kd_foreground_only:
        assignments = objective.assign_anchor_free(teacher_out, gts, epoch)
        masks = [np.nonzero(r.fg_mask)[0] for r in assignments]
    else:
        masks = [np.arange(t_cls.shape[1])] * t_cls.shape[0]

    per_image = []
    for i, idx in enumerate(masks):
        if len(idx) == 0:
            continue
        cls_pair = (t_cls[i][idx], s_cls[i][idx]) if use_cls else (None, None)
        reg_pair = (None, None)
        if use_reg:
            reg_pair = (t_reg[i][idx].reshape(len(idx), 4, bins),
                        s_reg[i][idx].reshape(len(idx), 4, bins))
        per_image.append(kd_loss(cls_pair[0], cls_pair[1], reg_pair[0],
                                 reg_pair[1], cfg.kd_temperature))
    if not per_image:
        return Tensor(np.float32(0.0))
    acc = per_image[0]
    for term in per_image[1:]:
        acc = acc + term
    return acc * (1.0 / t_cls.shape[0])


def _fit(model: Model, dataset, cfg: TrainConfig, teacher: Model | None = None,
         dld: bool = False, start_epoch: int = 0, stop_after: int | None = None,
         opt: SGD | None = None, history: list | None = None,
         log=None) -> SGD:
    objective = DetectionObjective(model.config, cfg.weights, cfg.assigner)
    opt = opt or SGD(model, cfg.momentum, cfg.weight_decay)
    mode = _forward_mode(cfg, model)
    n = len(dataset)
    if n == 0:
        raise NumericError("cannot train on an empty dataset")
    last = cfg.epochs if stop_after is None else min(stop_after, cfg.epochs)
    alpha_span = max(cfg.epochs - 1, 1)

    for epoch in range(start_epoch, last):
        rng = _epoch_rng(cfg.seed, epoch)
        order = rng.permutation(n)
        lr = learning_rate(cfg, epoch)
        alpha = cosine_alpha(min(epoch, alpha_span), alpha_span) if teacher else 0.0
        sums = {}
        total = 0.0
        batches = 0
        for at in range(0, n, cfg.batch_size):
            batch = [dataset[i] for i in order[at:at + cfg.batch_size]]
            images, gts = collate(batch, cfg.input_size, rng=rng,
                                  train_augment=cfg.augment,
                                  flip_p=cfg.flip_p, scale_range=cfg.scale_jitter)
            x = Tensor(images)
            out = model.forward(x, mode=mode, training=True)
            det, parts = objective(out, gts, epoch)
            if teacher is not None:
                with T.no_grad():
                    t_out = teacher.forward(x, mode="deploy", training=False)
                kd = distill_loss(objective, t_out, out, gts, epoch, cfg, dld)
                loss = total_loss(det, kd, alpha)
                parts["kd"] = float(kd.data)
            else:
                loss = total_loss(det)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}")
            model.zero_grad()
            loss.backward()
            opt.step(lr)
            total += value
            batches += 1
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
        stats = EpochStats(
            epoch=epoch, loss=total / batches,
            parts={k: v / batches for k, v in sums.items()},
            lr=lr, alpha=alpha)
        if history is not None:
            history.append(stats)
        if log is not None:
            log(stats)
    return opt


def dataset_loss(model: Model, dataset, cfg: TrainConfig, epoch: int = 0) -> float:
    """Mean training-forward loss over the set, without updates or
    augmentation; used to compare states of the same model."""
    objective = DetectionObjective(model.config, cfg.weights, cfg.assigner)
    mode = _forward_mode(cfg, model)
    total = 0.0
    batches = 0
    for at in range(0, len(dataset), cfg.batch_size):
        batch = [dataset[i] for i in range(at, min(at + cfg.batch_size, len(dataset)))]
        images, gts = collate(batch, cfg.input_size)
        with T.no_grad():
            out = model.forward(Tensor(images), mode=mode, training=True)
        det, _ = objective(out, gts, epoch)
        total += float(det.data)
        batches += 1
    return total / max(batches, 1)


def train(cfg: TrainConfig, model: Model, dataset,
          stop_after: int | None = None, history: list | None = None,
          log=None) -> Checkpoint:
    """Base training; one backward over the summed branch losses."""
    if cfg.distill != "off":
        raise ValueError("use self_distill or dld_train when distillation is on")
    opt = _fit(model, dataset, cfg, stop_after=stop_after, history=history,
               log=log)
    epoch = cfg.epochs if stop_after is None else min(stop_after, cfg.epochs)
    return make_checkpoint(model, epoch, opt, cfg)


def resume(cfg: TrainConfig, dataset, ckpt: Checkpoint,
           history: list | None = None) -> tuple:
    """Continue an interrupted run; bit-identical to never stopping."""
    if ckpt.form != "train":
        raise CheckpointError("can only resume from a train-form checkpoint")
    model = ckpt.build_model()
    opt = SGD(model, cfg.momentum, cfg.weight_decay)
    if ckpt.opt_state:
        opt.load_state(ckpt.opt_state)
    opt = _fit(model, dataset, cfg, start_epoch=ckpt.epoch, opt=opt,
               history=history)
    return make_checkpoint(model, cfg.epochs, opt, cfg), model


def _check_same_architecture(student: Model, teacher: Model):
    s = {n: p.data.shape for n, p in student.named_parameters()}
    t = {n: p.data.shape for n, p in teacher.named_parameters()}
    bad = sorted(set(s) ^ set(t)) + sorted(
        n for n in set(s) & set(t) if s[n] != t[n])
    if bad:
        raise CheckpointError(
            f"teacher/student architectures diverge at: {bad[:12]}"
            f"{'...' if len(bad) > 12 else ''}"
        )


def load_teacher(teacher_ckpt) -> Model:
    ckpt = (teacher_ckpt if isinstance(teacher_ckpt, Checkpoint)
            else load_checkpoint(teacher_ckpt))
    if ckpt.form != "train":
        raise CheckpointError("teacher must be a train-form checkpoint")
    return ckpt.build_model()


def self_distill(cfg: TrainConfig, student: Model, teacher_ckpt, dataset,
                 history: list | None = None, log=None) -> Checkpoint:
    """Train the student with an extra KL term against a frozen teacher of
    identical architecture, weighted by the cosine-decayed alpha."""
    teacher = load_teacher(teacher_ckpt)
    _check_same_architecture(student, teacher)
    opt = _fit(student, dataset, cfg, teacher=teacher, history=history, log=log)
    return make_checkpoint(student, cfg.epochs, opt, cfg)


def dld_train(cfg: TrainConfig, student: Model, teacher_ckpt, dataset,
              history: list | None = None, log=None) -> Checkpoint:
    """Decoupled protocol: the naive regression branch sees hard labels
    only, the enhanced distribution branch receives the distillation and
    is stripped from the returned checkpoint."""
    hb = student.config.head_branches
    if not (hb.enhanced_dfl_aux and hb.naive_reg):
        raise CheckpointError(
            "decoupled distillation needs both the enhanced distribution "
            "branch and the naive regression branch in the student"
        )
    teacher = load_teacher(teacher_ckpt)
    if not teacher.config.has_dist_branch():
        raise CheckpointError("teacher checkpoint lacks the distribution branch")
    _check_same_architecture(student, teacher)
    opt = _fit(student, dataset, cfg, teacher=teacher, dld=True, history=history,
               log=log)
    strip_auxiliary(student)
    keep = {n for n, _ in student.named_parameters()}
    pruned = OrderedDict((n, v) for n, v in opt.state().items() if n in keep)
    ckpt = make_checkpoint(student, cfg.epochs, None, cfg)
    ckpt.opt_state = pruned
    return ckpt
