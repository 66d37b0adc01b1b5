"""Command-line front end: data generation, training, distillation,
fusion, evaluation, inference, benchmarking, and toggle ablations.

Option precedence, lowest to highest: built-in defaults, config file,
the RBDET_SEED environment variable (seed only), explicit flags.
Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np
import yaml

from .data import (SHAPE_NAMES, gen_synthetic, load_dataset_dir, read_ppm,
                   save_dataset)
from .deploy import benchmark, fuse_model, infer, load_deploy_model
from .errors import DataError, NumericError, RbdetError
from .evaluate import evaluate_ap
from .network import HeadBranches, ModelConfig, build_model
from .trainer import (TrainConfig, dld_train, load_checkpoint,
                      save_checkpoint, self_distill, train)


class _UsageError(Exception):
    """Bad flag/config combination; maps to exit code 2."""


# -------------------------------------------------------------------------
# config plumbing
# -------------------------------------------------------------------------

def _read_config(path):
    """Config file -> (model section, train section), both plain dicts."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise DataError(f"cannot read config {path}: {e}") from e
    raw = raw or {}
    if not isinstance(raw, dict):
        raise DataError(f"{path}: top level must be a mapping")
    unknown = sorted(set(raw) - {"model", "train"})
    if unknown:
        raise _UsageError(f"{path}: unknown config sections {unknown}; "
                          "expected 'model' and 'train'")
    model, train_ = raw.get("model") or {}, raw.get("train") or {}
    if not isinstance(model, dict) or not isinstance(train_, dict):
        raise _UsageError(f"{path}: 'model' and 'train' must be mappings")
    return model, train_


def _merged_train_config(args, file_cfg, distill_mode="off",
                         teacher=None) -> TrainConfig:
    d = dict(file_cfg)
    env = os.environ.get("RBDET_SEED")
    if env is not None:
        try:
            d["seed"] = int(env)
        except ValueError:
            raise _UsageError(f"RBDET_SEED must be an integer, got {env!r}")
    for key in ("epochs", "batch_size", "input_size", "lr0", "lr_f", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    if getattr(args, "aat", None) is not None:
        d["aat_enabled"] = args.aat == "on"
    if getattr(args, "augment", None) is not None:
        d["augment"] = args.augment == "on"
    if distill_mode != "off":
        d["distill"] = distill_mode
        d["teacher_checkpoint"] = teacher
    elif d.get("distill", "off") != "off":
        raise _UsageError("config enables distillation; use the distill "
                          "subcommand instead of train")
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise _UsageError(f"bad train config: {e}") from e


def _merged_model_config(args, file_cfg, num_classes) -> ModelConfig:
    d = dict(file_cfg)
    d.setdefault("num_classes", num_classes)
    if getattr(args, "width", None) is not None:
        d["width_multiple"] = args.width
    if getattr(args, "bic", None) is not None:
        d["use_bic"] = args.bic == "on"
    if getattr(args, "spp", None) is not None:
        d["spp_variant"] = args.spp
    hb = d.get("head_branches")
    hb = dict(hb) if isinstance(hb, dict) else (
        dataclasses.asdict(hb) if isinstance(hb, HeadBranches) else {})
    if getattr(args, "aat", None) is not None:
        hb["anchor_based_aux"] = args.aat == "on"
    else:
        # default training recipe keeps the anchor-based helpers on
        hb.setdefault("anchor_based_aux", True)
    d["head_branches"] = hb
    try:
        return ModelConfig(**d)
    except (TypeError, ValueError) as e:
        raise _UsageError(f"bad model config: {e}") from e


def _model_from(ckpt):
    return load_deploy_model(ckpt) if ckpt.form == "deploy" else ckpt.build_model()


def _check_classes(cfg: ModelConfig, dataset):
    if cfg.num_classes != len(dataset.class_names):
        raise _UsageError(
            f"model is configured for {cfg.num_classes} classes but the "
            f"dataset declares {len(dataset.class_names)}"
        )


def _epoch_line(st):
    line = f"epoch {st.epoch}: loss {st.loss:.4f} lr {st.lr:.5f}"
    if st.alpha:
        line += f" alpha {st.alpha:.3f}"
    parts = " ".join(f"{k}={v:.3f}" for k, v in sorted(st.parts.items()))
    print(f"{line} | {parts}", flush=True)


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1, sort_keys=True)


# -------------------------------------------------------------------------
# subcommands
# -------------------------------------------------------------------------

def _cmd_gen_data(args) -> int:
    ds = gen_synthetic(seed=args.seed, n_images=args.n_images,
                       image_size=args.image_size, classes=args.classes,
                       objects_per_image=args.objects, split=args.split)
    save_dataset(ds, args.out)
    n_boxes = sum(len(s.gt) for s in ds.samples)
    print(f"wrote {len(ds)} images, {n_boxes} boxes, "
          f"classes {','.join(ds.class_names)} -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    model_d, train_d = _read_config(args.config) if args.config else ({}, {})
    ds = load_dataset_dir(args.data, split="train")
    tcfg = _merged_train_config(args, train_d)
    mcfg = _merged_model_config(args, model_d, num_classes=len(ds.class_names))
    _check_classes(mcfg, ds)
    model = build_model(mcfg, seed=tcfg.seed)
    ckpt = train(tcfg, model, ds, log=_epoch_line)
    save_checkpoint(ckpt, args.out)
    print(f"saved train-form checkpoint ({len(ckpt.params)} records) "
          f"to {args.out}")
    return 0


def _cmd_distill(args) -> int:
    _, train_d = _read_config(args.config) if args.config else ({}, {})
    ds = load_dataset_dir(args.data, split="train")
    teacher_ckpt = load_checkpoint(args.teacher)
    tcfg = _merged_train_config(args, train_d, distill_mode=args.mode,
                                teacher=args.teacher)
    # the student mirrors the teacher architecture by definition
    mcfg = dataclasses.replace(teacher_ckpt.config)
    _check_classes(mcfg, ds)
    student = build_model(mcfg, seed=tcfg.seed)
    run = self_distill if args.mode == "standard" else dld_train
    ckpt = run(tcfg, student, teacher_ckpt, ds, log=_epoch_line)
    save_checkpoint(ckpt, args.out)
    print(f"saved distilled checkpoint ({args.mode}) to {args.out}")
    return 0


def _cmd_fuse(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    fused = fuse_model(ckpt)
    save_checkpoint(fused, args.out)
    print(f"fused {len(ckpt.params)} -> {len(fused.params)} parameter "
          f"records; wrote deploy-form checkpoint to {args.out}")
    return 0


def _resolved_input_size(args, ckpt) -> int:
    if args.input_size is not None:
        return args.input_size
    return int((ckpt.train_config or {}).get("input_size", 64))


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ds = load_dataset_dir(args.data, split="val")
    _check_classes(ckpt.config, ds)
    size = _resolved_input_size(args, ckpt)
    model = _model_from(ckpt)
    dets = [infer(model, s.image, input_size=size, conf_thresh=args.conf,
                  iou_thresh=args.iou) for s in ds.samples]
    report = evaluate_ap(dets, ds, input_size=size)
    for line in report.lines():
        print(line)
    if args.json_out:
        _write_json(args.json_out, report.to_dict())
    if args.coco_out:
        records = [d.to_coco(s.image_id)
                   for s, per in zip(ds.samples, dets) for d in per]
        _write_json(args.coco_out, records)
    return 0


def _cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    size = _resolved_input_size(args, ckpt)
    model = _model_from(ckpt)
    records = []
    for idx, path in enumerate(args.images):
        dets = infer(model, read_ppm(path), input_size=size,
                     conf_thresh=args.conf, iou_thresh=args.iou)
        for d in dets:
            print(f"{path}: {d.line()}")
        if not dets:
            print(f"{path}: no detections")
        records.extend(d.to_coco(idx) for d in dets)
    if args.coco_out:
        _write_json(args.coco_out, records)
    return 0


def _cmd_bench(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = _model_from(ckpt)
    out = benchmark(model, input_size=_resolved_input_size(args, ckpt),
                    batch_size=args.batch_size, iterations=args.iterations,
                    warmup=args.warmup)
    print(f"form {ckpt.form} batch {out['batch_size']} "
          f"input {out['input_size']}px iterations {out['iterations']}")
    print(f"mean {out['mean_s'] * 1e3:.2f} ms  p50 {out['p50_s'] * 1e3:.2f} ms  "
          f"p99 {out['p99_s'] * 1e3:.2f} ms  "
          f"throughput {out['throughput_ips']:.1f} img/s")
    if args.json_out:
        _write_json(args.json_out, out)
    return 0


# -------------------------------------------------------------------------
# ablations
# -------------------------------------------------------------------------

BASELINE_TOGGLES = {"bic": "on", "spp": "simsppf", "aat": "on",
                    "distill": "off"}


def _run_arm(toggles, seed, args):
    """Train and evaluate one toggle configuration on synthetic data."""
    classes = args.classes
    train_ds = gen_synthetic(seed=100 + seed, n_images=args.n_images,
                             image_size=args.image_size, classes=classes,
                             objects_per_image=(1, 3))
    val_ds = gen_synthetic(seed=900 + seed, n_images=args.val_images,
                           image_size=args.image_size, classes=classes,
                           objects_per_image=(1, 3), split="val")
    dual = toggles["distill"] == "dld"
    mcfg = ModelConfig(
        num_classes=len(classes),
        use_bic=toggles["bic"] == "on",
        spp_variant=toggles["spp"],
        head_branches=HeadBranches(anchor_based_aux=toggles["aat"] == "on",
                                   enhanced_dfl_aux=dual, naive_reg=dual),
    )
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                       input_size=args.image_size, seed=seed,
                       aat_enabled=toggles["aat"] == "on")
    if toggles["distill"] == "off":
        ckpt = train(tcfg, build_model(mcfg, seed=seed), train_ds)
    else:
        teacher = train(tcfg, build_model(mcfg, seed=seed), train_ds)
        dcfg = dataclasses.replace(tcfg, distill=toggles["distill"],
                                   teacher_checkpoint="(in-memory)")
        student = build_model(mcfg, seed=seed + 1)
        run = self_distill if toggles["distill"] == "standard" else dld_train
        ckpt = run(dcfg, student, teacher, train_ds)
    model = load_deploy_model(fuse_model(ckpt))
    dets = [infer(model, s.image, input_size=args.image_size, conf_thresh=0.01)
            for s in val_ds.samples]
    return evaluate_ap(dets, val_ds, input_size=args.image_size)


def _cmd_ablate(args) -> int:
    variant = {"bic": args.bic or BASELINE_TOGGLES["bic"],
               "spp": args.spp or BASELINE_TOGGLES["spp"],
               "aat": args.aat or BASELINE_TOGGLES["aat"],
               "distill": args.distill or BASELINE_TOGGLES["distill"]}
    if variant == BASELINE_TOGGLES:
        print("note: variant toggles match the baseline; deltas will be 0")
    arms = {"baseline": BASELINE_TOGGLES, "variant": variant}
    metrics = {}
    for name, toggles in arms.items():
        desc = " ".join(f"{k}={v}" for k, v in toggles.items())
        rows = []
        for seed in args.seeds:
            rep = _run_arm(toggles, seed, args)
            rows.append((rep.ap50, rep.ap, rep.ap_small))
            print(f"{name} [{desc}] seed {seed}: AP50 {rep.ap50:.4f} "
                  f"AP {rep.ap:.4f} AP_small {rep.ap_small:.4f}", flush=True)
        metrics[name] = np.median(np.array(rows), axis=0)

    names = ("AP50", "AP", "AP_small")
    print(f"{'metric':<10} {'baseline':>10} {'variant':>10} {'delta':>10}")
    for i, metric in enumerate(names):
        b, v = metrics["baseline"][i], metrics["variant"][i]
        print(f"{metric:<10} {b:>10.4f} {v:>10.4f} {v - b:>+10.4f}")
    if args.json_out:
        _write_json(args.json_out, {
            "baseline": dict(zip(names, metrics["baseline"].tolist())),
            "variant": dict(zip(names, metrics["variant"].tolist())),
            "toggles": variant,
            "seeds": list(args.seeds),
        })
    return 0


# -------------------------------------------------------------------------
# parser
# -------------------------------------------------------------------------

def _csv_classes(text):
    names = tuple(s for s in text.split(",") if s)
    if not names:
        raise argparse.ArgumentTypeError("expected a comma-separated list")
    return names


def _int_pair(text):
    try:
        lo, hi = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI integers, got {text!r}")
    return lo, hi


def _int_list(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}")


def _add_override_flags(sp, train_only=False):
    sp.add_argument("--config", help="config file with model/train sections")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int, dest="batch_size")
    sp.add_argument("--input-size", type=int, dest="input_size")
    sp.add_argument("--lr0", type=float)
    sp.add_argument("--lr-f", type=float, dest="lr_f")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--aat", choices=("on", "off"),
                    help="anchor-based auxiliary training branches")
    sp.add_argument("--augment", choices=("on", "off"))
    if not train_only:
        sp.add_argument("--width", type=float,
                        help="channel width multiple for the model")
        sp.add_argument("--bic", choices=("on", "off"),
                        help="three-level concatenation on the top-down path")
        sp.add_argument("--spp", choices=("simsppf", "simcspsppf"))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="rbdet",
        description="re-parameterizable shape detector: train, distill, "
                    "fuse, evaluate, infer, benchmark",
    )
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-data", _cmd_gen_data, "render a synthetic shape dataset")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-images", type=int, default=200, dest="n_images")
    sp.add_argument("--image-size", type=int, default=64, dest="image_size")
    sp.add_argument("--classes", type=_csv_classes, default=SHAPE_NAMES)
    sp.add_argument("--objects", type=_int_pair, default=(1, 3),
                    help="LO,HI objects per image")
    sp.add_argument("--split", default="train")

    sp = add("train", _cmd_train, "train a model from scratch")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--out", required=True, help="checkpoint path")
    _add_override_flags(sp)

    sp = add("distill", _cmd_distill,
             "train a student against a frozen teacher checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--teacher", required=True, help="teacher checkpoint")
    sp.add_argument("--mode", choices=("standard", "dld"), default="standard")
    _add_override_flags(sp, train_only=True)

    sp = add("fuse", _cmd_fuse,
             "merge branches and fold norms into a deploy-form checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)

    sp = add("eval", _cmd_eval, "run detection and report average precision")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--input-size", type=int, dest="input_size")
    sp.add_argument("--conf", type=float, default=0.01,
                    help="score floor; low by default to sweep the PR curve")
    sp.add_argument("--iou", type=float, default=0.65,
                    help="suppression overlap threshold")
    sp.add_argument("--json-out", dest="json_out")
    sp.add_argument("--coco-out", dest="coco_out",
                    help="write detections as COCO result records")

    sp = add("infer", _cmd_infer, "detect objects in image files")
    sp.add_argument("images", nargs="+", metavar="IMAGE")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input-size", type=int, dest="input_size")
    sp.add_argument("--conf", type=float, default=0.25)
    sp.add_argument("--iou", type=float, default=0.65)
    sp.add_argument("--coco-out", dest="coco_out")

    sp = add("bench", _cmd_bench, "measure forward-pass wall-clock latency")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input-size", type=int, dest="input_size")
    sp.add_argument("--batch-size", type=int, default=1, dest="batch_size")
    sp.add_argument("--iterations", type=int, default=20)
    sp.add_argument("--warmup", type=int, default=3)
    sp.add_argument("--json-out", dest="json_out")

    sp = add("ablate", _cmd_ablate,
             "compare a toggle configuration against the default recipe")
    sp.add_argument("--bic", choices=("on", "off"))
    sp.add_argument("--spp", choices=("simsppf", "simcspsppf"))
    sp.add_argument("--aat", choices=("on", "off"))
    sp.add_argument("--distill", choices=("off", "standard", "dld"))
    sp.add_argument("--seeds", type=_int_list, default=(0,))
    sp.add_argument("--epochs", type=int, default=12)
    sp.add_argument("--batch-size", type=int, default=8, dest="batch_size")
    sp.add_argument("--n-images", type=int, default=96, dest="n_images")
    sp.add_argument("--val-images", type=int, default=32, dest="val_images")
    sp.add_argument("--image-size", type=int, default=64, dest="image_size")
    sp.add_argument("--classes", type=_csv_classes, default=("square", "disk"))
    sp.add_argument("--json-out", dest="json_out")
    return p


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if not e.code else int(e.code)
    try:
        return args.func(args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except (RbdetError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


def main():
    sys.exit(cli())


if __name__ == "__main__":
    main()
