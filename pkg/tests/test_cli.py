"""End-to-end command-line behavior: pipelines, config precedence, exit codes."""

import json
import os

import numpy as np
import pytest

from rbdet.cli import cli
from rbdet.data import gen_synthetic, load_dataset_dir, read_ppm, save_dataset
from rbdet.trainer import load_checkpoint

SUBCOMMANDS = ("gen-data", "train", "distill", "fuse", "eval", "infer",
               "bench", "ablate")


def run(capsys, *argv):
    code = cli(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_help_lists_every_subcommand(capsys):
    code, out, _ = run(capsys, "--help")
    assert code == 0
    for name in SUBCOMMANDS:
        assert name in out


def test_no_subcommand_is_usage_error(capsys):
    assert run(capsys, )[0] == 2
    assert run(capsys, "frobnicate")[0] == 2


def test_distill_without_teacher_is_usage_error(capsys):
    code, _, err = run(capsys, "distill", "--data", "x", "--out", "y",
                       "--mode", "dld")
    assert code == 2
    assert "--teacher" in err


def test_bad_flag_value_is_usage_error(capsys):
    assert run(capsys, "train", "--data", "x", "--out", "y",
               "--aat", "maybe")[0] == 2
    assert run(capsys, "ablate", "--seeds", "zero")[0] == 2


def test_gen_data_round_trips_through_loader(tmp_path, capsys):
    out = tmp_path / "ds"
    code, text, _ = run(capsys, "gen-data", "--out", str(out), "--seed", "4",
                        "--n-images", "5", "--image-size", "48",
                        "--classes", "square,disk", "--objects", "1,2")
    assert code == 0 and "5 images" in text
    assert (out / "annotations.json").is_file()
    ppms = sorted((out / "images").iterdir())
    assert len(ppms) == 5 and all(p.suffix == ".ppm" for p in ppms)

    reloaded = load_dataset_dir(str(out))
    direct = gen_synthetic(seed=4, n_images=5, image_size=48,
                           classes=("square", "disk"), objects_per_image=(1, 2))
    assert reloaded.class_names == direct.class_names
    for a, b in zip(reloaded.samples, direct.samples):
        assert np.array_equal(a.image, b.image)
        assert np.allclose(a.gt.boxes, b.gt.boxes)
        assert np.array_equal(a.gt.class_ids, b.gt.class_ids)


def test_gen_data_unknown_shape_is_data_error(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--out", str(tmp_path / "ds"),
                       "--classes", "square,hexagon")
    assert code == 3 and "hexagon" in err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Shared tiny datasets plus a trained checkpoint for pipeline tests."""
    root = tmp_path_factory.mktemp("cli")
    for name, seed, n, split in (("train", 3, 10, "train"), ("val", 9, 5, "val")):
        ds = gen_synthetic(seed=seed, n_images=n, image_size=64,
                           classes=("square", "disk"),
                           objects_per_image=(1, 2), split=split)
        save_dataset(ds, str(root / name))
    assert cli(["train", "--data", str(root / "train"),
                "--out", str(root / "m.rbck"), "--epochs", "2",
                "--batch-size", "4", "--width", "0.5", "--seed", "1"]) == 0
    return root


def test_train_writes_train_form_checkpoint(workdir):
    ckpt = load_checkpoint(str(workdir / "m.rbck"))
    assert ckpt.form == "train" and ckpt.epoch == 2
    assert ckpt.train_config["epochs"] == 2
    assert ckpt.config.num_classes == 2  # inferred from the dataset


def test_fuse_then_eval_and_infer(workdir, capsys):
    deploy = workdir / "m_deploy.rbck"
    code, out, _ = run(capsys, "fuse", "--checkpoint", str(workdir / "m.rbck"),
                       "--out", str(deploy))
    assert code == 0 and "deploy-form" in out
    assert load_checkpoint(str(deploy)).form == "deploy"

    report = workdir / "report.json"
    coco = workdir / "dets.json"
    code, out, _ = run(capsys, "eval", "--checkpoint", str(deploy),
                       "--data", str(workdir / "val"),
                       "--json-out", str(report), "--coco-out", str(coco))
    assert code == 0
    assert "AP50" in out and "images 5" in out
    payload = json.loads(report.read_text())
    assert 0.0 <= payload["ap50"] <= 1.0
    for rec in json.loads(coco.read_text()):
        assert set(rec) == {"image_id", "category_id", "bbox", "score"}

    image = next(iter(sorted((workdir / "val" / "images").iterdir())))
    code, out, _ = run(capsys, "infer", "--checkpoint", str(deploy),
                       str(image), "--conf", "0.05")
    assert code == 0 and str(image) in out


def test_double_fuse_is_reported_as_error(workdir, capsys):
    deploy = workdir / "m_deploy.rbck"
    code, _, err = run(capsys, "fuse", "--checkpoint", str(deploy),
                       "--out", str(workdir / "x.rbck"))
    assert code == 3 and "deploy" in err


def test_bench_prints_latency_stats(workdir, capsys):
    code, out, _ = run(capsys, "bench", "--checkpoint",
                       str(workdir / "m.rbck"), "--iterations", "3",
                       "--warmup", "1")
    assert code == 0
    assert "mean" in out and "throughput" in out
    code, _, _ = run(capsys, "bench", "--checkpoint", str(workdir / "m.rbck"),
                     "--iterations", "0")
    assert code == 2


def test_distill_standard_from_cli(workdir, capsys):
    code, out, _ = run(capsys, "distill", "--data", str(workdir / "train"),
                       "--teacher", str(workdir / "m.rbck"),
                       "--out", str(workdir / "student.rbck"),
                       "--mode", "standard", "--epochs", "1",
                       "--batch-size", "4")
    assert code == 0 and "alpha 1.000" in out
    student = load_checkpoint(str(workdir / "student.rbck"))
    teacher = load_checkpoint(str(workdir / "m.rbck"))
    assert student.config == teacher.config


def test_missing_inputs_are_data_errors(workdir, capsys):
    assert run(capsys, "eval", "--checkpoint", str(workdir / "nope.rbck"),
               "--data", str(workdir / "val"))[0] == 3
    assert run(capsys, "train", "--data", str(workdir / "nowhere"),
               "--out", str(workdir / "x.rbck"))[0] == 3
    assert run(capsys, "infer", "--checkpoint", str(workdir / "m.rbck"),
               str(workdir / "nope.ppm"))[0] == 3


def test_train_rejects_distill_config(workdir, tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("train:\n  distill: standard\n  teacher_checkpoint: t\n")
    code, _, err = run(capsys, "train", "--data", str(workdir / "train"),
                       "--out", str(tmp_path / "x.rbck"),
                       "--config", str(cfg))
    assert code == 2 and "distill" in err


def test_config_file_with_unknown_section_rejected(workdir, tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("trian:\n  epochs: 1\n")
    code, _, err = run(capsys, "train", "--data", str(workdir / "train"),
                       "--out", str(tmp_path / "x.rbck"),
                       "--config", str(cfg))
    assert code == 2 and "trian" in err


def test_flag_overrides_config_and_env_overrides_config_seed(
        workdir, tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("model:\n  width_multiple: 0.25\n"
                   "train:\n  epochs: 3\n  seed: 5\n  batch_size: 4\n")
    monkeypatch.setenv("RBDET_SEED", "7")
    out = tmp_path / "m.rbck"
    code, _, _ = run(capsys, "train", "--data", str(workdir / "train"),
                     "--out", str(out), "--config", str(cfg),
                     "--epochs", "1")
    assert code == 0
    ckpt = load_checkpoint(str(out))
    assert ckpt.train_config["epochs"] == 1  # flag beats config
    assert ckpt.train_config["seed"] == 7  # env beats config
    assert ckpt.config.width_multiple == 0.25

    monkeypatch.setenv("RBDET_SEED", "not-a-number")
    assert run(capsys, "train", "--data", str(workdir / "train"),
               "--out", str(out), "--epochs", "1")[0] == 2


def test_seed_flag_overrides_env(workdir, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("RBDET_SEED", "7")
    out = tmp_path / "m.rbck"
    code, _, _ = run(capsys, "train", "--data", str(workdir / "train"),
                     "--out", str(out), "--epochs", "1", "--batch-size", "4",
                     "--width", "0.25", "--seed", "9")
    assert code == 0
    assert load_checkpoint(str(out)).train_config["seed"] == 9


def test_class_count_mismatch_is_usage_error(workdir, tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("model:\n  num_classes: 5\n")
    code, _, err = run(capsys, "train", "--data", str(workdir / "train"),
                       "--out", str(tmp_path / "x.rbck"),
                       "--config", str(cfg), "--epochs", "1")
    assert code == 2 and "5 classes" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_loss_is_numeric_failure(workdir, capsys):
    code, _, err = run(capsys, "train", "--data", str(workdir / "train"),
                       "--out", str(workdir / "x.rbck"), "--epochs", "3",
                       "--batch-size", "4", "--lr0", "1e9", "--lr-f", "1e9")
    assert code == 4 and "non-finite" in err


def test_ablate_prints_delta_table(tmp_path, capsys):
    out = tmp_path / "ab.json"
    code, text, _ = run(capsys, "ablate", "--bic", "off", "--epochs", "1",
                        "--n-images", "8", "--val-images", "4",
                        "--seeds", "0", "--json-out", str(out))
    assert code == 0
    assert "baseline" in text and "variant" in text and "delta" in text
    payload = json.loads(out.read_text())
    assert payload["toggles"]["bic"] == "off"
    assert set(payload["baseline"]) == {"AP50", "AP", "AP_small"}
    b, v = payload["baseline"]["AP50"], payload["variant"]["AP50"]
    for line in text.splitlines():
        if line.startswith("AP50"):
            assert float(line.split()[-1]) == pytest.approx(v - b, abs=5e-5)
