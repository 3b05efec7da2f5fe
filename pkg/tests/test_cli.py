import os

import numpy as np
import pytest
import yaml
from PIL import Image
from typer.testing import CliRunner

from cli.cracksam_cli import app
from src.archive import load_archive
from src.noise import NoiseSpec, apply_noise

runner = CliRunner()


def write_config(path, mapping):
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(mapping, fh)
    return str(path)


def read_tree(root):
    files = {}
    for folder, _, names in os.walk(root):
        for name in names:
            with open(os.path.join(folder, name), "rb") as fh:
                files[os.path.relpath(os.path.join(folder, name), root)] = fh.read()
    return files


def test_synth_is_deterministic(tmp_path):
    for out in ("a", "b"):
        result = runner.invoke(app, ["synth", "--n", "4", "--size", "32", "--seed", "3", "--out", str(tmp_path / out)])
        assert result.exit_code == 0, result.output
        assert "Wrote 4 samples" in result.output
    first, second = read_tree(tmp_path / "a"), read_tree(tmp_path / "b")
    assert len(first) == 8
    assert first == second


def test_count_params_vit_h_lora(tmp_path):
    config = write_config(tmp_path / "run.yaml", {"encoder": {"preset": "vit_h"}, "lora": {"rank": 1}})
    result = runner.invoke(app, ["count-params", "--config", config])
    assert result.exit_code == 0, result.output
    assert "delta-only: 163840" in result.output


def test_count_params_adapter(tmp_path):
    config = write_config(
        tmp_path / "run.yaml",
        {"encoder.preset": "vit_h", "lora.enabled": False, "adapter.enabled": True, "adapter.middle_dim": 32},
    )
    result = runner.invoke(app, ["count-params", "--config", config])
    assert result.exit_code == 0, result.output
    assert "delta-only: 5326848" in result.output


def test_corrupt_folder(tmp_path):
    src = tmp_path / "in"
    src.mkdir()
    rng = np.random.default_rng(0)
    images = {}
    for stem in ("x", "y"):
        images[stem] = rng.integers(0, 256, (24, 24, 3), dtype=np.uint8)
        Image.fromarray(images[stem]).save(src / f"{stem}.png")
    (src / "notes.txt").write_text("ignored")

    result = runner.invoke(app, ["corrupt", "--in", str(src), "--out", str(tmp_path / "out"), "--noise", "case2"])
    assert result.exit_code == 0, result.output
    assert "Corrupted 2 images" in result.output
    for stem, pixels in images.items():
        with Image.open(tmp_path / "out" / f"{stem}.png") as img:
            assert np.array_equal(np.asarray(img), apply_noise(pixels, NoiseSpec(2)))


@pytest.mark.parametrize(
    "args",
    [
        ["count-params", "--config", "does_not_exist.yaml"],
        ["corrupt", "--in", "missing_dir", "--out", "out", "--noise", "case3"],
        ["synth", "--n", "0", "--out", "{tmp}"],
    ],
)
def test_failures_exit_nonzero(tmp_path, args):
    result = runner.invoke(app, [a.format(tmp=tmp_path) for a in args])
    assert result.exit_code == 1
    assert "Error:" in result.output


def test_unknown_command_prints_usage():
    result = runner.invoke(app, ["frobnicate"])
    assert result.exit_code != 0
    assert "Usage" in result.output


@pytest.fixture
def trained_run(tmp_path):
    data = tmp_path / "data"
    for split, n in (("train", 4), ("val", 2)):
        result = runner.invoke(app, ["synth", "--n", str(n), "--size", "64", "--out", str(data), "--split", split])
        assert result.exit_code == 0, result.output
    runs = tmp_path / "runs"
    config = write_config(
        tmp_path / "run.yaml",
        {
            "run": {"output_dir": str(runs)},
            "data": {"root": str(data)},
            "train": {"epochs": 1, "batch_size": 2, "warmup_iters": 1, "lr0": 1e-3},
        },
    )
    result = runner.invoke(app, ["train", "--config", config])
    assert result.exit_code == 0, result.output
    return tmp_path, config, str(runs / "best_checkpoint.csam")


def test_train_writes_artifacts(trained_run):
    root, _, checkpoint = trained_run
    runs = root / "runs"
    assert (runs / "epoch_log_train.csv").exists()
    assert (runs / "resolved_config.yaml").exists()
    arrays, metadata = load_archive(checkpoint)
    assert metadata["subset"] == "tunable"
    assert metadata["config"]["train.epochs"] == 1
    assert any("lora_a" in name for name in arrays)


def test_eval_infer_and_merge(trained_run):
    root, config, checkpoint = trained_run
    result = runner.invoke(app, ["eval", "--config", config, "--checkpoint", checkpoint, "--split", "val"])
    assert result.exit_code == 0, result.output
    assert (root / "runs" / "metrics_val_none.csv").exists()

    result = runner.invoke(
        app, ["eval", "--config", config, "--checkpoint", checkpoint, "--split", "val", "--noise", "case1"]
    )
    assert result.exit_code == 0, result.output
    assert (root / "runs" / "metrics_val_case1.csv").exists()

    image = root / "data" / "val" / "images" / "synth_00000.png"
    mask_path = root / "mask.png"
    result = runner.invoke(app, ["infer", "--checkpoint", checkpoint, "--image", str(image), "--out", str(mask_path)])
    assert result.exit_code == 0, result.output
    with Image.open(mask_path) as img:
        mask = np.asarray(img)
    assert mask.shape == (64, 64)
    assert set(np.unique(mask)) <= {0, 255}

    merged = str(root / "merged.csam")
    result = runner.invoke(app, ["merge-lora", "--checkpoint", checkpoint, "--out", merged])
    assert result.exit_code == 0, result.output
    arrays, metadata = load_archive(merged)
    assert metadata["merged"] is True
    assert not any("lora_" in name for name in arrays)

    result = runner.invoke(app, ["infer", "--checkpoint", merged, "--image", str(image), "--out", str(root / "m2.png")])
    assert result.exit_code == 0, result.output


@pytest.mark.slow
def test_gradcheck_command(tmp_path):
    config = write_config(tmp_path / "run.yaml", {"lora": {"rank": 2}})
    result = runner.invoke(app, ["gradcheck", "--config", config, "--entries", "1"])
    assert result.exit_code == 0, result.output
    assert "max relative error" in result.output


def test_eval_over_several_roots(trained_run):
    root, config, checkpoint = trained_run
    other = root / "other"
    result = runner.invoke(app, ["synth", "--n", "2", "--size", "48", "--seed", "11", "--out", str(other), "--split", "val"])
    assert result.exit_code == 0, result.output
    result = runner.invoke(
        app,
        ["eval", "--config", config, "--checkpoint", checkpoint, "--split", "val",
         "--root", str(root / "data"), "--root", str(other)],
    )
    assert result.exit_code == 0, result.output
    assert (root / "runs" / "metrics_data_val_none.csv").exists()
    assert (root / "runs" / "metrics_other_val_none.csv").exists()
