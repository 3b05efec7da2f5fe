"""
Example usage commands:

Generate a synthetic dataset (train/val/test splits):
   python cli/cracksam_cli.py synth --n 200 --size 64 --seed 7 --out ./data
   python cli/cracksam_cli.py synth --n 40 --size 64 --seed 7 --out ./data --split val

Train the deltas and head described by a run config:
   python cli/cracksam_cli.py train --config run.yaml

Evaluate a checkpoint, clean or corrupted:
   python cli/cracksam_cli.py eval --config run.yaml --checkpoint runs/best_checkpoint.csam
   python cli/cracksam_cli.py eval --config run.yaml --checkpoint runs/best_checkpoint.csam --noise case2
   python cli/cracksam_cli.py eval --config run.yaml --checkpoint runs/best_checkpoint.csam --suite
   python cli/cracksam_cli.py eval --config run.yaml --checkpoint runs/best_checkpoint.csam --root ./other_a --root ./other_b

Segment a single image:
   python cli/cracksam_cli.py infer --checkpoint runs/best_checkpoint.csam --image wall.png --out wall_mask.png

Corrupt a folder of images offline:
   python cli/cracksam_cli.py corrupt --in ./data/test/images --out ./noisy --noise case1

Parameter accounting, LoRA merge and gradient check:
   python cli/cracksam_cli.py count-params --config run.yaml
   python cli/cracksam_cli.py merge-lora --checkpoint runs/best_checkpoint.csam --out runs/merged.csam
   python cli/cracksam_cli.py gradcheck --config run.yaml
"""

import typer
import sys
import os
from functools import wraps
from rich.console import Console
from rich.progress import Progress, SpinnerColumn, TextColumn
from rich.table import Table

# Add the parent directory to sys.path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
from PIL import Image

from src.archive import load_archive, load_into_model, save_archive
from src.config import RunConfig, build_from_config, dump_run_config, load_run_config
from src.dataset import DatasetLoader, DatasetManifest, read_image, write_mask
from src.errors import ArchiveError, ContractError
from src.gradcheck import check_model_gradients
from src.metrics import Evaluator
from src.noise import NoiseSpec, apply_noise
from src.peft import count_parameters, merge_lora_weights
from src.synth import SyntheticCrackGenerator
from src.train import Trainer
from typing import List, Optional

app = typer.Typer(no_args_is_help=True)
console = Console()

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def with_spinner(func):
    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            with Progress(
                SpinnerColumn(),
                TextColumn("[progress.description]{task.description}"),
                transient=True,
            ) as progress:
                task = progress.add_task(description="Working...", total=None)
                result = func(*args, **kwargs)
                progress.update(task, completed=True)
        except typer.Exit:
            raise
        except Exception as exc:
            typer.echo(f"Error: {exc}", err=True)
            raise typer.Exit(code=1)
        return result

    return wrapper


def _model_from_checkpoint(checkpoint: str):
    _, metadata = load_archive(checkpoint)
    if "config" not in metadata:
        raise ArchiveError(f"{checkpoint} carries no run configuration")
    config = RunConfig.from_mapping(metadata["config"])
    model, _ = build_from_config(config)
    load_into_model(model, checkpoint)
    return config, model


def _metric_table(title: str, rows: list[dict]) -> Table:
    table = Table(title=title)
    for column in rows[0]:
        table.add_column(column)
    for row in rows:
        table.add_row(*(f"{v:.4f}" if isinstance(v, float) else str(v) for v in row.values()))
    return table


@app.command(name="train")
@with_spinner
def train(config: str = typer.Option(..., "--config", help="Run configuration YAML")):
    """Train deltas and head, writing the epoch log and best checkpoint."""
    cfg = load_run_config(config)
    dump_run_config(cfg)
    model, mask = build_from_config(cfg)
    loader = DatasetLoader(cfg.log_level, cfg.output_dir, cfg.train.num_workers)
    train_set = loader.load(DatasetManifest(cfg.data_root, "train", cfg.target_size))
    val_set = loader.load(DatasetManifest(cfg.data_root, "val", cfg.target_size))
    trainer = Trainer(cfg.train, cfg.log_level, cfg.output_dir)
    result = trainer.fit(model, train_set, val_set, run_name="train", metadata={"config": cfg.to_dict()})
    typer.echo(
        f"Best epoch {result.checkpoint.epoch} (val F1 {result.checkpoint.val_f1:.4f}); "
        f"checkpoint {result.checkpoint_path}, log {result.log_path}"
    )


@app.command(name="eval")
@with_spinner
def evaluate(
    config: str = typer.Option(..., "--config", help="Run configuration YAML"),
    checkpoint: str = typer.Option(..., "--checkpoint", help="Checkpoint archive"),
    noise: Optional[str] = typer.Option(None, "--noise", help="case1 or case2"),
    granularity: Optional[str] = typer.Option(None, "--granularity", help="micro or macro"),
    split: str = typer.Option("test", "--split"),
    root: Optional[List[str]] = typer.Option(None, "--root", help="Dataset root(s) overriding data.root; repeatable"),
    suite: bool = typer.Option(False, "--suite", help="Clean, case1 and case2 side by side"),
):
    """Score a checkpoint on a dataset split (of one or more roots) and write the metric records."""
    cfg = load_run_config(config)
    dump_run_config(cfg)
    model, _ = build_from_config(cfg)
    load_into_model(model, checkpoint)
    granularity = granularity or cfg.granularity
    roots = list(root) if root else [cfg.data_root]
    loader = DatasetLoader(cfg.log_level, cfg.output_dir, cfg.train.num_workers)
    evaluator = Evaluator(cfg.log_level, cfg.output_dir, threshold=cfg.train.binarize_threshold)
    for dataset_root in roots:
        samples = loader.load(DatasetManifest(dataset_root, split, cfg.target_size))
        label = split if len(roots) == 1 else f"{os.path.basename(os.path.normpath(dataset_root))}_{split}"
        if suite:
            frame = evaluator.evaluate_suite(model, samples, granularity)
            path = evaluator.write_report(frame, f"{label}_suite")
            console.print(_metric_table(f"{label} robustness suite", frame.to_dict("records")))
        else:
            spec = NoiseSpec.from_name(noise) if noise else None
            report = evaluator.evaluate_dataset(model, samples, spec, granularity)
            path = evaluator.write_report(report, f"{label}_{report.noise_case}")
            console.print(_metric_table(f"{label} ({report.noise_case}, {granularity})", [report.to_record()]))
        typer.echo(f"Metric report written: {path}")


@app.command(name="infer")
@with_spinner
def infer(
    checkpoint: str = typer.Option(..., "--checkpoint"),
    image: str = typer.Option(..., "--image"),
    out: str = typer.Option(..., "--out"),
):
    """Write the predicted crack mask of one image as a {0,255} PNG."""
    cfg, model = _model_from_checkpoint(checkpoint)
    with Image.open(image) as img:
        original_size = img.size
    pixels = read_image(image, cfg.encoder.image_size)
    mask = model.predict(pixels[None], threshold=cfg.train.binarize_threshold)[0]
    if mask.shape[::-1] != original_size:
        mask = np.asarray(Image.fromarray(mask).resize(original_size, Image.NEAREST))
    write_mask(out, mask)
    typer.echo(f"Mask written: {out}")


@app.command(name="corrupt")
@with_spinner
def corrupt(
    input_dir: str = typer.Option(..., "--in", help="Folder of RGB images"),
    output_dir: str = typer.Option(..., "--out"),
    noise: str = typer.Option(..., "--noise", help="case1 or case2"),
):
    """Apply a corruption pipeline to every image of a folder."""
    spec = NoiseSpec.from_name(noise)
    os.makedirs(output_dir, exist_ok=True)
    names = sorted(n for n in os.listdir(input_dir) if n.lower().endswith(IMAGE_SUFFIXES))
    for name in names:
        with Image.open(os.path.join(input_dir, name)) as img:
            levels = np.asarray(img.convert("RGB"))
        stem = os.path.splitext(name)[0]
        Image.fromarray(apply_noise(levels, spec)).save(os.path.join(output_dir, f"{stem}.png"))
    typer.echo(f"Corrupted {len(names)} images ({spec.name}) into {output_dir}")


@app.command(name="synth")
@with_spinner
def synth(
    n: int = typer.Option(..., "--n", help="Number of samples"),
    size: int = typer.Option(64, "--size", help="Square image size in pixels"),
    seed: int = typer.Option(0, "--seed"),
    out: str = typer.Option("./data", "--out"),
    split: str = typer.Option("train", "--split", help="train, val or test"),
):
    """Generate synthetic crack images and masks."""
    manifest = SyntheticCrackGenerator(output_dir=out).generate(n, size, seed, split)
    typer.echo(f"Wrote {len(manifest.ids)} samples to {manifest.image_dir}")


@app.command(name="count-params")
@with_spinner
def count_params(config: str = typer.Option(..., "--config", help="Run configuration YAML")):
    """Print all / tunable / delta-only parameter counts without allocating weights."""
    cfg = load_run_config(config)
    model, _ = build_from_config(cfg, materialize=False)
    table = Table(title=f"{cfg['encoder.preset']} parameters")
    table.add_column("filter")
    table.add_column("count", justify="right")
    table.add_column("millions", justify="right")
    for which in ("all", "tunable", "delta"):
        count = count_parameters(model, which)
        table.add_row(which, str(count), f"{count / 1e6:.2f} M")
        typer.echo(f"{'delta-only' if which == 'delta' else which}: {count}")
    console.print(table)


@app.command(name="merge-lora")
@with_spinner
def merge_lora(
    checkpoint: str = typer.Option(..., "--checkpoint"),
    out: str = typer.Option(..., "--out"),
):
    """Fold LoRA factors into their projections and write a full-weight archive."""
    cfg, model = _model_from_checkpoint(checkpoint)
    merged = merge_lora_weights(model)
    if merged == 0:
        raise ContractError(f"{checkpoint} has no LoRA factors to merge")
    arrays = {
        name: p.data
        for name, p in model.named_parameters()
        if not any(part.startswith("lora_") for part in name.split("."))
    }
    merged_cfg = cfg.override(lora_enabled=False)
    save_archive(out, arrays, {"config": merged_cfg.to_dict(), "subset": "all", "merged": True})
    typer.echo(f"Merged {merged} projections into {out}")


@app.command(name="gradcheck")
@with_spinner
def gradcheck(
    config: str = typer.Option(..., "--config", help="Run configuration YAML"),
    entries: int = typer.Option(3, "--entries", help="Entries checked per parameter"),
    eps: float = typer.Option(1e-3, "--eps", help="Finite-difference step"),
    tolerance: float = typer.Option(1e-3, "--tolerance"),
):
    """Compare tape gradients of the full model loss with central differences."""
    cfg = load_run_config(config)
    model, _ = build_from_config(cfg)
    size = cfg.encoder.image_size
    sample = SyntheticCrackGenerator(cfg.log_level).sample(0, size, cfg.seed)
    report = check_model_gradients(
        model, sample.image[None], sample.mask[None], cfg.train.lambda_ce, eps, entries, cfg.seed
    )
    typer.echo(f"max relative error: {report.max_error:.3e} over {report.num_checked} entries")
    if not report.passed(tolerance):
        worst = max(report.errors, key=report.errors.get)
        typer.echo(f"Error: gradient check failed, worst parameter {worst}", err=True)
        raise typer.Exit(code=1)


if __name__ == "__main__":
    app()
