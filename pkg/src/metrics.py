"""
Pixel-level crack segmentation metrics and the dataset evaluator.

Zero-denominator conventions:

* both masks empty: precision = recall = f1 = iou = 1.0
* empty ground truth, crack predicted: precision 0, recall 1, f1 0, iou 0
* crack present, nothing predicted: precision 0, recall 0, f1 0, iou 0
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from .base import CrackSAMBase
from .errors import ContractError, DimensionError
from .noise import NoiseSpec, apply_noise
from .utils import NOISE_CASES, is_valid_granularity

RECORD_FIELDS = ["precision", "recall", "f1", "iou", "tp", "fp", "fn", "tn", "granularity", "noise_case"]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricReport:
    precision: float
    recall: float
    f1: float
    iou: float
    counts: ConfusionCounts
    granularity: str = "micro"
    noise_case: str = "none"
    num_samples: int = 0
    noncrack_total: int = 0
    noncrack_correct: int = 0

    @property
    def noncrack_accuracy(self) -> float:
        if self.noncrack_total == 0:
            return float("nan")
        return self.noncrack_correct / self.noncrack_total

    def to_record(self) -> dict:
        record = {k: getattr(self, k) for k in ("precision", "recall", "f1", "iou")}
        record.update(asdict(self.counts))
        record["granularity"] = self.granularity
        record["noise_case"] = self.noise_case
        return record

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([self.to_record()], columns=RECORD_FIELDS)


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


def _scores(c: ConfusionCounts) -> tuple[float, float, float, float]:
    if c.tp + c.fp + c.fn == 0:
        return 1.0, 1.0, 1.0, 1.0
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    iou = c.tp / (c.tp + c.fp + c.fn)
    return precision, recall, f1, iou


def metrics(counts: ConfusionCounts, granularity: str = "micro", noise_case: str = "none") -> MetricReport:
    precision, recall, f1, iou = _scores(counts)
    return MetricReport(precision, recall, f1, iou, counts, granularity, noise_case)


def macro_metrics(per_image: Sequence[ConfusionCounts], noise_case: str = "none") -> MetricReport:
    """Average of per-image scores; counts are still summed."""
    if not per_image:
        raise ContractError("macro metrics need at least one image")
    scores = np.array([_scores(c) for c in per_image], dtype=np.float64)
    total = sum(per_image, ConfusionCounts())
    precision, recall, f1, iou = (float(v) for v in scores.mean(axis=0))
    return MetricReport(precision, recall, f1, iou, total, "macro", noise_case)


def to_levels(image: np.ndarray) -> np.ndarray:
    """(3, H, W) float image in [0, 1] -> (H, W, 3) uint8 levels."""
    return np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


def from_levels(levels: np.ndarray) -> np.ndarray:
    return (np.asarray(levels, dtype=np.float32) / 255.0).transpose(2, 0, 1)


class Evaluator(CrackSAMBase):
    def __init__(
        self,
        log_level: str = "WARNING",
        output_dir: str = "./",
        batch_size: int = 8,
        threshold: float = 0.5,
        num_workers: int = 0,
    ) -> None:
        """
        Initialize the Evaluator class.

        Args:
            log_level (str): The logging level. Defaults to "WARNING".
            output_dir (str): Directory for metric record files. Defaults to "./".
            batch_size (int): Images per forward pass.
            threshold (float): Crack probability threshold; ties count as crack.
            num_workers (int): Threads running batches concurrently; 0 runs inline.
        """
        super().__init__(log_level, output_dir)
        self.batch_size = batch_size
        self.threshold = threshold
        self.num_workers = num_workers

    def _predictor(self, model) -> Callable[[np.ndarray], np.ndarray]:
        if hasattr(model, "predict"):
            return lambda images: model.predict(images, threshold=self.threshold)
        return model

    def _batch_counts(self, predict, batch, noise: NoiseSpec | None) -> list[ConfusionCounts]:
        images = []
        for sample in batch:
            image = sample.image
            if noise is not None:
                image = from_levels(apply_noise(to_levels(image), noise))
            images.append(image)
        preds = np.asarray(predict(np.stack(images).astype(np.float32)))
        return [confusion(pred, sample.mask) for pred, sample in zip(preds, batch)]

    def evaluate_dataset(
        self,
        model,
        dataset: Sequence,
        noise: NoiseSpec | None = None,
        granularity: str = "micro",
    ) -> MetricReport:
        """
        Corrupt (optionally), predict and score every sample.

        Args:
            model: A CrackSAM model, or any callable mapping (B, 3, H, W) images to (B, H, W) binary masks.
            dataset (Sequence): SampleRecord items; masks are never corrupted.
            noise (NoiseSpec | None): Corruption applied to the images before inference.
            granularity (str): 'micro' (summed counts) or 'macro' (mean of per-image scores).

        Returns:
            MetricReport: Scores, counts and the noncrack tally.
        """
        if not is_valid_granularity(granularity):
            raise ValueError(f"granularity must be 'micro' or 'macro', got {granularity!r}")
        if len(dataset) == 0:
            raise ContractError("cannot evaluate an empty dataset")

        predict = self._predictor(model)
        batches = [dataset[i : i + self.batch_size] for i in range(0, len(dataset), self.batch_size)]
        if self.num_workers > 0:
            with ThreadPoolExecutor(max_workers=self.num_workers) as pool:
                results = list(pool.map(lambda b: self._batch_counts(predict, b, noise), batches))
        else:
            results = [self._batch_counts(predict, b, noise) for b in batches]
        per_image = [c for batch in results for c in batch]

        noise_case = noise.name if noise is not None else "none"
        if granularity == "macro":
            report = macro_metrics(per_image, noise_case)
        else:
            report = metrics(sum(per_image, ConfusionCounts()), "micro", noise_case)

        empty_gt = [c for c in per_image if c.tp + c.fn == 0]
        report = MetricReport(
            report.precision,
            report.recall,
            report.f1,
            report.iou,
            report.counts,
            report.granularity,
            report.noise_case,
            num_samples=len(per_image),
            noncrack_total=len(empty_gt),
            noncrack_correct=sum(1 for c in empty_gt if c.fp == 0),
        )
        self.logger.info(
            f"Evaluated {len(per_image)} samples ({noise_case}, {granularity}): "
            f"P={report.precision:.4f} R={report.recall:.4f} F1={report.f1:.4f} IoU={report.iou:.4f}"
        )
        return report

    def evaluate_suite(self, model, dataset: Sequence, granularity: str = "micro") -> pd.DataFrame:
        """Clean, case-1 and case-2 reports side by side with the relative IoU drop."""
        rows = []
        clean_iou = None
        for case in ("none", *NOISE_CASES):
            noise = None if case == "none" else NoiseSpec.from_name(case)
            report = self.evaluate_dataset(model, dataset, noise, granularity)
            if clean_iou is None:
                clean_iou = report.iou
            row = report.to_record()
            row["iou_drop_pct"] = 100.0 * (clean_iou - report.iou) / clean_iou if clean_iou else 0.0
            row["noncrack_accuracy"] = report.noncrack_accuracy
            rows.append(row)
        return pd.DataFrame(rows, columns=RECORD_FIELDS + ["iou_drop_pct", "noncrack_accuracy"])

    def write_report(self, report: MetricReport | pd.DataFrame, identifier: str) -> str:
        df = report.to_frame() if isinstance(report, MetricReport) else report
        return self._write_csv(df, "metrics", identifier)
