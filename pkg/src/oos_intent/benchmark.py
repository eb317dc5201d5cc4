"""Synthetic 2-D Gaussian-blob benchmark and the multi-seed experiment harness."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from oos_intent.baselines import train_msp
from oos_intent.data import Dataset, SplitSpec, Utterance, split_known_unknown
from oos_intent.encoder import EncoderSpec
from oos_intent.evaluation import MetricsReport, evaluate
from oos_intent.outliers import BatchRatio
from oos_intent.trainer import TrainConfig, train

METRICS = ("accuracy", "macro_f1_all", "macro_f1_known", "f1_unknown")


@dataclass(frozen=True)
class BlobTask:
    n_classes: int = 6
    per_class: int = 200
    radius: float = 4.0
    std: float = 0.2
    pool_size: int = 2000
    pool_radius: float = 10.0
    pool_std: float = 1.0
    known_ratio: float = 4 / 6


def blob_centers(task: BlobTask) -> np.ndarray:
    angles = 2 * np.pi * np.arange(task.n_classes) / task.n_classes
    return task.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def make_blobs(task: BlobTask = BlobTask(), seed: int = 0) -> Dataset:
    """Isotropic Gaussian classes centered on a circle."""
    rng = np.random.default_rng(seed)
    examples = []
    for c, center in enumerate(blob_centers(task)):
        points = center + task.std * rng.standard_normal((task.per_class, 2))
        for j, p in enumerate(points):
            examples.append((Utterance(f"c{c}-{j}", numeric=tuple(float(v) for v in p)), f"blob{c}"))
    return Dataset(examples, [f"blob{c}" for c in range(task.n_classes)])


def make_blob_pool(task: BlobTask = BlobTask(), seed: int = 0) -> list[Utterance]:
    """Open-domain stand-in: points on a wide ring far outside the classes."""
    rng = np.random.default_rng([seed, 1])
    angles = rng.uniform(0, 2 * np.pi, task.pool_size)
    r = task.pool_radius + task.pool_std * rng.standard_normal(task.pool_size)
    pts = np.stack([r * np.cos(angles), r * np.sin(angles)], axis=1)
    return [Utterance(f"pool-{i}", numeric=(float(x), float(y))) for i, (x, y) in enumerate(pts)]


@dataclass
class RunResult:
    method: str
    seed: int
    metrics: MetricsReport
    epochs: int
    extra: dict = field(default_factory=dict)


def run_once(
    method: str,
    dataset: Dataset,
    pool: Sequence[Utterance],
    config: TrainConfig,
    encoder_spec: EncoderSpec,
    known_ratio: float,
    seed: int,
) -> RunResult:
    """Split with ``seed``, train ``method`` ("ours" or "msp"), evaluate on test."""
    split = split_known_unknown(dataset, SplitSpec(known_ratio, seed), val_fraction=0.2, test_fraction=0.2)
    config = replace(config, seed=seed)
    if method == "msp":
        model, history = train_msp(config, split, encoder_spec, open_pool=pool)
        extra = {"threshold": model.threshold}
    else:
        model, history = train(config, split, pool if config.ratio.open else None, encoder_spec)
        extra = {}
    metrics = evaluate(model, model.encoder, split.test)
    return RunResult(method, seed, metrics, len(history), extra)


def summarize(results: Sequence[RunResult]) -> dict[str, dict[str, float]]:
    out = {}
    for name in METRICS:
        values = np.array([getattr(r.metrics, name) for r in results])
        out[name] = {"mean": float(values.mean()), "std": float(values.std(ddof=1)) if len(values) > 1 else 0.0}
    return out


def bench_config(ratio: BatchRatio = BatchRatio(100, 100, 400), **overrides) -> TrainConfig:
    """Desk-scale settings for the blob task.

    Smaller hidden layers and a larger step size than the 768-d defaults
    keep a run to about a second on one core.
    """
    base = TrainConfig(ratio=ratio, lr=3e-3, hidden=(64, 64), max_epochs=100, patience=10, tau=0.1)
    return replace(base, **overrides)


def sweep_synthetic(
    counts: Sequence[int],
    seeds: Sequence[int],
    task: BlobTask = BlobTask(),
    open_count: int = 0,
    csv_path=None,
) -> list[dict]:
    """Unknown-class F1 as the per-batch synthetic count varies (100 inliers)."""
    dataset = make_blobs(task, seed=0)
    pool = make_blob_pool(task, seed=0)
    spec = EncoderSpec(kind="identity", dim=2)
    rows = []
    for n_s in counts:
        config = bench_config(BatchRatio(100, open_count, n_s))
        results = [run_once("ours", dataset, pool, config, spec, task.known_ratio, s) for s in seeds]
        agg = summarize(results)
        rows.append({"synthetic": n_s, "open": open_count, "seeds": len(seeds),
                     **{f"{k}_mean": v["mean"] for k, v in agg.items()},
                     **{f"{k}_std": v["std"] for k, v in agg.items()}})
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return rows


def mean_metric(results: Sequence[RunResult], name: str) -> float:
    return float(np.mean([getattr(r.metrics, name) for r in results]))


def fmt_pct(x: float) -> str:
    return f"{100 * x:.2f}" if math.isfinite(x) else "nan"
