"""Confusion matrices and the accuracy / macro-F1 reporting suite."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from oos_intent.data import Utterance
from oos_intent.errors import DataError


@dataclass
class ConfusionMatrix:
    """Counts with rows = gold and columns = predicted; index K is out-of-scope."""

    counts: np.ndarray

    @property
    def K(self) -> int:
        return self.counts.shape[0] - 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1_all: float
    macro_f1_known: float
    f1_unknown: float
    per_class_f1: list[float]
    confusion: list[list[int]]

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


def confusion(preds: Sequence[int], golds: Sequence[int], K: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).ravel()
    golds = np.asarray(golds, dtype=np.int64).ravel()
    if len(preds) != len(golds):
        raise DataError(f"{len(preds)} predictions vs {len(golds)} gold labels")
    for name, arr in (("prediction", preds), ("gold", golds)):
        if len(arr) and (arr.min() < 0 or arr.max() > K):
            raise DataError(f"{name} label outside [0, {K}]")
    counts = np.zeros((K + 1, K + 1), dtype=np.int64)
    np.add.at(counts, (golds, preds), 1)
    return ConfusionMatrix(counts)


def per_class_f1(counts: np.ndarray) -> np.ndarray:
    """F1 per class; any 0/0 precision, recall or F1 is taken as 0."""
    counts = np.asarray(counts, dtype=np.float64)
    tp = np.diag(counts)
    predicted = counts.sum(axis=0)
    gold = counts.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(gold > 0, tp / gold, 0.0)
        denom = precision + recall
        return np.where(denom > 0, 2 * precision * recall / denom, 0.0)


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    total = cm.total
    if total == 0:
        raise DataError("cannot compute metrics on an empty confusion matrix")
    f1 = per_class_f1(cm.counts)
    return MetricsReport(
        accuracy=float(np.trace(cm.counts) / total),
        macro_f1_all=float(f1.mean()),
        macro_f1_known=float(f1[:-1].mean()),
        f1_unknown=float(f1[-1]),
        per_class_f1=[float(v) for v in f1],
        confusion=cm.counts.tolist(),
    )


def evaluate(predictor, encoder, test: Sequence[tuple[Utterance, int]], K: int | None = None) -> MetricsReport:
    """Score a predictor on a labeled test set.

    ``predictor`` needs ``predict(features) -> labels``. K defaults to the
    predictor's ``num_known`` attribute, else its output count minus one.
    """
    if not test:
        raise DataError("empty test set")
    if K is None:
        K = getattr(predictor, "num_known", None)
        if K is None:
            K = predictor.n_outputs - 1
    features = encoder.encode_batch([u for u, _ in test])
    preds = predictor.predict(features)
    golds = [label for _, label in test]
    return compute_metrics(confusion(preds, golds, K))


def format_confusion(cm: ConfusionMatrix, names: Sequence[str] | None = None) -> str:
    names = list(names) if names is not None else [str(i) for i in range(cm.K)] + ["oos"]
    width = max(6, *(len(n) for n in names), len(str(cm.counts.max())) + 1)
    lines = ["gold\\pred".ljust(width) + "".join(n.rjust(width) for n in names)]
    for name, row in zip(names, cm.counts):
        lines.append(name.ljust(width) + "".join(str(c).rjust(width) for c in row))
    return "\n".join(lines)
