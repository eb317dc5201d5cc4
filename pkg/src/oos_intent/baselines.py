"""Maximum-softmax-probability baseline: K-way classifier plus a rejection threshold."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from oos_intent.classifier import MlpClassifier, softmax
from oos_intent.data import Dataset, LabelSpace, SplitResult, Utterance
from oos_intent.encoder import Encoder, EncoderSpec
from oos_intent.evaluation import compute_metrics, confusion
from oos_intent.trainer import TrainConfig, TrainHistory, train

THRESHOLD_GRID = np.round(np.arange(1, 20) * 0.05, 2)
# macro-F1 values equal up to rounding count as ties
_TIE_TOL = 1e-12


@dataclass
class MspModel:
    model: MlpClassifier
    threshold: float
    encoder: Encoder | None = None
    encoder_spec: EncoderSpec | None = None
    label_space: LabelSpace | None = None
    kind: str = "msp"

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")

    @property
    def num_known(self) -> int:
        return self.model.n_outputs

    def max_probabilities(self, features) -> np.ndarray:
        return softmax(self.model.forward(features)).max(axis=1)

    def predict(self, features) -> np.ndarray:
        return msp_predict(self, features)


def predict_from_probs(probs: np.ndarray, threshold: float) -> np.ndarray:
    """Argmax over K classes, or K when the top probability is below ``threshold``."""
    probs = np.asarray(probs, dtype=np.float64)
    K = probs.shape[1]
    return np.where(probs.max(axis=1) < threshold, K, probs.argmax(axis=1))


def msp_predict(msp: MspModel, features) -> np.ndarray:
    return predict_from_probs(softmax(msp.model.forward(features)), msp.threshold)


def best_threshold(probs: np.ndarray, golds: Sequence[int], grid: Sequence[float] = THRESHOLD_GRID) -> float:
    """Grid point maximizing macro-F1 over K+1 classes; ties go to the lower threshold."""
    probs = np.asarray(probs, dtype=np.float64)
    K = probs.shape[1]
    best_t, best_f1 = None, -1.0
    for t in grid:
        f1 = compute_metrics(confusion(predict_from_probs(probs, t), golds, K)).macro_f1_all
        if f1 > best_f1 + _TIE_TOL:
            best_t, best_f1 = float(t), f1
    if best_t is None:
        raise ValueError("empty threshold grid")
    return best_t


def calibrate_threshold(
    model: MlpClassifier,
    validation: Dataset,
    open_pool: Sequence[Utterance],
    encoder: Encoder,
    seed: int = 0,
    pool_sample: int | None = None,
) -> float:
    """Pick the rejection threshold on validation inliers plus open-pool proxies.

    ``pool_sample`` pool sentences (default: as many as validation
    examples, capped by the pool size) are drawn without replacement and
    treated as out-of-scope.
    """
    if len(validation) == 0 or not open_pool:
        raise ValueError("calibration needs validation examples and an open pool")
    n = min(pool_sample or len(validation), len(open_pool))
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(len(open_pool), size=n, replace=False))
    feats = encoder.encode_batch(validation.utterances + [open_pool[i] for i in picks])
    K = model.n_outputs
    golds = np.concatenate([validation.label_indices(), np.full(n, K)])
    return best_threshold(softmax(model.forward(feats)), golds)


def train_msp(
    config: TrainConfig,
    split: SplitResult,
    encoder_spec: EncoderSpec,
    open_pool: Sequence[Utterance] | None = None,
    threshold: float = 0.5,
) -> tuple[MspModel, TrainHistory]:
    """K-way training on inliers only, then threshold calibration when a pool is given."""
    trained, history = train(config, split, None, encoder_spec, method="msp")
    if open_pool:
        seed = int(np.random.SeedSequence([config.seed, 1]).generate_state(1)[0])
        threshold = calibrate_threshold(trained.model, split.validation, open_pool, trained.encoder, seed=seed)
    msp = MspModel(trained.model, threshold, trained.encoder, encoder_spec, split.label_space)
    return msp, history
