"""End-to-end (K+1)-way training with pseudo outliers and early stopping."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from oos_intent.classifier import AdamState, MlpClassifier, adam_step, cross_entropy, forward, loss_and_grad
from oos_intent.data import Dataset, LabelSpace, SplitResult, Utterance
from oos_intent.encoder import Encoder, EncoderSpec, HashedMeanEncoder, make_encoder
from oos_intent.errors import DataError, NumericalError
from oos_intent.outliers import BatchRatio, compose_batch, mix_pairs

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    ratio: BatchRatio = field(default_factory=BatchRatio)
    lr: float = 1e-4
    encoder_lr: float = 1e-3
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    tau: float = 0.1
    hidden: tuple[int, ...] = (1024, 1024)
    # plateau tolerance on the validation score
    min_delta: float = 1e-4
    # draw synthetic parents from the batch ("batch") or the whole train set ("train")
    parents: str = "batch"
    detach_synthetic: bool = True
    trace_path: str | None = None

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.lr <= 0 or self.encoder_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.parents not in ("batch", "train"):
            raise ValueError("parents must be 'batch' or 'train'")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    def to_json(self) -> dict:
        d = asdict(self)
        d["ratio"] = str(self.ratio)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        if isinstance(obj.get("ratio"), str):
            obj["ratio"] = BatchRatio.parse(obj["ratio"])
        elif isinstance(obj.get("ratio"), (list, tuple)):
            obj["ratio"] = BatchRatio(*obj["ratio"])
        if "hidden" in obj:
            obj["hidden"] = tuple(obj["hidden"])
        return cls(**obj)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_score: float
    n_batches: int
    n_inliers: int
    n_open: int
    n_synthetic: int
    wall_time: float = field(default=0.0, compare=False)


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def to_jsonl(self, include_timing: bool = False) -> str:
        lines = []
        for rec in self.records:
            d = asdict(rec)
            if not include_timing:
                d.pop("wall_time")
            lines.append(json.dumps(d, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")

    def write(self, path: str | Path, include_timing: bool = False) -> None:
        Path(path).write_text(self.to_jsonl(include_timing), encoding="utf-8")


@dataclass
class TrainedModel:
    """A trained head with the encoder that feeds it."""

    model: MlpClassifier
    encoder: Encoder
    encoder_spec: EncoderSpec
    label_space: LabelSpace
    kind: str = "ours"

    @property
    def num_known(self) -> int:
        return self.label_space.K

    def predict(self, features) -> np.ndarray:
        return self.model.predict(features)


def _snapshot(model: MlpClassifier, encoder: Encoder):
    rows = {k: v.copy() for k, v in encoder.rows.items()} if isinstance(encoder, HashedMeanEncoder) else None
    return model.copy(), rows


def validation_score(
    model: MlpClassifier,
    encoder: Encoder,
    validation: Dataset,
    seed: int,
    synthetic_per_inlier: float = 4.0,
    oos_index: int | None = None,
) -> float:
    """Negative mean cross-entropy on validation inliers plus synthetic outliers.

    The outliers are mixed from validation features with a fixed seed, so
    the same parents and weights are reused every epoch. Higher is better.
    """
    if len(validation) == 0:
        raise DataError("empty validation set")
    feats = encoder.encode_batch(validation.utterances)
    labels = validation.label_indices()
    m = int(round(synthetic_per_inlier * len(labels)))
    if m:
        if oos_index is None:
            oos_index = len(validation.class_names)
        syn, _ = mix_pairs(feats, labels, m, np.random.default_rng(seed))
        feats = np.concatenate([feats, syn])
        labels = np.concatenate([labels, np.full(m, oos_index)])
    return -float(cross_entropy(forward(model, feats), labels, model.tau).mean())


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Shuffled indices, ``ceil(n / batch_size)`` full batches.

    The last batch wraps around to the start of the permutation so every
    batch holds exactly ``batch_size`` inliers.
    """
    n_batches = math.ceil(n / batch_size)
    return np.resize(rng.permutation(n), n_batches * batch_size).reshape(n_batches, batch_size)


def _effective_ratio(ratio: BatchRatio, n_train: int) -> BatchRatio:
    if n_train >= ratio.inliers:
        return ratio
    scale = n_train / ratio.inliers
    return BatchRatio(n_train, round(ratio.open * scale), round(ratio.synthetic * scale))


def train(
    config: TrainConfig,
    split: SplitResult,
    open_pool: Sequence[Utterance] | None,
    encoder_spec: EncoderSpec,
    *,
    method: str = "ours",
    score_fn: Callable[[MlpClassifier, Encoder], float] | None = None,
) -> tuple[TrainedModel, TrainHistory]:
    """Train the (K+1)-way head (``method="ours"``) or a K-way MSP head.

    Returns the epoch with the best validation score, which is not
    necessarily the last one. ``score_fn`` replaces the validation score.
    """
    if method not in ("ours", "msp"):
        raise ValueError(f"unknown method {method!r}")
    space = split.label_space
    K = space.K
    if len(split.train) == 0 or len(set(split.train.label_indices().tolist())) < 2:
        raise DataError("training set needs examples from at least 2 classes")

    ratio = config.ratio if method == "ours" else BatchRatio(config.ratio.inliers, 0, 0)
    tau = config.tau if method == "ours" else 1.0
    n_outputs = K + 1 if method == "ours" else K
    if ratio.open and not open_pool:
        raise DataError("open-domain quota > 0 needs a nonempty open pool")

    init_ss, shuffle_ss, compose_ss, val_ss = np.random.SeedSequence(config.seed).spawn(4)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    compose_rng = np.random.default_rng(compose_ss)
    val_seed = int(val_ss.generate_state(1)[0])

    encoder = make_encoder(encoder_spec, seed=config.seed)
    trainable = getattr(encoder, "trainable", False)
    model = MlpClassifier(
        encoder.dim, n_outputs, config.hidden, tau=tau, seed=int(init_ss.generate_state(1)[0])
    )
    state = AdamState(lr=config.lr, group_lr={"encoder/": config.encoder_lr})

    train_utts = split.train.utterances
    train_y = split.train.label_indices()
    ratio = _effective_ratio(ratio, len(train_y))
    train_feats = None if trainable else encoder.encode_batch(train_utts)
    pool_feats = None
    if ratio.open and not trainable:
        pool_feats = encoder.encode_batch(open_pool)

    if score_fn is None:
        rate = ratio.synthetic / ratio.inliers

        def score_fn(m, e):
            return validation_score(m, e, split.validation, val_seed, rate, oos_index=K)

    trace_fh = open(config.trace_path, "w", encoding="utf-8") if config.trace_path else None
    history = TrainHistory()
    best_score = -math.inf
    plateau_ref = -math.inf
    stale = 0
    best = _snapshot(model, encoder)
    try:
        for epoch in range(1, config.max_epochs + 1):
            t0 = time.perf_counter()
            if ratio.open and trainable:
                pool_feats = encoder.encode_batch(open_pool)
            batches = _epoch_batches(len(train_y), ratio.inliers, shuffle_rng)
            losses, correct, seen = [], 0, 0
            counts = np.zeros(3, dtype=np.int64)
            for b, idx in enumerate(batches):
                try:
                    report, batch = _train_step(
                        config, model, encoder, state, trainable, idx, train_utts, train_y,
                        train_feats, pool_feats, ratio, compose_rng, K,
                    )
                except NumericalError as exc:
                    raise NumericalError(f"epoch {epoch}, batch {b}: {exc}") from exc
                if trace_fh is not None and batch.trace is not None:
                    batch.trace.write_jsonl(trace_fh, epoch=epoch, batch=b)
                losses.append(report.loss)
                correct += report.correct
                seen += report.batch_size
                counts += [batch.counts.inliers, batch.counts.open, batch.counts.synthetic]

            score = float(score_fn(model, encoder))
            history.records.append(EpochRecord(
                epoch=epoch,
                train_loss=float(np.mean(losses)),
                train_accuracy=correct / seen,
                val_score=score,
                n_batches=len(batches),
                n_inliers=int(counts[0]),
                n_open=int(counts[1]),
                n_synthetic=int(counts[2]),
                wall_time=time.perf_counter() - t0,
            ))
            log.debug("epoch %d loss %.4f val %.4f", epoch, losses[-1], score)
            if score > best_score:
                best_score = score
                best = _snapshot(model, encoder)
                history.best_epoch = epoch
            if score >= plateau_ref + config.min_delta:
                plateau_ref = score
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    finally:
        if trace_fh is not None:
            trace_fh.close()

    best_model, best_rows = best
    if best_rows is not None:
        encoder.rows = best_rows
        encoder.zero_grad()
    return TrainedModel(best_model, encoder, encoder_spec, space, kind=method), history


def _train_step(config, model, encoder, state, trainable, idx, train_utts, train_y,
                train_feats, pool_feats, ratio, rng, K):
    batch_y = train_y[idx]
    batch_utts = [train_utts[j] for j in idx]
    feats = encoder.encode_batch(batch_utts) if trainable else train_feats[idx]

    parents = None
    if ratio.synthetic and (config.parents == "train" or len(np.unique(batch_y)) < 2):
        all_feats = encoder.encode_batch(train_utts) if trainable else train_feats
        parents = (all_feats, train_y)
    batch = compose_batch(feats, batch_y, pool_feats, ratio, rng, K, parents=parents)
    report, grads, dx = loss_and_grad(model, batch)

    params = model.parameters()
    if trainable:
        n_i = len(idx)
        g_in = dx[:n_i].copy()
        if not config.detach_synthetic and batch.trace is not None and parents is None:
            theta = batch.trace.theta[:, None]
            g_syn = dx[n_i + batch.counts.open:]
            np.add.at(g_in, batch.trace.alpha, (1.0 - theta) * g_syn)
            np.add.at(g_in, batch.trace.beta, theta * g_syn)
        encoder.zero_grad()
        encoder.backward(batch_utts, g_in)
        grads.update(encoder.gradients())
        params = {**params, **encoder.parameters()}
    adam_step(params, state, grads)
    return report, batch


def with_overrides(config: TrainConfig, **changes) -> TrainConfig:
    return replace(config, **{k: v for k, v in changes.items() if v is not None})
