"""Pseudo outliers: convex combinations across classes and open-domain samples."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence, TextIO

import numpy as np

from oos_intent.errors import DataError

# provenance codes for TrainBatch rows
INLIER, OPEN, SYNTHETIC = 0, 1, 2

SYNTHETIC_RATIO_WARNING = 20.0


@dataclass(frozen=True)
class BatchRatio:
    inliers: int = 100
    open: int = 100
    synthetic: int = 400

    def __post_init__(self):
        if self.inliers < 1 or self.open < 0 or self.synthetic < 0:
            raise ValueError(f"invalid batch ratio {self}")

    @classmethod
    def parse(cls, text: str) -> "BatchRatio":
        """Parse ``n_i:n_o:n_s``."""
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"ratio must look like n_i:n_o:n_s, got {text!r}")
        return cls(*(int(p) for p in parts))

    def __str__(self) -> str:
        return f"{self.inliers}:{self.open}:{self.synthetic}"

    @property
    def total(self) -> int:
        return self.inliers + self.open + self.synthetic


@dataclass(frozen=True)
class EmbeddedExample:
    features: np.ndarray
    label: int


@dataclass
class SynthesisTrace:
    """Parent rows and mixing weights of a batch of synthetic outliers."""

    alpha: np.ndarray
    beta: np.ndarray
    theta: np.ndarray

    def write_jsonl(self, fh: TextIO, **context) -> None:
        for a, b, t in zip(self.alpha.tolist(), self.beta.tolist(), self.theta.tolist()):
            fh.write(json.dumps({**context, "alpha": a, "beta": b, "theta": t}, sort_keys=True) + "\n")


@dataclass
class TrainBatch:
    features: np.ndarray
    labels: np.ndarray
    provenance: np.ndarray
    counts: BatchRatio
    trace: SynthesisTrace | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def examples(self) -> Iterator[EmbeddedExample]:
        for x, y in zip(self.features, self.labels):
            yield EmbeddedExample(x, int(y))


def mix_pairs(
    features: np.ndarray, labels: np.ndarray, m: int, rng: np.random.Generator
) -> tuple[np.ndarray, SynthesisTrace]:
    """Draw ``m`` convex combinations of rows from two different classes.

    A class pair is drawn uniformly over unordered pairs of present classes,
    then one row uniformly from each, then ``theta ~ U(0, 1)``. The output is
    ``theta * h_beta + (1 - theta) * h_alpha``, clipped to the parents' box so
    float rounding never leaves the segment.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise DataError(f"synthetic outliers need >= 2 classes, got {len(classes)}")
    # rows grouped by class: class c occupies order[starts[c]:starts[c] + sizes[c]]
    order = np.argsort(np.searchsorted(classes, labels), kind="stable")
    sizes = np.array([np.count_nonzero(labels == c) for c in classes])
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    first, second = np.triu_indices(len(classes), k=1)

    pair = rng.integers(0, len(first), size=m)
    ca, cb = first[pair], second[pair]
    alpha = order[starts[ca] + rng.integers(0, sizes[ca], size=m)]
    beta = order[starts[cb] + rng.integers(0, sizes[cb], size=m)]
    theta = rng.random(m)

    ha, hb = features[alpha], features[beta]
    out = theta[:, None] * hb + (1.0 - theta[:, None]) * ha
    out = np.clip(out, np.minimum(ha, hb), np.maximum(ha, hb))
    return out.reshape(m, features.shape[1]), SynthesisTrace(alpha, beta, theta)


def synthesize_outliers(
    features_by_class: Mapping[int, Sequence], m: int, rng: np.random.Generator
) -> np.ndarray:
    """``m`` synthetic outliers from a ``class index -> feature list`` map."""
    if m < 0:
        raise ValueError("m must be non-negative")
    blocks, labels = [], []
    for c, feats in features_by_class.items():
        feats = np.asarray(feats, dtype=np.float64)
        if len(feats) == 0:
            continue
        blocks.append(feats.reshape(len(feats), -1))
        labels.append(np.full(len(feats), c))
    if len(blocks) < 2:
        raise DataError("synthetic outliers need at least 2 nonempty classes")
    out, _ = mix_pairs(np.concatenate(blocks), np.concatenate(labels), m, rng)
    return out


def sample_open_outliers(pool_features: np.ndarray, h: int, rng: np.random.Generator) -> np.ndarray:
    """``h`` rows drawn uniformly with replacement from the pool."""
    pool_features = np.asarray(pool_features, dtype=np.float64)
    if h < 0:
        raise ValueError("h must be non-negative")
    if h == 0:
        return np.zeros((0, pool_features.shape[-1] if pool_features.ndim == 2 else 0))
    if len(pool_features) == 0:
        raise DataError("open-domain pool is empty")
    return pool_features[rng.integers(0, len(pool_features), size=h)]


def compose_batch(
    inlier_features: np.ndarray,
    inlier_labels: np.ndarray,
    pool_features: np.ndarray | None,
    ratio: BatchRatio,
    rng: np.random.Generator,
    oos_index: int,
    parents: tuple[np.ndarray, np.ndarray] | None = None,
) -> TrainBatch:
    """Inliers, then ``ratio.open`` pool samples, then ``ratio.synthetic`` mixtures.

    Every outlier is labeled ``oos_index``. Synthetic parents come from the
    given inliers unless ``parents=(features, labels)`` overrides them.
    The open samples are drawn before the synthetic ones from ``rng``.
    """
    inlier_features = np.asarray(inlier_features, dtype=np.float64)
    inlier_labels = np.asarray(inlier_labels, dtype=np.int64)
    n_i = len(inlier_labels)
    if np.any(inlier_labels < 0) or np.any(inlier_labels >= oos_index):
        raise DataError("inlier labels must lie in [0, K)")
    if n_i and ratio.synthetic / n_i > SYNTHETIC_RATIO_WARNING:
        warnings.warn(
            f"{ratio.synthetic} synthetic outliers for {n_i} inliers exceeds "
            f"{SYNTHETIC_RATIO_WARNING:g}x; accuracy tends to drop at such counts",
            stacklevel=2,
        )

    dim = inlier_features.shape[1]
    if ratio.open:
        if pool_features is None:
            raise DataError("open-domain quota requires a pool")
        open_feats = sample_open_outliers(pool_features, ratio.open, rng)
    else:
        open_feats = np.zeros((0, dim))

    trace = None
    if ratio.synthetic:
        src_f, src_l = parents if parents is not None else (inlier_features, inlier_labels)
        syn_feats, trace = mix_pairs(src_f, src_l, ratio.synthetic, rng)
    else:
        syn_feats = np.zeros((0, dim))

    features = np.concatenate([inlier_features, open_feats, syn_feats])
    labels = np.concatenate([
        inlier_labels,
        np.full(len(open_feats) + len(syn_feats), oos_index, dtype=np.int64),
    ])
    provenance = np.repeat([INLIER, OPEN, SYNTHETIC], [n_i, len(open_feats), len(syn_feats)])
    return TrainBatch(features, labels, provenance, BatchRatio(max(n_i, 1), len(open_feats), len(syn_feats)), trace)
