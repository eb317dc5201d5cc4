"""Utterance encoders: identity passthrough, hashed mean embedding, precomputed lookup.

All encoders map a list of utterances to an ``(n, dim)`` float64 matrix.
The hashed mean embedding is trainable: ``backward`` accumulates gradients
into the rows of its embedding table, which the trainer then steps with Adam.
"""

from __future__ import annotations

import hashlib
import json
import string
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from oos_intent.data import Utterance
from oos_intent.errors import DataError, FormatError

ENCODER_KINDS = ("identity", "hashed_mean", "precomputed")

OOSE_MAGIC = b"OOSE"
OOSE_VERSION = 1
_OOSE_HEADER = struct.Struct("<4sIII")

INIT_SCALE = 0.05


@dataclass(frozen=True)
class EncoderSpec:
    kind: str = "hashed_mean"
    dim: int = 768
    hash_buckets: int = 1 << 18
    trainable: bool = True
    manifest_path: str | None = None
    hash_seed: int = 0

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}; expected one of {ENCODER_KINDS}")
        if self.dim <= 0:
            raise ValueError("encoder dim must be positive")
        if self.kind == "hashed_mean" and self.hash_buckets < 1024:
            raise ValueError("hashed_mean needs hash_buckets >= 1024")
        if self.kind == "precomputed" and not self.manifest_path:
            raise ValueError("precomputed encoder needs a manifest_path")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "EncoderSpec":
        return cls(**obj)


class IdentityEncoder:
    kind = "identity"
    trainable = False

    def __init__(self, dim: int):
        self.dim = dim

    def encode(self, utterance: Utterance) -> np.ndarray:
        if utterance.numeric is None:
            raise DataError(f"identity encoder needs numeric input; {utterance.id!r} is text")
        if len(utterance.numeric) != self.dim:
            raise DataError(f"utterance {utterance.id!r} has dim {len(utterance.numeric)}, encoder expects {self.dim}")
        return np.asarray(utterance.numeric, dtype=np.float64)

    def encode_batch(self, utterances: Sequence[Utterance]) -> np.ndarray:
        return _stack(self, utterances)

    def backward(self, utterances, upstream_grads) -> None:
        _check_grads(self, utterances, upstream_grads)


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip surrounding punctuation."""
    tokens = (tok.strip(string.punctuation) for tok in text.lower().split())
    return [tok for tok in tokens if tok]


def bucket_of(token: str, n_buckets: int, seed: int = 0) -> int:
    """Keyed 64-bit BLAKE2b hash of the token, reduced modulo ``n_buckets``."""
    key = seed.to_bytes(8, "little")
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=key).digest()
    return int.from_bytes(digest, "little") % n_buckets


class HashedMeanEncoder:
    """Mean of embedding-table rows over hashed tokens.

    Rows are created lazily and deterministically from ``(seed, bucket)``,
    uniform in ``[-0.05, 0.05]`` and rounded to float32 so checkpoints
    round-trip exactly.
    """

    kind = "hashed_mean"

    def __init__(self, dim: int, hash_buckets: int, seed: int = 0, hash_seed: int = 0, trainable: bool = True):
        self.dim = dim
        self.hash_buckets = hash_buckets
        self.seed = seed
        self.hash_seed = hash_seed
        self.trainable = trainable
        self.rows: dict[int, np.ndarray] = {}
        self.grads: dict[int, np.ndarray] = {}

    def buckets(self, text: str) -> list[int]:
        return [bucket_of(tok, self.hash_buckets, self.hash_seed) for tok in tokenize(text)]

    def row(self, bucket: int) -> np.ndarray:
        r = self.rows.get(bucket)
        if r is None:
            rng = np.random.default_rng([self.seed, bucket])
            r = rng.uniform(-INIT_SCALE, INIT_SCALE, self.dim).astype(np.float32).astype(np.float64)
            self.rows[bucket] = r
        return r

    def encode(self, utterance: Utterance) -> np.ndarray:
        if utterance.text is None:
            raise DataError(f"hashed_mean encoder needs text; {utterance.id!r} is numeric")
        buckets = self.buckets(utterance.text)
        if not buckets:
            return np.zeros(self.dim)
        return np.mean([self.row(b) for b in buckets], axis=0)

    def encode_batch(self, utterances: Sequence[Utterance]) -> np.ndarray:
        return _stack(self, utterances)

    def backward(self, utterances: Sequence[Utterance], upstream_grads) -> None:
        """Accumulate ``g / n_tokens`` into the row of every token."""
        grads = _check_grads(self, utterances, upstream_grads)
        if not self.trainable:
            return
        for utt, g in zip(utterances, grads):
            buckets = self.buckets(utt.text)
            if not buckets:
                continue
            share = g / len(buckets)
            for b in buckets:
                acc = self.grads.get(b)
                if acc is None:
                    self.row(b)
                    self.grads[b] = share.copy()
                else:
                    acc += share

    def zero_grad(self) -> None:
        self.grads = {}

    def parameters(self) -> dict[str, np.ndarray]:
        """Rows that currently hold a gradient, keyed ``encoder/<bucket>``."""
        return {f"encoder/{b}": self.rows[b] for b in self.grads}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"encoder/{b}": g for b, g in self.grads.items()}

    def state(self) -> tuple[list[int], np.ndarray]:
        keys = sorted(self.rows)
        table = np.stack([self.rows[k] for k in keys]) if keys else np.zeros((0, self.dim))
        return keys, table

    def load_state(self, keys: Sequence[int], table: np.ndarray) -> None:
        self.rows = {int(k): np.array(table[i], dtype=np.float64) for i, k in enumerate(keys)}
        self.grads = {}


class PrecomputedEncoder:
    """Looks up vectors by utterance id in an OOSE embedding file."""

    kind = "precomputed"
    trainable = False

    def __init__(self, manifest_path: str | Path):
        self.manifest_path = Path(manifest_path)
        matrix, records = read_oose(self.manifest_path)
        self.matrix = matrix.astype(np.float64)
        self.dim = matrix.shape[1]
        self.index = {}
        for rec in records:
            if rec["id"] in self.index:
                raise FormatError(f"{self.manifest_path}: duplicate id {rec['id']!r} in sidecar")
            self.index[rec["id"]] = rec["row"]

    def encode(self, utterance: Utterance) -> np.ndarray:
        row = self.index.get(utterance.id)
        if row is None:
            raise DataError(f"id {utterance.id!r} missing from {self.manifest_path}")
        return self.matrix[row].copy()

    def encode_batch(self, utterances: Sequence[Utterance]) -> np.ndarray:
        return _stack(self, utterances)

    def backward(self, utterances, upstream_grads) -> None:
        _check_grads(self, utterances, upstream_grads)


Encoder = IdentityEncoder | HashedMeanEncoder | PrecomputedEncoder


def make_encoder(spec: EncoderSpec, seed: int = 0) -> Encoder:
    if spec.kind == "identity":
        return IdentityEncoder(spec.dim)
    if spec.kind == "hashed_mean":
        return HashedMeanEncoder(spec.dim, spec.hash_buckets, seed=seed, hash_seed=spec.hash_seed, trainable=spec.trainable)
    enc = PrecomputedEncoder(spec.manifest_path)
    if enc.dim != spec.dim:
        raise DataError(f"{spec.manifest_path}: dim {enc.dim} != configured {spec.dim}")
    return enc


def encode(encoder: Encoder, utterance: Utterance) -> np.ndarray:
    return encoder.encode(utterance)


def encode_batch(encoder: Encoder, utterances: Sequence[Utterance]) -> np.ndarray:
    return encoder.encode_batch(utterances)


def encoder_backward(encoder: Encoder, utterances: Sequence[Utterance], upstream_grads) -> None:
    encoder.backward(utterances, upstream_grads)


def _stack(encoder, utterances: Sequence[Utterance]) -> np.ndarray:
    out = np.empty((len(utterances), encoder.dim))
    for i, utt in enumerate(utterances):
        try:
            out[i] = encoder.encode(utt)
        except DataError as exc:
            raise DataError(f"batch element {i}: {exc}") from exc
    return out


def _check_grads(encoder, utterances, upstream_grads) -> np.ndarray:
    grads = np.asarray(upstream_grads, dtype=np.float64)
    if grads.shape != (len(utterances), encoder.dim):
        raise ValueError(f"gradient shape {grads.shape} != ({len(utterances)}, {encoder.dim})")
    return grads


# -- OOSE embedding files -----------------------------------------------------


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".jsonl")


def write_oose(path: str | Path, matrix: np.ndarray, ids: Sequence[str], labels: Sequence[str] | None = None) -> None:
    """Write ``magic, version, count, dim`` then row-major little-endian f32 rows.

    The sidecar ``<path>.jsonl`` maps each row to its utterance id (and
    label, when given).
    """
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValueError("embedding matrix must be 2-D")
    count, dim = matrix.shape
    if len(ids) != count or (labels is not None and len(labels) != count):
        raise ValueError("ids/labels must align with matrix rows")
    with open(path, "wb") as f:
        f.write(_OOSE_HEADER.pack(OOSE_MAGIC, OOSE_VERSION, count, dim))
        f.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())
    with open(sidecar_path(path), "w", encoding="utf-8", newline="\n") as f:
        for i, uid in enumerate(ids):
            rec = {"row": i, "id": uid}
            if labels is not None:
                rec["label"] = labels[i]
            f.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def read_oose(path: str | Path) -> tuple[np.ndarray, list[dict]]:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _OOSE_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, count, dim = _OOSE_HEADER.unpack_from(blob)
    if magic != OOSE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {OOSE_MAGIC!r}")
    if version != OOSE_VERSION:
        raise FormatError(f"{path}: unsupported OOSE version {version}")
    payload = blob[_OOSE_HEADER.size:]
    if len(payload) != count * dim * 4:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, header implies {count * dim * 4}")
    matrix = np.frombuffer(payload, dtype="<f4").reshape(count, dim).copy()

    records = []
    side = sidecar_path(path)
    if not side.exists():
        raise FormatError(f"{path}: missing sidecar {side}")
    with open(side, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                records.append(json.loads(line))
    if len(records) != count or any(r.get("row") != i for i, r in enumerate(records)):
        raise FormatError(f"{side}: sidecar rows do not match {count} embeddings")
    return matrix, records
