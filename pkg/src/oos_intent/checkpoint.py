"""OOSM checkpoints.

Layout: magic ``OOSM``, u32 version, u32 header length, a UTF-8 json header,
then little-endian f32 blobs in the order the header lists them. The header
carries layer sizes, K, temperature, the encoder spec and (for MSP) the
threshold. A trainable hashed encoder stores its touched table rows as one
extra blob; their bucket ids live in the header.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from oos_intent.baselines import MspModel
from oos_intent.classifier import MlpClassifier
from oos_intent.data import LabelSpace
from oos_intent.encoder import EncoderSpec, HashedMeanEncoder, make_encoder
from oos_intent.errors import FormatError
from oos_intent.trainer import TrainedModel

MAGIC = b"OOSM"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


def save_model(path: str | Path, trained: TrainedModel | MspModel, seed: int = 0) -> None:
    model = trained.model
    header = {
        "kind": trained.kind,
        "input_dim": model.input_dim,
        "hidden": list(model.hidden),
        "n_outputs": model.n_outputs,
        "K": trained.label_space.K if trained.label_space is not None else None,
        "known_classes": list(trained.label_space.known_classes) if trained.label_space is not None else None,
        "tau": model.tau,
        "encoder": trained.encoder_spec.to_json() if trained.encoder_spec is not None else None,
        "encoder_seed": seed,
    }
    if isinstance(trained, MspModel):
        header["threshold"] = trained.threshold

    blobs = list(model.parameters().items())
    encoder = trained.encoder
    if isinstance(encoder, HashedMeanEncoder):
        header["encoder_seed"] = encoder.seed
        keys, table = encoder.state()
        header["encoder_rows"] = keys
        blobs.append(("encoder/table", table))
    header["blobs"] = [{"name": name, "shape": list(arr.shape)} for name, arr in blobs]

    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
        f.write(head)
        for _, arr in blobs:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_header(path: str | Path) -> tuple[dict, bytes]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise FormatError(f"{path}: truncated checkpoint")
    magic, version, head_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r} (format version {VERSION})")
    if version != VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, this build reads version {VERSION}")
    end = _PREFIX.size + head_len
    if len(raw) < end:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_PREFIX.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from None
    return header, raw[end:]


def load_model(path: str | Path) -> TrainedModel | MspModel:
    header, payload = read_header(path)
    expected = sum(int(np.prod(b["shape"])) for b in header["blobs"]) * 4
    if expected != len(payload):
        raise FormatError(f"{path}: payload has {len(payload)} bytes, header declares {expected}")
    arrays, offset = {}, 0
    for b in header["blobs"]:
        count = int(np.prod(b["shape"]))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        arrays[b["name"]] = arr.astype(np.float64).reshape(b["shape"])
        offset += count * 4

    model = MlpClassifier(header["input_dim"], header["n_outputs"], header["hidden"], tau=header["tau"])
    for name, target in model.parameters().items():
        if name not in arrays:
            raise FormatError(f"{path}: missing parameter blob {name}")
        if arrays[name].shape != target.shape:
            raise FormatError(f"{path}: {name} shape {arrays[name].shape} != {target.shape}")
        target[...] = arrays[name]

    space = LabelSpace(tuple(header["known_classes"])) if header.get("known_classes") else None
    spec = EncoderSpec.from_json(header["encoder"]) if header.get("encoder") else None
    encoder = make_encoder(spec, seed=header.get("encoder_seed", 0)) if spec is not None else None
    if isinstance(encoder, HashedMeanEncoder):
        table = arrays.get("encoder/table", np.zeros((0, spec.dim)))
        rows = header.get("encoder_rows", [])
        if len(rows) != len(table):
            raise FormatError(f"{path}: {len(rows)} encoder row ids for {len(table)} rows")
        encoder.load_state(rows, table)

    if header["kind"] == "msp":
        return MspModel(model, header["threshold"], encoder, spec, space)
    return TrainedModel(model, encoder, spec, space, kind=header["kind"])
