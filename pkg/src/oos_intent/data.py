"""Dataset loading, open-domain pools and the known/unknown class-holdout split."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from oos_intent.errors import DataError


@dataclass(frozen=True)
class Utterance:
    id: str
    text: str | None = None
    numeric: tuple[float, ...] | None = None

    def __post_init__(self):
        if (self.text is None) == (self.numeric is None):
            raise DataError(f"utterance {self.id!r}: exactly one of text/numeric must be set")

    def to_record(self) -> dict:
        rec: dict = {"id": self.id}
        if self.text is not None:
            rec["text"] = self.text
        else:
            rec["vec"] = list(self.numeric)
        return rec


@dataclass
class Dataset:
    examples: list[tuple[Utterance, str]]
    class_names: list[str]

    def __post_init__(self):
        names = set(self.class_names)
        if len(names) != len(self.class_names):
            raise DataError("duplicate class names")
        seen: set[str] = set()
        for utt, label in self.examples:
            if label not in names:
                raise DataError(f"example {utt.id!r} has unknown class {label!r}")
            if utt.id in seen:
                raise DataError(f"duplicate example id {utt.id!r}")
            seen.add(utt.id)

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def utterances(self) -> list[Utterance]:
        return [u for u, _ in self.examples]

    def label_indices(self) -> np.ndarray:
        index = {name: i for i, name in enumerate(self.class_names)}
        return np.array([index[label] for _, label in self.examples], dtype=np.int64)


@dataclass(frozen=True)
class SplitSpec:
    known_ratio: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.known_ratio < 1.0:
            raise DataError(f"known_ratio must lie in (0, 1), got {self.known_ratio}")
        if self.seed < 0:
            raise DataError("seed must be non-negative")


@dataclass(frozen=True)
class LabelSpace:
    known_classes: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.known_classes)) != len(self.known_classes):
            raise DataError("known class names must be unique")
        if len(self.known_classes) < 2:
            raise DataError("need at least 2 known classes")

    @property
    def K(self) -> int:
        return len(self.known_classes)

    @property
    def oos_index(self) -> int:
        return len(self.known_classes)

    def name(self, index: int) -> str:
        return OOS_LABEL if index == self.oos_index else self.known_classes[index]

    def to_json(self) -> dict:
        return {"known_classes": list(self.known_classes), "oos_index": self.oos_index}

    @classmethod
    def from_json(cls, obj: dict) -> "LabelSpace":
        space = cls(tuple(obj["known_classes"]))
        if obj.get("oos_index", space.oos_index) != space.oos_index:
            raise DataError("label space oos_index must equal the number of known classes")
        return space


OOS_LABEL = "__oos__"


@dataclass
class SplitResult:
    train: Dataset
    validation: Dataset
    test: list[tuple[Utterance, int]]
    label_space: LabelSpace
    held_out: list[str] = field(default_factory=list)


# -- loading ------------------------------------------------------------------


def _make_utterance(rec: dict, default_id: str, where: str) -> Utterance:
    uid = str(rec.get("id", default_id))
    has_text = "text" in rec and rec["text"] is not None
    has_vec = "vec" in rec and rec["vec"] is not None
    if has_text == has_vec:
        raise DataError(f"{where}: record needs exactly one of 'text' or 'vec'")
    if has_text:
        if not isinstance(rec["text"], str):
            raise DataError(f"{where}: 'text' must be a string")
        return Utterance(uid, text=rec["text"])
    vec = rec["vec"]
    if not isinstance(vec, list) or not vec:
        raise DataError(f"{where}: 'vec' must be a non-empty list of numbers")
    try:
        values = tuple(float(v) for v in vec)
    except (TypeError, ValueError):
        raise DataError(f"{where}: 'vec' must contain numbers") from None
    if not all(math.isfinite(v) for v in values):
        raise DataError(f"{where}: 'vec' has non-finite entries")
    return Utterance(uid, numeric=values)


def _iter_jsonl(path: Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid json ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DataError(f"{path}:{lineno}: record must be a json object")
            yield lineno, rec


def _iter_csv(path: Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            return
        missing = {"text", "label"} - set(reader.fieldnames)
        if missing:
            raise DataError(f"{path}:1: csv header lacks {sorted(missing)}")
        for row in reader:
            yield reader.line_num, {k: v for k, v in row.items() if k in ("id", "text", "label")}


def load_dataset(path: str | Path, format: str | None = None) -> Dataset:
    """Read a labeled dataset from jsonl or csv.

    ``format`` defaults to the file extension. Records carry ``text`` or
    ``vec`` plus ``label``; ``id`` defaults to the line number.
    """
    path = Path(path)
    fmt = format or path.suffix.lstrip(".").lower()
    if fmt not in ("jsonl", "csv"):
        raise DataError(f"unsupported dataset format {fmt!r}")
    records = _iter_jsonl(path) if fmt == "jsonl" else _iter_csv(path)

    examples: list[tuple[Utterance, str]] = []
    class_names: list[str] = []
    known: set[str] = set()
    ids: set[str] = set()
    kind = None
    dim = None
    for lineno, rec in records:
        where = f"{path}:{lineno}"
        if "label" not in rec or rec["label"] in (None, ""):
            raise DataError(f"{where}: record is missing 'label'")
        utt = _make_utterance(rec, str(lineno), where)
        this_kind = "text" if utt.text is not None else "vec"
        if kind is None:
            kind = this_kind
        elif kind != this_kind:
            raise DataError(f"{where}: mixed text and numeric records")
        if utt.numeric is not None:
            if dim is None:
                dim = len(utt.numeric)
            elif len(utt.numeric) != dim:
                raise DataError(f"{where}: vector dimension {len(utt.numeric)} != {dim}")
        if utt.id in ids:
            raise DataError(f"{where}: duplicate id {utt.id!r}")
        ids.add(utt.id)
        label = str(rec["label"])
        if label not in known:
            known.add(label)
            class_names.append(label)
        examples.append((utt, label))
    if not examples:
        raise DataError(f"{path}: empty dataset")
    return Dataset(examples, class_names)


def load_open_pool(path: str | Path) -> list[Utterance]:
    """Load unlabeled open-domain sentences.

    Plain text files hold one sentence per line; ``.jsonl`` files hold
    records with ``text`` (or ``vec`` for numeric pools). Blank lines are
    skipped and exact duplicates dropped. The file is streamed line by line.
    """
    path = Path(path)
    pool: list[Utterance] = []
    seen: set = set()
    if path.suffix.lower() == ".jsonl":
        for lineno, rec in _iter_jsonl(path):
            utt = _make_utterance(rec, f"pool-{len(pool)}", f"{path}:{lineno}")
            key = utt.text if utt.text is not None else utt.numeric
            if key in seen:
                continue
            seen.add(key)
            pool.append(Utterance(f"pool-{len(pool)}", text=utt.text, numeric=utt.numeric))
    else:
        with open(path, encoding="utf-8") as f:
            for line in f:
                text = line.strip()
                if not text or text in seen:
                    continue
                seen.add(text)
                pool.append(Utterance(f"pool-{len(pool)}", text=text))
    if not pool:
        raise DataError(f"{path}: open-domain pool is empty")
    kinds = {u.text is None for u in pool}
    if len(kinds) > 1:
        raise DataError(f"{path}: mixed text and numeric pool records")
    return pool


# -- splitting ----------------------------------------------------------------


def known_class_count(n_classes: int, known_ratio: float) -> int:
    """Round-half-up of ``known_ratio * n_classes``, at least 2, at most n-1."""
    n = math.floor(known_ratio * n_classes + 0.5)
    return min(max(n, 2), n_classes - 1)


def split_known_unknown(
    dataset: Dataset,
    spec: SplitSpec,
    val_fraction: float = 0.1,
    test_fraction: float = 0.2,
) -> SplitResult:
    """Hold out a random subset of classes as out-of-scope.

    Known-class examples are split per class into train/validation/test;
    every example of a held-out class goes to test with label K.
    """
    if not 0.0 < val_fraction < 0.5:
        raise DataError("val_fraction must lie in (0, 0.5)")
    if not 0.0 < test_fraction < 1.0 - val_fraction:
        raise DataError("test_fraction must lie in (0, 1 - val_fraction)")
    n_classes = len(dataset.class_names)
    if n_classes < 3:
        raise DataError(f"need at least 3 classes to hold some out, got {n_classes}")
    n_known = known_class_count(n_classes, spec.known_ratio)

    class_rng, example_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(2))
    order = class_rng.permutation(n_classes)
    chosen = set(order[:n_known].tolist())
    known = [name for i, name in enumerate(dataset.class_names) if i in chosen]
    held_out = [name for i, name in enumerate(dataset.class_names) if i not in chosen]
    space = LabelSpace(tuple(known))
    label_index = {name: i for i, name in enumerate(known)}

    positions: dict[str, list[int]] = {name: [] for name in known}
    for pos, (_, label) in enumerate(dataset.examples):
        if label in positions:
            positions[label].append(pos)

    split_of: dict[int, str] = {}
    for name in known:
        members = positions[name]
        if len(members) < 3:
            raise DataError(f"known class {name!r} has {len(members)} examples; need >= 3")
        perm = example_rng.permutation(len(members))
        n = len(members)
        n_val = min(max(1, math.floor(val_fraction * n + 0.5)), n - 2)
        n_test = min(max(1, math.floor(test_fraction * n + 0.5)), n - 1 - n_val)
        for rank, j in enumerate(perm):
            pos = members[j]
            if rank < n_val:
                split_of[pos] = "validation"
            elif rank < n_val + n_test:
                split_of[pos] = "test"
            else:
                split_of[pos] = "train"

    train, validation, test = [], [], []
    for pos, (utt, label) in enumerate(dataset.examples):
        if label not in label_index:
            test.append((utt, space.oos_index))
        elif split_of[pos] == "train":
            train.append((utt, label))
        elif split_of[pos] == "validation":
            validation.append((utt, label))
        else:
            test.append((utt, label_index[label]))

    return SplitResult(
        train=Dataset(train, list(known)),
        validation=Dataset(validation, list(known)),
        test=test,
        label_space=space,
        held_out=held_out,
    )


# -- split artifacts on disk ----------------------------------------------------


def write_dataset_jsonl(path: str | Path, examples: Sequence[tuple[Utterance, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for utt, label in examples:
            rec = utt.to_record()
            rec["label"] = label
            f.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def write_test_jsonl(path: str | Path, test: Sequence[tuple[Utterance, int]], space: LabelSpace) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for utt, index in test:
            rec = utt.to_record()
            rec["label"] = space.name(index)
            rec["label_index"] = int(index)
            f.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def load_test_jsonl(path: str | Path, space: LabelSpace) -> list[tuple[Utterance, int]]:
    """Read test records; ``label_index`` wins, else ``label`` is mapped."""
    path = Path(path)
    lookup = {name: i for i, name in enumerate(space.known_classes)}
    out = []
    for lineno, rec in _iter_jsonl(path):
        where = f"{path}:{lineno}"
        utt = _make_utterance(rec, str(lineno), where)
        if "label_index" in rec:
            index = int(rec["label_index"])
        elif "label" in rec:
            index = lookup.get(str(rec["label"]), space.oos_index)
        else:
            raise DataError(f"{where}: record is missing 'label'")
        if not 0 <= index <= space.oos_index:
            raise DataError(f"{where}: label index {index} outside [0, {space.oos_index}]")
        out.append((utt, index))
    if not out:
        raise DataError(f"{path}: empty test set")
    return out


def write_split(split: SplitResult, out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "train": out_dir / "train.jsonl",
        "validation": out_dir / "validation.jsonl",
        "test": out_dir / "test.jsonl",
        "label_space": out_dir / "label_space.json",
    }
    write_dataset_jsonl(paths["train"], split.train.examples)
    write_dataset_jsonl(paths["validation"], split.validation.examples)
    write_test_jsonl(paths["test"], split.test, split.label_space)
    meta = split.label_space.to_json()
    meta["held_out"] = list(split.held_out)
    paths["label_space"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths


def read_split(split_dir: str | Path) -> SplitResult:
    split_dir = Path(split_dir)
    meta_path = split_dir / "label_space.json"
    if not meta_path.exists():
        raise DataError(f"{split_dir}: no label_space.json (run the split command first)")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    space = LabelSpace.from_json(meta)

    def _known(name: str) -> Dataset:
        ds = load_dataset(split_dir / name, "jsonl")
        extra = set(ds.class_names) - set(space.known_classes)
        if extra:
            raise DataError(f"{split_dir / name}: classes {sorted(extra)} not in label space")
        return Dataset(ds.examples, list(space.known_classes))

    return SplitResult(
        train=_known("train.jsonl"),
        validation=_known("validation.jsonl"),
        test=load_test_jsonl(split_dir / "test.jsonl", space),
        label_space=space,
        held_out=list(meta.get("held_out", [])),
    )
