"""Command-line entry point: ``oos-intent <command>``.

Exit codes: 0 success, 2 usage, 3 data/model mismatch, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from oos_intent.baselines import MspModel, train_msp
from oos_intent.benchmark import METRICS, BlobTask, make_blob_pool, make_blobs
from oos_intent.checkpoint import load_model, save_model
from oos_intent.data import (
    LabelSpace,
    SplitSpec,
    load_dataset,
    load_open_pool,
    load_test_jsonl,
    read_split,
    split_known_unknown,
    write_dataset_jsonl,
    write_split,
)
from oos_intent.encoder import EncoderSpec, read_oose, write_oose
from oos_intent.errors import DataError, FormatError, MismatchError, NumericalError
from oos_intent.evaluation import compute_metrics, confusion, evaluate, format_confusion
from oos_intent.outliers import BatchRatio
from oos_intent.trainer import TrainConfig, train

log = logging.getLogger("oos_intent")

EXIT_USAGE, EXIT_MISMATCH, EXIT_NUMERICAL = 2, 3, 4

# flag name -> default; resolved as flags > --config file > these
TRAIN_DEFAULTS = {
    "encoder": "hashed",
    "dim": None,
    "hash_buckets": 1 << 18,
    "manifest": None,
    "ratio": "100:100:400",
    "tau": 0.1,
    "lr": 1e-4,
    "encoder_lr": 1e-3,
    "patience": 5,
    "max_epochs": 50,
    "hidden": "1024,1024",
    "method": "ours",
    "known_ratio": None,
    "val_fraction": 0.1,
    "test_fraction": 0.2,
    "open_pool": None,
    "seeds": "0",
}


class UsageError(Exception):
    pass


def parse_seeds(text: str) -> list[int]:
    """``"3"``, ``"1,4,9"`` or an inclusive range ``"1..10"``."""
    seeds: list[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    if not seeds or any(s < 0 for s in seeds):
        raise UsageError(f"invalid seed list {text!r}")
    return seeds


def _ratio_arg(text: str) -> float:
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"known ratio must lie in (0, 1), got {text}")
    return value


def fingerprint(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- option resolution ----------------------------------------------------------


def resolve_options(args: argparse.Namespace) -> dict:
    file_opts = {}
    if getattr(args, "config", None):
        file_opts = json.loads(Path(args.config).read_text(encoding="utf-8"))
        unknown = set(file_opts) - set(TRAIN_DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys {sorted(unknown)}")
    opts = {}
    for key, default in TRAIN_DEFAULTS.items():
        flag = getattr(args, key, None)
        opts[key] = flag if flag is not None else file_opts.get(key, default)
    if args.seed is not None:
        opts["seeds"] = str(args.seed)
    return opts


def encoder_spec_from(opts: dict, train_dim: int | None) -> EncoderSpec:
    kind = {"hashed": "hashed_mean"}.get(opts["encoder"], opts["encoder"])
    dim = opts["dim"]
    if kind == "precomputed":
        if not opts["manifest"]:
            raise UsageError("--encoder precomputed needs --manifest")
        matrix, _ = read_oose(opts["manifest"])
        dim = dim or matrix.shape[1]
        return EncoderSpec(kind=kind, dim=int(dim), manifest_path=str(opts["manifest"]))
    if kind == "identity":
        dim = dim or train_dim
        if dim is None:
            raise DataError("identity encoder needs numeric data")
        return EncoderSpec(kind=kind, dim=int(dim))
    return EncoderSpec(kind=kind, dim=int(dim or 768), hash_buckets=int(opts["hash_buckets"]))


def train_config_from(opts: dict, seed: int) -> TrainConfig:
    try:
        ratio = BatchRatio.parse(str(opts["ratio"]))
        hidden = tuple(int(h) for h in str(opts["hidden"]).split(",") if h.strip())
        return TrainConfig(
            ratio=ratio,
            lr=float(opts["lr"]),
            encoder_lr=float(opts["encoder_lr"]),
            max_epochs=int(opts["max_epochs"]),
            patience=int(opts["patience"]),
            seed=seed,
            tau=float(opts["tau"]),
            hidden=hidden,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# -- commands -------------------------------------------------------------------


def cmd_make_blobs(args) -> int:
    task = BlobTask(per_class=args.per_class, std=args.std)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset_jsonl(out / "blobs.jsonl", make_blobs(task, seed=args.seed).examples)
    with open(out / "pool.jsonl", "w", encoding="utf-8", newline="\n") as f:
        for utt in make_blob_pool(task, seed=args.seed):
            f.write(json.dumps(utt.to_record(), sort_keys=True) + "\n")
    print(f"wrote {out / 'blobs.jsonl'} and {out / 'pool.jsonl'}")
    return 0


def cmd_split(args) -> int:
    dataset = load_dataset(args.data)
    split = split_known_unknown(dataset, SplitSpec(args.known_ratio, args.seed), args.val_fraction, args.test_fraction)
    paths = write_split(split, args.out)
    n_oos = sum(1 for _, y in split.test if y == split.label_space.oos_index)
    print(
        f"known classes: {split.label_space.K}  held out: {len(split.held_out)}\n"
        f"train {len(split.train)}  validation {len(split.validation)}  test {len(split.test)} ({n_oos} oos)\n"
        f"written to {paths['label_space'].parent}"
    )
    return 0


def _run_seed(job: dict) -> dict:
    """Run one seed end to end; returns its manifest entry."""
    opts, seed, out_dir = job["opts"], job["seed"], Path(job["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    if job.get("split_dir"):
        split = read_split(job["split_dir"])
    else:
        dataset = load_dataset(job["data"])
        split = split_known_unknown(
            dataset, SplitSpec(float(opts["known_ratio"]), seed), float(opts["val_fraction"]), float(opts["test_fraction"])
        )
        write_split(split, out_dir / "split")
    pool = load_open_pool(opts["open_pool"]) if opts["open_pool"] else None
    first = split.train.examples[0][0]
    spec = encoder_spec_from(opts, len(first.numeric) if first.numeric is not None else None)
    config = train_config_from(opts, seed)

    if opts["method"] == "msp":
        model, history = train_msp(config, split, spec, open_pool=pool)
    else:
        model, history = train(config, split, pool, spec)
    ckpt = out_dir / "model.ckpt"
    save_model(ckpt, model, seed=seed)
    history.write(out_dir / "history.jsonl", include_timing=job.get("timing", False))

    metrics = evaluate(model, model.encoder, split.test)
    _write_json(out_dir / "metrics.json", metrics.to_json())
    entry = {
        "seed": seed,
        "checkpoint": os.path.relpath(ckpt, job["root"]),
        "history": os.path.relpath(out_dir / "history.jsonl", job["root"]),
        "best_epoch": history.best_epoch,
        "epochs": len(history),
        "metrics": {k: getattr(metrics, k) for k in METRICS},
    }
    if isinstance(model, MspModel):
        entry["threshold"] = model.threshold
    return entry


def aggregate(entries: list[dict]) -> dict:
    out = {}
    for name in METRICS:
        values = np.array([e["metrics"][name] for e in entries], dtype=np.float64)
        out[name] = {
            "mean": float(values.mean()),
            "std": float(values.std(ddof=1)) if len(values) > 1 else 0.0,
        }
    return out


def _map_jobs(jobs: list[dict]) -> list[dict]:
    workers = max(1, int(os.environ.get("OOS_THREADS", "1")))
    if workers == 1 or len(jobs) == 1:
        return [_run_seed(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_run_seed, jobs))


def cmd_train(args) -> int:
    opts = resolve_options(args)
    if opts["method"] not in ("ours", "msp"):
        raise UsageError("--method must be ours or msp")
    if bool(args.split_dir) == bool(args.data):
        raise UsageError("give exactly one of --split-dir or --data")
    if args.data and opts["known_ratio"] is None:
        raise UsageError("--data needs --known-ratio")
    seeds = parse_seeds(opts["seeds"])
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    jobs = [
        {
            "opts": opts,
            "seed": s,
            "root": str(root),
            "out_dir": str(root / f"seed-{s}"),
            "split_dir": args.split_dir,
            "data": args.data,
            "timing": args.timing,
        }
        for s in seeds
    ]
    entries = _map_jobs(jobs)

    inputs = {}
    if args.split_dir:
        for name in ("train.jsonl", "validation.jsonl", "test.jsonl", "label_space.json"):
            inputs[name] = fingerprint(Path(args.split_dir) / name)
    else:
        inputs[Path(args.data).name] = fingerprint(args.data)
    if opts["open_pool"]:
        inputs[Path(opts["open_pool"]).name] = fingerprint(opts["open_pool"])
    manifest = {
        "config": opts,
        "seeds": seeds,
        "inputs": inputs,
        "runs": entries,
        "aggregate": aggregate(entries),
    }
    _write_json(root / "manifest.json", manifest)
    for e in entries:
        m = e["metrics"]
        print(f"seed {e['seed']}: acc {m['accuracy']:.4f}  macro-F1 {m['macro_f1_all']:.4f}  "
              f"known {m['macro_f1_known']:.4f}  unknown {m['f1_unknown']:.4f}")
    agg = manifest["aggregate"]
    print("mean: " + "  ".join(f"{k} {agg[k]['mean']:.4f}±{agg[k]['std']:.4f}" for k in METRICS))
    return 0


def _test_set(args, space: LabelSpace):
    if args.split_dir:
        split = read_split(args.split_dir)
        if split.label_space.known_classes != space.known_classes:
            raise MismatchError(
                f"checkpoint has K={space.K} classes {list(space.known_classes)}; "
                f"split has K={split.label_space.K} classes {list(split.label_space.known_classes)}"
            )
        return split.test
    return load_test_jsonl(args.test, space)


def _evaluate_checkpoint(path, args):
    model = load_model(path)
    if model.label_space is None or model.encoder is None:
        raise FormatError(f"{path}: checkpoint lacks label space or encoder")
    test = _test_set(args, model.label_space)
    features = model.encoder.encode_batch([u for u, _ in test])
    preds = model.predict(features)
    cm = confusion(preds, [y for _, y in test], model.label_space.K)
    return model, cm, compute_metrics(cm)


def cmd_eval(args) -> int:
    if bool(args.split_dir) == bool(args.test):
        raise UsageError("give exactly one of --split-dir or --test")
    paths = args.compare if args.compare else [args.checkpoint]
    if not paths or paths[0] is None:
        raise UsageError("give --checkpoint or --compare A B")
    results = [_evaluate_checkpoint(p, args) for p in paths]

    if len(results) == 1:
        model, cm, report = results[0]
        text = report.dumps()
        if args.out:
            Path(args.out).write_text(text, encoding="utf-8")
        print(text, end="")
        if args.confusion:
            names = [*model.label_space.known_classes, "oos"]
            print(format_confusion(cm, names))
        return 0

    (_, _, a), (_, _, b) = results
    rows = [f"{'metric':<16}{'A':>10}{'B':>10}{'A-B':>10}"]
    for name in METRICS:
        va, vb = getattr(a, name), getattr(b, name)
        rows.append(f"{name:<16}{va:>10.4f}{vb:>10.4f}{va - vb:>+10.4f}")
    table = "\n".join(rows)
    print(f"A = {paths[0]}\nB = {paths[1]}\n{table}")
    if args.out:
        _write_json(Path(args.out), {"A": a.to_json(), "B": b.to_json(),
                                     "delta": {k: getattr(a, k) - getattr(b, k) for k in METRICS}})
    return 0


def cmd_export_embeddings(args) -> int:
    model = load_model(args.checkpoint)
    if model.encoder is None:
        raise FormatError(f"{args.checkpoint}: checkpoint has no encoder")
    path = Path(args.data)
    if model.label_space is not None and path.name == "test.jsonl":
        items = load_test_jsonl(path, model.label_space)
        utts = [u for u, _ in items]
        labels = [model.label_space.name(y) for _, y in items]
    else:
        dataset = load_dataset(path)
        utts = dataset.utterances
        labels = [label for _, label in dataset.examples]
    matrix = model.encoder.encode_batch(utts)
    write_oose(args.out, matrix, [u.id for u in utts], labels)
    print(f"wrote {len(utts)} x {matrix.shape[1]} embeddings to {args.out}")
    return 0


def cmd_sweep(args) -> int:
    """Train ``ours`` at several synthetic counts and emit one CSV row per count."""
    opts = resolve_options(args)
    seeds = parse_seeds(opts["seeds"])
    if not args.data or opts["known_ratio"] is None:
        raise UsageError("sweep needs --data and --known-ratio")
    base = BatchRatio.parse(str(opts["ratio"]))
    counts = [int(c) for c in args.synthetic_counts.split(",")]
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for n_s in counts:
        run_opts = {**opts, "method": "ours", "ratio": str(BatchRatio(base.inliers, base.open, n_s))}
        jobs = [
            {"opts": run_opts, "seed": s, "root": str(root), "out_dir": str(root / f"syn-{n_s}" / f"seed-{s}"),
             "split_dir": None, "data": args.data, "timing": False}
            for s in seeds
        ]
        agg = aggregate(_map_jobs(jobs))
        rows.append({"inliers": base.inliers, "open": base.open, "synthetic": n_s, "seeds": len(seeds),
                     **{f"{k}_mean": agg[k]["mean"] for k in METRICS},
                     **{f"{k}_std": agg[k]["std"] for k in METRICS}})
    with open(root / "sweep.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    for r in rows:
        print(f"synthetic {r['synthetic']:>5}: unknown F1 {r['f1_unknown_mean']:.4f}  accuracy {r['accuracy_mean']:.4f}")
    print(f"wrote {root / 'sweep.csv'}")
    return 0


# -- parser -------------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="json file of option defaults; flags override it")
    p.add_argument("--data", help="labeled dataset (split per seed)")
    p.add_argument("--known-ratio", type=_ratio_arg, default=None)
    p.add_argument("--val-fraction", type=float, default=None)
    p.add_argument("--test-fraction", type=float, default=None)
    p.add_argument("--open-pool", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--seeds", default=None, help="e.g. 0..9 or 1,3,5")
    p.add_argument("--encoder", choices=["identity", "hashed", "precomputed"], default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--hash-buckets", type=int, default=None)
    p.add_argument("--manifest", default=None, help="OOSE file for --encoder precomputed")
    p.add_argument("--ratio", default=None, help="per-batch counts n_i:n_o:n_s")
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--encoder-lr", type=float, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--hidden", default=None, help="comma-separated hidden sizes")
    p.add_argument("--method", choices=["ours", "msp"], default=None)
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oos-intent", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-blobs", help="write the synthetic blob dataset and ring pool")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--std", type=float, default=0.2)
    p.set_defaults(func=cmd_make_blobs)

    p = sub.add_parser("split", help="class-holdout split into train/validation/test")
    p.add_argument("--data", required=True)
    p.add_argument("--known-ratio", type=_ratio_arg, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train ours or msp for one or more seeds")
    _add_train_flags(p)
    p.add_argument("--split-dir", default=None)
    p.add_argument("--timing", action="store_true", help="include wall time in history files")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a test split")
    p.add_argument("--checkpoint")
    p.add_argument("--compare", nargs=2, metavar=("A", "B"))
    p.add_argument("--split-dir")
    p.add_argument("--test")
    p.add_argument("--confusion", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-embeddings", help="write encoded features as an OOSE file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("sweep", help="vary the synthetic count, write sweep.csv")
    _add_train_flags(p)
    p.add_argument("--synthetic-counts", default="0,10,50,200,400")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"oos-intent: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MismatchError, DataError, FormatError, FileNotFoundError) as exc:
        print(f"oos-intent: error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except NumericalError as exc:
        print(f"oos-intent: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
