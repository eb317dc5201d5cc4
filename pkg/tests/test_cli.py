import json
import shutil
import subprocess
import time

import numpy as np
import pytest

from conftest import text_dataset
from oos_intent.checkpoint import load_model, save_model
from oos_intent.classifier import MlpClassifier
from oos_intent.cli import aggregate, main, parse_seeds
from oos_intent.data import Utterance, load_test_jsonl, read_split, write_dataset_jsonl
from oos_intent.encoder import EncoderSpec, PrecomputedEncoder, make_encoder, write_oose
from oos_intent.trainer import TrainedModel

FAST = ["--encoder", "identity", "--hidden", "32,32", "--max-epochs", "4", "--lr", "3e-3", "--ratio", "20:20:80"]


@pytest.fixture(scope="module")
def blobs(tmp_path_factory):
    root = tmp_path_factory.mktemp("blobs")
    assert main(["make-blobs", "--out", str(root), "--per-class", "40"]) == 0
    return root


@pytest.fixture(scope="module")
def split_dir(blobs, tmp_path_factory):
    out = tmp_path_factory.mktemp("split")
    assert main(["split", "--data", str(blobs / "blobs.jsonl"), "--known-ratio", "0.5", "--seed", "7",
                 "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained_dirs(blobs, split_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    pool = str(blobs / "pool.jsonl")
    assert main(["train", "--split-dir", str(split_dir), "--open-pool", pool, *FAST, "--out", str(root / "ours")]) == 0
    assert main(["train", "--split-dir", str(split_dir), "--open-pool", pool, *FAST, "--method", "msp",
                 "--out", str(root / "msp")]) == 0
    return root


def test_parse_seeds():
    assert parse_seeds("1..10") == list(range(1, 11))
    assert parse_seeds("1,3,5") == [1, 3, 5]
    assert parse_seeds("4") == [4]


class TestSplit:
    def test_writes_files_and_summary(self, split_dir, blobs, capsys, tmp_path):
        main(["split", "--data", str(blobs / "blobs.jsonl"), "--known-ratio", "0.5", "--seed", "7", "--out", str(tmp_path)])
        assert "known classes: 3" in capsys.readouterr().out
        for name in ("train.jsonl", "validation.jsonl", "test.jsonl", "label_space.json"):
            assert (split_dir / name).is_file()
            assert (split_dir / name).read_bytes() == (tmp_path / name).read_bytes()

    def test_bad_ratio_exit_2(self, blobs, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["split", "--data", str(blobs / "blobs.jsonl"), "--known-ratio", "1.5", "--out", str(tmp_path)])
        assert exc.value.code == 2

    def test_missing_file_exit_3(self, tmp_path, capsys):
        assert main(["split", "--data", str(tmp_path / "nope.jsonl"), "--known-ratio", "0.5", "--out", str(tmp_path)]) == 3
        assert "nope.jsonl" in capsys.readouterr().err


class TestTrain:
    def test_outputs(self, trained_dirs):
        ours = trained_dirs / "ours"
        manifest = json.loads((ours / "manifest.json").read_text())
        assert manifest["seeds"] == [0]
        run = manifest["runs"][0]
        assert (ours / run["checkpoint"]).is_file() and (ours / run["history"]).is_file()
        assert set(manifest["inputs"]) >= {"train.jsonl", "test.jsonl", "pool.jsonl"}
        assert load_model(ours / run["checkpoint"]).kind == "ours"

    def test_msp_route(self, trained_dirs):
        model = load_model(trained_dirs / "msp" / "seed-0" / "model.ckpt")
        assert model.kind == "msp"
        assert model.model.n_outputs == model.label_space.K
        assert "threshold" in json.loads((trained_dirs / "msp" / "manifest.json").read_text())["runs"][0]

    def test_seed_range_manifest(self, blobs, tmp_path):
        assert main(["train", "--data", str(blobs / "blobs.jsonl"), "--known-ratio", "0.5",
                     "--open-pool", str(blobs / "pool.jsonl"), *FAST, "--max-epochs", "2",
                     "--seeds", "0..2", "--out", str(tmp_path)]) == 0
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert [r["seed"] for r in manifest["runs"]] == [0, 1, 2]
        for name, agg in manifest["aggregate"].items():
            values = [r["metrics"][name] for r in manifest["runs"]]
            assert agg["mean"] == pytest.approx(np.mean(values), abs=1e-12)
            assert agg["std"] == pytest.approx(np.std(values, ddof=1), abs=1e-12)
        assert manifest["aggregate"] == aggregate(manifest["runs"])
        assert (tmp_path / "seed-2" / "split" / "label_space.json").is_file()

    def test_parallel_matches_serial(self, blobs, tmp_path, monkeypatch):
        args = ["train", "--data", str(blobs / "blobs.jsonl"), "--known-ratio", "0.5",
                "--open-pool", str(blobs / "pool.jsonl"), *FAST, "--max-epochs", "2", "--seeds", "0,1"]
        assert main([*args, "--out", str(tmp_path / "serial")]) == 0
        monkeypatch.setenv("OOS_THREADS", "2")
        assert main([*args, "--out", str(tmp_path / "par")]) == 0
        for rel in ("manifest.json", "seed-1/model.ckpt", "seed-1/history.jsonl"):
            assert (tmp_path / "serial" / rel).read_bytes() == (tmp_path / "par" / rel).read_bytes()

    def test_deterministic_artifacts(self, split_dir, blobs, tmp_path):
        for name in ("a", "b"):
            assert main(["train", "--split-dir", str(split_dir), "--open-pool", str(blobs / "pool.jsonl"), *FAST,
                         "--out", str(tmp_path / name)]) == 0
        for rel in ("manifest.json", "seed-0/model.ckpt", "seed-0/history.jsonl", "seed-0/metrics.json"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_config_file_precedence(self, split_dir, blobs, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"max_epochs": 2, "lr": 0.5, "hidden": "8", "encoder": "identity",
                                   "ratio": "20:20:80"}))
        assert main(["train", "--split-dir", str(split_dir), "--open-pool", str(blobs / "pool.jsonl"),
                     "--config", str(cfg), "--lr", "0.003", "--out", str(tmp_path / "run")]) == 0
        config = json.loads((tmp_path / "run" / "manifest.json").read_text())["config"]
        assert config["lr"] == 0.003
        assert config["max_epochs"] == 2
        assert config["hidden"] == "8"
        assert config["patience"] == 5

    def test_unknown_config_key_exit_2(self, split_dir, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"learning_rate": 1}))
        assert main(["train", "--split-dir", str(split_dir), "--config", str(cfg), "--out", str(tmp_path)]) == 2

    def test_open_quota_without_pool_exit_3(self, split_dir, tmp_path):
        assert main(["train", "--split-dir", str(split_dir), *FAST, "--out", str(tmp_path)]) == 3

    def test_divergence_exit_4(self, split_dir, blobs, tmp_path):
        assert main(["train", "--split-dir", str(split_dir), "--open-pool", str(blobs / "pool.jsonl"), *FAST,
                     "--lr", "1e300", "--out", str(tmp_path)]) == 4

    def test_blob_end_to_end_under_a_minute(self, tmp_path):
        t0 = time.perf_counter()
        assert main(["make-blobs", "--out", str(tmp_path)]) == 0
        assert main(["train", "--data", str(tmp_path / "blobs.jsonl"), "--known-ratio", "0.67",
                     "--val-fraction", "0.2", "--open-pool", str(tmp_path / "pool.jsonl"),
                     "--encoder", "identity", "--hidden", "64,64", "--lr", "3e-3", "--max-epochs", "100",
                     "--patience", "10", "--out", str(tmp_path / "run")]) == 0
        assert main(["eval", "--checkpoint", str(tmp_path / "run" / "seed-0" / "model.ckpt"),
                     "--split-dir", str(tmp_path / "run" / "seed-0" / "split")]) == 0
        assert time.perf_counter() - t0 < 60
        metrics = json.loads((tmp_path / "run" / "seed-0" / "metrics.json").read_text())
        assert metrics["f1_unknown"] > 0.8


class TestEval:
    def test_report_matches_training_metrics(self, trained_dirs, split_dir, tmp_path, capsys):
        out = tmp_path / "r.json"
        assert main(["eval", "--checkpoint", str(trained_dirs / "ours" / "seed-0" / "model.ckpt"),
                     "--split-dir", str(split_dir), "--out", str(out), "--confusion"]) == 0
        assert "oos" in capsys.readouterr().out
        report = json.loads(out.read_text())
        assert report == json.loads((trained_dirs / "ours" / "seed-0" / "metrics.json").read_text())

    def test_test_file_input(self, trained_dirs, split_dir, tmp_path):
        ckpt = str(trained_dirs / "ours" / "seed-0" / "model.ckpt")
        main(["eval", "--checkpoint", ckpt, "--split-dir", str(split_dir), "--out", str(tmp_path / "a.json")])
        main(["eval", "--checkpoint", ckpt, "--test", str(split_dir / "test.jsonl"), "--out", str(tmp_path / "b.json")])
        assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()

    def test_compare_equals_two_evals(self, trained_dirs, split_dir, tmp_path, capsys):
        a = trained_dirs / "ours" / "seed-0" / "model.ckpt"
        b = trained_dirs / "msp" / "seed-0" / "model.ckpt"
        main(["eval", "--checkpoint", str(a), "--split-dir", str(split_dir), "--out", str(tmp_path / "a.json")])
        main(["eval", "--checkpoint", str(b), "--split-dir", str(split_dir), "--out", str(tmp_path / "b.json")])
        capsys.readouterr()
        assert main(["eval", "--compare", str(a), str(b), "--split-dir", str(split_dir),
                     "--out", str(tmp_path / "c.json")]) == 0
        table = capsys.readouterr().out
        ra, rb = (json.loads((tmp_path / f"{n}.json").read_text()) for n in "ab")
        delta = json.loads((tmp_path / "c.json").read_text())["delta"]
        for key, value in delta.items():
            assert value == ra[key] - rb[key]
            assert f"{value:+.4f}" in table

    def test_mismatched_k_exit_3(self, trained_dirs, blobs, tmp_path, capsys):
        main(["split", "--data", str(blobs / "blobs.jsonl"), "--known-ratio", "0.67", "--seed", "7",
              "--out", str(tmp_path)])
        capsys.readouterr()
        code = main(["eval", "--checkpoint", str(trained_dirs / "ours" / "seed-0" / "model.ckpt"),
                     "--split-dir", str(tmp_path)])
        assert code == 3
        assert "K=3" in capsys.readouterr().err

    def test_oracle_stub_checkpoint(self, tmp_path, capsys):
        # numeric features are one-hot class codes; a linear head maps each to its target
        names = [f"c{i}" for i in range(4)]
        records = [(Utterance(f"{n}-{j}", numeric=tuple(np.eye(4)[i].tolist())), n) for i, n in enumerate(names) for j in range(6)]
        write_dataset_jsonl(tmp_path / "d.jsonl", records)
        main(["split", "--data", str(tmp_path / "d.jsonl"), "--known-ratio", "0.5", "--seed", "1",
              "--out", str(tmp_path / "split")])
        space = read_split(tmp_path / "split").label_space
        model = MlpClassifier(4, space.K + 1, hidden=(), seed=0)
        model.weights[0][...] = 0
        model.biases[0][...] = 0
        for i, n in enumerate(names):
            target = space.known_classes.index(n) if n in space.known_classes else space.K
            model.weights[0][i, target] = 10.0
        spec = EncoderSpec(kind="identity", dim=4)
        save_model(tmp_path / "oracle.ckpt", TrainedModel(model, make_encoder(spec), spec, space))
        capsys.readouterr()
        assert main(["eval", "--checkpoint", str(tmp_path / "oracle.ckpt"), "--split-dir", str(tmp_path / "split")]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["accuracy"] == report["macro_f1_all"] == report["macro_f1_known"] == report["f1_unknown"] == 1.0

    def test_needs_exactly_one_source(self, trained_dirs):
        assert main(["eval", "--checkpoint", str(trained_dirs / "ours" / "seed-0" / "model.ckpt")]) == 2

    def test_corrupt_checkpoint_exit_3(self, split_dir, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"nonsense")
        assert main(["eval", "--checkpoint", str(tmp_path / "bad.ckpt"), "--split-dir", str(split_dir)]) == 3


class TestExport:
    def test_round_trip_through_precomputed(self, tmp_path):
        ds = text_dataset(per_class=8)
        write_dataset_jsonl(tmp_path / "text.jsonl", ds.examples)
        (tmp_path / "pool.txt").write_text("tell me a joke\nwhat time is it\n")
        assert main(["train", "--data", str(tmp_path / "text.jsonl"), "--known-ratio", "0.75",
                     "--open-pool", str(tmp_path / "pool.txt"), "--encoder", "hashed", "--dim", "8",
                     "--hash-buckets", "1024", "--hidden", "16", "--max-epochs", "2", "--ratio", "8:4:16",
                     "--out", str(tmp_path / "run")]) == 0
        ckpt = tmp_path / "run" / "seed-0" / "model.ckpt"
        test = tmp_path / "run" / "seed-0" / "split" / "test.jsonl"
        assert main(["export-embeddings", "--checkpoint", str(ckpt), "--data", str(test),
                     "--out", str(tmp_path / "e.oose")]) == 0
        model = load_model(ckpt)
        pre = PrecomputedEncoder(tmp_path / "e.oose")
        utts = [u for u, _ in load_test_jsonl(test, model.label_space)]
        expected = model.encoder.encode_batch(utts).astype(np.float32).astype(np.float64)
        assert np.array_equal(pre.encode_batch(utts), expected)
        raw = (tmp_path / "e.oose").read_bytes()
        n, d = int.from_bytes(raw[8:12], "little"), int.from_bytes(raw[12:16], "little")
        assert (n, d) == (len(utts), 8) and len(raw) == 16 + 4 * n * d
        sidecar = [json.loads(line) for line in (tmp_path / "e.oose.jsonl").read_text().splitlines()]
        assert [r["id"] for r in sidecar] == [u.id for u in utts]

    def test_precomputed_training(self, tmp_path, blobs):
        # embeddings exported from one model drive a second run through --encoder precomputed
        data = blobs / "blobs.jsonl"
        ds_lines = data.read_text().splitlines()
        vecs = np.array([json.loads(line)["vec"] for line in ds_lines])
        ids = [json.loads(line)["id"] for line in ds_lines]
        write_oose(tmp_path / "feats.oose", vecs, ids)
        assert main(["train", "--data", str(data), "--known-ratio", "0.5", "--encoder", "precomputed",
                     "--manifest", str(tmp_path / "feats.oose"), "--ratio", "20:0:80", "--hidden", "16",
                     "--max-epochs", "2", "--out", str(tmp_path / "run")]) == 0
        assert load_model(tmp_path / "run" / "seed-0" / "model.ckpt").encoder.dim == 2


def test_sweep_writes_csv(blobs, tmp_path):
    assert main(["sweep", "--data", str(blobs / "blobs.jsonl"), "--known-ratio", "0.5", *FAST, "--ratio", "20:0:0",
                 "--max-epochs", "2", "--synthetic-counts", "0,20", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("inliers,open,synthetic,seeds")
    assert [line.split(",")[2] for line in lines[1:]] == ["0", "20"]


def test_console_script(tmp_path):
    exe = shutil.which("oos-intent")
    if exe is None:
        pytest.skip("console script not installed")
    proc = subprocess.run([exe, "split", "--data", "x", "--known-ratio", "2", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "known ratio" in proc.stderr
