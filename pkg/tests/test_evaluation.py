import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import brute_force_f1
from oos_intent.data import Utterance
from oos_intent.encoder import IdentityEncoder
from oos_intent.errors import DataError
from oos_intent.evaluation import ConfusionMatrix, compute_metrics, confusion, evaluate, format_confusion


class TestConfusion:
    def test_identity(self):
        assert confusion([0, 1, 2], [0, 1, 2], 2).counts.tolist() == [[1, 0, 0], [0, 1, 0], [0, 0, 1]]

    def test_empty(self):
        assert confusion([], [], 2).counts.tolist() == [[0] * 3] * 3

    def test_matches_double_loop(self, rng):
        preds, golds = rng.integers(0, 4, 10), rng.integers(0, 4, 10)
        cm = confusion(preds, golds, 3)
        for g in range(4):
            for p in range(4):
                assert cm.counts[g, p] == sum(1 for a, b in zip(golds, preds) if a == g and b == p)

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            confusion([0, 1], [0], 1)

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            confusion([0, 3], [0, 1], 2)


class TestMetrics:
    def test_perfect(self):
        r = compute_metrics(confusion([0, 1, 2, 2], [0, 1, 2, 2], 2))
        assert r.accuracy == 1.0
        assert r.per_class_f1 == [1.0, 1.0, 1.0]

    def test_two_by_two_hand_case(self):
        r = compute_metrics(ConfusionMatrix(np.array([[1, 1], [1, 1]])))
        assert r.accuracy == 0.5
        assert r.per_class_f1 == [0.5, 0.5]
        assert r.macro_f1_all == 0.5

    def test_absent_class_counts_as_zero(self):
        # class 1 never gold, never predicted
        r = compute_metrics(confusion([0, 2], [0, 2], 2))
        assert r.per_class_f1 == [1.0, 0.0, 1.0]
        assert r.macro_f1_all == pytest.approx(2 / 3)
        assert r.macro_f1_known == 0.5

    def test_empty_matrix(self):
        with pytest.raises(DataError):
            compute_metrics(confusion([], [], 2))

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 6))
    def test_matches_brute_force(self, seed, k):
        gen = np.random.default_rng(seed)
        counts = gen.integers(0, 6, (k + 1, k + 1)) * (gen.random((k + 1, k + 1)) < 0.7)
        if counts.sum() == 0:
            counts[0, 0] = 1
        r = compute_metrics(ConfusionMatrix(counts))
        expected = brute_force_f1(counts.tolist())
        np.testing.assert_allclose(r.per_class_f1, expected, rtol=0, atol=1e-12)
        assert r.accuracy == np.trace(counts) / counts.sum()
        assert abs(r.macro_f1_all - np.mean(r.per_class_f1)) < 1e-12
        assert abs(r.macro_f1_known - np.mean(r.per_class_f1[:-1])) < 1e-12
        assert r.f1_unknown == r.per_class_f1[-1]
        assert all(0.0 <= v <= 1.0 for v in r.per_class_f1)

    def test_json_fields(self):
        d = compute_metrics(confusion([0, 1], [0, 1], 1)).to_json()
        assert set(d) == {"accuracy", "macro_f1_all", "macro_f1_known", "f1_unknown", "per_class_f1", "confusion"}


class Oracle:
    """Predicts the gold label stored as the first feature."""

    n_outputs = 4

    def predict(self, features):
        return np.asarray(features)[:, 0].astype(int)


class ConstantOOS:
    n_outputs = 4

    def predict(self, features):
        return np.full(len(features), 3)


def _test_set(labels):
    return [(Utterance(str(i), numeric=(float(y),)), y) for i, y in enumerate(labels)]


class TestEvaluate:
    def test_oracle_predictor(self):
        r = evaluate(Oracle(), IdentityEncoder(1), _test_set([0, 1, 2, 3, 3, 1]))
        assert (r.accuracy, r.macro_f1_all, r.macro_f1_known, r.f1_unknown) == (1.0, 1.0, 1.0, 1.0)

    def test_constant_oos_predictor(self):
        labels = [0, 1, 2] * 7 + [3] * 9  # 30% out-of-scope
        r = evaluate(ConstantOOS(), IdentityEncoder(1), _test_set(labels))
        assert r.accuracy == pytest.approx(0.3)
        assert r.f1_unknown == pytest.approx(2 * 0.3 / 1.3)
        assert r.f1_unknown == pytest.approx(0.4615, abs=1e-4)

    def test_order_invariant(self, rng):
        labels = rng.integers(0, 4, 40).tolist()
        items = _test_set(labels)
        noisy = Oracle()
        a = evaluate(ConstantOOS(), IdentityEncoder(1), items)
        b = evaluate(ConstantOOS(), IdentityEncoder(1), [items[i] for i in rng.permutation(40)])
        assert a == b
        assert evaluate(noisy, IdentityEncoder(1), items) == evaluate(noisy, IdentityEncoder(1), items[::-1])

    def test_empty(self):
        with pytest.raises(DataError):
            evaluate(Oracle(), IdentityEncoder(1), [])


def test_format_confusion():
    text = format_confusion(confusion([0, 1, 1], [0, 1, 0], 1), ["a", "oos"])
    assert text.splitlines()[1].split() == ["a", "1", "1"]
