import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oos_intent.data import Dataset, Utterance  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def blob_dataset(n_classes=4, per_class=10, dim=2, seed=0, spread=5.0):
    gen = np.random.default_rng(seed)
    centers = gen.normal(0, spread, (n_classes, dim))
    examples = []
    for c in range(n_classes):
        for j in range(per_class):
            vec = centers[c] + 0.3 * gen.standard_normal(dim)
            examples.append((Utterance(f"c{c}-{j}", numeric=tuple(vec.tolist())), f"class{c}"))
    return Dataset(examples, [f"class{c}" for c in range(n_classes)])


@pytest.fixture
def blobs4():
    return blob_dataset()


TOPICS = {
    "weather": "rain sun cloud wind forecast cold warm storm",
    "banking": "money account balance transfer card deposit loan bank",
    "music": "song play album artist volume track playlist band",
    "travel": "flight hotel ticket airport trip booking passport train",
}


def text_dataset(per_class=12, seed=0):
    """Short bag-of-words utterances drawn from disjoint topic vocabularies."""
    gen = np.random.default_rng(seed)
    examples = []
    for name, vocab in TOPICS.items():
        words = vocab.split()
        for j in range(per_class):
            picks = gen.choice(words, size=gen.integers(2, 5))
            examples.append((Utterance(f"{name}-{j}", text=" ".join(picks)), name))
    return Dataset(examples, list(TOPICS))
