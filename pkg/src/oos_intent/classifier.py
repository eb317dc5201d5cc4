"""MLP discriminator over (K+1) classes, temperature-scaled cross-entropy, Adam.

Everything is computed in float64. Parameters are kept float32-representable
after initialization and after every Adam step, so the float32 checkpoint
format round-trips them bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from oos_intent.errors import DataError, NumericalError


def _as_f32_exact(a: np.ndarray) -> np.ndarray:
    # overflow turns into inf, which the forward pass reports as divergence
    with np.errstate(over="ignore"):
        return a.astype(np.float32).astype(np.float64)


class MlpClassifier:
    """ReLU MLP ``input_dim -> hidden... -> n_outputs`` with a softmax temperature.

    Weights use the common framework default: uniform in
    ``±1/sqrt(fan_in)`` for both weights and biases.
    """

    def __init__(
        self,
        input_dim: int,
        n_outputs: int,
        hidden: Sequence[int] = (1024, 1024),
        tau: float = 0.1,
        seed: int = 0,
    ):
        if tau <= 0:
            raise ValueError("temperature must be positive")
        if input_dim <= 0 or n_outputs < 2 or any(h <= 0 for h in hidden):
            raise ValueError("invalid layer sizes")
        self.input_dim = input_dim
        self.n_outputs = n_outputs
        self.hidden = tuple(int(h) for h in hidden)
        self.tau = float(tau)
        self.seed = seed

        rng = np.random.default_rng(seed)
        sizes = [input_dim, *self.hidden, n_outputs]
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(_as_f32_exact(rng.uniform(-bound, bound, (fan_in, fan_out))))
            self.biases.append(_as_f32_exact(rng.uniform(-bound, bound, fan_out)))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"head/W{i}"] = w
            params[f"head/b{i}"] = b
        return params

    def copy(self) -> "MlpClassifier":
        clone = object.__new__(MlpClassifier)
        clone.__dict__.update(self.__dict__)
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        return clone

    def load_parameters(self, params: Mapping[str, np.ndarray]) -> None:
        for name, value in params.items():
            target = self.parameters()[name]
            if target.shape != value.shape:
                raise DataError(f"{name}: shape {value.shape} != {target.shape}")
            target[...] = value

    def forward(self, features) -> np.ndarray:
        return forward(self, features)

    def predict(self, features) -> np.ndarray:
        return predict(self, features)

    def probabilities(self, features) -> np.ndarray:
        return softmax(forward(self, features) / self.tau)


@dataclass
class LossReport:
    loss: float
    correct: int
    batch_size: int


def _check_input(model: MlpClassifier, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise DataError(f"feature dim {x.shape[-1]} != model input dim {model.input_dim}")
    return x


def _forward_cached(model: MlpClassifier, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    acts = [x]
    h = x
    last = model.n_layers - 1
    with np.errstate(over="ignore", invalid="ignore"):
        for i, (w, b) in enumerate(zip(model.weights, model.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
                acts.append(h)
    if not np.all(np.isfinite(h)):
        bad = [name for name, p in model.parameters().items() if not np.all(np.isfinite(p))]
        if bad:
            raise NumericalError(f"non-finite parameters in {bad}")
        raise NumericalError("non-finite logits")
    return h, acts


def forward(model: MlpClassifier, features) -> np.ndarray:
    """Logits, shape ``(batch, n_outputs)``."""
    logits, _ = _forward_cached(model, _check_input(model, features))
    return logits


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Per-example ``-log softmax(logits / tau)[label]``."""
    logp = log_softmax(np.asarray(logits, dtype=np.float64) / tau)
    return -logp[np.arange(len(labels)), labels]


def loss_and_grad(model: MlpClassifier, batch, labels=None):
    """Mean temperature-scaled cross-entropy and its exact gradients.

    ``batch`` is a TrainBatch or a feature matrix (then pass ``labels``).
    Returns ``(LossReport, parameter gradients, input gradients)``; input
    gradients feed encoder backprop.
    """
    if labels is None:
        features, labels = batch.features, batch.labels
    else:
        features = batch
    x = _check_input(model, features)
    y = np.asarray(labels, dtype=np.int64)
    n = len(y)
    if n == 0 or len(x) != n:
        raise DataError("batch must be nonempty with one label per row")
    if y.min() < 0 or y.max() >= model.n_outputs:
        raise DataError(f"labels must lie in [0, {model.n_outputs - 1}]")

    logits, acts = _forward_cached(model, x)
    z = logits / model.tau
    z = z - z.max(axis=1, keepdims=True)
    expz = np.exp(z)
    sums = expz.sum(axis=1, keepdims=True)
    per_example = np.log(sums[:, 0]) - z[np.arange(n), y]
    if not np.all(np.isfinite(per_example)):
        first = int(np.flatnonzero(~np.isfinite(per_example))[0])
        raise NumericalError(f"non-finite loss at batch index {first}")
    loss = float(per_example.mean())

    delta = expz / sums
    delta[np.arange(n), y] -= 1.0
    delta /= n * model.tau

    grads: dict[str, np.ndarray] = {}
    for i in range(model.n_layers - 1, -1, -1):
        grads[f"head/W{i}"] = acts[i].T @ delta
        grads[f"head/b{i}"] = delta.sum(axis=0)
        delta = delta @ model.weights[i].T
        if i > 0:
            delta = delta * (acts[i] > 0)
    correct = int(np.count_nonzero(logits.argmax(axis=1) == y))
    return LossReport(loss, correct, n), grads, delta


def predict(model: MlpClassifier, features) -> np.ndarray:
    """Argmax over the logits; ties go to the lowest index."""
    return forward(model, features).argmax(axis=1)


@dataclass
class AdamState:
    """Adam hyperparameters and moments, keyed by parameter name.

    ``group_lr`` maps a name prefix (``"encoder/"``) to its own learning
    rate; other parameters use ``lr``.
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    group_lr: dict[str, float] = field(default_factory=dict)
    round_to_f32: bool = True
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    v: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def lr_for(self, name: str) -> float:
        for prefix, lr in self.group_lr.items():
            if name.startswith(prefix):
                return lr
        return self.lr


def adam_step(model, state: AdamState, gradients: Mapping[str, np.ndarray]) -> None:
    """One bias-corrected Adam update, in place.

    ``model`` is anything with ``parameters()`` or a name -> array dict.
    Only parameters present in ``gradients`` move.
    """
    params = model.parameters() if hasattr(model, "parameters") else model
    for name, g in gradients.items():
        if name not in params:
            raise DataError(f"gradient for unknown parameter {name!r}")
        if params[name].shape != np.shape(g):
            raise DataError(f"{name}: gradient shape {np.shape(g)} != {params[name].shape}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, g in gradients.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr_for(name) * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.round_to_f32:
            p[...] = _as_f32_exact(p)
