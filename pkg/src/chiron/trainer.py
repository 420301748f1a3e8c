"""In-enclave numerics: dense MLP, softmax cross-entropy, minibatch SGD.

All arithmetic is binary64 with accumulation in natural loop order; no BLAS,
no pairwise or compensated summation, so runs are bit-reproducible.

Parameter layout, per layer in order: the weight matrix of shape
``(input_dim, output_dim)`` in row-major order, then the bias vector.  A layer
computes ``z[j] = (sum_i a[i] * W[i][j]) + b[j]``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

from .sandbox import Activation, ModelConfig
from .taint import Label, taint_join

MASK64 = (1 << 64) - 1
_TWO_POW_MINUS_53 = 1.0 / (1 << 53)


class TrainingError(Exception):
    pass


class NonFiniteInput(TrainingError):
    pass


class NonFiniteLoss(TrainingError):
    pass


class LengthMismatch(TrainingError):
    pass


class Prng:
    """splitmix64."""

    def __init__(self, seed: int) -> None:
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def next_float(self) -> float:
        """Uniform in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * _TWO_POW_MINUS_53


def shuffled_indices(n: int, seed: int) -> list[int]:
    """Fisher-Yates from the top down, ``j = next() mod (i + 1)``."""
    rng = Prng(seed)
    order = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.next_u64() % (i + 1)
        order[i], order[j] = order[j], order[i]
    return order


@dataclass
class Dataset:
    features: list[list[float]]
    labels: list[int]
    label: Label = Label.HOLDER_SECRET

    @property
    def n_rows(self) -> int:
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return len(self.features[0]) if self.features else 0

    def check(self, config: ModelConfig) -> None:
        if self.n_rows < 1:
            raise TrainingError("dataset is empty")
        if len(self.features) != len(self.labels):
            raise TrainingError("features and labels differ in length")
        for row in self.features:
            if len(row) != config.input_dim:
                raise TrainingError(f"row width {len(row)} != input_dim {config.input_dim}")
        for y in self.labels:
            if not 0 <= y < config.n_classes:
                raise TrainingError(f"label {y} outside [0, {config.n_classes})")

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.features[i] for i in indices], [self.labels[i] for i in indices],
                       self.label)


@dataclass
class ParameterVector:
    values: list[float]
    label: Label = Label.PROVIDER_SECRET

    def __len__(self) -> int:
        return len(self.values)

    def to_bytes(self) -> bytes:
        return struct.pack(f">{len(self.values)}d", *self.values)

    @classmethod
    def from_bytes(cls, raw: bytes, label: Label = Label.BOTH_SECRET) -> "ParameterVector":
        if len(raw) % 8:
            raise ValueError("parameter bytes not a multiple of 8")
        return cls(list(struct.unpack(f">{len(raw) // 8}d", raw)), label)

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.values)


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def _layout(config: ModelConfig) -> list[tuple[int, int, int, int]]:
    """(weight offset, bias offset, input_dim, output_dim) per layer."""
    out = []
    offset = 0
    for layer in config.layers:
        w = offset
        b = w + layer.input_dim * layer.output_dim
        out.append((w, b, layer.input_dim, layer.output_dim))
        offset = b + layer.output_dim
    return out


def init_params(config: ModelConfig) -> ParameterVector:
    rng = Prng(config.seed)
    values: list[float] = []
    for layer in config.layers:
        a = glorot_bound(layer.input_dim, layer.output_dim)
        for _ in range(layer.input_dim * layer.output_dim):
            values.append((2.0 * rng.next_float() - 1.0) * a)
        values.extend([0.0] * layer.output_dim)
    return ParameterVector(values, Label.PROVIDER_SECRET)


def _activate(kind: Activation, z: list[float]) -> list[float]:
    if kind is Activation.RELU:
        return [v if v > 0.0 else 0.0 for v in z]
    if kind is Activation.TANH:
        return [math.tanh(v) for v in z]
    return list(z)


def _layer_forward(p: Sequence[float], w: int, b: int, n_in: int, n_out: int,
                   a: Sequence[float]) -> list[float]:
    z = []
    for j in range(n_out):
        acc = 0.0
        k = w + j
        for i in range(n_in):
            acc += a[i] * p[k]
            k += n_out
        z.append(acc + p[b + j])
    return z


def logits(params: ParameterVector | Sequence[float], config: ModelConfig,
           x: Sequence[float]) -> list[float]:
    p = params.values if isinstance(params, ParameterVector) else params
    a: Sequence[float] = x
    for (w, b, n_in, n_out), layer in zip(_layout(config), config.layers):
        a = _activate(layer.activation, _layer_forward(p, w, b, n_in, n_out, a))
    return list(a)


def _softmax_xent(z: list[float], y: int) -> tuple[float, list[float]]:
    m = z[0]
    for v in z[1:]:
        if v > m:
            m = v
    exps = [math.exp(v - m) for v in z]
    s = 0.0
    for e in exps:
        s += e
    loss = math.log(s) - (z[y] - m)
    return loss, [e / s for e in exps]


@dataclass
class ForwardCache:
    # per sample: list of layer inputs/outputs [a0, a1, ..., aL] and softmax probs
    activations: list[list[list[float]]] = field(default_factory=list)
    probs: list[list[float]] = field(default_factory=list)


def forward(params: ParameterVector | Sequence[float], config: ModelConfig,
            batch: Dataset) -> tuple[float, ForwardCache]:
    p = params.values if isinstance(params, ParameterVector) else params
    layout = _layout(config)
    cache = ForwardCache()
    total = 0.0
    for x, y in zip(batch.features, batch.labels):
        for v in x:
            if not math.isfinite(v):
                raise NonFiniteInput("non-finite feature value")
        acts = [list(x)]
        a: list[float] = acts[0]
        for (w, b, n_in, n_out), layer in zip(layout, config.layers):
            a = _activate(layer.activation, _layer_forward(p, w, b, n_in, n_out, a))
            acts.append(a)
        loss, probs = _softmax_xent(a, y)
        total += loss
        cache.activations.append(acts)
        cache.probs.append(probs)
    return total / batch.n_rows, cache


def backward(params: ParameterVector | Sequence[float], config: ModelConfig,
             batch: Dataset, cache: ForwardCache) -> ParameterVector:
    """Analytic gradient of the mean batch loss."""
    p = params.values if isinstance(params, ParameterVector) else params
    layout = _layout(config)
    grad = [0.0] * len(p)
    for acts, probs, y in zip(cache.activations, cache.probs, batch.labels):
        delta = list(probs)
        delta[y] -= 1.0
        for li in range(len(layout) - 1, -1, -1):
            w, b, n_in, n_out = layout[li]
            kind = config.layers[li].activation
            out = acts[li + 1]
            if kind is Activation.RELU:
                dz = [d if o > 0.0 else 0.0 for d, o in zip(delta, out)]
            elif kind is Activation.TANH:
                dz = [d * (1.0 - o * o) for d, o in zip(delta, out)]
            else:
                dz = delta
            a_in = acts[li]
            for i in range(n_in):
                ai = a_in[i]
                row = w + i * n_out
                for j in range(n_out):
                    grad[row + j] += ai * dz[j]
            for j in range(n_out):
                grad[b + j] += dz[j]
            if li:
                prev = []
                for i in range(n_in):
                    acc = 0.0
                    row = w + i * n_out
                    for j in range(n_out):
                        acc += p[row + j] * dz[j]
                    prev.append(acc)
                delta = prev
    n = batch.n_rows
    label = params.label if isinstance(params, ParameterVector) else Label.PROVIDER_SECRET
    return ParameterVector([g / n for g in grad], taint_join(label, batch.label))


def sgd_step(params: ParameterVector, gradient: ParameterVector,
             learning_rate: float) -> ParameterVector:
    if len(params) != len(gradient):
        raise LengthMismatch(f"{len(params)} params vs {len(gradient)} gradient entries")
    if not learning_rate > 0.0:
        raise ValueError("learning_rate must be positive")
    return ParameterVector(
        [w - learning_rate * g for w, g in zip(params.values, gradient.values)],
        taint_join(params.label, gradient.label),
    )


class TrainingHooks:
    """Callbacks from :func:`run_epochs`; the defaults do nothing."""

    def on_sync(self, params: ParameterVector, batches_done: int) -> ParameterVector:
        return params

    def on_epoch_end(self, epoch: int, mean_loss: float) -> None:
        pass


def batch_sizes(n_rows: int, batch_size: int) -> list[int]:
    return [min(batch_size, n_rows - start) for start in range(0, n_rows, batch_size)]


def run_epochs(config: ModelConfig, dataset: Dataset, params: ParameterVector,
               hooks: TrainingHooks | None = None) -> ParameterVector:
    hooks = hooks or TrainingHooks()
    if dataset.n_rows < 1:
        raise TrainingError("dataset is empty")
    bs = config.optimizer.batch_size
    lr = config.optimizer.learning_rate
    current = ParameterVector(list(params.values), taint_join(params.label, dataset.label))
    batches_done = 0
    for epoch in range(config.optimizer.epochs):
        order = shuffled_indices(dataset.n_rows, config.seed ^ epoch)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, dataset.n_rows, bs):
            batch = dataset.subset(order[start:start + bs])
            loss, cache = forward(current, config, batch)
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"non-finite loss in epoch {epoch}")
            current = sgd_step(current, backward(current, config, batch, cache), lr)
            epoch_loss += loss
            n_batches += 1
            batches_done += 1
            if batches_done % config.sync_period == 0:
                current = hooks.on_sync(current, batches_done)
        hooks.on_epoch_end(epoch, epoch_loss / n_batches)
    if not current.is_finite():
        raise NonFiniteLoss("parameters became non-finite")
    return current


def predict(params: ParameterVector | Sequence[float], config: ModelConfig,
            features: Sequence[Sequence[float]]) -> list[int]:
    out = []
    for x in features:
        z = logits(params, config, x)
        best = 0
        for j in range(1, len(z)):
            if z[j] > z[best]:
                best = j
        out.append(best)
    return out


def accuracy(params: ParameterVector, config: ModelConfig, dataset: Dataset) -> float:
    hits = 0
    for y_hat, y in zip(predict(params, config, dataset.features), dataset.labels):
        hits += y_hat == y
    return hits / dataset.n_rows


def dataset_loss(params: ParameterVector, config: ModelConfig, dataset: Dataset) -> float:
    return forward(params, config, dataset)[0]
