"""Minimal dense-network substrate with exact gradients.

Small feed-forward classifiers over flat float64 parameter vectors:
forward/backward passes, Adam updates, tempered softmax losses, and
per-layer running feature statistics. All arithmetic is 64-bit so that
identical seeds reproduce identical bits across runs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable

import numpy as np

from .errors import BindingError, NumericError, ShapeError

Array = np.ndarray

ACTIVATIONS = ("identity", "relu", "tanh")

# decay of the exponential moving average kept by FeatureStats
STATS_DECAY = 0.9

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def as_tensor(values, shape=None) -> Array:
    """Coerce to a C-contiguous float64 array, optionally reshaped."""
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    return arr


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"
    track_stats: bool = False


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a dense network. The last layer's output is the logits."""

    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a model needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.in_dim < 1 or layer.out_dim < 1:
                raise ShapeError(f"layer {i} has non-positive dimensions")
            if layer.activation not in ACTIVATIONS:
                raise ShapeError(f"layer {i}: unknown activation {layer.activation!r}")
            if i > 0 and layer.in_dim != self.layers[i - 1].out_dim:
                raise ShapeError(f"layer {i} input dim does not chain with layer {i - 1}")
        if self.layers[-1].out_dim < 2:
            raise ShapeError("output dimension must be at least 2")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def tracked_layers(self) -> tuple[int, ...]:
        return tuple(i for i, l in enumerate(self.layers) if l.track_stats)

    @property
    def param_count(self) -> int:
        return sum(l.in_dim * l.out_dim + l.out_dim for l in self.layers)

    @cached_property
    def spec_hash(self) -> str:
        desc = repr(tuple((l.in_dim, l.out_dim, l.activation, l.track_stats) for l in self.layers))
        return hashlib.sha1(desc.encode()).hexdigest()[:16]


def mlp(input_dim: int, hidden: Iterable[int], classes: int,
        activation: str = "relu", track_hidden: bool = True) -> ModelSpec:
    """Build an MLP spec; hidden layers optionally keep feature statistics."""
    dims = [input_dim, *hidden, classes]
    layers = []
    for i in range(len(dims) - 1):
        last = i == len(dims) - 2
        layers.append(LayerSpec(
            in_dim=dims[i],
            out_dim=dims[i + 1],
            activation="identity" if last else activation,
            track_stats=track_hidden and not last,
        ))
    return ModelSpec(tuple(layers))


@dataclass
class ParamVector:
    """Flat parameter buffer bound to one ModelSpec via its hash."""

    values: Array
    spec_hash: str

    def __post_init__(self):
        self.values = as_tensor(self.values).ravel()

    def __len__(self) -> int:
        return self.values.shape[0]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.spec_hash)


def _check_bound(a: ParamVector, b: ParamVector):
    if a.spec_hash != b.spec_hash:
        raise BindingError(f"spec hash mismatch: {a.spec_hash} vs {b.spec_hash}")


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamVector:
    """He-style initialization for relu layers, 1/fan-in otherwise; zero biases."""
    chunks = []
    for layer in spec.layers:
        gain = 2.0 if layer.activation == "relu" else 1.0
        std = np.sqrt(gain / layer.in_dim)
        chunks.append(rng.normal(0.0, std, size=layer.in_dim * layer.out_dim))
        chunks.append(np.zeros(layer.out_dim))
    return ParamVector(np.concatenate(chunks), spec.spec_hash)


def zeros_like_params(spec: ModelSpec) -> ParamVector:
    return ParamVector(np.zeros(spec.param_count), spec.spec_hash)


def param_views(spec: ModelSpec, params: ParamVector) -> list[tuple[Array, Array]]:
    """Per-layer (W, b) views into the flat buffer. W has shape [in, out]."""
    if len(params) != spec.param_count:
        raise ShapeError(f"parameter length {len(params)} != spec count {spec.param_count}")
    out = []
    off = 0
    for layer in spec.layers:
        n_w = layer.in_dim * layer.out_dim
        w = params.values[off:off + n_w].reshape(layer.in_dim, layer.out_dim)
        off += n_w
        b = params.values[off:off + layer.out_dim]
        off += layer.out_dim
        out.append((w, b))
    return out


# ---------------------------------------------------------------------------
# Running feature statistics


@dataclass
class FeatureStats:
    """Per-layer running mean/variance of pre-activations (EMA, decay 0.9)."""

    mean: dict[int, Array]
    var: dict[int, Array]
    count: int = 0

    @classmethod
    def for_spec(cls, spec: ModelSpec) -> "FeatureStats":
        mean = {i: np.zeros(spec.layers[i].out_dim) for i in spec.tracked_layers}
        var = {i: np.ones(spec.layers[i].out_dim) for i in spec.tracked_layers}
        return cls(mean=mean, var=var)

    def update(self, batch_stats: dict[int, tuple[Array, Array]]):
        d = STATS_DECAY
        for i, (bmean, bvar) in batch_stats.items():
            self.mean[i] = d * self.mean[i] + (1.0 - d) * bmean
            self.var[i] = d * self.var[i] + (1.0 - d) * bvar
        self.count += 1

    def copy(self) -> "FeatureStats":
        return FeatureStats(
            mean={i: v.copy() for i, v in self.mean.items()},
            var={i: v.copy() for i, v in self.var.items()},
            count=self.count,
        )


# ---------------------------------------------------------------------------
# Forward / backward


@dataclass
class ForwardCache:
    inputs: Array
    preacts: list[Array]
    acts: list[Array]


def _activate(name: str, s: Array) -> Array:
    if name == "identity":
        return s
    if name == "relu":
        return np.maximum(s, 0.0)
    return np.tanh(s)


def _activate_deriv(name: str, s: Array, a: Array) -> Array:
    if name == "identity":
        return np.ones_like(s)
    if name == "relu":
        return (s > 0.0).astype(np.float64)
    return 1.0 - a * a


def forward_cache(spec: ModelSpec, params: ParamVector, batch: Array) -> tuple[Array, ForwardCache]:
    """Full forward pass keeping per-layer pre-activations for backprop."""
    x = as_tensor(batch)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"batch shape {x.shape} incompatible with input dim {spec.input_dim}")
    if params.spec_hash != spec.spec_hash:
        raise BindingError("parameters are bound to a different spec")
    views = param_views(spec, params)
    preacts, acts = [], []
    a = x
    for layer, (w, b) in zip(spec.layers, views):
        s = a @ w + b
        a = _activate(layer.activation, s)
        preacts.append(s)
        acts.append(a)
    return acts[-1], ForwardCache(inputs=x, preacts=preacts, acts=acts)


def batch_layer_stats(spec: ModelSpec, cache: ForwardCache) -> dict[int, tuple[Array, Array]]:
    """Batch mean/variance of pre-activations for every tracked layer."""
    stats = {}
    for i in spec.tracked_layers:
        s = cache.preacts[i]
        stats[i] = (s.mean(axis=0), s.var(axis=0))
    return stats


def forward(spec: ModelSpec, params: ParamVector, batch: Array,
            track_stats: bool = False, running: FeatureStats | None = None
            ) -> tuple[Array, dict[int, tuple[Array, Array]]]:
    """Compute logits and batch feature statistics.

    With track_stats set, the provided running FeatureStats are folded
    forward with the batch statistics; otherwise the call is pure.
    """
    logits, cache = forward_cache(spec, params, batch)
    stats = batch_layer_stats(spec, cache)
    if track_stats:
        if running is None:
            raise ShapeError("track_stats requires a running FeatureStats instance")
        running.update(stats)
    return logits, stats


def backward(spec: ModelSpec, params: ParamVector, cache: ForwardCache,
             dlogits: Array, preact_grads: dict[int, Array] | None = None
             ) -> tuple[ParamVector, Array]:
    """Backpropagate dL/d(output activation) to parameters and inputs.

    preact_grads lets callers inject extra dL/d(pre-activation) terms at
    given layers (used by losses defined on intermediate statistics).
    """
    views = param_views(spec, params)
    grad = np.zeros_like(params.values)
    grad_views = param_views(spec, ParamVector(grad, params.spec_hash))
    g = as_tensor(dlogits)
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        ds = g * _activate_deriv(layer.activation, cache.preacts[i], cache.acts[i])
        if preact_grads and i in preact_grads:
            ds = ds + preact_grads[i]
        a_prev = cache.inputs if i == 0 else cache.acts[i - 1]
        gw, gb = grad_views[i]
        gw += a_prev.T @ ds
        gb += ds.sum(axis=0)
        g = ds @ views[i][0].T
    return ParamVector(grad, params.spec_hash), g


# ---------------------------------------------------------------------------
# Losses


def log_softmax(logits: Array, temperature: float = 1.0) -> Array:
    z = as_tensor(logits) / temperature
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: Array, temperature: float = 1.0) -> Array:
    return np.exp(log_softmax(logits, temperature))


def cross_entropy(logits: Array, labels: Array) -> float:
    ls = log_softmax(logits)
    return float(-ls[np.arange(len(labels)), labels].mean())


def cross_entropy_grad(logits: Array, labels: Array) -> Array:
    m = logits.shape[0]
    p = softmax(logits)
    p[np.arange(m), labels] -= 1.0
    return p / m


def kl_divergence(teacher_logits: Array, student_logits: Array,
                  temperature: float = 1.0) -> float:
    """Mean over the batch of KL(softmax(t/T) || softmax(s/T)); always >= 0."""
    t, s = as_tensor(teacher_logits), as_tensor(student_logits)
    if t.shape != s.shape:
        raise ShapeError(f"logit shapes differ: {t.shape} vs {s.shape}")
    lp = log_softmax(t, temperature)
    lq = log_softmax(s, temperature)
    p = np.exp(lp)
    # cancellation can leave a value a few ulps below zero; clamp it
    return max(0.0, float((p * (lp - lq)).sum(axis=1).mean()))


def kl_grad_wrt_student(teacher_logits: Array, student_logits: Array,
                        temperature: float = 1.0) -> Array:
    m = teacher_logits.shape[0]
    p = softmax(teacher_logits, temperature)
    q = softmax(student_logits, temperature)
    return (q - p) / (temperature * m)


def kl_grad_wrt_teacher(teacher_logits: Array, student_logits: Array,
                        temperature: float = 1.0) -> Array:
    m = teacher_logits.shape[0]
    lp = log_softmax(teacher_logits, temperature)
    lq = log_softmax(student_logits, temperature)
    p = np.exp(lp)
    row_kl = (p * (lp - lq)).sum(axis=1, keepdims=True)
    return p * ((lp - lq) - row_kl) / (temperature * m)


class CrossEntropy:
    """Mean cross-entropy against hard labels."""

    def __init__(self, labels):
        self.labels = np.asarray(labels, dtype=np.int64)

    def value_and_grad(self, logits: Array) -> tuple[float, Array]:
        return cross_entropy(logits, self.labels), cross_entropy_grad(logits, self.labels)


class KLToTeacher:
    """Mean KL from fixed teacher logits to the evaluated logits."""

    def __init__(self, teacher_logits: Array, temperature: float = 1.0):
        self.teacher_logits = as_tensor(teacher_logits)
        self.temperature = temperature

    def value_and_grad(self, logits: Array) -> tuple[float, Array]:
        value = kl_divergence(self.teacher_logits, logits, self.temperature)
        grad = kl_grad_wrt_student(self.teacher_logits, logits, self.temperature)
        return value, grad


def gradient(spec: ModelSpec, params: ParamVector, batch: Array, loss) -> ParamVector:
    """Exact dLoss/dParams for a loss adapter exposing value_and_grad(logits)."""
    logits, cache = forward_cache(spec, params, batch)
    value, dlogits = loss.value_and_grad(logits)
    if not np.isfinite(value):
        layer = next((i for i, s in enumerate(cache.preacts) if not np.all(np.isfinite(s))), None)
        raise NumericError(f"non-finite loss {value}", layer=layer)
    grad, _ = backward(spec, params, cache, dlogits)
    return grad


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: Array
    v: Array
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def fresh(cls, n: int, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: ParamVector, grad: ParamVector, state: AdamState, lr: float) -> ParamVector:
    """One bias-corrected Adam update; advances state in place."""
    _check_bound(params, grad)
    if len(params) != len(grad) or len(params) != state.m.shape[0]:
        raise ShapeError("parameter/gradient/state lengths differ")
    g = grad.values
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient passed to adam_step")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    new = params.values - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return ParamVector(new, params.spec_hash)


def interpolate(a: ParamVector, b: ParamVector, w: float) -> ParamVector:
    """(1-w)*a + w*b elementwise; endpoints return exact copies."""
    _check_bound(a, b)
    if w == 0.0:
        return a.copy()
    if w == 1.0:
        return b.copy()
    return ParamVector((1.0 - w) * a.values + w * b.values, a.spec_hash)
