"""Client local training and server aggregation rules.

Five strategies share one shape: the server folds an arriving update
delta into the global model scaled by a server learning rate. They
differ in buffering, staleness down-weighting, and whether a distilled
update is blended in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import ClientPartition, Dataset, sample_batch
from .errors import ConfigError, TrainingDivergenceError
from .nn import AdamState, FeatureStats, ModelSpec, ParamVector, _check_bound
from .sim import ClientUpdate

STRATEGIES = ("sync", "async", "fedbuff", "afldw", "revive", "revive_dd")

BETA_FAMILIES = ("one_cosine", "linear", "step", "constant")


@dataclass
class TrainConfig:
    client_lr: float
    server_lr: float
    local_iters: int = 25
    batch_size: int = 32
    max_updates: int = 1_000_000
    concurrency: int = 10

    def validate(self):
        if self.client_lr < 0 or self.server_lr < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.local_iters < 1 or self.batch_size < 1:
            raise ConfigError("local_iters and batch_size must be positive")
        if self.max_updates < 1 or self.concurrency < 1:
            raise ConfigError("max_updates and concurrency must be positive")


@dataclass
class BetaSchedule:
    """Non-decreasing map from staleness to [0, 1].

    Families: one_cosine and linear ramp up over [0, tau_star] and stay
    at 1 afterwards; step jumps at tau_star; constant ignores staleness.
    """

    family: str
    tau_star: float | None = None
    value: float | None = None

    def __post_init__(self):
        if self.family not in BETA_FAMILIES:
            raise ConfigError(f"unknown beta family {self.family!r}")
        if self.family == "constant":
            if self.value is None or not 0.0 <= self.value <= 1.0:
                raise ConfigError("constant schedule needs a value in [0, 1]")
        else:
            if self.tau_star is None or self.tau_star <= 0.0:
                raise ConfigError("tau_star must be positive")

    def __call__(self, tau: float) -> float:
        if tau < 0:
            raise ConfigError("staleness cannot be negative")
        if self.family == "constant":
            return float(self.value)
        r = tau / self.tau_star
        if r >= 1.0:
            return 1.0
        if self.family == "step":
            return 0.0
        if self.family == "linear":
            return r
        # one_cosine: (1 - cos(pi*r))/2 written via sin so the midpoint is
        # exactly 0.5 (cos(pi/2) does not round to zero in floats)
        return (1.0 - math.sin(math.pi * (0.5 - r))) / 2.0


def beta(schedule: BetaSchedule, tau: float) -> float:
    """Evaluate a staleness weighting schedule."""
    return schedule(tau)


def local_train(spec: ModelSpec, start_params: ParamVector, ds: Dataset,
                partition: ClientPartition, client_id: int, iters: int,
                lr: float, batch_size: int, rng: np.random.Generator
                ) -> tuple[ParamVector, ParamVector, FeatureStats]:
    """Run Adam minibatch cross-entropy steps from start_params.

    Returns the trained parameters, the delta against start_params, and
    the feature statistics accumulated over the training forward passes.
    """
    params = start_params.copy()
    stats = FeatureStats.for_spec(spec)
    state = AdamState.fresh(len(params))
    for _ in range(iters):
        x, y = sample_batch(ds, partition, client_id, batch_size, rng)
        logits, cache = nn.forward_cache(spec, params, x)
        stats.update(nn.batch_layer_stats(spec, cache))
        loss, dlogits = nn.CrossEntropy(y).value_and_grad(logits)
        if not np.isfinite(loss):
            raise TrainingDivergenceError(f"loss diverged on client {client_id}",
                                          client_id=client_id)
        grad, _ = nn.backward(spec, params, cache, dlogits)
        params = nn.adam_step(params, grad, state, lr)
    delta = ParamVector(params.values - start_params.values, spec.spec_hash)
    return params, delta, stats


@dataclass
class BufferState:
    """Pending updates awaiting one averaged application."""

    capacity: int
    pending: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ConfigError("buffer capacity must be positive")


def agg_async(x: ParamVector, upd: ClientUpdate, server_lr: float) -> ParamVector:
    """Apply the update immediately: x + lr * delta."""
    _check_bound(x, upd.delta)
    return ParamVector(x.values + server_lr * upd.delta.values, x.spec_hash)


def agg_fedbuff(x: ParamVector, upd: ClientUpdate, buffer: BufferState,
                server_lr: float) -> tuple[ParamVector, bool]:
    """Buffer the update; apply the average once the buffer fills."""
    _check_bound(x, upd.delta)
    buffer.pending.append(upd.delta.values)
    if len(buffer.pending) < buffer.capacity:
        return x, False
    total = np.add.reduce(buffer.pending)
    buffer.pending = []
    return ParamVector(x.values + (server_lr / buffer.capacity) * total, x.spec_hash), True


def agg_afldw(x: ParamVector, upd: ClientUpdate, schedule: BetaSchedule,
              server_lr: float) -> ParamVector:
    """Down-weight by staleness: x + lr * (1 - beta(tau)) * delta."""
    _check_bound(x, upd.delta)
    w = 1.0 - schedule(upd.staleness)
    return ParamVector(x.values + server_lr * (w * upd.delta.values), x.spec_hash)


def agg_revive(x: ParamVector, upd: ClientUpdate, schedule: BetaSchedule,
               server_lr: float, kd_delta: ParamVector) -> ParamVector:
    """Blend the raw and distilled updates by beta(tau)."""
    _check_bound(x, upd.delta)
    _check_bound(x, kd_delta)
    b = schedule(upd.staleness)
    mixed = (1.0 - b) * upd.delta.values + b * kd_delta.values
    return ParamVector(x.values + server_lr * mixed, x.spec_hash)


def agg_sync_round(x: ParamVector, deltas: list[ParamVector],
                   server_lr: float) -> ParamVector:
    """Apply the mean of a completed round's deltas."""
    if not deltas:
        raise ConfigError("a synchronous round needs at least one update")
    for d in deltas:
        _check_bound(x, d)
    mean = np.add.reduce([d.values for d in deltas]) / len(deltas)
    return ParamVector(x.values + server_lr * mean, x.spec_hash)
