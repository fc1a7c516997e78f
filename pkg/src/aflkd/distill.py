"""Server-side data-free distillation of stale client models.

Each arriving client model is pushed into a rolling teacher buffer. A
persistent generator is briefly adapted to synthesize pseudo-samples
that the buffered teachers recognize, a Reptile-style interpolation
folds the adaptation back into the generator, and the current server
model is distilled on the synthetic pool against all teachers at once.
The result is a parameter delta the aggregation rule can blend in.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import (BindingError, ConfigError, NumericError,
                     SynthesisDivergenceError)
from .nn import (AdamState, Array, FeatureStats, ModelSpec, ParamVector,
                 _check_bound)

logger = logging.getLogger(__name__)


@dataclass
class SynthesisConfig:
    steps: int = 2              # generator adaptation steps per arrival
    lr: float = 0.05            # joint learning rate over (latents, generator)
    batch: int = 64             # pseudo-samples per arrival
    latent_dim: int = 16
    hidden: int = 64
    output_scale: float = 8.0   # generator output is scale * tanh(.)
    w_target: float = 1.0
    w_feature: float = 0.003
    w_adv: float = 0.1
    meta_lambda: float = 0.5    # weight kept on the old generator

    def validate(self):
        if self.steps < 0 or self.batch < 1 or self.latent_dim < 1 or self.hidden < 1:
            raise ConfigError("invalid synthesis sizes")
        if min(self.w_target, self.w_feature, self.w_adv) < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0.0 <= self.meta_lambda <= 1.0:
            raise ConfigError("meta_lambda must lie in [0, 1]")


@dataclass
class DistillConfig:
    steps: int = 10
    lr: float = 0.01
    batch: int = 32
    temperature: float = 1.0

    def validate(self):
        if self.steps < 0 or self.batch < 1 or self.lr < 0 or self.temperature <= 0:
            raise ConfigError("invalid distillation settings")


@dataclass
class TeacherEntry:
    params: ParamVector
    stats: FeatureStats
    label_counts: Array
    seq: int


class TeacherBuffer:
    """FIFO of the most recent client models with their label counts."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("teacher buffer capacity must be positive")
        self.capacity = capacity
        self.entries: deque[TeacherEntry] = deque()
        self._next_seq = 0

    def push(self, params: ParamVector, stats: FeatureStats, label_counts: Array) -> TeacherEntry:
        entry = TeacherEntry(params, stats, np.asarray(label_counts, dtype=np.int64),
                             self._next_seq)
        self._next_seq += 1
        self.entries.append(entry)
        if len(self.entries) > self.capacity:
            self.entries.popleft()
        return entry

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def buffer_push(buf: TeacherBuffer, params: ParamVector, stats: FeatureStats,
                label_counts: Array, spec: ModelSpec) -> TeacherBuffer:
    if params.spec_hash != spec.spec_hash:
        raise BindingError("teacher bound to a different spec")
    buf.push(params, stats, label_counts)
    return buf


def teacher_weights(buf: TeacherBuffer, class_idx: int) -> Array:
    """Per-teacher weights proportional to their clients' counts of a class.

    Falls back to uniform if no buffered client ever saw the class.
    """
    if len(buf) == 0:
        raise ConfigError("teacher buffer is empty")
    counts = np.array([float(e.label_counts[class_idx]) for e in buf])
    total = counts.sum()
    if total <= 0:
        return np.full(len(buf), 1.0 / len(buf))
    return counts / total


class SyntheticStore:
    """Capacity-bounded FIFO of (pseudo-sample, target label) pairs."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ConfigError("synthetic store capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self._inputs: deque[Array] = deque(maxlen=capacity)
        self._labels: deque[int] = deque(maxlen=capacity)

    def append_batch(self, inputs: Array, labels: Array):
        inputs = nn.as_tensor(inputs)
        for row, lab in zip(inputs, labels):
            self._inputs.append(row.copy())
            self._labels.append(int(lab))

    def as_arrays(self) -> tuple[Array, Array]:
        if not self._inputs:
            return np.zeros((0, self.dim)), np.zeros(0, dtype=np.int64)
        return np.stack(self._inputs), np.array(self._labels, dtype=np.int64)

    def save(self, path, num_classes: int):
        """Dump the current pool in the flat binary dataset format."""
        from .data import write_arrays
        x, y = self.as_arrays()
        write_arrays(path, x, y, num_classes)

    def __len__(self) -> int:
        return len(self._inputs)


@dataclass
class GeneratorState:
    """Persistent generator mapping latent noise to pseudo-samples."""

    spec: ModelSpec
    params: ParamVector
    output_scale: float

    @classmethod
    def create(cls, data_dim: int, cfg: SynthesisConfig,
               rng: np.random.Generator) -> "GeneratorState":
        spec = ModelSpec((
            nn.LayerSpec(cfg.latent_dim, cfg.hidden, "relu"),
            nn.LayerSpec(cfg.hidden, data_dim, "tanh"),
        ))
        return cls(spec=spec, params=nn.init_params(spec, rng),
                   output_scale=cfg.output_scale)

    def generate(self, latents: Array, params: ParamVector | None = None) -> Array:
        if params is None:
            params = self.params
        out, _ = nn.forward_cache(self.spec, params, latents)
        return self.output_scale * out


def balanced_labels(batch: int, classes: int) -> Array:
    """Target labels spread uniformly; per-class counts differ by at most 1."""
    return np.arange(batch, dtype=np.int64) % classes


def synth_loss(generated: Array, labels: Array, buf: TeacherBuffer,
               spec: ModelSpec, student: ParamVector, cfg: SynthesisConfig
               ) -> tuple[float, dict[str, float]]:
    """Weighted sum of target, feature-matching, and adversarial terms."""
    total, comps, _ = _synth_loss_and_grads(generated, labels, buf, spec, student,
                                            cfg, need_grad=False)
    return total, comps


def _synth_loss_and_grads(generated: Array, labels: Array, buf: TeacherBuffer,
                          spec: ModelSpec, student: ParamVector,
                          cfg: SynthesisConfig, need_grad: bool = True
                          ) -> tuple[float, dict[str, float], Array | None]:
    """Loss components plus (optionally) the gradient w.r.t. the samples.

    For the adversarial term the student's logits are treated as constants:
    gradients flow only through the teachers.
    """
    if len(buf) == 0:
        raise ConfigError("synthesis needs at least one buffered teacher")
    x = nn.as_tensor(generated)
    m = x.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    weights_per_class = {c: teacher_weights(buf, c) for c in np.unique(labels)}
    # W[s, j]: teacher j's weight for sample s's target class
    W = np.stack([weights_per_class[int(c)] for c in labels])

    student_logits, _ = nn.forward_cache(spec, student, x)
    student_arg = student_logits.argmax(axis=1)
    student_lsm = nn.log_softmax(student_logits)

    l_target = 0.0
    l_feature = 0.0
    l_adv = 0.0
    dx = np.zeros_like(x) if need_grad else None
    onehot = np.zeros((m, spec.output_dim))
    onehot[np.arange(m), labels] = 1.0

    for j, entry in enumerate(buf):
        wj = W[:, j]
        wbar = wj.mean()
        logits, cache = nn.forward_cache(spec, entry.params, x)
        p = nn.softmax(logits)
        lsm = nn.log_softmax(logits)

        # target: weighted per-sample cross-entropy against assigned labels
        ce_rows = -lsm[np.arange(m), labels]
        l_target += float((wj * ce_rows).mean())

        # feature: squared mismatch of batch stats vs the teacher's running stats
        feat_j = 0.0
        preact_grads = {}
        for li in spec.tracked_layers:
            s = cache.preacts[li]
            mu_b = s.mean(axis=0)
            var_b = s.var(axis=0)
            dmu = mu_b - entry.stats.mean[li]
            dvar = var_b - entry.stats.var[li]
            feat_j += float((dmu ** 2).sum() + (dvar ** 2).sum())
            if need_grad:
                g = 2.0 * dmu / m + (2.0 * dvar) * (2.0 * (s - mu_b) / m)
                preact_grads[li] = cfg.w_feature * wbar * g
        l_feature += wbar * feat_j

        # adversarial: negated KL wherever teacher and student currently agree
        agree = (logits.argmax(axis=1) == student_arg).astype(np.float64)
        row_kl = (p * (lsm - student_lsm)).sum(axis=1)
        l_adv += float(-(wj * agree * row_kl).mean())

        if need_grad:
            dlogits = cfg.w_target * (wj[:, None] * (p - onehot)) / m
            mask = (cfg.w_adv * wj * agree / m)[:, None]
            dlogits -= mask * (p * ((lsm - student_lsm) - row_kl[:, None]))
            _, dxj = nn.backward(spec, entry.params, cache, dlogits, preact_grads)
            dx += dxj

    total = cfg.w_target * l_target + cfg.w_feature * l_feature + cfg.w_adv * l_adv
    comps = {"target": l_target, "feature": l_feature, "adv": l_adv}
    return float(total), comps, dx


@dataclass
class SynthesisResult:
    samples: Array
    labels: Array
    phi_final: ParamVector
    losses: list[float]   # loss before any step, then after each step
    best_step: int


def synthesize(gen: GeneratorState, buf: TeacherBuffer, spec: ModelSpec,
               student: ParamVector, cfg: SynthesisConfig,
               rng: np.random.Generator) -> SynthesisResult:
    """Jointly adapt latents and a generator copy; keep the best samples.

    Runs cfg.steps Adam updates on the concatenated (latents, params)
    variable and returns the samples from whichever step (including step
    zero) achieved the lowest synthesis loss, along with the post-loop
    generator parameters for the meta-update.
    """
    z = rng.standard_normal((cfg.batch, cfg.latent_dim))
    labels = balanced_labels(cfg.batch, spec.output_dim)
    phi = gen.params.copy()
    n_z = z.size

    def evaluate(z_now, phi_now, need_grad):
        x = gen.generate(z_now, phi_now)
        total, comps, dx = _synth_loss_and_grads(x, labels, buf, spec, student,
                                                 cfg, need_grad=need_grad)
        if not np.isfinite(total):
            raise SynthesisDivergenceError(f"synthesis loss diverged ({total})")
        if not need_grad:
            return x, total, None, None
        dout = gen.output_scale * dx
        _, gen_cache = nn.forward_cache(gen.spec, phi_now, z_now)
        dphi, dz = nn.backward(gen.spec, phi_now, gen_cache, dout)
        return x, total, dz, dphi

    x, loss, _, _ = evaluate(z, phi, need_grad=False)
    losses = [loss]
    best = (loss, 0, x)
    joint_hash = f"joint:{gen.params.spec_hash}:{n_z}"
    state = AdamState.fresh(n_z + len(phi))
    for k in range(cfg.steps):
        _, _, dz, dphi = evaluate(z, phi, need_grad=True)
        joint = ParamVector(np.concatenate([z.ravel(), phi.values]), joint_hash)
        jgrad = ParamVector(np.concatenate([dz.ravel(), dphi.values]), joint_hash)
        joint = nn.adam_step(joint, jgrad, state, cfg.lr)
        z = joint.values[:n_z].reshape(cfg.batch, cfg.latent_dim)
        phi = ParamVector(joint.values[n_z:].copy(), phi.spec_hash)
        x, loss, _, _ = evaluate(z, phi, need_grad=False)
        losses.append(loss)
        if loss < best[0]:
            best = (loss, k + 1, x)
    return SynthesisResult(samples=best[2], labels=labels, phi_final=phi,
                           losses=losses, best_step=best[1])


def meta_update(gen: GeneratorState, phi_final: ParamVector, lam: float) -> GeneratorState:
    """Reptile-style pull of the generator toward the adapted parameters."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError("lambda must lie in [0, 1]")
    _check_bound(gen.params, phi_final)
    if lam != 1.0:  # lam == 1 keeps the generator bit-identical
        gen.params = nn.interpolate(phi_final, gen.params, lam)
    return gen


def _teacher_batch(pool_inputs: Array, pool_labels: Array, proportions: Array,
                   batch: int, rng: np.random.Generator) -> Array:
    """Indices into the pool, weighted by the teacher's label proportions."""
    weights = proportions[pool_labels]
    total = weights.sum()
    if total <= 0:
        # teacher's label distribution is orthogonal to the pool: go uniform
        logger.warning("teacher labels orthogonal to distillation pool; sampling uniformly")
        return rng.integers(0, len(pool_labels), size=batch)
    p = weights / total
    eligible = int((weights > 0).sum())
    replace = eligible < batch
    return rng.choice(len(pool_labels), size=batch, replace=replace, p=p)


def distill(student_init: ParamVector, buf: TeacherBuffer, pool_inputs: Array,
            pool_labels: Array, spec: ModelSpec, cfg: DistillConfig,
            rng: np.random.Generator) -> ParamVector:
    """Multi-teacher KL distillation; returns the parameter delta.

    Each step draws one batch per teacher (weighted by that client's label
    proportions over the pool) and applies a single Adam update on the
    teacher-averaged KL gradient.
    """
    if len(buf) == 0:
        raise ConfigError("distillation needs at least one teacher")
    if len(pool_labels) == 0:
        raise ConfigError("distillation pool is empty")
    student = student_init.copy()
    state = AdamState.fresh(len(student))
    props = [e.label_counts / max(e.label_counts.sum(), 1) for e in buf]
    for _ in range(cfg.steps):
        grads = np.zeros_like(student.values)
        for entry, prop in zip(buf, props):
            picks = _teacher_batch(pool_inputs, pool_labels, prop, cfg.batch, rng)
            x = pool_inputs[picks]
            teacher_logits, _ = nn.forward_cache(spec, entry.params, x)
            g = nn.gradient(spec, student, x,
                            nn.KLToTeacher(teacher_logits, cfg.temperature))
            grads += g.values
        grads /= len(buf)
        student = nn.adam_step(student, ParamVector(grads, student.spec_hash),
                               state, cfg.lr)
    return ParamVector(student.values - student_init.values, spec.spec_hash)


class RevivePipeline:
    """Per-arrival orchestration: buffer, synthesize, meta-update, distill.

    With use_synthesis=False the generator steps are skipped and the
    distillation pool is a fixed public dataset instead.
    """

    def __init__(self, spec: ModelSpec, data_dim: int, synth_cfg: SynthesisConfig,
                 distill_cfg: DistillConfig, init_rng: np.random.Generator,
                 buffer_capacity: int = 8, store_capacity: int = 512,
                 use_synthesis: bool = True,
                 public_pool: tuple[Array, Array] | None = None):
        synth_cfg.validate()
        distill_cfg.validate()
        self.spec = spec
        self.synth_cfg = synth_cfg
        self.distill_cfg = distill_cfg
        self.use_synthesis = use_synthesis
        self.buffer = TeacherBuffer(capacity=buffer_capacity)
        self.store = SyntheticStore(store_capacity, data_dim)
        self.generator = GeneratorState.create(data_dim, synth_cfg, init_rng)
        self.public_pool = public_pool
        if not use_synthesis and public_pool is None:
            raise ConfigError("distillation on real data needs a public pool")

    def distilled_update(self, teacher_params: ParamVector, teacher_stats: FeatureStats,
                         label_counts: Array, current: ParamVector,
                         rng: np.random.Generator) -> ParamVector:
        """Produce the distilled delta for one arrival; zero on failure."""
        try:
            self.buffer.push(teacher_params, teacher_stats, label_counts)
            if self.use_synthesis:
                result = synthesize(self.generator, self.buffer, self.spec,
                                    current, self.synth_cfg, rng)
                self.store.append_batch(result.samples, result.labels)
                meta_update(self.generator, result.phi_final, self.synth_cfg.meta_lambda)
                pool_x, pool_y = self.store.as_arrays()
            else:
                pool_x, pool_y = self.public_pool
            return distill(current, self.buffer, pool_x, pool_y, self.spec,
                           self.distill_cfg, rng)
        except NumericError as exc:
            logger.warning("distilled update failed (%s); falling back to zero delta", exc)
            return ParamVector(np.zeros(len(current)), current.spec_hash)
