"""Deterministic simulator and library for asynchronous federated learning.

Implements synchronous, vanilla-async, buffered, and staleness-down-weighting
baselines plus a hybrid strategy that blends parameter-space updates with
distillation-based updates recovered from stale client models.
"""

from .aggregation import (BetaSchedule, BufferState, TrainConfig, agg_afldw,
                          agg_async, agg_fedbuff, agg_revive, agg_sync_round,
                          beta, local_train)
from .config import ExperimentConfig, load_config
from .data import (ClientPartition, Dataset, LabelDistribution,
                   dirichlet_partition, load_dataset, make_blobs, sample_batch,
                   save_dataset, train_test_split)
from .distill import (DistillConfig, GeneratorState, RevivePipeline,
                      SynthesisConfig, SyntheticStore, TeacherBuffer,
                      meta_update, synth_loss, synthesize, teacher_weights)
from .harness import (MetricsRecord, RunResult, best_so_far, evaluate,
                      run_experiment, staleness_histogram, summarize_runs,
                      time_to_target)
from .nn import (AdamState, FeatureStats, LayerSpec, ModelSpec, ParamVector,
                 adam_step, cross_entropy, forward, gradient, init_params,
                 interpolate, kl_divergence, mlp, softmax)
from .sim import (Availability, ClientProfile, ClientUpdate, EventQueue,
                  InFlightJob, Population, SimClock, Timeline, TraceEvent,
                  build_population, staleness_of)

__version__ = "0.1.0"
