"""Experiment runner: server loops, periodic evaluation, metrics, analyses."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import aggregation as agg
from . import data as fdata
from . import nn, sim
from .config import ExperimentConfig
from .distill import RevivePipeline
from .errors import ConfigError
from .sim import (STREAM_DATA, STREAM_DFKD, STREAM_GENERATOR_INIT,
                  STREAM_MODEL_INIT, STREAM_PARTITION, STREAM_SERVER,
                  STREAM_SPLIT, ClientUpdate, Timeline, TraceEvent, substream)

METRIC_COLUMNS = ("seed", "sim_time", "server_updates", "test_accuracy",
                  "test_loss", "best_so_far", "last_staleness")


@dataclass
class MetricsRecord:
    seed: int
    sim_time: float
    server_updates: int
    test_accuracy: float
    test_loss: float
    best_so_far: float
    last_staleness: int   # -1 before any update has been received


@dataclass
class RunResult:
    seed: int
    records: list[MetricsRecord]
    trace: list[TraceEvent]
    final_params: nn.ParamVector
    best_accuracy: float


def evaluate(spec: nn.ModelSpec, params: nn.ParamVector,
             test_set: fdata.Dataset) -> tuple[float, float]:
    """Argmax accuracy (ties to the lower class index) and mean cross-entropy."""
    if test_set.n == 0:
        raise ConfigError("test set is empty")
    logits, _ = nn.forward_cache(spec, params, test_set.inputs)
    preds = logits.argmax(axis=1)
    acc = float((preds == test_set.labels).mean())
    loss = nn.cross_entropy(logits, test_set.labels)
    return acc, loss


def best_so_far(series) -> np.ndarray:
    """Running maximum; same length as the input."""
    arr = np.asarray(series, dtype=np.float64)
    if arr.size == 0:
        return arr
    return np.maximum.accumulate(arr)


def time_to_target(times, accuracies, target: float) -> float | None:
    """First sim_time whose best-so-far accuracy reaches the target."""
    if target <= 0:
        raise ConfigError("target accuracy must be positive")
    run_best = best_so_far(accuracies)
    for t, b in zip(times, run_best):
        if b >= target:
            return float(t)
    return None


def render_time(t: float | None, horizon: float) -> str:
    return repr(float(t)) if t is not None else f">{horizon:g}"


def staleness_histogram(staleness_values) -> tuple[dict[int, int], dict[str, float]]:
    """Integer-binned counts plus p50/p90/p99 quantiles."""
    vals = np.asarray(staleness_values, dtype=np.int64)
    if vals.size == 0:
        return {}, {"p50": 0.0, "p90": 0.0, "p99": 0.0}
    uniq, counts = np.unique(vals, return_counts=True)
    bins = {int(u): int(c) for u, c in zip(uniq, counts)}
    q = {f"p{p}": float(np.percentile(vals, p)) for p in (50, 90, 99)}
    return bins, q


# ---------------------------------------------------------------------------
# Server loops


def _build_task(cfg: ExperimentConfig, seed: int):
    ds = fdata.make_blobs([seed, STREAM_DATA], cfg.dataset.classes, cfg.dataset.dim,
                          cfg.dataset.samples, cfg.dataset.spread, cfg.dataset.radius)
    train, test = fdata.train_test_split(ds, cfg.dataset.test_fraction,
                                         [seed, STREAM_SPLIT])
    public = None
    if cfg.strategy.name == "revive_dd":
        frac = cfg.dfkd.public_fraction
        rest, public_ds = fdata.train_test_split(train, frac, [seed, STREAM_SPLIT, 2])
        train = rest
        public = (public_ds.inputs, public_ds.labels)
    partition, label_dist = fdata.dirichlet_partition(
        train, cfg.population.clients, cfg.partition.alpha, [seed, STREAM_PARTITION],
        samples_per_client=cfg.partition.samples_per_client)
    spec = nn.mlp(cfg.dataset.dim, cfg.model.hidden, cfg.dataset.classes,
                  activation=cfg.model.activation, track_hidden=cfg.model.track_hidden)
    return train, test, public, partition, label_dist, spec


def _next_boundary(t: float, interval: float) -> float:
    return (math.floor(t / interval) + 1.0) * interval


def run_experiment(cfg: ExperimentConfig, seed: int) -> RunResult:
    """Run one seeded experiment to the simulated horizon or update budget.

    Fully deterministic: identical (cfg, seed) pairs give byte-identical
    metrics and traces.
    """
    cfg.validate()
    name = cfg.strategy.name
    train, test, public, partition, label_dist, spec = _build_task(cfg, seed)
    params = nn.init_params(spec, substream(seed, STREAM_MODEL_INIT))
    population = sim.build_population(
        cfg.population.clients, cfg.population.active_fraction,
        cfg.population.group_mix, seed, group_delays=cfg.population.group_delays,
        sigma=cfg.population.sigma, client_jitter=cfg.population.client_jitter,
        mean_cycle=cfg.population.mean_cycle)

    if name == "sync":
        return _run_sync(cfg, seed, spec, params, train, test, partition, population)
    return _run_async_family(cfg, seed, spec, params, train, test, public,
                             partition, label_dist, population)


def _record(records, seed, t, updates, spec, params, test, best, last_tau):
    acc, loss = evaluate(spec, params, test)
    best = max(best, acc)
    records.append(MetricsRecord(seed, t, updates, acc, loss, best, last_tau))
    return best


def _run_async_family(cfg, seed, spec, params, train, test, public,
                      partition, label_dist, population):
    name = cfg.strategy.name
    tc = cfg.training
    horizon = cfg.evaluation.horizon
    interval = cfg.evaluation.interval
    server_rng = substream(seed, STREAM_SERVER)
    timeline = Timeline(population, seed, tc.concurrency)

    buffer = agg.BufferState(cfg.strategy.buffer_size) if name == "fedbuff" else None
    schedule = cfg.beta_schedule() if name in ("afldw", "revive", "revive_dd") else None
    pipeline = None
    if name in ("revive", "revive_dd"):
        pipeline = RevivePipeline(
            spec, cfg.dataset.dim, cfg.synthesis_config(), cfg.distill_config(),
            substream(seed, STREAM_GENERATOR_INIT),
            buffer_capacity=cfg.dfkd.buffer_size,
            store_capacity=cfg.dfkd.store_capacity,
            use_synthesis=(name == "revive"), public_pool=public)

    updates = 0
    last_tau = -1
    records: list[MetricsRecord] = []
    trace: list[TraceEvent] = []
    best = _record(records, seed, 0.0, 0, spec, params, test, float("-inf"), last_tau)
    next_eval = interval

    for _ in range(tc.concurrency):
        timeline.request_dispatch(updates, params, server_rng)

    arrival_seq = 0
    while updates < tc.max_updates and horizon > 0:
        if len(timeline.queue) == 0:
            if timeline.pending == 0 or not timeline.advance_to_next_activation():
                break
            if timeline.clock.now > horizon:
                break
            timeline.retry_pending(updates, params, server_rng)
            continue
        if timeline.queue.peek_time() > horizon:
            break
        job = timeline.next_arrival()

        trained, delta, stats = agg.local_train(
            spec, job.start_params, train, partition, job.client_id,
            tc.local_iters, tc.client_lr, tc.batch_size, job.rng)
        tau = sim.staleness_of(job, updates)
        upd = ClientUpdate(job.client_id, delta, job.version, tau,
                           job.arrival_time, label_dist.counts[job.client_id])
        trace.append(TraceEvent(arrival_seq, job.arrival_time, job.client_id,
                                job.version, tau))
        arrival_seq += 1
        last_tau = tau

        if name == "async":
            params = agg.agg_async(params, upd, tc.server_lr)
            updates += 1
        elif name == "fedbuff":
            params, applied = agg.agg_fedbuff(params, upd, buffer, tc.server_lr)
            if applied:
                updates += 1
        elif name == "afldw":
            params = agg.agg_afldw(params, upd, schedule, tc.server_lr)
            updates += 1
        else:  # revive / revive_dd
            kd_delta = pipeline.distilled_update(
                trained, stats, upd.label_counts, params,
                substream(seed, STREAM_DFKD, arrival_seq - 1))
            params = agg.agg_revive(params, upd, schedule, tc.server_lr, kd_delta)
            updates += 1

        timeline.request_dispatch(updates, params, server_rng)
        timeline.retry_pending(updates, params, server_rng)

        if job.arrival_time >= next_eval:
            best = _record(records, seed, job.arrival_time, updates, spec, params,
                           test, best, last_tau)
            next_eval = _next_boundary(job.arrival_time, interval)

    if records[-1].server_updates < updates:
        best = _record(records, seed, timeline.clock.now, updates, spec, params,
                       test, best, last_tau)
    return RunResult(seed, records, trace, params, best)


def _run_sync(cfg, seed, spec, params, train, test, partition, population):
    tc = cfg.training
    horizon = cfg.evaluation.horizon
    interval = cfg.evaluation.interval
    server_rng = substream(seed, STREAM_SERVER)
    timeline = Timeline(population, seed, tc.concurrency)

    updates = 0
    records: list[MetricsRecord] = []
    trace: list[TraceEvent] = []
    best = _record(records, seed, 0.0, 0, spec, params, test, float("-inf"), -1)
    next_eval = interval
    arrival_seq = 0

    while updates < tc.max_updates and horizon > 0:
        candidates = timeline.free_active_clients()
        if not candidates:
            if not timeline.advance_to_next_activation():
                break
            continue
        k = min(tc.concurrency, len(candidates))
        chosen = server_rng.choice(np.asarray(candidates), size=k, replace=False)
        jobs = [timeline.dispatch_to(int(cid), updates, params) for cid in chosen]
        round_end = max(j.arrival_time for j in jobs)
        if round_end > horizon:
            break
        deltas = []
        for _ in jobs:
            job = timeline.next_arrival()
            _, delta, _ = agg.local_train(
                spec, job.start_params, train, partition, job.client_id,
                tc.local_iters, tc.client_lr, tc.batch_size, job.rng)
            deltas.append(delta)
            trace.append(TraceEvent(arrival_seq, job.arrival_time, job.client_id,
                                    job.version, 0))
            arrival_seq += 1
        params = agg.agg_sync_round(params, deltas, tc.server_lr)
        updates += 1
        timeline.clock.advance_to(round_end)
        if round_end >= next_eval:
            best = _record(records, seed, round_end, updates, spec, params, test,
                           best, 0)
            next_eval = _next_boundary(round_end, interval)

    if records[-1].server_updates < updates:
        best = _record(records, seed, timeline.clock.now, updates, spec, params,
                       test, best, 0 if updates else -1)
    return RunResult(seed, records, trace, params, best)


# ---------------------------------------------------------------------------
# Metrics files and summaries


def write_metrics_csv(path, records: list[MetricsRecord]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for r in records:
            writer.writerow([r.seed, repr(float(r.sim_time)), r.server_updates,
                             repr(float(r.test_accuracy)), repr(float(r.test_loss)),
                             repr(float(r.best_so_far)), r.last_staleness])


def read_metrics_csv(path) -> list[MetricsRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            records.append(MetricsRecord(
                int(row["seed"]), float(row["sim_time"]), int(row["server_updates"]),
                float(row["test_accuracy"]), float(row["test_loss"]),
                float(row["best_so_far"]), int(row["last_staleness"])))
    return records


def run_to_files(cfg: ExperimentConfig, seed: int, out_dir) -> RunResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = run_experiment(cfg, seed)
    write_metrics_csv(out / f"metrics_seed{seed}.csv", result.records)
    sim.write_trace_csv(out / f"trace_seed{seed}.csv", result.trace)
    return result


def _seed_of(path: Path) -> int:
    return int(path.stem.replace("metrics_seed", ""))


def summarize_runs(runs_dir, target_frac: float = 0.85,
                   target_abs: float | None = None,
                   reference: str = "fedbuff", horizon: float | None = None) -> dict:
    """Aggregate per-seed metrics CSVs under runs_dir into a comparison table.

    Expects one subdirectory per strategy. The time-to-target reference is
    the per-seed best accuracy of the `reference` strategy scaled by
    target_frac, unless an absolute target is given.
    """
    root = Path(runs_dir)
    strategies = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not strategies:
        raise ConfigError(f"no strategy directories under {runs_dir}")
    per_strategy: dict[str, dict[int, list[MetricsRecord]]] = {}
    for s in strategies:
        per_strategy[s] = {}
        for f in sorted((root / s).glob("metrics_seed*.csv")):
            per_strategy[s][_seed_of(f)] = read_metrics_csv(f)

    targets: dict[int, float] = {}
    if target_abs is None:
        if reference not in per_strategy:
            raise ConfigError(f"reference strategy '{reference}' not found in {runs_dir}")
        for s_seed, recs in per_strategy[reference].items():
            targets[s_seed] = target_frac * max(r.best_so_far for r in recs)

    summary = {"target_frac": target_frac, "target_abs": target_abs,
               "reference": reference, "strategies": {}}
    for s, by_seed in per_strategy.items():
        rows = {}
        for s_seed, recs in sorted(by_seed.items()):
            times = [r.sim_time for r in recs]
            accs = [r.test_accuracy for r in recs]
            target = target_abs if target_abs is not None else targets.get(s_seed)
            ttt = None if target is None else time_to_target(times, accs, target)
            hzn = horizon if horizon is not None else times[-1]
            rows[s_seed] = {
                "best_accuracy": max(r.best_so_far for r in recs),
                "final_accuracy": recs[-1].test_accuracy,
                "target": target,
                "time_to_target": ttt,
                "time_to_target_str": render_time(ttt, hzn),
            }
        bests = [v["best_accuracy"] for v in rows.values()]
        entry = {"seeds": rows, "mean_best": float(np.mean(bests))}
        if len(bests) >= 2:
            entry["std_best"] = float(np.std(bests, ddof=1))
        reached = [v["time_to_target"] for v in rows.values()
                   if v["time_to_target"] is not None]
        if reached:
            entry["mean_time_to_target"] = float(np.mean(reached))
            if len(reached) >= 2:
                entry["std_time_to_target"] = float(np.std(reached, ddof=1))
        summary["strategies"][s] = entry
    return summary


def format_summary(summary: dict) -> str:
    lines = [f"{'strategy':<12} {'seed':>4} {'best_acc':>9} {'final_acc':>10} {'t_to_target':>12}"]
    for s, entry in summary["strategies"].items():
        for s_seed, row in entry["seeds"].items():
            lines.append(f"{s:<12} {s_seed:>4} {row['best_accuracy']:>9.4f} "
                         f"{row['final_accuracy']:>10.4f} {row['time_to_target_str']:>12}")
        mean = entry["mean_best"]
        std = entry.get("std_best")
        t_mean = entry.get("mean_time_to_target")
        t_std = entry.get("std_time_to_target")
        agg_txt = f"  -> best {mean:.4f}" + (f" ± {std:.4f}" if std is not None else "")
        if t_mean is not None:
            agg_txt += f"; time-to-target {t_mean:.1f}" + (
                f" ± {t_std:.1f}" if t_std is not None else "")
        lines.append(agg_txt)
    return "\n".join(lines)
