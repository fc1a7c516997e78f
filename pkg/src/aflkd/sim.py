"""Deterministic discrete-event timeline for asynchronous client updates.

Clients belong to slow/medium/fast groups with lognormal compute and
upload delays and an alternating on/off availability process. A min-heap
orders arrivals; staleness is counted in applied server model updates,
never in wall-clock time.
"""

from __future__ import annotations

import csv
import heapq
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

from .errors import (ConfigError, SchedulingError, SimulationExhausted,
                     UnknownClientError)
from .nn import Array, ParamVector

GROUPS = ("slow", "medium", "fast")

# medians (simulated seconds) per speed group
DEFAULT_GROUP_DELAYS = {
    "slow": {"compute_median": 9.0, "upload_median": 4.5},
    "medium": {"compute_median": 3.0, "upload_median": 1.5},
    "fast": {"compute_median": 1.0, "upload_median": 0.5},
}
DEFAULT_SIGMA = 0.5          # lognormal shape of per-round draws
DEFAULT_CLIENT_JITTER = 0.25  # lognormal spread of per-client medians
DEFAULT_MEAN_CYCLE = 50.0     # mean on+off cycle length of availability

# sub-stream tags hashed into every RNG derivation
STREAM_DATA = 11
STREAM_SPLIT = 12
STREAM_PARTITION = 13
STREAM_POPULATION = 21
STREAM_AVAILABILITY = 22
STREAM_MODEL_INIT = 31
STREAM_GENERATOR_INIT = 32
STREAM_SERVER = 41
STREAM_JOB = 42
STREAM_DFKD = 43


def substream(seed, *tags) -> np.random.Generator:
    """Independent generator derived from a base seed and integer tags."""
    return np.random.default_rng([int(seed), *map(int, tags)])


@dataclass(frozen=True)
class DelayParams:
    mu: float      # log of the median
    sigma: float

    def draw(self, rng: np.random.Generator) -> float:
        return float(rng.lognormal(self.mu, self.sigma))

    @property
    def median(self) -> float:
        return float(np.exp(self.mu))


@dataclass(frozen=True)
class ClientProfile:
    client_id: int
    group: str
    compute: DelayParams
    upload: DelayParams


class Availability:
    """Alternating exponential on/off process with a target active fraction.

    Segments are generated lazily from a private RNG, so query order never
    changes the timeline.
    """

    def __init__(self, rng: np.random.Generator, active_fraction: float,
                 mean_cycle: float = DEFAULT_MEAN_CYCLE):
        if not 0.0 < active_fraction <= 1.0:
            raise ConfigError("active_fraction must be in (0, 1]")
        self._rng = rng
        self._always_on = active_fraction >= 1.0
        if self._always_on:
            return
        self._mean_on = active_fraction * mean_cycle
        self._mean_off = (1.0 - active_fraction) * mean_cycle
        self._start_active = bool(rng.random() < active_fraction)
        self._bounds = [0.0]  # segment i spans [bounds[i], bounds[i+1])

    def _segment_active(self, i: int) -> bool:
        return self._start_active == (i % 2 == 0)

    def _extend_past(self, t: float):
        while self._bounds[-1] <= t:
            i = len(self._bounds) - 1
            mean = self._mean_on if self._segment_active(i) else self._mean_off
            self._bounds.append(self._bounds[-1] + self._rng.exponential(mean))

    def is_active(self, t: float) -> bool:
        if self._always_on:
            return True
        self._extend_past(t)
        return self._segment_active(bisect_right(self._bounds, t) - 1)

    def next_active_time(self, t: float) -> float:
        if self.is_active(t):
            return t
        i = bisect_right(self._bounds, t) - 1
        self._extend_past(self._bounds[i + 1])
        return self._bounds[i + 1]

    def on_fraction(self, horizon: float) -> float:
        """Exact fraction of [0, horizon) spent active."""
        if self._always_on:
            return 1.0
        self._extend_past(horizon)
        on = 0.0
        for i in range(len(self._bounds) - 1):
            lo, hi = self._bounds[i], min(self._bounds[i + 1], horizon)
            if lo >= horizon:
                break
            if self._segment_active(i):
                on += hi - lo
        return on / horizon


@dataclass
class Population:
    profiles: list[ClientProfile]
    availability: list[Availability]

    @property
    def num_clients(self) -> int:
        return len(self.profiles)


def build_population(num_clients: int, active_fraction: float, group_mix: dict,
                     seed, group_delays: dict | None = None,
                     sigma: float = DEFAULT_SIGMA,
                     client_jitter: float = DEFAULT_CLIENT_JITTER,
                     mean_cycle: float = DEFAULT_MEAN_CYCLE) -> Population:
    """Assign speed groups by mix and draw per-client delay parameters once."""
    unknown = set(group_mix) - set(GROUPS)
    if unknown:
        raise ConfigError(f"unknown speed groups {sorted(unknown)}")
    mix = np.array([float(group_mix.get(g, 0.0)) for g in GROUPS])
    if mix.min() < 0 or abs(mix.sum() - 1.0) > 1e-9:
        raise ConfigError("group mix proportions must be non-negative and sum to 1")
    delays = {g: dict(DEFAULT_GROUP_DELAYS[g]) for g in GROUPS}
    for g, override in (group_delays or {}).items():
        delays[g].update(override)

    rng = substream(seed, STREAM_POPULATION)
    # largest-remainder rounding so counts always sum to num_clients
    raw = mix * num_clients
    counts = np.floor(raw).astype(int)
    remainder = num_clients - counts.sum()
    order = np.argsort(-(raw - counts))
    for k in range(remainder):
        counts[order[k]] += 1
    groups = np.repeat(np.arange(len(GROUPS)), counts)
    rng.shuffle(groups)

    profiles = []
    for cid in range(num_clients):
        g = GROUPS[groups[cid]]
        jit_c = rng.lognormal(0.0, client_jitter)
        jit_u = rng.lognormal(0.0, client_jitter)
        profiles.append(ClientProfile(
            client_id=cid,
            group=g,
            compute=DelayParams(float(np.log(delays[g]["compute_median"] * jit_c)), sigma),
            upload=DelayParams(float(np.log(delays[g]["upload_median"] * jit_u)), sigma),
        ))
    availability = [
        Availability(substream(seed, STREAM_AVAILABILITY, cid), active_fraction, mean_cycle)
        for cid in range(num_clients)
    ]
    return Population(profiles, availability)


# ---------------------------------------------------------------------------
# Events


@dataclass
class InFlightJob:
    client_id: int
    version: int              # server update count at dispatch
    dispatch_time: float
    arrival_time: float
    start_params: ParamVector
    rng: np.random.Generator  # private stream: delay draws then local training
    job_index: int            # per-client dispatch counter


@dataclass
class ClientUpdate:
    client_id: int
    delta: ParamVector
    version: int
    staleness: int
    arrival_time: float
    label_counts: Array


@dataclass
class TraceEvent:
    seq: int
    sim_time: float
    client_id: int
    version: int
    staleness: int


def write_trace_csv(path, events: list[TraceEvent]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["event_seq", "sim_time", "client_id", "origin_version", "staleness"])
        for e in events:
            writer.writerow([e.seq, repr(float(e.sim_time)), e.client_id, e.version,
                             e.staleness])


def read_trace_csv(path) -> list[TraceEvent]:
    events = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            events.append(TraceEvent(int(row["event_seq"]), float(row["sim_time"]),
                                     int(row["client_id"]), int(row["origin_version"]),
                                     int(row["staleness"])))
    return events


class SimClock:
    def __init__(self):
        self.now = 0.0

    def advance_to(self, t: float):
        if t < self.now:
            raise SimulationExhausted(f"clock cannot move backwards ({t} < {self.now})")
        self.now = t


class EventQueue:
    """Min-heap of arrivals, FIFO on ties for determinism."""

    def __init__(self):
        self._heap = []
        self._seq = 0

    def push(self, job: InFlightJob):
        heapq.heappush(self._heap, (job.arrival_time, self._seq, job))
        self._seq += 1

    def pop(self) -> InFlightJob:
        if not self._heap:
            raise SimulationExhausted("event queue is empty")
        return heapq.heappop(self._heap)[2]

    def peek_time(self) -> float:
        if not self._heap:
            raise SimulationExhausted("event queue is empty")
        return self._heap[0][0]

    def __len__(self) -> int:
        return len(self._heap)


def staleness_of(job: InFlightJob, server_update_count: int) -> int:
    """Server updates applied since the job's model was dispatched."""
    if server_update_count < job.version:
        raise SimulationExhausted(
            f"job version {job.version} is ahead of server count {server_update_count}")
    return server_update_count - job.version


class Timeline:
    """Dispatch/arrival bookkeeping for a single run."""

    def __init__(self, population: Population, seed, max_concurrent: int):
        if max_concurrent < 1:
            raise ConfigError("need at least one concurrent job")
        self.population = population
        self.seed = int(seed)
        self.max_concurrent = max_concurrent
        self.clock = SimClock()
        self.queue = EventQueue()
        self.busy: set[int] = set()
        self.pending = 0
        self.dispatched = 0
        self.popped = 0
        self._job_counts = [0] * population.num_clients

    def free_active_clients(self) -> list[int]:
        t = self.clock.now
        return [cid for cid in range(self.population.num_clients)
                if cid not in self.busy and self.population.availability[cid].is_active(t)]

    def dispatch_to(self, client_id: int, version: int, start_params: ParamVector) -> InFlightJob:
        if not 0 <= client_id < self.population.num_clients:
            raise UnknownClientError(client_id)
        if client_id in self.busy:
            raise SchedulingError(f"client {client_id} already has a job in flight")
        if len(self.busy) >= self.max_concurrent:
            raise SchedulingError("concurrency limit reached")
        job_index = self._job_counts[client_id]
        self._job_counts[client_id] += 1
        rng = substream(self.seed, STREAM_JOB, client_id, job_index)
        profile = self.population.profiles[client_id]
        now = self.clock.now
        arrival = now + profile.compute.draw(rng) + profile.upload.draw(rng)
        job = InFlightJob(client_id, version, now, arrival, start_params, rng, job_index)
        self.queue.push(job)
        self.busy.add(client_id)
        self.dispatched += 1
        return job

    def request_dispatch(self, version: int, start_params: ParamVector,
                         rng: np.random.Generator) -> InFlightJob | None:
        """Dispatch to a random free active client, or queue the request."""
        candidates = self.free_active_clients()
        if not candidates:
            self.pending += 1
            return None
        pick = int(rng.choice(np.asarray(candidates)))
        return self.dispatch_to(pick, version, start_params)

    def retry_pending(self, version: int, start_params: ParamVector,
                      rng: np.random.Generator) -> list[InFlightJob]:
        jobs = []
        while self.pending > 0:
            candidates = self.free_active_clients()
            if not candidates:
                break
            pick = int(rng.choice(np.asarray(candidates)))
            jobs.append(self.dispatch_to(pick, version, start_params))
            self.pending -= 1
        return jobs

    def next_arrival(self) -> InFlightJob:
        """Pop the earliest arrival and advance the clock to it."""
        job = self.queue.pop()
        self.clock.advance_to(job.arrival_time)
        self.busy.discard(job.client_id)
        self.popped += 1
        return job

    def advance_to_next_activation(self) -> bool:
        """With an empty queue but pending work, jump to the next activation."""
        free = [cid for cid in range(self.population.num_clients) if cid not in self.busy]
        if not free:
            return False
        t = min(self.population.availability[cid].next_active_time(self.clock.now)
                for cid in free)
        if t < self.clock.now:
            return False
        self.clock.advance_to(t)
        return True

    @property
    def in_flight(self) -> int:
        return len(self.queue)
