"""Deterministic discrete-event simulation of agents exchanging models.

Each agent alternates between a gradient computation of random duration and an
instantaneous update. After every update it multicasts the new state to its
neighbors through a single outgoing port: transmissions leave one at a time in
ascending neighbor order, and receiving or computing is never blocked by
sending. Events are ordered by ``(time, seq)`` where ``seq`` is a global
counter, so a run is a pure function of its inputs and seed.
"""

from __future__ import annotations

import csv
import heapq
import io
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr, ndtri

COMPUTE_DONE = "compute_done"
SEND_START = "send_start"
ARRIVAL = "arrival"

UPDATE = "update"
SEND = "send"

PORT_POLICIES = ("coalesce", "queue")


class SimulationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# delay sampling


@dataclass(frozen=True)
class DelaySampler:
    """Log-normal delay truncated to ``[lo, hi]`` with mean exactly ``mean``.

    ``shape`` is the log-space standard deviation. The log-space location is
    solved so that the *truncated* distribution has the requested mean, and
    samples are drawn by inverting the truncated CDF (one uniform per draw).
    """

    mean: float
    lo: float
    hi: float
    shape: float = 0.25

    def __post_init__(self):
        if self.hi < self.lo:
            raise ValueError(f"delay support is empty: hi={self.hi} < lo={self.lo}")
        if self.lo < 0:
            raise ValueError("delays must be nonnegative")
        if not math.isfinite(self.hi):
            raise ValueError("delay support must be bounded")
        if self.is_constant:
            object.__setattr__(self, "_mu", None)
            return
        if not self.lo < self.mean < self.hi:
            raise ValueError(f"mean {self.mean} must lie strictly inside ({self.lo}, {self.hi})")
        object.__setattr__(self, "_mu", self._solve_location())

    @property
    def is_constant(self) -> bool:
        return self.lo == self.hi or self.shape == 0

    @property
    def constant_value(self) -> float:
        return self.lo if self.lo == self.hi else self.mean

    def _cdf_bounds(self, mu):
        a = -np.inf if self.lo == 0 else (math.log(self.lo) - mu) / self.shape
        b = (math.log(self.hi) - mu) / self.shape
        return a, b

    def truncated_mean(self, mu: float | None = None) -> float:
        """Mean of the truncated log-normal with log-location ``mu``."""
        if self.is_constant:
            return self.constant_value
        mu = self._mu if mu is None else mu
        s = self.shape
        a, b = self._cdf_bounds(mu)
        mass = ndtr(b) - ndtr(a)
        if mass <= 0:
            # all mass sits beyond one end of the support
            return self.lo if b <= 0 else self.hi
        return math.exp(mu + 0.5 * s * s) * (ndtr(b - s) - ndtr(a - s)) / mass

    def _solve_location(self) -> float:
        target = self.mean
        lo_mu = hi_mu = math.log(target)
        step = 1.0
        while self.truncated_mean(lo_mu) > target:
            lo_mu -= step
            step *= 2
        step = 1.0
        while self.truncated_mean(hi_mu) < target:
            hi_mu += step
            step *= 2
        if lo_mu == hi_mu:
            return lo_mu
        return brentq(lambda mu: self.truncated_mean(mu) - target, lo_mu, hi_mu,
                      xtol=1e-14, rtol=1e-14)

    def sample(self, rng: np.random.Generator) -> float:
        if self.is_constant:
            return float(self.constant_value)
        a, b = self._cdf_bounds(self._mu)
        u = rng.uniform(ndtr(a), ndtr(b))
        x = math.exp(self._mu + self.shape * float(ndtri(u)))
        return min(max(x, self.lo), self.hi)


def sample_delay(sampler: DelaySampler, rng: np.random.Generator) -> float:
    return sampler.sample(rng)


def constant_delay(value: float) -> DelaySampler:
    return DelaySampler(value, value, value)


def lognormal_delay(mean: float, shape: float, lo_factor: float, hi_factor: float) -> DelaySampler:
    if mean == 0:
        return constant_delay(0.0)
    return DelaySampler(mean, lo_factor * mean, hi_factor * mean, shape)


# compute delays are the tighter family; comm shape gives ~4x the variance
COMPUTE_SHAPE = 0.25
COMM_SHAPE = math.sqrt(math.log1p(4.0 * math.expm1(COMPUTE_SHAPE ** 2)))
COMPUTE_SUPPORT = (0.25, 4.0)
COMM_SUPPORT = (0.1, 10.0)


def compute_sampler(mean: float) -> DelaySampler:
    return lognormal_delay(mean, COMPUTE_SHAPE, *COMPUTE_SUPPORT)


def comm_sampler(mean: float) -> DelaySampler:
    return lognormal_delay(mean, COMM_SHAPE, *COMM_SUPPORT)


@dataclass
class DelayModel:
    """Per-agent compute samplers and per-directed-link transmit samplers.

    A transmit sample is the time the sender's port is occupied by that
    message; ``propagation`` is a constant added on top before arrival.
    """

    compute: list
    transmit: dict
    propagation: float = 0.0

    def __post_init__(self):
        if self.propagation < 0:
            raise ValueError("propagation delay must be nonnegative")

    @property
    def n(self) -> int:
        return len(self.compute)

    @classmethod
    def uniform(cls, topology, compute: DelaySampler, transmit: DelaySampler,
                propagation: float = 0.0) -> "DelayModel":
        links = {}
        for i, j in topology.edges:
            links[(i, j)] = transmit
            links[(j, i)] = transmit
        return cls([compute] * topology.n, links, propagation)

    def compute_means(self) -> list:
        return [s.mean if not s.is_constant else s.constant_value for s in self.compute]

    def transmit_means(self) -> dict:
        return {k: (s.mean if not s.is_constant else s.constant_value)
                for k, s in self.transmit.items()}


# ---------------------------------------------------------------------------
# event queue


@dataclass(frozen=True)
class SimEvent:
    time: float
    seq: int
    kind: str
    agent: int = -1
    src: int = -1
    dst: int = -1
    version: int = -1
    payload: object = None


class EventQueue:
    """Min-queue keyed on ``(time, seq)``; ``seq`` is assigned on scheduling."""

    def __init__(self):
        self._heap = []
        self._seq = 0
        self.now = 0.0

    def __len__(self):
        return len(self._heap)

    def schedule(self, time: float, kind: str, **fields) -> SimEvent:
        if time < self.now:
            raise SimulationError(f"cannot schedule {kind} at t={time} before now={self.now}")
        event = SimEvent(float(time), self._seq, kind, **fields)
        self._seq += 1
        heapq.heappush(self._heap, (event.time, event.seq, event))
        return event

    def peek_time(self) -> float | None:
        return self._heap[0][0] if self._heap else None

    def next_event(self) -> SimEvent | None:
        """Pop the earliest event, or ``None`` once the queue is exhausted."""
        if not self._heap:
            return None
        _, _, event = heapq.heappop(self._heap)
        self.now = event.time
        return event


# ---------------------------------------------------------------------------
# traces


@dataclass
class TraceRecord:
    time: float
    seq: int
    kind: str
    agent: int
    src: int = -1
    dst: int = -1
    version: int = -1
    payload: object = None
    value: object = None
    held_start: dict | None = None
    held_commit: dict | None = None


CSV_FIELDS = ("time", "seq", "kind", "agent", "src", "dst", "version")


@dataclass
class EventTrace:
    """Committed events in processing order plus what is needed to audit them.

    ``initial_values[i]`` is agent ``i``'s model before its first update;
    update records optionally carry the committed model in ``value`` and the
    neighbor versions held at computation start and at commit.
    """

    n: int
    neighbors: tuple
    records: list = field(default_factory=list)
    initial_values: list | None = None
    meta: dict = field(default_factory=dict)

    def updates(self) -> list:
        return [r for r in self.records if r.kind == UPDATE]

    def sorted_records(self) -> list:
        return sorted(self.records, key=lambda r: (r.time, r.seq))

    def to_csv(self, target=None) -> str:
        """Write ``time,seq,kind,agent,src,dst,version`` rows; payloads are dropped."""
        buf = io.StringIO()
        for key, value in sorted(self.meta.items()):
            buf.write(f"# {key}={value}\n")
        buf.write(f"# n={self.n}\n")
        buf.write("# neighbors=" + ";".join(" ".join(map(str, nb)) for nb in self.neighbors) + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for r in self.records:
            writer.writerow([repr(float(r.time)), r.seq, r.kind, r.agent, r.src, r.dst, r.version])
        text = buf.getvalue()
        if target is not None:
            Path(target).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source) -> "EventTrace":
        text = Path(source).read_text() if not isinstance(source, str) or "\n" not in source else source
        meta, n, neighbors, rows = {}, None, None, []
        lines = text.splitlines()
        body = []
        for line in lines:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                if key == "n":
                    n = int(value)
                elif key == "neighbors":
                    neighbors = tuple(tuple(int(v) for v in part.split()) for part in value.split(";"))
                else:
                    meta[key] = value
            else:
                body.append(line)
        reader = csv.DictReader(body)
        if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_FIELDS:
            raise ValueError("trace CSV header does not match " + ",".join(CSV_FIELDS))
        for row in reader:
            rows.append(TraceRecord(float(row["time"]), int(row["seq"]), row["kind"],
                                    int(row["agent"]), int(row["src"]), int(row["dst"]),
                                    int(row["version"])))
        if n is None or neighbors is None:
            raise ValueError("trace CSV lacks the n/neighbors header")
        if n == 1 and neighbors == ((),):
            neighbors = ((),)
        return cls(n, neighbors, rows, None, meta)


# ---------------------------------------------------------------------------
# simulator


class Simulator:
    """Event loop driving a protocol over a topology with a delay model.

    The protocol object must provide ``n``, ``initial_payload(i)``,
    ``begin_compute(i)``, ``commit(i) -> (message, value)``,
    ``receive(dst, src, version, message)`` and ``coalesce(old, new)``.

    Parameters
    ----------
    port_policy : {"coalesce", "queue"}
        With ``"queue"`` every message waits on the sender's port. With
        ``"coalesce"`` a message still waiting for the port is merged with a
        newer one to the same neighbor (``protocol.coalesce``), which keeps
        the port backlog bounded by the degree.
    record : {"full", "light", "none"}
        ``"full"`` keeps payloads and committed values (needed for the
        staleness-error audit), ``"light"`` keeps only event metadata.
    """

    def __init__(self, topology, delays: DelayModel, protocol, seed: int = 0,
                 port_policy: str = "coalesce", record: str = "full"):
        if delays.n != topology.n or protocol.n != topology.n:
            raise ValueError("topology, delays and protocol disagree on the number of agents")
        if port_policy not in PORT_POLICIES:
            raise ValueError(f"port_policy must be one of {PORT_POLICIES}")
        if record not in ("full", "light", "none"):
            raise ValueError("record must be 'full', 'light' or 'none'")
        for i, j in topology.edges:
            if (i, j) not in delays.transmit or (j, i) not in delays.transmit:
                raise ValueError(f"no transmit sampler for link {i}-{j}")
        self.topology = topology
        self.delays = delays
        self.protocol = protocol
        self.port_policy = port_policy
        self.record = record
        self.rng = np.random.default_rng(seed)
        self.queue = EventQueue()
        n = topology.n
        self.versions = [0] * n
        self.held = [{j: 0 for j in topology.neighbors(i)} for i in range(n)]
        self._held_start = [dict(h) for h in self.held]
        self._pending = [deque() for _ in range(n)]
        self._port_busy = [False] * n
        self._port_free_at = [0.0] * n
        self._last_arrival = {}
        self.update_count = 0
        self.trace = None
        if record != "none":
            initial = None
            if record == "full":
                initial = [np.array(protocol.value(i), copy=True) for i in range(n)]
            self.trace = EventTrace(n, tuple(topology.neighbors(i) for i in range(n)),
                                    [], initial)
        self._started = False

    @property
    def now(self) -> float:
        return self.queue.now

    def _log(self, event: SimEvent, kind: str, **extra):
        if self.trace is None:
            return
        payload = event.payload if self.record == "full" else None
        self.trace.records.append(TraceRecord(event.time, event.seq, kind, event.agent,
                                              event.src, event.dst, event.version,
                                              payload=payload, **extra))

    def multicast(self, agent: int, version: int, payload) -> None:
        """Queue ``payload`` for every neighbor (ascending id) on ``agent``'s port."""
        pending = self._pending[agent]
        for dst in self.topology.neighbors(agent):
            if self.port_policy == "coalesce":
                for slot, (d, _, old) in enumerate(pending):
                    if d == dst:
                        pending[slot] = (dst, version, self.protocol.coalesce(old, payload))
                        break
                else:
                    pending.append((dst, version, payload))
            else:
                pending.append((dst, version, payload))
        if pending and not self._port_busy[agent]:
            self._port_busy[agent] = True
            start = max(self.now, self._port_free_at[agent])
            self.queue.schedule(start, SEND_START, agent=agent)

    def _begin_compute(self, agent: int) -> None:
        self._held_start[agent] = dict(self.held[agent])
        self.protocol.begin_compute(agent)
        delay = self.delays.compute[agent].sample(self.rng)
        self.queue.schedule(self.now + delay, COMPUTE_DONE, agent=agent)

    def _start(self):
        for i in range(self.topology.n):
            self.multicast(i, 0, self.protocol.initial_payload(i))
            self._begin_compute(i)
        self._started = True

    def _on_compute_done(self, event: SimEvent) -> None:
        i = event.agent
        held_commit = dict(self.held[i])
        message, value = self.protocol.commit(i)
        self.versions[i] += 1
        version = self.versions[i]
        if self.trace is not None:
            self.trace.records.append(TraceRecord(
                event.time, event.seq, UPDATE, i, version=version,
                value=np.array(value, copy=True) if self.record == "full" else None,
                held_start=self._held_start[i], held_commit=held_commit))
        self.update_count += 1
        self.multicast(i, version, message)
        self._begin_compute(i)

    def _on_send_start(self, event: SimEvent) -> None:
        i = event.agent
        dst, version, payload = self._pending[i].popleft()
        occupancy = self.delays.transmit[(i, dst)].sample(self.rng)
        done = event.time + occupancy
        arrival = max(done + self.delays.propagation, self._last_arrival.get((i, dst), 0.0))
        self._last_arrival[(i, dst)] = arrival
        self.queue.schedule(arrival, ARRIVAL, agent=dst, src=i, dst=dst,
                            version=version, payload=payload)
        if self.trace is not None:
            self.trace.records.append(TraceRecord(event.time, event.seq, SEND, i, i, dst, version))
        self._port_free_at[i] = done
        if self._pending[i]:
            self.queue.schedule(done, SEND_START, agent=i)
        else:
            self._port_busy[i] = False

    def _on_arrival(self, event: SimEvent) -> None:
        self.held[event.dst][event.src] = event.version
        self.protocol.receive(event.dst, event.src, event.version, event.payload)
        self._log(event, ARRIVAL)

    def run(self, max_time: float | None = None, max_updates: int | None = None,
            observer=None) -> EventTrace | None:
        """Process events until the time or update budget is spent.

        ``observer(sim, agent)`` is called after every committed update; a
        truthy return value stops the run early.
        """
        if max_time is None and max_updates is None:
            raise ValueError("set max_time or max_updates")
        if not self._started:
            self._start()
        handlers = {COMPUTE_DONE: self._on_compute_done,
                    SEND_START: self._on_send_start,
                    ARRIVAL: self._on_arrival}
        while True:
            if max_updates is not None and self.update_count >= max_updates:
                break
            t = self.queue.peek_time()
            if t is None or (max_time is not None and t > max_time):
                break
            event = self.queue.next_event()
            handlers[event.kind](event)
            if event.kind == COMPUTE_DONE and observer is not None:
                if observer(self, event.agent):
                    break
        if self.trace is not None:
            self.trace.meta.setdefault("port_policy", self.port_policy)
        return self.trace


# ---------------------------------------------------------------------------
# round timing for the synchronous baselines


def sync_round_duration(delays: DelayModel, topology, rng: np.random.Generator) -> tuple:
    """Barrier round: slowest computation plus the slowest serial multicast.

    Returns ``(duration, compute_samples)``.
    """
    compute = [s.sample(rng) for s in delays.compute]
    exchange = 0.0
    for i in range(topology.n):
        serial = sum(delays.transmit[(i, j)].sample(rng) for j in topology.neighbors(i))
        exchange = max(exchange, serial)
    return max(compute) + exchange + (delays.propagation if topology.edges else 0.0), compute


def allreduce_round_duration(delays: DelayModel, rng: np.random.Generator) -> tuple:
    """Barrier on computation, then ``2(n-1)`` ring phases moving ``1/n`` of the model.

    Each phase lasts as long as its slowest ring link. The ring follows agent
    id order and uses the transmit sampler of link ``(i, i+1 mod n)`` when the
    topology has one, otherwise the first sampler of agent ``i``.
    """
    n = delays.n
    compute = [s.sample(rng) for s in delays.compute]
    if n == 1:
        return max(compute), compute
    ring = []
    for i in range(n):
        key = (i, (i + 1) % n)
        if key not in delays.transmit:
            key = min(k for k in delays.transmit if k[0] == i)
        ring.append(delays.transmit[key])
    comm = 0.0
    for _ in range(2 * (n - 1)):
        comm += max(s.sample(rng) for s in ring) / n + delays.propagation
    return max(compute) + comm, compute


def replay_trace(trace: EventTrace, protocol) -> list:
    """Drive ``protocol`` through the updates and arrivals of a recorded trace.

    Payloads are regenerated from the protocol's own commits: an arrival of
    version ``v`` on link ``src -> dst`` delivers the messages of versions
    after the last one delivered on that link, folded with
    ``protocol.coalesce``. This reproduces both port policies. Returns the
    committed values in update order.
    """
    n = trace.n
    if protocol.n != n:
        raise ValueError("protocol and trace disagree on the number of agents")
    messages = [[protocol.initial_payload(i)] for i in range(n)]
    delivered = {}
    for i in range(n):
        protocol.begin_compute(i)
    values = []
    for r in trace.sorted_records():
        if r.kind == UPDATE:
            message, value = protocol.commit(r.agent)
            messages[r.agent].append(message)
            if len(messages[r.agent]) - 1 != r.version:
                raise SimulationError(f"update of agent {r.agent} out of version order")
            values.append(np.array(value, copy=True))
            protocol.begin_compute(r.agent)
        elif r.kind == ARRIVAL:
            last = delivered.get((r.src, r.dst), -1)
            if r.version <= last or r.version >= len(messages[r.src]):
                raise SimulationError(f"arrival of version {r.version} on {r.src}->{r.dst} "
                                      "is not consistent with the trace")
            payload = messages[r.src][last + 1]
            for m in messages[r.src][last + 2:r.version + 1]:
                payload = protocol.coalesce(payload, m)
            delivered[(r.src, r.dst)] = r.version
            protocol.receive(r.dst, r.src, r.version, payload)
    return values
