"""Quantities reported during a run: loss and gradient at the network mean,
consensus error, time to a target loss, and speedup tables."""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

METRICS_FIELDS = ("sim_time", "k", "loss_mean", "consensus_err", "grad_norm_sq",
                  "seed", "algorithm", "case")


@dataclass(frozen=True)
class MetricSample:
    sim_time: float
    k: int
    loss_at_mean: float
    consensus_error: float
    grad_norm_sq: float


def _stack(states) -> np.ndarray:
    states = list(states)
    if not states:
        raise ValueError("need at least one agent model")
    shapes = {np.shape(x) for x in states}
    if len(shapes) != 1:
        raise ValueError(f"agent models have mismatched shapes {sorted(shapes)}")
    return np.stack([np.asarray(x, dtype=float) for x in states])


def average_model(states) -> np.ndarray:
    """Arithmetic mean of the agent models."""
    return _stack(states).mean(axis=0)


def consensus_error(states) -> float:
    """``sum_i ||x_i - x_bar||^2``."""
    X = _stack(states)
    if np.all(X == X[0]):
        return 0.0  # the rounded mean of equal rows need not equal the row
    return float(np.sum((X - X.mean(axis=0)) ** 2))


def evaluate(problems, states, sim_time: float = 0.0, k: int = 0) -> MetricSample:
    """Metrics of the *global* objective ``sum_i f_i`` at the network mean.

    The sum is unweighted, so agents that update more often do not count more.
    """
    x_bar = average_model(states)
    loss = float(sum(p.loss(x_bar) for p in problems))
    grad = sum(p.full_gradient(x_bar) for p in problems)
    return MetricSample(float(sim_time), int(k), loss, consensus_error(states),
                        float(np.dot(grad, grad)))


def running_grad_metric(samples) -> float:
    """Mean of ``||grad f(x_bar^k)||^2`` over the samples (floats or MetricSample)."""
    values = [s.grad_norm_sq if isinstance(s, MetricSample) else float(s) for s in samples]
    if not values:
        raise ValueError("need at least one sample")
    return float(np.mean(values))


def running_mean(values) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return np.cumsum(values) / np.arange(1, len(values) + 1)


def seed_average(per_seed) -> np.ndarray:
    """Average aligned per-seed series (rows of equal length) into one series."""
    arr = np.asarray([np.asarray(s, dtype=float) for s in per_seed])
    if arr.ndim != 2:
        raise ValueError("per-seed series must have equal length")
    return arr.mean(axis=0)


def time_to_target(series, target_loss: float):
    """First sample time with loss at or below ``target_loss``, else ``None``.

    ``series`` holds :class:`MetricSample` objects or ``(time, loss)`` pairs in
    nondecreasing time order. No interpolation between samples.
    """
    last = -math.inf
    for item in series:
        t, loss = ((item.sim_time, item.loss_at_mean) if isinstance(item, MetricSample)
                   else (float(item[0]), float(item[1])))
        if t < last:
            raise ValueError("time series is not ordered")
        last = t
        if loss <= target_loss:
            return t
    return None


def speedup(times: dict) -> dict:
    """``time(n_min) / time(n)`` per agent count; ``None`` where unavailable."""
    if not times:
        raise ValueError("empty timing table")
    base_n = min(times)
    base = times[base_n]
    out = {}
    for n, t in sorted(times.items()):
        if base is None or t is None or t <= 0:
            out[n] = None
        else:
            out[n] = base / t
    return out


def state_digest(states) -> str:
    h = hashlib.sha256()
    for x in states:
        h.update(np.ascontiguousarray(np.asarray(x, dtype=float)).tobytes())
    return h.hexdigest()


class MetricRecorder:
    """Observer that samples metrics every ``stride`` committed updates.

    Works with :class:`adsgd_lab.engine.Simulator` (called as
    ``recorder(sim, agent)``) and with the synchronous runner (called as
    ``recorder(runner)``). It reads models through ``protocol.models()`` and
    never writes to them. With ``target_loss`` set, the run stops once the
    sampled loss reaches it.
    """

    def __init__(self, problems, stride: int = 1, target_loss: float | None = None,
                 record_initial: bool = True, extra=None):
        if stride < 1:
            raise ValueError("metric stride must be >= 1")
        self.problems = list(problems)
        self.stride = stride
        self.target_loss = target_loss
        self.samples: list[MetricSample] = []
        self.extra = extra
        self._next = 0 if record_initial else stride

    def sample(self, models, now, k) -> MetricSample:
        s = evaluate(self.problems, models, now, k)
        self.samples.append(s)
        return s

    def record_initial(self, models):
        if self._next == 0:
            self.sample(models, 0.0, 0)
            self._next = self.stride

    def __call__(self, driver, agent=None) -> bool:
        protocol = getattr(driver, "protocol", driver)
        k = driver.update_count
        if k < self._next:
            return False
        while self._next <= k:
            self._next += self.stride
        s = self.sample(protocol.models(), driver.now, k)
        return self.target_loss is not None and s.loss_at_mean <= self.target_loss


def metrics_to_csv(samples, seed, algorithm, case, target=None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_FIELDS)
    for s in samples:
        writer.writerow([repr(s.sim_time), s.k, repr(s.loss_at_mean), repr(s.consensus_error),
                         repr(s.grad_norm_sq), seed, algorithm, case])
    text = buf.getvalue()
    if target is not None:
        Path(target).write_text(text)
    return text


def read_metrics_csv(source) -> list:
    """Rows of a metrics CSV as dicts with numeric fields converted; ``#`` lines skipped."""
    text = Path(source).read_text()
    body = [line for line in text.splitlines() if not line.startswith("#")]
    rows = []
    for row in csv.DictReader(body):
        rows.append({"sim_time": float(row["sim_time"]), "k": int(row["k"]),
                     "loss_mean": float(row["loss_mean"]),
                     "consensus_err": float(row["consensus_err"]),
                     "grad_norm_sq": float(row["grad_norm_sq"]),
                     "seed": int(row["seed"]), "algorithm": row["algorithm"],
                     "case": row["case"]})
    return rows
