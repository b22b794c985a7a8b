"""Optimizer state machines driven by the event engine, plus synchronous baselines.

The asynchronous protocols (ADSGD and its variants, ASBCD) plug into
:class:`adsgd_lab.engine.Simulator`. The synchronous baselines run their own
round loop with barrier timing taken from the same delay model.

All update rules accept ``numpy`` arrays of any numeric dtype, including
``object`` arrays of :class:`fractions.Fraction` for exact-arithmetic checks.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .engine import DelayModel, allreduce_round_duration, sync_round_duration
from .graph import MixingMatrix, double_step_transform

DIVERGENCE_NORM = 1e12


class DivergenceError(ArithmeticError):
    """Raised when an iterate becomes non-finite or explodes in norm."""

    def __init__(self, agent, step, norm, message=""):
        self.agent, self.step, self.norm = agent, step, norm
        super().__init__(message or f"agent {agent} diverged (step size {step}, iterate norm {norm:.3g})")


class AlgorithmKind(str, enum.Enum):
    ASBCD = "asbcd"
    ADSGD = "adsgd"
    ADSGD_MEMEFF = "adsgd_memeff"
    ADSGD_DOUBLESTEP = "adsgd_doublestep"
    SYNC_DSGD = "sync_dsgd"
    PARALLEL_SGD = "parallel_sgd"

    @property
    def asynchronous(self) -> bool:
        return self not in (AlgorithmKind.SYNC_DSGD, AlgorithmKind.PARALLEL_SGD)


def _check_finite(x, agent, step):
    if x.dtype == object:
        return
    norm = float(np.linalg.norm(x))
    if not np.isfinite(norm) or norm > DIVERGENCE_NORM:
        raise DivergenceError(agent, step, norm)


def agent_streams(seed: int, n: int) -> list:
    """Independent gradient-noise generators, one per agent."""
    children = np.random.SeedSequence([int(seed), 0x5EED]).spawn(n)
    return [np.random.default_rng(c) for c in children]


# ---------------------------------------------------------------------------
# update rules


@dataclass
class AgentState:
    """Local model, neighbor buffer and pending gradient of one agent."""

    agent: int
    x: np.ndarray
    buffer: dict
    alpha: float
    beta: float | None = None
    pending_gradient: np.ndarray | None = None
    update_count: int = 0


def mix_row(agent, w_row, x_self, buffer) -> np.ndarray:
    """``w_ii x_i + sum_j w_ij x_ij``, self first then neighbors in ascending id."""
    out = w_row[agent] * x_self
    for j in sorted(buffer):
        out = out + w_row[j] * buffer[j]
    return out


def adsgd_update(state: AgentState, w_row, gradient, step=None) -> np.ndarray:
    """``w_ii x_i + sum_j w_ij x_ij - alpha * g``."""
    step = state.alpha if step is None else step
    new = mix_row(state.agent, w_row, state.x, state.buffer) - step * gradient
    _check_finite(new, state.agent, step)
    return new


def double_step_update(state: AgentState, w_tilde_row, gradient) -> np.ndarray:
    """``[W~ x]_i - beta * g`` with ``W~`` from :func:`double_step_transform`."""
    if state.beta is None:
        raise ValueError("double-step update needs beta")
    return adsgd_update(state, w_tilde_row, gradient, step=state.beta)


def double_step_direct(state: AgentState, w_row, gradient) -> np.ndarray:
    """Same update written as ``(1 - beta/alpha) x_i + (beta/alpha) [W x]_i - beta g``."""
    ratio = state.beta / state.alpha
    mixed = mix_row(state.agent, w_row, state.x, state.buffer)
    return (1 - ratio) * state.x + ratio * mixed - state.beta * gradient


@dataclass
class MemEffState:
    agent: int
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    alpha: float
    pending_gradient: np.ndarray | None = None


def memeff_update(state: MemEffState, w_ii, gradient) -> tuple:
    """Returns ``(z_i, x_i + z_i)`` with ``z_i = (w_ii - 1) x_i + y_i - alpha g``."""
    z = (w_ii - 1) * state.x + state.y - state.alpha * gradient
    new = state.x + z
    _check_finite(new, state.agent, state.alpha)
    return z, new


def asbcd_update(x_block, gradient_at_snapshot, alpha, agent=-1) -> np.ndarray:
    new = x_block - alpha * gradient_at_snapshot
    _check_finite(new, agent, alpha)
    return new


# ---------------------------------------------------------------------------
# asynchronous protocols


def _initial_models(n, x0):
    if isinstance(x0, (list, tuple)):
        if len(x0) != n:
            raise ValueError("need one initial model per agent")
        return [np.array(v, copy=True) for v in x0]
    return [np.array(x0, copy=True) for _ in range(n)]


class ADSGD:
    """Asynchronous decentralized SGD.

    On ``begin_compute`` the agent draws a stochastic gradient at its own
    current model; on ``commit`` it mixes that model with the latest buffered
    neighbor models and takes the gradient step.
    """

    kind = AlgorithmKind.ADSGD

    def __init__(self, problems, mixing, alpha, x0, topology, seed=0):
        self.problems = list(problems)
        self.n = len(self.problems)
        self.w = mixing.w if isinstance(mixing, MixingMatrix) else np.asarray(mixing)
        self.alpha = alpha
        self.topology = topology
        self.rngs = agent_streams(seed, self.n)
        models = _initial_models(self.n, x0)
        self.states = [AgentState(i, models[i],
                                  {j: models[j] for j in topology.neighbors(i)}, alpha)
                       for i in range(self.n)]

    def value(self, i):
        return self.states[i].x

    def models(self) -> list:
        return [s.x for s in self.states]

    def initial_payload(self, i):
        return self.states[i].x

    def begin_compute(self, i):
        s = self.states[i]
        s.pending_gradient = self.problems[i].stochastic_gradient(s.x, self.rngs[i])

    def _step(self, s):
        return adsgd_update(s, self.w[s.agent], s.pending_gradient)

    def commit(self, i):
        s = self.states[i]
        s.x = self._step(s)
        s.pending_gradient = None
        s.update_count += 1
        return s.x, s.x

    def receive(self, dst, src, version, payload):
        self.states[dst].buffer[src] = payload

    @staticmethod
    def coalesce(old, new):
        return new


class DoubleStepADSGD(ADSGD):
    """ADSGD with the extra step size ``beta``: mixing by ``W~`` and step ``beta``."""

    kind = AlgorithmKind.ADSGD_DOUBLESTEP

    def __init__(self, problems, mixing, alpha, beta, x0, topology, seed=0):
        if not isinstance(mixing, MixingMatrix):
            raise TypeError("double-step ADSGD needs a MixingMatrix")
        super().__init__(problems, mixing, alpha, x0, topology, seed)
        self.beta = beta
        self.w_tilde = double_step_transform(mixing, alpha, beta).w
        for s in self.states:
            s.beta = beta

    def _step(self, s):
        return double_step_update(s, self.w_tilde[s.agent], s.pending_gradient)


class MemEffADSGD:
    """ADSGD storing only ``y_i = sum_j w_ij x_j`` and exchanging model deltas."""

    kind = AlgorithmKind.ADSGD_MEMEFF

    def __init__(self, problems, mixing, alpha, x0, topology, seed=0):
        self.problems = list(problems)
        self.n = len(self.problems)
        self.w = mixing.w if isinstance(mixing, MixingMatrix) else np.asarray(mixing)
        self.alpha = alpha
        self.topology = topology
        self.rngs = agent_streams(seed, self.n)
        models = _initial_models(self.n, x0)
        self.states = []
        for i in range(self.n):
            y = 0 * models[i]
            for j in topology.neighbors(i):
                y = y + self.w[i, j] * models[j]
            self.states.append(MemEffState(i, models[i], y, 0 * models[i], alpha))

    def value(self, i):
        return self.states[i].x

    def models(self) -> list:
        return [s.x for s in self.states]

    def initial_payload(self, i):
        # the initial share is already folded into every neighbor's y
        return 0 * self.states[i].x

    def begin_compute(self, i):
        s = self.states[i]
        s.pending_gradient = self.problems[i].stochastic_gradient(s.x, self.rngs[i])

    def commit(self, i):
        s = self.states[i]
        z, new = memeff_update(s, self.w[i, i], s.pending_gradient)
        s.z, s.x = z, new
        s.pending_gradient = None
        return z, new

    def receive(self, dst, src, version, payload):
        if version == 0:
            return
        s = self.states[dst]
        s.y = s.y + self.w[dst, src] * payload

    @staticmethod
    def coalesce(old, new):
        return old + new


class ASBCD:
    """Asynchronous stochastic block coordinate descent on a :class:`BlockProblem`.

    ``snapshot="start"`` reads the buffered blocks when the gradient
    computation begins (the block-coordinate ordering); ``snapshot="commit"``
    reads them when it finishes, which is the ordering under which the
    method coincides with ADSGD on the penalized objective.
    """

    kind = AlgorithmKind.ASBCD

    def __init__(self, problem, alpha, x0, topology, seed=0, snapshot="start"):
        if snapshot not in ("start", "commit"):
            raise ValueError("snapshot must be 'start' or 'commit'")
        self.problem = problem
        self.n = problem.n_blocks
        if topology.n != self.n:
            raise ValueError("topology size must equal the number of blocks")
        for i in range(self.n):
            missing = set(problem.reads(i)) - set(topology.neighbors(i)) - {i}
            if missing:
                raise ValueError(f"block {i} reads blocks {sorted(missing)} it cannot receive")
        self.alpha = alpha
        self.topology = topology
        self.snapshot = snapshot
        self.rngs = agent_streams(seed, self.n)
        blocks = x0 if isinstance(x0, (list, tuple)) else problem.split(x0)
        blocks = [np.array(b, copy=True) for b in blocks]
        self.states = [AgentState(i, blocks[i],
                                  {j: blocks[j] for j in topology.neighbors(i)}, alpha)
                       for i in range(self.n)]

    def value(self, i):
        return self.states[i].x

    def models(self) -> list:
        return [s.x for s in self.states]

    def initial_payload(self, i):
        return self.states[i].x

    def _view(self, i):
        s = self.states[i]
        view = [None] * self.n
        view[i] = s.x
        for j, v in s.buffer.items():
            view[j] = v
        return view

    def _gradient(self, i):
        return self.problem.block_stochastic_gradient(i, self._view(i), self.rngs[i])

    def begin_compute(self, i):
        if self.snapshot == "start":
            self.states[i].pending_gradient = self._gradient(i)

    def commit(self, i):
        s = self.states[i]
        g = s.pending_gradient if self.snapshot == "start" else self._gradient(i)
        s.x = asbcd_update(s.x, g, self.alpha, agent=i)
        s.pending_gradient = None
        s.update_count += 1
        return s.x, s.x

    def receive(self, dst, src, version, payload):
        self.states[dst].buffer[src] = payload

    @staticmethod
    def coalesce(old, new):
        return new


def make_protocol(kind, problems, mixing, alpha, x0, topology, seed=0, beta=None):
    kind = AlgorithmKind(kind)
    if kind is AlgorithmKind.ADSGD:
        return ADSGD(problems, mixing, alpha, x0, topology, seed)
    if kind is AlgorithmKind.ADSGD_MEMEFF:
        return MemEffADSGD(problems, mixing, alpha, x0, topology, seed)
    if kind is AlgorithmKind.ADSGD_DOUBLESTEP:
        if beta is None:
            raise ValueError("double-step ADSGD needs beta")
        return DoubleStepADSGD(problems, mixing, alpha, beta, x0, topology, seed)
    if kind is AlgorithmKind.ASBCD:
        from .problems import PenalizedProblem
        w = mixing.w if isinstance(mixing, MixingMatrix) else mixing
        lam = mixing.lambda_min if isinstance(mixing, MixingMatrix) else None
        penalized = PenalizedProblem(problems, w, alpha, lambda_min=lam)
        blocks = _initial_models(len(problems), x0)
        return ASBCD(penalized, alpha, blocks, topology, seed, snapshot="start")
    raise ValueError(f"{kind.value} is not an event-driven protocol")


# ---------------------------------------------------------------------------
# synchronous baselines


def sync_dsgd_round(states, w, gradients, alpha) -> list:
    """All agents at once: ``x_i <- sum_j w_ij x_j - alpha g_i``."""
    n = len(states)
    out = []
    for i in range(n):
        nbrs = {j: states[j] for j in range(n) if j != i and w[i][j] != 0}
        new = mix_row(i, w[i], states[i], nbrs) - alpha * gradients[i]
        _check_finite(new, i, alpha)
        out.append(new)
    return out


def ring_allreduce(vectors) -> list:
    """Chunked ring all-reduce (reduce-scatter then all-gather) in agent id order.

    Returns one summed vector per agent; the copies are bitwise identical.
    """
    n = len(vectors)
    bufs = [np.array(v, copy=True) for v in vectors]
    if n == 1:
        return bufs
    chunks = np.array_split(np.arange(bufs[0].shape[0]), n)
    for step in range(n - 1):
        sent = [bufs[i][chunks[(i - step) % n]].copy() for i in range(n)]
        for i in range(n):
            c = chunks[(i - step) % n]
            bufs[(i + 1) % n][c] = bufs[(i + 1) % n][c] + sent[i]
    for step in range(n - 1):
        sent = [bufs[i][chunks[(i + 1 - step) % n]].copy() for i in range(n)]
        for i in range(n):
            bufs[(i + 1) % n][chunks[(i + 1 - step) % n]] = sent[i]
    return bufs


def ring_allreduce_round(states, gradients, alpha) -> list:
    """Every replica applies ``x - (alpha/n) sum_i g_i`` using the all-reduced sum."""
    n = len(states)
    sums = ring_allreduce(gradients)
    out = [states[i] - (alpha / n) * sums[i] for i in range(n)]
    for i, x in enumerate(out):
        _check_finite(x, i, alpha)
    return out


@dataclass
class RoundRecord:
    round: int
    time: float
    duration: float
    compute: list = field(default_factory=list)


class SyncRunner:
    """Round-based driver for synchronous DSGD and ring all-reduce parallel SGD.

    ``observer(runner)`` is called after each round; a truthy return stops.
    """

    def __init__(self, kind, problems, mixing, alpha, x0, topology, delays: DelayModel, seed=0):
        self.kind = AlgorithmKind(kind)
        if self.kind.asynchronous:
            raise ValueError(f"{self.kind.value} is not a synchronous baseline")
        self.problems = list(problems)
        self.n = len(self.problems)
        self.w = mixing.w if isinstance(mixing, MixingMatrix) else np.asarray(mixing)
        self.alpha = alpha
        self.topology = topology
        self.delays = delays
        self.rngs = agent_streams(seed, self.n)
        self.delay_rng = np.random.default_rng(seed)
        models = _initial_models(self.n, x0)
        if self.kind is AlgorithmKind.PARALLEL_SGD:
            models = [np.array(models[0], copy=True) for _ in range(self.n)]
        self.states = models
        self.now = 0.0
        self.rounds = []
        self.update_count = 0

    def models(self) -> list:
        return self.states

    def value(self, i):
        return self.states[i]

    def step(self):
        grads = [p.stochastic_gradient(x, r) for p, x, r in zip(self.problems, self.states, self.rngs)]
        if self.kind is AlgorithmKind.SYNC_DSGD:
            duration, compute = sync_round_duration(self.delays, self.topology, self.delay_rng)
            self.states = sync_dsgd_round(self.states, self.w, grads, self.alpha)
        else:
            duration, compute = allreduce_round_duration(self.delays, self.delay_rng)
            self.states = ring_allreduce_round(self.states, grads, self.alpha)
        self.now += duration
        self.update_count += self.n
        self.rounds.append(RoundRecord(len(self.rounds), self.now, duration, compute))

    def run(self, max_time=None, max_rounds=None, observer=None):
        if max_time is None and max_rounds is None:
            raise ValueError("set max_time or max_rounds")
        while True:
            if max_rounds is not None and len(self.rounds) >= max_rounds:
                break
            if max_time is not None and self.now >= max_time:
                break
            self.step()
            if observer is not None and observer(self):
                break
        return self.rounds
