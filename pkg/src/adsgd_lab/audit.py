"""Trace audits: virtual iteration indices, staleness, delay bounds, and the
convergence-bound expressions they feed.

Staleness follows two conventions. Under the ``"asbcd"`` convention the
neighbor versions that matter are those held when the gradient computation
*started*; under ``"adsgd"`` they are those held when the update is
*committed*. In both, the staleness index of a held version of agent ``j`` at
update ``k`` is ``min(k, index of j's next update after that version)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .engine import ARRIVAL, UPDATE, EventTrace

SEMANTICS = ("asbcd", "adsgd")


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class VirtualIndex:
    k: int
    agent: int
    time: float
    seq: int


@dataclass(frozen=True)
class StalenessRecord:
    k: int
    i: int
    j: int
    s_asbcd: int
    s_adsgd: int


@dataclass(frozen=True)
class DelayBounds:
    B_measured: int
    D_asbcd: int
    D_adsgd: int

    def D(self, semantics: str) -> int:
        return self.D_asbcd if semantics == "asbcd" else self.D_adsgd


def reconstruct_virtual_index(trace) -> list[VirtualIndex]:
    """Number committed updates ``0, 1, 2, ...`` in ``(time, seq)`` order."""
    records = trace.records if isinstance(trace, EventTrace) else list(trace)
    updates = [r for r in records if r.kind == UPDATE]
    keys = [(r.time, r.seq) for r in updates]
    if len(set(r.seq for r in updates)) != len(updates):
        raise TraceError("duplicate sequence numbers in trace")
    if any(not math.isfinite(t) or t < 0 for t, _ in keys):
        raise TraceError("update with invalid timestamp")
    updates.sort(key=lambda r: (r.time, r.seq))
    return [VirtualIndex(k, r.agent, r.time, r.seq) for k, r in enumerate(updates)]


class TraceIndex:
    """Precomputed view of a trace for staleness queries.

    Held neighbor versions are rebuilt from arrival records: the commit view of
    an update is everything that arrived before it; the start view is what
    had arrived right after the agent's previous update (or nothing, at
    time zero).
    """

    def __init__(self, trace: EventTrace):
        self.trace = trace
        self.n = trace.n
        self.neighbors = trace.neighbors
        ordered = sorted(trace.records, key=lambda r: (r.time, r.seq))
        held = [{j: 0 for j in trace.neighbors[i]} for i in range(self.n)]
        start_view = [dict(h) for h in held]
        self.agents = []
        self.updates = []
        self.held_start = []
        self.held_commit = []
        self.updates_of = [[] for _ in range(self.n)]
        for r in ordered:
            if r.kind == ARRIVAL:
                if r.src not in held[r.dst]:
                    raise TraceError(f"arrival on non-edge {r.src}->{r.dst}")
                held[r.dst][r.src] = r.version
            elif r.kind == UPDATE:
                i = r.agent
                if not 0 <= i < self.n:
                    raise TraceError(f"update by unknown agent {i}")
                k = len(self.updates)
                self.updates.append(r)
                self.agents.append(i)
                self.held_commit.append(dict(held[i]))
                self.held_start.append(start_view[i])
                self.updates_of[i].append(k)
                start_view[i] = dict(held[i])
        self.K = len(self.updates)
        # position of each update among its agent's updates -> produced version
        self.version_of = [0] * self.K
        for i, ks in enumerate(self.updates_of):
            for v, k in enumerate(ks, start=1):
                self.version_of[k] = v

    def held(self, k, semantics):
        if semantics not in SEMANTICS:
            raise ValueError(f"semantics must be one of {SEMANTICS}")
        return self.held_start[k] if semantics == "asbcd" else self.held_commit[k]

    def staleness(self, k, i, j, semantics) -> int:
        if not 0 <= k < self.K:
            raise TraceError(f"no update with index {k}")
        if self.agents[k] != i:
            raise TraceError(f"update {k} was made by agent {self.agents[k]}, not {i}")
        if j == i:
            return k
        view = self.held(k, semantics)
        if j not in view:
            raise TraceError(f"agent {j} is not a neighbor of agent {i}")
        version = view[j]
        later = self.updates_of[j]
        # version v of j is replaced by j's (v+1)-th update, at index later[v]
        if version < len(later):
            return min(k, later[version])
        return k


def _index(trace) -> TraceIndex:
    return trace if isinstance(trace, TraceIndex) else TraceIndex(trace)


def compute_s_adsgd(trace, k: int, i: int, j: int) -> int:
    """Staleness index of ``x_j`` in agent ``i``'s update ``k``, read at commit."""
    return _index(trace).staleness(k, i, j, "adsgd")


def compute_s_asbcd(trace, k: int, i: int, j: int) -> int:
    """Staleness index of ``x_j`` in agent ``i``'s update ``k``, read at computation start."""
    return _index(trace).staleness(k, i, j, "asbcd")


def staleness_records(trace) -> list[StalenessRecord]:
    idx = _index(trace)
    out = []
    for k, i in enumerate(idx.agents):
        for j in (i,) + tuple(idx.neighbors[i]):
            out.append(StalenessRecord(k, i, j, idx.staleness(k, i, j, "asbcd"),
                                       idx.staleness(k, i, j, "adsgd")))
    return out


def measure_bounds(trace) -> DelayBounds:
    """Smallest ``B`` and ``D`` consistent with the trace.

    ``B`` is the longest run of virtual iterations an agent waits for its next
    update (the stretch after an agent's last update is censored and not
    counted). ``D`` is the largest ``k - s_ij^k`` under each convention.
    """
    idx = _index(trace)
    if idx.K == 0:
        raise TraceError("trace has no updates")
    B = 0
    for i, ks in enumerate(idx.updates_of):
        if not ks:
            raise TraceError(f"agent {i} never updates; B is undefined")
        B = max(B, ks[0] + 1)
        B = max(B, max((b - a for a, b in zip(ks, ks[1:])), default=0))
    D = {"asbcd": 0, "adsgd": 0}
    for k, i in enumerate(idx.agents):
        for j in idx.neighbors[i]:
            for sem in SEMANTICS:
                D[sem] = max(D[sem], k - idx.staleness(k, i, j, sem))
    return DelayBounds(B, D["asbcd"], D["adsgd"])


def implied_bounds(delays, topology) -> tuple:
    """Worst-case ``(B, D_adsgd)`` implied by the delay supports alone.

    ``B``: while agent ``i`` computes once (at most ``hi_i``), agent ``j``
    finishes at most ``floor(hi_i / lo_j) + 1`` updates. ``D_adsgd``: a message
    waits behind at most ``deg`` port slots (coalescing port) of length at most
    the slowest outgoing link, plus propagation, plus one compute interval of
    the sender; every agent updates at most ``T / lo + 1`` times in a window
    ``T``. Returns ``inf`` entries when a lower support bound is zero.
    """
    n = topology.n
    lo_c = [s.lo if not s.is_constant else s.constant_value for s in delays.compute]
    hi_c = [s.hi if not s.is_constant else s.constant_value for s in delays.compute]

    def count(window):
        if any(v == 0 for v in lo_c):
            return math.inf
        return sum(math.floor(window / v) + 1 for v in lo_c)

    B = max(1 + sum(math.floor(hi_c[i] / lo_c[j]) + 1 if lo_c[j] > 0 else math.inf
                    for j in range(n) if j != i) for i in range(n))
    worst_window = 0.0
    for i in range(n):
        out_links = [delays.transmit[(i, j)] for j in topology.neighbors(i)]
        if not out_links:
            continue
        slot = max(s.hi if not s.is_constant else s.constant_value for s in out_links)
        worst_window = max(worst_window, (topology.degree(i) + 1) * slot
                           + delays.propagation + hi_c[i])
    D = count(worst_window) if worst_window > 0 else 0
    return B, D


# ---------------------------------------------------------------------------
# staleness-error audit


@dataclass
class Lemma2Report:
    semantics: str
    D: int
    checked: int
    violations: list = field(default_factory=list)
    max_excess: float = -math.inf

    @property
    def ok(self) -> bool:
        return not self.violations


def _version_values(trace: EventTrace, idx: TraceIndex):
    if trace.initial_values is None:
        raise TraceError("trace has no iterate snapshots (record='full' is required)")
    values = [[np.asarray(v, dtype=float)] for v in trace.initial_values]
    for r in idx.updates:
        if r.value is None:
            raise TraceError("update record without a committed value")
        values[r.agent].append(np.asarray(r.value, dtype=float))
    return values


def check_lemma2(trace: EventTrace, semantics: str = "adsgd", D: int | None = None,
                 tol: float = 1e-9, ks=None) -> Lemma2Report:
    """Check ``||x^k - x^_k|| <= sum_{t=(k-D)+}^{k-1} ||x^{t+1} - x^t|| + tol``.

    ``x^_k`` takes each neighbor block from the version the updating agent
    actually held (at computation start or at commit, per ``semantics``);
    all other blocks are current. ``D`` defaults to the measured bound.
    """
    idx = TraceIndex(trace)
    values = _version_values(trace, idx)
    if D is None:
        D = measure_bounds(idx).D(semantics)
    step_norms = np.zeros(idx.K)
    for k, i in enumerate(idx.agents):
        v = idx.version_of[k]
        step_norms[k] = np.linalg.norm(values[i][v] - values[i][v - 1])
    prefix = np.concatenate([[0.0], np.cumsum(step_norms)])
    current = [0] * idx.n
    wanted = None if ks is None else set(ks)
    report = Lemma2Report(semantics, D, 0)
    for k, i in enumerate(idx.agents):
        if wanted is None or k in wanted:
            view = idx.held(k, semantics)
            lhs2 = 0.0
            for j, version in view.items():
                diff = values[j][current[j]] - values[j][version]
                lhs2 += float(diff @ diff)
            lhs = math.sqrt(lhs2)
            rhs = prefix[k] - prefix[max(k - D, 0)]
            excess = lhs - rhs
            report.max_excess = max(report.max_excess, excess)
            report.checked += 1
            if excess > tol:
                report.violations.append((k, lhs, rhs))
        current[i] += 1
    return report


# ---------------------------------------------------------------------------
# bound expressions


def c0(B, D) -> float:
    return D ** 2 + 3 * B ** 2 * (D + 2 * D ** 3)


def c1(B, D) -> float:
    return 6 * B ** 2 * D ** 2 + 3 * B ** 2 + 3 * B * D + 3 * B + D


def c2(B, D) -> float:
    if D == 0:
        return math.inf
    return 6 * B ** 2 * D + 3 * B ** 2 / D + 1


def lemma1_rhs(B, D, L, n, alpha, K, sigma2, f_gap) -> float:
    """Averaged squared-gradient bound for block coordinate descent with step ``alpha``."""
    C0 = c0(B, D)
    denom = 1 - (L / 2 + D * L) * alpha
    first = 3 * n * (B + C0 * L ** 2 * alpha ** 2) / (alpha * denom) * f_gap / K
    second = alpha * (3 * n * C0 * L ** 2 * alpha + L * (D + 1) / (2 * denom)) * sigma2
    return first + second


def corollary2_alpha(D, L, K) -> float:
    return 1.0 / (2 * (D + 0.5) * L * math.sqrt(K))


def corollary2_rhs(B, D, L, n, K, sigma2, f_gap) -> float:
    return n * L * c1(B, D) * f_gap / math.sqrt(K) + (1 / math.sqrt(K) + 3 * n * c2(B, D) / (4 * K)) * sigma2


def penalized_smoothness(L_F, lambda_min, alpha) -> float:
    return L_F + (1 - lambda_min) / alpha


def theorem1_rhs(B, D, L_F, L_L, n, alpha, beta, K, sigma2, f_gap, lambda2) -> float:
    """Averaged squared-gradient bound at the network mean for double-step ADSGD."""
    C0 = c0(B, D)
    denom = 1 - (D + 0.5) * L_L * beta
    first = 6 * n ** 2 * (B + C0 * L_L ** 2 * beta ** 2) / (beta * denom) * f_gap / K
    second = L_L * beta * (6 * n ** 2 * C0 * L_L * beta + n * (D + 1) / denom) * sigma2
    third = (4 * n * L_F ** 2 * alpha / (1 - lambda2)
             * (f_gap + (D + 1) / 2 * K * L_L * beta ** 2 * sigma2))
    return first + second + third


def corollary1_steps(L_F, D, K) -> tuple:
    """Step sizes ``(alpha, beta)`` prescribed for the ``K^{-1/3}`` rate."""
    return 2.0 / (L_F * K ** (1 / 3)), 1.0 / (4 * L_F * (D + 0.5) * K ** (2 / 3))


def corollary1_rhs(B, D, L_F, n, K, sigma2, f_gap, lambda2) -> float:
    return ((16 * n ** 2 * c1(B, D) + 8 * n / (1 - lambda2)) * L_F * f_gap / K ** (1 / 3)
            + (n / (D * (1 - lambda2)) + 2 * n) * sigma2 / K ** (1 / 3)
            + 3 * n ** 2 * c0(B, D) / (2 * D) * sigma2 / K ** (2 / 3))


@dataclass
class BoundReport:
    C0: float
    C1: float
    C2: float | None
    lemma1_rhs: float | None = None
    corollary2_rhs: float | None = None
    theorem1_rhs: float | None = None
    corollary1_rhs: float | None = None
    flags: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        for key, value in out.items():
            if isinstance(value, float) and not math.isfinite(value):
                out[key] = None
        return out


def evaluate_bounds(B, D, L=None, L_F=None, L_L=None, n=1, alpha=None, beta=None,
                    K=1, sigma2=0.0, f_gap=0.0, lambda2=None, lambda_min=None) -> BoundReport:
    """Evaluate every bound whose inputs are present and whose step size is admissible.

    ``L`` is the smoothness of the block problem (block coordinate descent),
    ``L_F`` the largest local smoothness. ``L_L`` defaults to
    ``L_F + (1 - lambda_min) / alpha``. Inadmissible step sizes are flagged
    and the corresponding right-hand side is left as ``None``.
    """
    if B < 1 or D < 0 or K < 1 or n < 1:
        raise ValueError("need B >= 1, D >= 0, K >= 1, n >= 1")
    report = BoundReport(c0(B, D), c1(B, D), None if D == 0 else c2(B, D))
    flags = report.flags
    if L is not None and alpha is not None:
        limit = 1.0 / ((D + 0.5) * L)
        flags["lemma1_alpha_admissible"] = alpha < limit
        report.notes["lemma1_alpha_limit"] = limit
        if alpha < limit:
            report.lemma1_rhs = lemma1_rhs(B, D, L, n, alpha, K, sigma2, f_gap)
    if L is not None:
        if D > 0:
            report.notes["corollary2_alpha"] = corollary2_alpha(D, L, K)
            report.corollary2_rhs = corollary2_rhs(B, D, L, n, K, sigma2, f_gap)
        else:
            flags["corollary2_defined"] = False
    if L_L is None and L_F is not None and alpha is not None and lambda_min is not None:
        L_L = penalized_smoothness(L_F, lambda_min, alpha)
    if L_L is not None:
        report.notes["L_L"] = L_L
    if None not in (L_F, L_L, alpha, beta, lambda2):
        limit = 1.0 / ((D + 0.5) * L_L)
        report.notes["theorem1_beta_limit"] = limit
        ok = 0 < beta < limit and beta <= alpha and lambda2 < 1
        flags["theorem1_beta_admissible"] = ok
        if ok:
            report.theorem1_rhs = theorem1_rhs(B, D, L_F, L_L, n, alpha, beta, K,
                                               sigma2, f_gap, lambda2)
    if L_F is not None and lambda2 is not None:
        a_star, b_star = corollary1_steps(L_F, D, K)
        report.notes["corollary1_alpha"] = a_star
        report.notes["corollary1_beta"] = b_star
        if D > 0 and lambda2 < 1:
            report.corollary1_rhs = corollary1_rhs(B, D, L_F, n, K, sigma2, f_gap, lambda2)
        else:
            flags["corollary1_defined"] = False
    return report


def audit_report(trace: EventTrace, lemma2: bool = True, max_lemma2_updates: int = 200_000) -> dict:
    """JSON-ready summary: measured ``B``/``D`` and staleness-error violation counts."""
    idx = TraceIndex(trace)
    bounds = measure_bounds(idx)
    out = {"updates": idx.K, "B_measured": bounds.B_measured,
           "D_asbcd": bounds.D_asbcd, "D_adsgd": bounds.D_adsgd,
           "bounds_finite": True}
    out.update({k: v for k, v in trace.meta.items() if k == "config_hash"})
    if lemma2 and trace.initial_values is not None:
        ks = None
        if idx.K > max_lemma2_updates:
            ks = range(idx.K - max_lemma2_updates, idx.K)
        for sem in SEMANTICS:
            rep = check_lemma2(trace, sem, D=bounds.D(sem), ks=ks)
            out[f"lemma2_{sem}"] = {"checked": rep.checked, "violations": len(rep.violations),
                                    "max_excess": rep.max_excess}
    return out
