"""Wiring of problems, network, engine, algorithms, audit and metrics into runs
and suites, with on-disk artifacts."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import audit as audit_mod
from .algorithms import DivergenceError, SyncRunner, make_protocol
from .config import TABLE_CASES, ConfigError, ExperimentConfig, delay_model_for, load_config
from .data import PartitionSpec, load_idx, synthetic_blobs
from .engine import Simulator
from .graph import build_topology, load_edge_list, metropolis_weights
from .metrics import MetricRecorder, metrics_to_csv, read_metrics_csv, speedup, time_to_target
from .problems import make_nonconvex_logreg, make_quadratic

log = logging.getLogger(__name__)

OUTPUT_ENV = "ADSGD_LAB_OUT"


def output_root(default="runs") -> Path:
    return Path(os.environ.get(OUTPUT_ENV, default))


@dataclass
class RunResult:
    config_hash: str
    case: str
    seed: int
    algorithm: str
    samples: list = field(default_factory=list)
    audit: dict | None = None
    diverged: bool = False
    message: str = ""
    sim_time: float = 0.0
    updates: int = 0
    models: list | None = None
    trace: object = None
    run_dir: Path | None = None
    steps: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# builders


def build_problems(config: ExperimentConfig) -> list:
    n = config.n_agents
    if config.problem == "quadratic":
        return make_quadratic(n, config.dim, seed=config.data_seed, condition=config.condition,
                              noise_var=config.noise_var,
                              shared_minimizer=config.shared_minimizer)
    if config.problem == "logreg_synthetic":
        data = synthetic_blobs(config.n_samples, config.dim, seed=config.data_seed,
                               separation=config.separation)
    else:
        data = load_idx(config.idx_images, config.idx_labels)
    partition = PartitionSpec(n, config.heterogeneity, config.data_seed)
    return make_nonconvex_logreg(data, partition, config.reg_weight, config.batch_size,
                                 positive=config.positive_labels)


def build_topology_for(config: ExperimentConfig):
    if config.topology == "custom":
        try:
            topo = load_edge_list(config.edges_file, n=config.n_agents)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"edge list {config.edges_file}: {exc}") from None
        if topo.n != config.n_agents:
            raise ConfigError(f"edge list has {topo.n} nodes, config says {config.n_agents}")
        return topo
    return build_topology(config.topology, config.n_agents)


def initial_model(config: ExperimentConfig, dim: int) -> np.ndarray:
    if config.init_scale == 0:
        return np.zeros(dim)
    rng = np.random.default_rng([config.data_seed, 1])
    return config.init_scale * rng.standard_normal(dim)


def _budget(config):
    return dict(max_time=config.max_sim_time, max_updates=config.max_updates)


def pilot_bounds(config, topology, delays, seed):
    """Measure ``B``/``D`` on the schedule the run will follow.

    Schedules depend only on the delay model and seed, never on iterates, so
    a payload-free pilot with the same seed replays the exact event order.
    """
    class _Null:
        n = topology.n

        def value(self, i):
            return np.zeros(1)

        def initial_payload(self, i):
            return None

        def begin_compute(self, i):
            pass

        def commit(self, i):
            return None, None

        def receive(self, *args):
            pass

        @staticmethod
        def coalesce(old, new):
            return new

    sim = Simulator(topology, delays, _Null(), seed=seed, port_policy=config.port_policy,
                    record="light")
    trace = sim.run(**_budget(config))
    return audit_mod.measure_bounds(trace), sim.update_count


# ---------------------------------------------------------------------------
# single run


def run_experiment(config: ExperimentConfig, seed: int, case: str | None = None,
                   out_dir=None, audit: bool = True) -> RunResult:
    """Run one ``(case, seed)`` and optionally write its artifacts to ``out_dir``."""
    case = case or config.delay_case
    if case != config.delay_case:
        config = config.replace(delay_case=case)
    chash = config.config_hash()
    problems = build_problems(config)
    topology = build_topology_for(config)
    mixing = metropolis_weights(topology)
    delays = delay_model_for(config, topology)
    x0 = initial_model(config, problems[0].dim)
    kind = config.kind
    alpha, beta = config.alpha, config.beta
    result = RunResult(chash, case, seed, kind.value)
    if config.step_rule == "corollary1":
        bounds, K = pilot_bounds(config, topology, delays, seed)
        L_F = max(p.smoothness for p in problems)
        alpha, beta_star = audit_mod.corollary1_steps(L_F, bounds.D_adsgd, max(K, 1))
        if beta is None:
            beta = beta_star
        result.steps.update(L_F=L_F, D=bounds.D_adsgd, K=K)
    if beta is not None and beta > alpha:
        raise ConfigError(f"beta={beta} exceeds alpha={alpha}")
    result.steps.update(alpha=alpha, beta=beta)
    recorder = MetricRecorder(problems, stride=config.stride, target_loss=config.target_loss)

    if kind.asynchronous:
        protocol = make_protocol(kind, problems, mixing, alpha, x0, topology, seed=seed, beta=beta)
        sim = Simulator(topology, delays, protocol, seed=seed, port_policy=config.port_policy,
                        record=config.record)
        recorder.record_initial(protocol.models())
        try:
            sim.run(observer=recorder, **_budget(config))
        except DivergenceError as exc:
            result.diverged, result.message = True, str(exc)
        trace = sim.trace
        result.sim_time, result.updates = sim.now, sim.update_count
        result.models = [np.array(m, copy=True) for m in protocol.models()]
    else:
        runner = SyncRunner(kind, problems, mixing, alpha, x0, topology, delays, seed=seed)
        recorder.record_initial(runner.models())
        max_rounds = None if config.max_updates is None else math.ceil(config.max_updates / config.n_agents)
        try:
            runner.run(max_time=config.max_sim_time, max_rounds=max_rounds, observer=recorder)
        except DivergenceError as exc:
            result.diverged, result.message = True, str(exc)
        trace = None
        result.sim_time, result.updates = runner.now, runner.update_count
        result.models = [np.array(m, copy=True) for m in runner.models()]

    result.samples = recorder.samples
    result.trace = trace
    if trace is not None:
        trace.meta["config_hash"] = chash
        trace.meta["seed"] = seed
        trace.meta["case"] = case
        if audit and trace.updates():
            try:
                result.audit = audit_mod.audit_report(trace, lemma2=config.record == "full")
            except audit_mod.TraceError as exc:
                result.audit = {"error": str(exc), "bounds_finite": False}
    if result.audit is not None:
        result.audit["config_hash"] = chash
        result.audit["diverged"] = result.diverged
    if out_dir is not None:
        write_artifacts(result, config, out_dir)
    return result


def write_artifacts(result: RunResult, config: ExperimentConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = result.config_hash
    (out / "config.ini").write_text(f"# config_hash={chash}\n" + config.to_ini())
    if result.trace is not None:
        result.trace.to_csv(out / "trace.csv")
    csv_text = metrics_to_csv(result.samples, result.seed, result.algorithm, result.case)
    (out / "metrics.csv").write_text(f"# config_hash={chash}\n" + csv_text)
    audit_doc = dict(result.audit or {"config_hash": chash, "diverged": result.diverged})
    audit_doc.update(seed=result.seed, case=result.case, algorithm=result.algorithm,
                     message=result.message, steps=result.steps,
                     sim_time=result.sim_time, updates=result.updates)
    (out / "audit.json").write_text(json.dumps(audit_doc, indent=2, sort_keys=True,
                                               default=_json_default) + "\n")
    result.run_dir = out
    return out


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    raise TypeError(f"cannot serialize {type(value).__name__}")


# ---------------------------------------------------------------------------
# suites and reports


def run_suite(config: ExperimentConfig, cases=None, out_root=None, audit: bool = True) -> list:
    """Every case times every seed. A diverging run is flagged, not fatal."""
    cases = list(cases) if cases else [config.delay_case]
    for case in cases:
        if case not in TABLE_CASES and case != "custom":
            raise ConfigError(f"unknown delay case {case!r}")
    root = None if out_root is None else Path(out_root) / config.config_hash()[:12]
    results = []
    for case in cases:
        for seed in config.seeds:
            out = None if root is None else root / case / f"seed_{seed}"
            res = run_experiment(config, seed, case=case, out_dir=out, audit=audit)
            if res.diverged:
                log.warning("case %s seed %s diverged: %s", case, seed, res.message)
            results.append(res)
    if root is not None:
        (root / "suite.ini").write_text(config.to_ini())
    return results


def report(run_dir) -> dict:
    """Summarize every run below ``run_dir`` (directories holding ``metrics.csv``)."""
    run_dir = Path(run_dir)
    runs = sorted(p.parent for p in run_dir.rglob("metrics.csv"))
    if not runs:
        raise FileNotFoundError(f"no runs found under {run_dir}")
    rows = []
    for path in runs:
        config = load_config(path / "config.ini")
        metrics = read_metrics_csv(path / "metrics.csv")
        audit_doc = json.loads((path / "audit.json").read_text())
        series = [(r["sim_time"], r["loss_mean"]) for r in metrics]
        ttt = None if config.target_loss is None else time_to_target(series, config.target_loss)
        rows.append({"run": str(path.relative_to(run_dir)), "case": audit_doc.get("case"),
                     "seed": audit_doc.get("seed"), "algorithm": audit_doc.get("algorithm"),
                     "n_agents": config.n_agents, "diverged": audit_doc.get("diverged", False),
                     "final_loss": metrics[-1]["loss_mean"] if metrics else None,
                     "final_consensus": metrics[-1]["consensus_err"] if metrics else None,
                     "time_to_target": ttt,
                     "B_measured": audit_doc.get("B_measured"),
                     "D_asbcd": audit_doc.get("D_asbcd"), "D_adsgd": audit_doc.get("D_adsgd")})
    summary = {"runs": rows, "time_to_target": {}, "speedup": {}}
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["case"], r["algorithm"], r["n_agents"]), []).append(r["time_to_target"])
    for (case, alg, n), times in sorted(groups.items(), key=lambda kv: tuple(map(str, kv[0]))):
        reached = [t for t in times if t is not None]
        mean = float(np.mean(reached)) if len(reached) == len(times) else None
        summary["time_to_target"].setdefault(f"{case}/{alg}", {})[str(n)] = mean
    for key, table in summary["time_to_target"].items():
        if len(table) > 1:
            sp = speedup({int(n): t for n, t in table.items()})
            summary["speedup"][key] = {str(n): v for n, v in sp.items()}
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
