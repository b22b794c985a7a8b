"""Experiment configuration: schema, INI/JSON parsing, canonical hashing, and
the built-in delay scenarios.

The text format is INI with five sections. Every key belongs to exactly one
section; unknown keys and sections are rejected::

    [problem]
    problem = quadratic
    dim = 10

    [network]
    n_agents = 9
    topology = grid

    [algorithm]
    algorithm = adsgd
    alpha = 0.01

    [delays]
    delay_case = base

    [run]
    seeds = 0, 1, 2
    max_updates = 5000
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

from .algorithms import AlgorithmKind
from .engine import DelayModel, comm_sampler, compute_sampler, constant_delay, DelaySampler

PROBLEMS = ("quadratic", "logreg_synthetic", "logreg_idx")
TOPOLOGIES = ("grid", "ring", "complete", "custom")
DELAY_CASES = ("base", "slow_comm", "comp_straggler", "comm_straggler",
               "combined_straggler", "custom")
TABLE_CASES = DELAY_CASES[:5]
STRAGGLER_FACTOR = 10.0


class ConfigError(ValueError):
    pass


def _floats(text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).replace(",", " ").split()]


def _ints(text):
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).replace(",", " ").split()]


def _bool(text):
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt(conv):
    def parse(text):
        if text is None or (isinstance(text, str) and text.strip().lower() in ("", "none")):
            return None
        return conv(text)
    return parse


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one experiment (all seeds).

    ``data_seed`` fixes the problem instance and the data partition; the run
    seeds in ``seeds`` drive delays and gradient noise.
    """

    # [problem]
    problem: str = "quadratic"
    dim: int = 10
    condition: float = 10.0
    noise_var: float = 0.0
    shared_minimizer: bool = False
    n_samples: int = 2000
    separation: float = 1.0
    reg_weight: float = 0.01
    batch_size: int = 32
    heterogeneity: float = 0.0
    idx_images: str | None = None
    idx_labels: str | None = None
    positive_labels: list | None = None
    data_seed: int = 0
    init_scale: float = 0.0
    # [network]
    n_agents: int = 9
    topology: str = "grid"
    edges_file: str | None = None
    # [algorithm]
    algorithm: str = "adsgd"
    alpha: float = 0.01
    beta: float | None = None
    step_rule: str = "fixed"
    # [delays]
    delay_case: str = "base"
    comm_slowdown: float = 10.0
    straggler_id: int = 0
    delay_dist: str = "lognormal"
    compute_means: list | None = None
    comm_mean: float | None = None
    propagation: float = 0.0
    port_policy: str = "coalesce"
    # [run]
    seeds: list = field(default_factory=lambda: [0])
    max_sim_time: float | None = None
    max_updates: int | None = None
    metric_stride: int | None = None
    target_loss: float | None = None
    record: str = "full"

    def __post_init__(self):
        self.validate()

    # -- validation -------------------------------------------------------

    def validate(self):
        if self.problem not in PROBLEMS:
            raise ConfigError(f"problem must be one of {PROBLEMS}, got {self.problem!r}")
        if self.topology not in TOPOLOGIES:
            raise ConfigError(f"topology must be one of {TOPOLOGIES}, got {self.topology!r}")
        if self.topology == "custom" and not self.edges_file:
            raise ConfigError("custom topology needs edges_file")
        if self.delay_case not in DELAY_CASES:
            raise ConfigError(f"delay_case must be one of {DELAY_CASES}, got {self.delay_case!r}")
        if self.delay_dist not in ("lognormal", "constant"):
            raise ConfigError("delay_dist must be 'lognormal' or 'constant'")
        if self.port_policy not in ("coalesce", "queue"):
            raise ConfigError("port_policy must be 'coalesce' or 'queue'")
        if self.record not in ("full", "light", "none"):
            raise ConfigError("record must be 'full', 'light' or 'none'")
        if self.step_rule not in ("fixed", "corollary1"):
            raise ConfigError("step_rule must be 'fixed' or 'corollary1'")
        try:
            kind = AlgorithmKind(self.algorithm)
        except ValueError:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; choose from "
                              f"{[k.value for k in AlgorithmKind]}") from None
        if self.n_agents < 1:
            raise ConfigError("n_agents must be >= 1")
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")
        if not 0.0 <= self.heterogeneity <= 1.0:
            raise ConfigError("heterogeneity must lie in [0, 1]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if (self.max_sim_time is None) == (self.max_updates is None):
            raise ConfigError("set exactly one of max_sim_time and max_updates")
        if self.max_sim_time is not None and self.max_sim_time <= 0:
            raise ConfigError("max_sim_time must be positive")
        if self.max_updates is not None and self.max_updates < 1:
            raise ConfigError("max_updates must be positive")
        if self.metric_stride is not None and self.metric_stride < 1:
            raise ConfigError("metric_stride must be >= 1")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if kind is AlgorithmKind.ADSGD_DOUBLESTEP:
            if self.step_rule == "fixed" and self.beta is None:
                raise ConfigError("adsgd_doublestep needs beta")
            if self.beta is not None and self.beta > self.alpha:
                raise ConfigError(
                    f"beta={self.beta} > alpha={self.alpha}: the reweighted matrix "
                    "(1 - beta/alpha) I + (beta/alpha) W would get a negative diagonal, "
                    "so it is no longer a valid mixing matrix")
        if self.beta is not None and self.beta <= 0:
            raise ConfigError("beta must be positive")
        if self.delay_case in ("comp_straggler", "comm_straggler", "combined_straggler"):
            if not 0 <= self.straggler_id < self.n_agents:
                raise ConfigError(f"straggler_id {self.straggler_id} not in 0..{self.n_agents - 1}")
        if self.comm_slowdown <= 0:
            raise ConfigError("comm_slowdown must be positive")
        if self.delay_case == "custom":
            if self.compute_means is None or self.comm_mean is None:
                raise ConfigError("custom delay case needs compute_means and comm_mean")
            if len(self.compute_means) not in (1, self.n_agents):
                raise ConfigError("compute_means needs 1 or n_agents entries")
        if self.problem == "logreg_idx" and not (self.idx_images and self.idx_labels):
            raise ConfigError("logreg_idx needs idx_images and idx_labels")

    @property
    def kind(self) -> AlgorithmKind:
        return AlgorithmKind(self.algorithm)

    @property
    def stride(self) -> int:
        return self.metric_stride if self.metric_stride is not None else self.n_agents

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        values = self.to_dict()
        for section, keys in SECTIONS.items():
            parser[section] = {}
            for key in keys:
                value = values[key]
                if value is None:
                    continue
                if isinstance(value, list):
                    value = ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
                elif isinstance(value, float):
                    value = repr(value)
                parser[section][key] = str(value)
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


SECTIONS = {
    "problem": ("problem", "dim", "condition", "noise_var", "shared_minimizer", "n_samples",
                "separation", "reg_weight", "batch_size", "heterogeneity", "idx_images",
                "idx_labels", "positive_labels", "data_seed", "init_scale"),
    "network": ("n_agents", "topology", "edges_file"),
    "algorithm": ("algorithm", "alpha", "beta", "step_rule"),
    "delays": ("delay_case", "comm_slowdown", "straggler_id", "delay_dist", "compute_means",
               "comm_mean", "propagation", "port_policy"),
    "run": ("seeds", "max_sim_time", "max_updates", "metric_stride", "target_loss", "record"),
}

_CONVERTERS = {
    "problem": str, "dim": int, "condition": float, "noise_var": float,
    "shared_minimizer": _bool, "n_samples": int, "separation": float, "reg_weight": float,
    "batch_size": int, "heterogeneity": float, "idx_images": _opt(str), "idx_labels": _opt(str),
    "positive_labels": _opt(_ints), "data_seed": int, "init_scale": float,
    "n_agents": int, "topology": str, "edges_file": _opt(str),
    "algorithm": str, "alpha": float, "beta": _opt(float), "step_rule": str,
    "delay_case": str, "comm_slowdown": float, "straggler_id": int, "delay_dist": str,
    "compute_means": _opt(_floats), "comm_mean": _opt(float), "propagation": float,
    "port_policy": str,
    "seeds": _ints, "max_sim_time": _opt(float), "max_updates": _opt(int),
    "metric_stride": _opt(int), "target_loss": _opt(float), "record": str,
}
REQUIRED = ("problem", "n_agents", "topology", "algorithm", "alpha", "seeds")

assert set(_CONVERTERS) == {f.name for f in dataclasses.fields(ExperimentConfig)}
assert set(_CONVERTERS) == {k for keys in SECTIONS.values() for k in keys}


def config_from_mapping(values: dict) -> ExperimentConfig:
    unknown = set(values) - set(_CONVERTERS)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
    missing = [k for k in REQUIRED if k not in values]
    if missing:
        raise ConfigError(f"missing required keys: {missing}")
    kwargs = {}
    for key, raw in values.items():
        try:
            kwargs[key] = _CONVERTERS[key](raw) if raw is not None else None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
    return ExperimentConfig(**kwargs)


def parse_config(text: str) -> ExperimentConfig:
    """Parse INI (sectioned key/value) or JSON (a flat object) text."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("JSON configuration must be an object")
        return config_from_mapping(data)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"invalid configuration text: {exc}") from None
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser[section].items():
            if key not in SECTIONS[section]:
                where = [s for s, keys in SECTIONS.items() if key in keys]
                hint = f" (belongs in [{where[0]}])" if where else ""
                raise ConfigError(f"unknown key {key!r} in [{section}]{hint}")
            values[key] = raw
    return config_from_mapping(values)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return parse_config(text)


# ---------------------------------------------------------------------------
# delay scenarios


def preset_delay_means(case: str, topology, comm_slowdown: float = 10.0,
                       straggler_id: int = 0, compute_means=None, comm_mean=None) -> tuple:
    """``(compute_means, link_means)`` for a named scenario.

    ``link_means`` maps every directed edge ``(i, j)`` to its mean transmit
    time. Straggler agents are ``STRAGGLER_FACTOR`` times slower; a
    communication straggler slows every link touching it, both directions.
    """
    n = topology.n
    links = [(i, j) for a, b in sorted(topology.edges) for i, j in ((a, b), (b, a))]
    if case == "custom":
        if compute_means is None or comm_mean is None:
            raise ConfigError("custom delay case needs compute_means and comm_mean")
        comp = list(compute_means) * n if len(compute_means) == 1 else list(compute_means)
        return [float(v) for v in comp], {e: float(comm_mean) for e in links}
    if case not in TABLE_CASES:
        raise ConfigError(f"unknown delay case {case!r}")
    if case != "base" and case != "slow_comm" and not 0 <= straggler_id < n:
        raise ConfigError(f"straggler_id {straggler_id} not in 0..{n - 1}")
    comp = [1.0] * n
    comm = {e: 1.0 for e in links}
    if case == "slow_comm":
        comm = {e: float(comm_slowdown) for e in links}
    if case in ("comp_straggler", "combined_straggler"):
        comp[straggler_id] *= STRAGGLER_FACTOR
    if case in ("comm_straggler", "combined_straggler"):
        for e in links:
            if straggler_id in e:
                comm[e] *= STRAGGLER_FACTOR
    return comp, comm


def preset_delay_model(case: str, n: int, topology, comm_slowdown: float = 10.0,
                       straggler_id: int = 0, dist: str = "lognormal",
                       compute_means=None, comm_mean=None, propagation: float = 0.0) -> DelayModel:
    if topology.n != n:
        raise ConfigError("topology size does not match n")
    comp, comm = preset_delay_means(case, topology, comm_slowdown, straggler_id,
                                    compute_means, comm_mean)
    if dist == "constant":
        make_comp = make_comm = constant_delay
    else:
        make_comp, make_comm = compute_sampler, comm_sampler
    cache: dict = {}

    def build(factory, mean) -> DelaySampler:
        key = (factory, mean)
        if key not in cache:
            cache[key] = factory(mean)
        return cache[key]

    return DelayModel([build(make_comp, m) for m in comp],
                      {e: build(make_comm, m) for e, m in comm.items()}, propagation)


def delay_model_for(config: ExperimentConfig, topology, case: str | None = None) -> DelayModel:
    return preset_delay_model(case or config.delay_case, config.n_agents, topology,
                              config.comm_slowdown, config.straggler_id, config.delay_dist,
                              config.compute_means, config.comm_mean, config.propagation)
