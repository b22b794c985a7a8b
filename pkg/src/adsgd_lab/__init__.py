"""Discrete-event laboratory for asynchronous decentralized SGD and asynchronous
block coordinate descent, with staleness audits and bound evaluators."""

from .algorithms import (ADSGD, ASBCD, AlgorithmKind, DivergenceError, DoubleStepADSGD,
                         MemEffADSGD, SyncRunner, make_protocol)
from .audit import (DelayBounds, check_lemma2, compute_s_adsgd, compute_s_asbcd,
                    evaluate_bounds, measure_bounds, reconstruct_virtual_index)
from .config import ConfigError, ExperimentConfig, parse_config, preset_delay_model
from .data import Dataset, PartitionSpec, partition_dataset, synthetic_blobs
from .engine import DelayModel, EventTrace, Simulator, replay_trace
from .graph import Topology, build_topology, double_step_transform, metropolis_weights
from .metrics import average_model, consensus_error, speedup, time_to_target
from .problems import make_nonconvex_logreg, make_quadratic
from .runner import RunResult, run_experiment, run_suite

__version__ = "0.1.0"
