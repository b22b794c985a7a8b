"""Choosing the second step size from a measured delay bound.

The double-step variant mixes with ``(1 - beta/alpha) I + (beta/alpha) W`` and
steps with ``beta``. Its guarantee needs ``beta < 1 / ((D + 1/2) L_L)`` where
``L_L = L_F + (1 - lambda_min(W)) / alpha``. Delay schedules do not depend on
the iterates, so a cheap pilot run with the same seed reveals ``D`` before
the real run starts. We then evaluate the bound expressions and run once
inside and once far outside the admissible range.

    python demos/04_step_sizes_and_bounds.py
"""

import numpy as np

from adsgd_lab.audit import evaluate_bounds, penalized_smoothness
from adsgd_lab.config import ExperimentConfig, preset_delay_model
from adsgd_lab.graph import build_topology, metropolis_weights
from adsgd_lab.problems import make_quadratic
from adsgd_lab.runner import pilot_bounds, run_experiment

cfg = ExperimentConfig(n_agents=9, topology="grid", dim=5, shared_minimizer=True,
                       noise_var=0.1, algorithm="adsgd_doublestep", alpha=1.0, beta=0.1,
                       max_updates=20_000, seeds=[0])
topology = build_topology("grid", 9)
mixing = metropolis_weights(topology)
L_F = max(p.smoothness for p in make_quadratic(9, 5, seed=0, shared_minimizer=True))
alpha = 20 / L_F
L_L = penalized_smoothness(L_F, mixing.lambda_min, alpha)

bounds, K = pilot_bounds(cfg, topology, preset_delay_model("base", 9, topology), seed=0)
D = bounds.D_adsgd
beta_ok = 0.99 / ((D + 0.5) * L_L)
print(f"L_F = {L_F:.2f}, L_L = {L_L:.2f}, pilot: B = {bounds.B_measured}, D = {D}, K = {K}")

report = evaluate_bounds(B=bounds.B_measured, D=D, L_F=L_F, L_L=L_L, n=9, alpha=alpha,
                         beta=beta_ok, K=K, sigma2=0.1, f_gap=10.0, lambda2=mixing.lambda2)
print(f"C0 = {report.C0:.0f}, C1 = {report.C1:.0f}, admissible: "
      f"{report.flags['theorem1_beta_admissible']}, bound value = {report.theorem1_rhs:.3g}")

for beta in (beta_ok, 10 / L_L):
    res = run_experiment(cfg.replace(alpha=alpha, beta=beta), seed=0, audit=False)
    last = res.samples[-1]
    outcome = "diverged" if res.diverged else f"final grad^2 {last.grad_norm_sq:.2e}"
    print(f"beta * L_L = {beta * L_L:7.4f}: {outcome}")
