"""Pessimism against greedy extrapolation when the data miss an action."""
import numpy as np

from pacle import analysis
from pacle.actor import ActorConfig, run_pacle
from pacle.baselines import greedy_lsvi
from pacle.benchmarks import coverage_gap_dataset, coverage_gap_mdp
from pacle.critic import CriticConfig
from pacle.mdp import evaluate_policy_exact, optimal_values

mdp = coverage_gap_mdp()
vstar = optimal_values(mdp)[0].v1
stats = analysis.ProbeStatistics(mdp, analysis.make_probes(mdp, [1.0], 0, 0), [1.0])
actor = ActorConfig.theorem_stepsize(200, mdp.max_actions)

for seed in range(5):
    data = coverage_gap_dataset(mdp, 400, seed)
    greedy, _ = greedy_lsvi(data, mdp)
    beta = analysis.calibrated_beta(data, stats, 1.0, 0.1, 200, seed)
    mix = run_pacle(data, mdp, actor, CriticConfig([1.0], beta)).mixture
    print(f"seed {seed}: suboptimality PACLE {vstar - evaluate_policy_exact(mdp, mix).v1:.3f}, "
          f"greedy {vstar - evaluate_policy_exact(mdp, greedy).v1:.3f}")
