"""Run PACLE on a small low-rank MDP and compare with the optimal value."""
import numpy as np

from pacle import analysis
from pacle.actor import ActorConfig, optimization_error, run_pacle
from pacle.benchmarks import linear_mdp
from pacle.critic import CriticConfig
from pacle.data import BehaviorPlan, build_covariances, collect_dataset
from pacle.mdp import TabularPolicy, evaluate_policy_exact, optimal_values

mdp = linear_mdp(np.random.default_rng(7))
data = collect_dataset(mdp, BehaviorPlan(TabularPolicy.uniform(mdp), 2000), rng_seed=0)
radii = [1.0] * mdp.horizon

stats = analysis.ProbeStatistics(mdp, analysis.make_probes(mdp, radii, 10, 0), radii)
beta = analysis.calibrated_beta(data, stats, lam=1.0, delta=0.1, resamples=100, rng_seed=0)

actor = ActorConfig.theorem_stepsize(100, mdp.max_actions)
trace = run_pacle(data, mdp, actor, CriticConfig(radii, beta))

vstar, pstar = optimal_values(mdp)
v_alg = evaluate_policy_exact(mdp, trace.mixture).v1
U = analysis.uncertainty(pstar, beta, build_covariances(data, mdp), mdp)
R = optimization_error(mdp.horizon, mdp.max_actions, actor.T)
print(f"beta = {np.round(beta, 3).tolist()}")
print(f"critic lower bounds: first {trace.values[0]:.3f}, last {trace.values[-1]:.3f}")
print(f"V* = {vstar.v1:.3f}, V(mixture) = {v_alg:.3f}, gap {vstar.v1 - v_alg:.3f} <= U + R_opt = {U + R:.3f}")
