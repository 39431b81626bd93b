"""Pessimistic actor-critic for offline reinforcement learning with linear features."""
from .actor import ActorConfig, RunTrace, actor_step, mirror_descent_regret_check, run_pacle
from .critic import (CriticConfig, CriticInfeasible, CriticSolution, RegressionData,
                     assemble_critic_program, pessimism_vector, regression_vector, run_critic)
from .data import (AdaptivePlan, BehaviorPlan, CumulativeCovariance, GenerativePlan,
                   OfflineDataset, build_covariances, collect_dataset)
from .mdp import (MixturePolicy, SoftmaxPolicy, TabularLinearMdp, TabularPolicy,
                  ValidationError, evaluate_policy_exact, optimal_values)
from .socp import ConicProgram, SolveReport, eliminate_equalities, solve

__version__ = "0.1.0"
