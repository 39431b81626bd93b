"""Mirror-descent actor and the full actor-critic driver."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .critic import CriticConfig, RegressionData, run_critic
from .data import OfflineDataset
from .mdp import (MixturePolicy, Policy, SoftmaxPolicy, TabularLinearMdp,
                  ValidationError, evaluate_policy_exact, softmax_masked)


@dataclass
class ActorConfig:
    T: int
    eta: float
    snapshot_every: int = 1

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise ValidationError("T must be a positive integer")
        if not self.eta > 0:
            raise ValidationError("eta must be positive")
        if self.snapshot_every < 1:
            raise ValidationError("snapshot_every must be >= 1")
        self.T = int(self.T)

    @classmethod
    def theorem_stepsize(cls, T: int, n_actions: int) -> "ActorConfig":
        """eta = sqrt(log|A| / T), valid once T >= log|A|."""
        if T < math.log(n_actions):
            raise ValidationError("T must be at least log|A| for the theorem stepsize")
        return cls(T, math.sqrt(math.log(n_actions) / T))


def actor_step(thetas: Sequence, ws: Sequence, eta: float) -> list[np.ndarray]:
    """theta_h + eta * w_h for every stage."""
    if len(thetas) != len(ws):
        raise ValidationError("theta and w have different numbers of stages")
    out = []
    for th, w in zip(thetas, ws):
        th, w = np.asarray(th, dtype=float), np.asarray(w, dtype=float)
        if th.shape != w.shape:
            raise ValidationError(f"stage dimension mismatch {th.shape} vs {w.shape}")
        out.append(th + eta * w)
    return out


@dataclass
class IterationRecord:
    t: int
    theta: list
    w: list
    value: float
    solver: dict

    def to_json(self) -> dict:
        return {"t": self.t, "value": self.value,
                "theta": [x.tolist() for x in self.theta],
                "w": [x.tolist() for x in self.w], "solver": self.solver}


@dataclass
class RunTrace:
    records: list = field(default_factory=list)
    mixture: MixturePolicy | None = None
    wall_time: float = 0.0

    @property
    def values(self) -> np.ndarray:
        return np.array([r.value for r in self.records])

    def __len__(self):
        return len(self.records)


def run_pacle(dataset: OfflineDataset, mdp: TabularLinearMdp, actor: ActorConfig, critic: CriticConfig,
              s1: int | None = None, reg: RegressionData | None = None,
              on_iteration: Callable[[IterationRecord], None] | None = None) -> RunTrace:
    """T rounds of critic evaluation followed by the exponentiated-gradient update.

    ``mdp`` is used only as the feature map (and for action availability);
    its rewards and transitions are never read here.
    """
    start = time.perf_counter()
    reg = reg if reg is not None else RegressionData(dataset, mdp, critic.lam)
    thetas = [np.zeros(d) for d in mdp.dims]
    trace = RunTrace()
    snapshots = []
    for t in range(actor.T):
        policy = SoftmaxPolicy(tuple(thetas))
        if t % actor.snapshot_every == 0:
            snapshots.append(policy)
        sol = run_critic(reg, policy, critic, s1)
        rep = sol.report
        rec = IterationRecord(t, [th.copy() for th in thetas], [w.copy() for w in sol.w], sol.value,
                              {"status": rep.status, "iterations": rep.iterations,
                               "kkt": rep.kkt_residual, "violation": rep.max_violation,
                               "wall_time": rep.wall_time})
        trace.records.append(rec)
        if on_iteration is not None:
            on_iteration(rec)
        thetas = actor_step(thetas, sol.w, actor.eta)
    trace.mixture = MixturePolicy(tuple(snapshots))
    trace.wall_time = time.perf_counter() - start
    return trace


def optimization_error(horizon: int, n_actions: int, T: int, constant: float = 4.0) -> float:
    """R_opt(T) = constant * H * sqrt(log|A| / T)."""
    return constant * horizon * math.sqrt(math.log(n_actions) / T)


# ---------------------------------------------------------------------------
# Exact-feedback regret


def exact_linear_weights(mdp: TabularLinearMdp, q_tables: Sequence, tol: float = 1e-9) -> list[np.ndarray]:
    """Per-stage w_h with <phi_h(s,a), w_h> = Q_h(s,a) on available pairs; raises if not linear."""
    out = []
    for h, q in enumerate(q_tables):
        mask = mdp.action_mask[h]
        X = mdp.features[h][mask]
        y = np.asarray(q)[mask]
        w = np.linalg.lstsq(X, y, rcond=None)[0]
        if np.abs(X @ w - y).max(initial=0.0) > tol:
            raise ValidationError(f"stage {h}: Q is not linear in the features")
        out.append(w)
    return out


@dataclass
class RegretResult:
    average_regret: float
    bound: float
    per_round: np.ndarray


def mirror_descent_regret_check(mdps: Sequence[TabularLinearMdp], comparator: Policy, eta: float,
                                radii: Sequence[float] | None = None) -> RegretResult:
    """Run the actor on exact Q-weights of a sequence of MDPs and measure regret.

    Returns the average of V^comp_{M_t} - V^{pi_t}_{M_t} and the bound
    H (log|A| / (eta T) + eta).
    """
    T = len(mdps)
    if T == 0:
        raise ValidationError("empty MDP sequence")
    base = mdps[0]
    H = base.horizon
    thetas = [np.zeros(d) for d in base.dims]
    gaps = np.empty(T)
    for t, m in enumerate(mdps):
        policy = SoftmaxPolicy(tuple(thetas))
        vals = evaluate_policy_exact(m, policy)
        for h in range(H):
            adv = np.where(m.action_mask[h], vals.q[h] - vals.v[h][:, None], 0.0)
            if np.abs(adv).max(initial=0.0) > 2 + 1e-12:
                raise ValidationError(f"round {t}, stage {h}: advantage exceeds 2")
        ws = exact_linear_weights(m, vals.q)
        if radii is not None:
            for h, w in enumerate(ws):
                if np.linalg.norm(w) > radii[h] + 1e-12:
                    raise ValidationError(f"round {t}, stage {h}: weight norm exceeds D_h")
        gaps[t] = evaluate_policy_exact(m, comparator).v1 - vals.v1
        thetas = actor_step(thetas, ws, eta)
    bound = H * (math.log(base.max_actions) / (eta * T) + eta)
    return RegretResult(float(gaps.mean()), bound, gaps)


# ---------------------------------------------------------------------------
# Softmax geometry


def softmax_l1_distance(features: np.ndarray, theta, theta_prime, mask=None) -> float:
    """max_s sum_a |pi_theta'(a|s) - pi_theta(a|s)| for features of shape (S, A, d)."""
    mask = np.ones(features.shape[:2], dtype=bool) if mask is None else mask
    p = softmax_masked(features @ np.asarray(theta, dtype=float), mask)
    q = softmax_masked(features @ np.asarray(theta_prime, dtype=float), mask)
    return float(np.abs(p - q).sum(axis=1).max())
