"""Executable versions of the theoretical objects behind the critic.

Everything here needs a tabular MDP: exact occupancies, exact Bellman
backups, and finite suprema over state-action pairs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .critic import CriticSolution, regression_vector
from .data import CumulativeCovariance, OfflineDataset
from .mdp import (MixturePolicy, Policy, SoftmaxPolicy, TabularLinearMdp,
                  ValidationError, bellman_apply, evaluate_policy_exact,
                  lift_weights, occupancy_features, state_occupancy)
from .socp import ConicProgram, Tolerances, solve


def uncertainty(policy: Policy, beta: Sequence[float], covariances: Sequence[CumulativeCovariance],
                mdp: TabularLinearMdp) -> float:
    """U(pi; beta) = 2 sum_h beta_h ||phi_bar_h||_{Sigma_h^-1}."""
    phibar = occupancy_features(mdp, policy)
    return 2.0 * sum(b * cov.inv_norm(f) for b, f, cov in zip(beta, phibar, covariances))


# ---------------------------------------------------------------------------
# Induced MDP


def _evaluate_with_rewards(mdp: TabularLinearMdp, rewards: Sequence, policy: Policy):
    """Backward DP on ``mdp`` with its rewards replaced; returns (q tables, v tables)."""
    if isinstance(policy, MixturePolicy):
        parts = [_evaluate_with_rewards(mdp, rewards, m) for m in policy.members]
        H = mdp.horizon
        return ([np.mean([p[0][h] for p in parts], axis=0) for h in range(H)],
                [np.mean([p[1][h] for p in parts], axis=0) for h in range(H)])
    H = mdp.horizon
    q, v = [None] * H, [None] * H
    for h in range(H - 1, -1, -1):
        qh = np.asarray(rewards[h], dtype=float).copy()
        if h < H - 1:
            qh = qh + mdp.transitions[h] @ v[h + 1]
        q[h] = np.where(mdp.action_mask[h], qh, 0.0)
        v[h] = (policy.probs(mdp, h) * q[h]).sum(axis=1)
    return q, v


@dataclass
class InducedMdp:
    """Same states, actions and transitions as ``base``; rewards shifted by the critic's residual."""

    base: TabularLinearMdp
    rewards: list
    q_critic: list

    def evaluate(self, policy: Policy):
        return _evaluate_with_rewards(self.base, self.rewards, policy)

    def value(self, policy: Policy) -> float:
        _, v = self.evaluate(policy)
        return float(v[0][self.base.initial_state])


def induced_mdp(mdp: TabularLinearMdp, policy: Policy, solution: CriticSolution) -> InducedMdp:
    """r_hat_h = r_h + Q_h - (T^pi_h Q_{h+1}) with Q_h = <phi_h, w_h>."""
    q = lift_weights(mdp, solution.w)
    H = mdp.horizon
    rewards = []
    for h in range(H):
        backup = bellman_apply(mdp, h, policy, q[h + 1] if h < H - 1 else None)
        rewards.append(np.where(mdp.action_mask[h], mdp.rewards[h] + q[h] - backup, 0.0))
    return InducedMdp(mdp, rewards, q)


def exactness_residual(induced: InducedMdp, policy: Policy) -> float:
    """max_{h,s,a} |Q_critic_h(s,a) - Q^pi_{h, induced}(s,a)| over available pairs."""
    q, _ = induced.evaluate(policy)
    worst = 0.0
    for h, (qc, qi) in enumerate(zip(induced.q_critic, q)):
        m = induced.base.action_mask[h]
        worst = max(worst, float(np.abs(qc - qi)[m].max(initial=0.0)))
    return worst


def value_difference(induced: InducedMdp, comparator: Policy) -> tuple[float, float]:
    """(V^comp on induced - V^comp on base, sum_h E_comp[r_hat_h - r_h]) for one comparator."""
    mdp = induced.base
    lhs = induced.value(comparator) - evaluate_policy_exact(mdp, comparator).v1
    occ = state_occupancy(mdp, comparator)
    rhs = sum(float((d * (rh - r)).sum()) for d, rh, r in zip(occ, induced.rewards, mdp.rewards))
    return lhs, rhs


# ---------------------------------------------------------------------------
# Sup-norm projection


def sup_norm_fit(features: np.ndarray, mask: np.ndarray, target: np.ndarray, radius: float,
                 tolerances: Tolerances | None = None) -> tuple[np.ndarray, float]:
    """min_{||w|| <= radius} max_{available (s,a)} |<phi(s,a), w> - target(s,a)| via an epigraph SOCP."""
    Phi = features[mask]
    y = np.asarray(target, dtype=float)[mask]
    d = Phi.shape[1]
    ones = np.ones((y.size, 1))
    prog = ConicProgram()
    prog.add_block("w", d)
    prog.add_block("t", 1)
    prog.add_linear({"w": Phi, "t": -ones}, y)
    prog.add_linear({"w": -Phi, "t": -ones}, -y)
    prog.add_ball("w", radius)
    prog.set_objective("t", [1.0])
    rep = solve(prog, tolerances)
    if rep.status != "optimal":
        raise ValidationError(f"sup-norm projection failed with status {rep.status}")
    w = rep.blocks["w"]
    # report the attained residual of the returned w rather than the epigraph variable
    return w, float(np.abs(Phi @ w - y).max(initial=0.0))


def sup_norm_projection(mdp: TabularLinearMdp, policy: Policy, h: int, q_next, radius: float,
                        tolerances: Tolerances | None = None) -> tuple[np.ndarray, float]:
    """Best sup-norm linear fit to T^pi_h Q_next within the radius-ball; returns (w, residual)."""
    target = bellman_apply(mdp, h, policy, q_next)
    return sup_norm_fit(mdp.features[h], mdp.action_mask[h], target, radius, tolerances)


def parameter_error(dataset: OfflineDataset, covariances, mdp: TabularLinearMdp, policy: Policy,
                    h: int, w_next, radius: float) -> tuple[np.ndarray, float]:
    """Regression minus sup-norm projection for Q_next = <phi_{h+1}, w_next>; returns (Delta, ||Delta||_Sigma)."""
    q_next = Probe(h, w_next).q_next(mdp)
    reg = regression_vector(dataset, covariances, mdp, h, policy, w_next)
    proj, _ = sup_norm_projection(mdp, policy, h, q_next, radius)
    delta = reg - proj
    return delta, covariances[h].norm(delta)


# ---------------------------------------------------------------------------
# Probe sets and the good event


@dataclass
class Probe:
    """A (Q_{h+1}, pi_{h+1}) pair: Q_{h+1} = <phi_{h+1}, w_next>, pi_{h+1} = softmax(theta_next)."""

    h: int
    w_next: np.ndarray | None = None
    theta_next: np.ndarray | None = None

    def policy(self, mdp: TabularLinearMdp) -> SoftmaxPolicy:
        thetas = [np.zeros(d) for d in mdp.dims]
        if self.theta_next is not None:
            thetas[self.h + 1] = np.asarray(self.theta_next, dtype=float)
        return SoftmaxPolicy(tuple(thetas))

    def q_next(self, mdp: TabularLinearMdp):
        if self.h == mdp.horizon - 1:
            return None
        f = mdp.features[self.h + 1] @ np.asarray(self.w_next, dtype=float)
        return np.where(mdp.action_mask[self.h + 1], f, 0.0)


def _uniform_ball(rng, d, radius):
    v = rng.standard_normal(d)
    v /= max(np.linalg.norm(v), 1e-300)
    return v * radius * rng.uniform() ** (1.0 / d)


def make_probes(mdp: TabularLinearMdp, radii: Sequence[float], count: int, rng_seed=None,
                theta_radius: float = 1.0, extra: Sequence[Probe] = ()) -> list[Probe]:
    """Zero probe plus ``count`` random probes per stage, plus any hand-made ones."""
    rng = np.random.default_rng(rng_seed)
    H = mdp.horizon
    probes = []
    for h in range(H):
        if h == H - 1:
            probes.append(Probe(h))
            continue
        d = mdp.dim(h + 1)
        probes.append(Probe(h, np.zeros(d), np.zeros(d)))
        for _ in range(count):
            probes.append(Probe(h, _uniform_ball(rng, d, radii[h + 1]), _uniform_ball(rng, d, theta_radius)))
    probes.extend(extra)
    return probes


@dataclass
class ClosednessReport:
    eps: list
    residuals: list   # per probe
    probes: list
    lower_bound: bool = True  # sampled probes only bound the true sup from below


def closedness_report(mdp: TabularLinearMdp, radii: Sequence[float], probe_count: int, rng_seed=None,
                      theta_radius: float = 1.0, extra: Sequence[Probe] = ()) -> ClosednessReport:
    """Per-stage max over probes of the sup-norm projection residual."""
    probes = make_probes(mdp, radii, probe_count, rng_seed, theta_radius, extra)
    eps = [0.0] * mdp.horizon
    residuals = []
    for p in probes:
        _, res = sup_norm_projection(mdp, p.policy(mdp), p.h, p.q_next(mdp), radii[p.h])
        residuals.append(res)
        eps[p.h] = max(eps[p.h], res)
    return ClosednessReport(eps, residuals, probes)


class ProbeStatistics:
    """Regression targets for a fixed probe set, reusable across resampled datasets.

    For every stage the projections S(F) are data independent and computed
    once; ``targets`` evaluates y_k = r_k + <phi_bar_{h+1}(s'_k), w_next> per
    probe for one dataset.
    """

    def __init__(self, mdp: TabularLinearMdp, probes: Sequence[Probe], radii: Sequence[float]):
        self.mdp = mdp
        self.by_stage = [[p for p in probes if p.h == h] for h in range(mdp.horizon)]
        self.projections = []
        for h, group in enumerate(self.by_stage):
            cols = [sup_norm_projection(mdp, p.policy(mdp), h, p.q_next(mdp), radii[h])[0] for p in group]
            self.projections.append(np.array(cols).T if cols else np.zeros((mdp.dim(h), 0)))

    def targets(self, dataset: OfflineDataset, h: int) -> tuple[np.ndarray, np.ndarray]:
        idx = dataset.stage_index(h)
        mdp = self.mdp
        phi = mdp.features[h][dataset.s[idx], dataset.a[idx]]
        Y = np.repeat(dataset.r[idx][:, None], len(self.by_stage[h]), axis=1)
        if h < mdp.horizon - 1 and idx.size:
            sp = dataset.sp[idx]
            for j, p in enumerate(self.by_stage[h]):
                pol = p.policy(mdp)
                nxt = np.einsum("ka,kad->kd", pol.probs(mdp, h + 1, sp), mdp.features[h + 1][sp])
                Y[:, j] += nxt @ p.w_next
        return phi, Y

    def errors(self, dataset: OfflineDataset, lam: float) -> list[float]:
        """Per-stage sup over probes of ||regression - projection||_{Sigma_h}."""
        out = []
        for h in range(self.mdp.horizon):
            phi, Y = self.targets(dataset, h)
            sigma = lam * np.eye(phi.shape[1]) + phi.T @ phi
            S_hat = np.linalg.solve(sigma, phi.T @ Y)
            D = S_hat - self.projections[h]
            out.append(float(np.sqrt(np.einsum("ip,ij,jp->p", D, sigma, D).max(initial=0.0))))
        return out


def calibrated_beta(dataset: OfflineDataset, stats: ProbeStatistics, lam: float, delta: float,
                    resamples: int = 200, rng_seed=None, eps: Sequence[float] | float = 0.0) -> list[float]:
    """Bootstrap radii: sqrt(lam) + sqrt(n_h) eps_h + quantile of the bootstrap deviation.

    The deviation is sup over probes of ||S*(F) - S_hat(F)||_{Sigma*} where
    S* is the regression on a with-replacement resample of the stage data.
    The quantile level is 1 - delta/H so that the stages hold jointly.
    """
    if not 0 < delta < 1:
        raise ValidationError("delta must lie in (0, 1)")
    rng = np.random.default_rng(rng_seed)
    H = stats.mdp.horizon
    eps = [float(eps)] * H if np.isscalar(eps) else list(eps)
    out = []
    for h in range(H):
        phi, Y = stats.targets(dataset, h)
        n, d = phi.shape
        base = math.sqrt(lam) + math.sqrt(n) * eps[h]
        if n == 0:
            out.append(base)
            continue
        S_hat = np.linalg.solve(lam * np.eye(d) + phi.T @ phi, phi.T @ Y)
        draws = np.empty(resamples)
        for b in range(resamples):
            idx = rng.integers(n, size=n)
            pb, yb = phi[idx], Y[idx]
            sig = lam * np.eye(d) + pb.T @ pb
            D = np.linalg.solve(sig, pb.T @ yb) - S_hat
            draws[b] = np.sqrt(np.einsum("ip,ij,jp->p", D, sig, D).max())
        out.append(base + float(np.quantile(draws, 1 - delta / H)))
    return out


# ---------------------------------------------------------------------------
# Value bounds


@dataclass
class Prop2Report:
    value_gap: float         # V^pi on induced - V^pi on base; bound (a) wants <= sum eps
    bound_a: float
    comparator_gaps: list    # |V^comp induced - V^comp base|
    comparator_bounds: list  # 2 sum beta ||phi_bar||_{Sigma^-1} + sum eps
    margins: dict = field(default_factory=dict)

    @property
    def holds_a(self) -> bool:
        return self.margins["a"] >= -1e-6

    @property
    def holds_b(self) -> bool:
        return all(m >= -1e-6 for m in self.margins["b"])


def verify_proposition2(mdp: TabularLinearMdp, policy: Policy, comparators: Sequence[Policy],
                        solution: CriticSolution, beta: Sequence[float], eps: Sequence[float],
                        covariances: Sequence[CumulativeCovariance]) -> Prop2Report:
    """Check the induced-MDP value bounds for the evaluated policy and each comparator."""
    induced = induced_mdp(mdp, policy, solution)
    eps_sum = float(sum(eps))
    gap_a = induced.value(policy) - evaluate_policy_exact(mdp, policy).v1
    gaps, bounds = [], []
    for comp in comparators:
        g = abs(induced.value(comp) - evaluate_policy_exact(mdp, comp).v1)
        gaps.append(g)
        bounds.append(uncertainty(comp, beta, covariances, mdp) + eps_sum)
    margins = {"a": eps_sum - gap_a, "b": [b - g for b, g in zip(bounds, gaps)]}
    return Prop2Report(gap_a, eps_sum, gaps, bounds, margins)


def best_predictor_sequence(mdp: TabularLinearMdp, policy: Policy, radii: Sequence[float]):
    """Backward sup-norm projections Q_hat_h = <phi_h, S_h(Q_hat_{h+1})>; returns (Q_hat tables, residuals)."""
    H = mdp.horizon
    q_hat, res = [None] * H, [0.0] * H
    q_next = None
    for h in range(H - 1, -1, -1):
        w, res[h] = sup_norm_projection(mdp, policy, h, q_next, radii[h])
        q_hat[h] = np.where(mdp.action_mask[h], mdp.features[h] @ w, 0.0)
        q_next = q_hat[h]
    return q_hat, res


def pessimism_gap(mdp: TabularLinearMdp, policy: Policy, solution: CriticSolution) -> float:
    """V^pi(s1) - V_critic(s1); non-negative when the critic is pessimistic at s1."""
    return evaluate_policy_exact(mdp, policy).v1 - solution.value
