"""Pessimistic least-squares policy evaluation.

For a policy pi the critic picks per-stage weights that satisfy the ridge
regression recursion up to a slack xi_h, with ``||xi_h||_{Sigma_h} <= beta_h``
and ``||w_h||_2 <= D_h``, and minimizes the predicted value at the initial
state over that set.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import CumulativeCovariance, OfflineDataset, build_covariances
from .mdp import Policy, TabularLinearMdp, ValidationError
from .socp import ConicProgram, SolveReport, Tolerances, solve


class CriticInfeasible(ValidationError):
    """The critic program has no feasible point for the configured radii."""

    def __init__(self, message, certificate=None):
        super().__init__(message)
        self.certificate = certificate or {}


@dataclass
class CriticConfig:
    radii: Sequence[float]
    beta: Sequence[float]
    lam: float = 1.0
    tolerances: Tolerances = field(default_factory=Tolerances)

    def __post_init__(self):
        self.radii = [float(x) for x in self.radii]
        self.beta = [float(x) for x in self.beta]
        if len(self.radii) != len(self.beta):
            raise ValidationError("radii and beta must have one entry per stage")
        if any(not 0 < x <= 1 for x in self.radii):
            raise ValidationError("critic radii must lie in (0, 1]")
        if any(b < 0 or not math.isfinite(b) for b in self.beta):
            raise ValidationError("beta must be finite and non-negative")
        if self.lam <= 0:
            raise ValidationError("lambda must be positive")

    @classmethod
    def uniform(cls, horizon: int, radius: float = 1.0, beta: float = 0.0, **kw) -> "CriticConfig":
        return cls([radius] * horizon, [beta] * horizon, **kw)

    def with_beta(self, beta) -> "CriticConfig":
        return CriticConfig(list(self.radii), list(beta), self.lam, self.tolerances)


@dataclass
class CriticSolution:
    w: list
    xi: list
    value: float
    report: SolveReport
    regression: list  # (K_h, b_h) pairs; w_h = xi_h + K_h w_{h+1} + b_h


class RegressionData:
    """Policy-independent pieces of the regression: features, Sigma^-1 Phi^T, rewards.

    Built once per (dataset, lambda) and reused for every policy the actor
    asks about.
    """

    def __init__(self, dataset: OfflineDataset, mdp: TabularLinearMdp, lam: float = 1.0,
                 covariances: Sequence[CumulativeCovariance] | None = None):
        self.dataset, self.mdp, self.lam = dataset, mdp, lam
        self.covariances = list(covariances) if covariances is not None else build_covariances(dataset, mdp, lam)
        if len(self.covariances) != mdp.horizon:
            raise ValidationError("need one covariance per stage")
        self.stages = []
        for h in range(mdp.horizon):
            idx = dataset.stage_index(h)
            phi = mdp.features[h][dataset.s[idx], dataset.a[idx]]
            cov = self.covariances[h]
            if cov.dim != mdp.dim(h):
                raise ValidationError(f"stage {h}: covariance has the wrong dimension")
            self.stages.append({
                "phi": phi,
                "gain": cov.solve(phi.T) if idx.size else np.zeros((mdp.dim(h), 0)),
                "r": dataset.r[idx],
                "sp": dataset.sp[idx],
            })

    def next_features(self, policy: Policy, h: int) -> np.ndarray:
        """Rows phi_bar_{h+1}(s'_k) = sum_a pi_{h+1}(a|s'_k) phi_{h+1}(s'_k, a)."""
        sp = self.stages[h]["sp"]
        if h == self.mdp.horizon - 1 or sp.size == 0:
            return np.zeros((sp.size, self.mdp.dim(h + 1) if h + 1 < self.mdp.horizon else 0))
        if (sp < 0).any():
            raise ValidationError(f"stage {h} record without a next state")
        probs = policy.probs(self.mdp, h + 1, sp)
        return np.einsum("ka,kad->kd", probs, self.mdp.features[h + 1][sp])

    def affine_maps(self, policy: Policy) -> list[tuple]:
        """Per stage (K_h, b_h) with regression(w_next) = K_h w_next + b_h."""
        out = []
        for h, st in enumerate(self.stages):
            b = st["gain"] @ st["r"]
            if h < self.mdp.horizon - 1:
                K = st["gain"] @ self.next_features(policy, h)
            else:
                K = np.zeros((self.mdp.dim(h), 0))
            out.append((K, b))
        return out


def regression_vector(dataset: OfflineDataset, covariances, mdp: TabularLinearMdp, h: int,
                      policy: Policy, w_next=None) -> np.ndarray:
    """Ridge estimate Sigma_h^-1 sum_k phi_hk [r_hk + <phi_bar_{h+1}(s'_hk), w_next>]."""
    idx = dataset.stage_index(h)
    d = mdp.dim(h)
    if idx.size == 0:
        return np.zeros(d)
    phi = mdp.features[h][dataset.s[idx], dataset.a[idx]]
    y = dataset.r[idx].astype(float)
    if h < mdp.horizon - 1:
        if w_next is None:
            raise ValidationError("w_next is required before the last stage")
        sp = dataset.sp[idx]
        nxt = np.einsum("ka,kad->kd", policy.probs(mdp, h + 1, sp), mdp.features[h + 1][sp])
        y = y + nxt @ np.asarray(w_next, dtype=float)
    return covariances[h].solve(phi.T @ y)


def initial_features(mdp: TabularLinearMdp, policy: Policy, s1: int | None = None) -> np.ndarray:
    s1 = mdp.initial_state if s1 is None else s1
    p = policy.probs(mdp, 0, [s1])[0]
    return p @ mdp.features[0][s1]


def assemble_critic_program(reg: RegressionData, policy: Policy, config: CriticConfig,
                            s1: int | None = None) -> tuple[ConicProgram, list]:
    """Build the conic program for ``policy``; returns it with the (K_h, b_h) maps."""
    mdp = reg.mdp
    H = mdp.horizon
    if len(config.beta) != H:
        raise ValidationError(f"config has {len(config.beta)} stages, MDP has {H}")
    maps = reg.affine_maps(policy)
    prog = ConicProgram()
    for h in range(H):
        prog.add_block(f"xi{h}", mdp.dim(h))
        prog.add_block(f"w{h}", mdp.dim(h))
    for h in range(H):
        K, b = maps[h]
        terms = {f"xi{h}": np.eye(mdp.dim(h))}
        if h < H - 1:
            terms[f"w{h + 1}"] = K
        prog.add_equality(f"w{h}", terms, b)
        prog.add_ellipsoid(f"xi{h}", reg.covariances[h].matrix, config.beta[h])
        prog.add_ball(f"w{h}", config.radii[h])
    prog.set_objective("w0", initial_features(mdp, policy, s1))
    return prog, maps


def run_critic(reg: RegressionData, policy: Policy, config: CriticConfig,
               s1: int | None = None) -> CriticSolution:
    """Solve the critic program; raises CriticInfeasible instead of relaxing beta."""
    prog, maps = assemble_critic_program(reg, policy, config, s1)
    report = solve(prog, config.tolerances)
    if report.status == "infeasible":
        raise CriticInfeasible("critic program infeasible: beta or D too small for the data",
                               report.certificate)
    if report.status != "optimal":
        raise CriticInfeasible(f"critic solver stopped with status {report.status}", report.certificate)
    H = reg.mdp.horizon
    w = [report.blocks[f"w{h}"] for h in range(H)]
    xi = [report.blocks[f"xi{h}"] for h in range(H)]
    return CriticSolution(w, xi, report.objective, report, maps)


# ---------------------------------------------------------------------------
# Pessimism radii


def pessimism_vector(delta: float, dims: Sequence[int], counts: Sequence[int], T: int, eta: float,
                     eps: Sequence[float] | float = 0.0, lam: float = 1.0, c: float = 1.0,
                     log_count: str = "samples") -> list[float]:
    """Per-stage radii beta_h from the covering-argument bound.

    ``log_count`` selects what enters the self-normalized log-determinant
    term: ``"samples"`` uses the stage sample count n_h, ``"iterations"``
    uses the actor iteration count T.
    """
    if not 0 < delta < 1:
        raise ValidationError("delta must lie in (0, 1)")
    if lam <= 0:
        raise ValidationError("lambda must be positive")
    if c < 0 or T < 1 or eta <= 0:
        raise ValidationError("need c >= 0, T >= 1 and eta > 0")
    if log_count not in ("samples", "iterations"):
        raise ValidationError("log_count must be 'samples' or 'iterations'")
    H = len(dims)
    if len(counts) != H:
        raise ValidationError("dims and counts differ in length")
    eps = [float(eps)] * H if np.isscalar(eps) else [float(e) for e in eps]
    B = eta * T
    out = []
    for d, n, e in zip(dims, counts, eps):
        m = n if log_count == "samples" else T
        inner = (1 + d * math.log(1 + m / (d * lam)) + d * math.log(1 + 8 * math.sqrt(m))
                 + d * math.log(1 + 16 * B * math.sqrt(T)) + math.log(H / delta))
        out.append(math.sqrt(lam) + math.sqrt(n) * e + c * math.sqrt(inner))
    return out
