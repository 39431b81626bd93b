"""Constructed MDP families: the hypercube lower-bound instances, the two
chain MDPs that separate the linear-structure assumptions, and a handful of
desk-scale generators used by tests and the command line.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import GenerativePlan, OfflineDataset, build_covariances, collect_dataset
from .mdp import Policy, TabularLinearMdp, TabularPolicy, ValidationError, evaluate_policy_exact

# ---------------------------------------------------------------------------
# Hypercube lower-bound family


MAX_EXACT_DIM = 10


@dataclass(frozen=True, eq=False)
class ActionSetCompact:
    """Implicit action set {-1, 0, +1}^d with a small enumerated subset.

    The enumerated list holds the probe actions e_1..e_d and 0 followed by
    the 2^d sign vectors (deduplicated, so for d = 1 the probe e_1 doubles
    as the sign vector +1).
    """

    d: int
    actions: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if not 1 <= self.d <= MAX_EXACT_DIM:
            raise ValidationError(f"exact enumeration supports 1 <= d <= {MAX_EXACT_DIM}")
        rows = [tuple(int(i == j) for i in range(self.d)) for j in range(self.d)]
        rows.append((0,) * self.d)
        seen = set(rows)
        for sgn in itertools.product((-1, 1), repeat=self.d):
            if sgn not in seen:
                rows.append(sgn)
                seen.add(sgn)
        object.__setattr__(self, "actions", np.array(rows, dtype=float))

    def __contains__(self, a) -> bool:
        a = np.asarray(a)
        return a.shape == (self.d,) and bool(np.isin(a, (-1, 0, 1)).all())

    @property
    def probe_indices(self) -> list[int]:
        return list(range(self.d + 1))

    def index(self, a) -> int:
        hits = np.flatnonzero((self.actions == np.asarray(a, dtype=float)).all(axis=1))
        if hits.size == 0:
            raise ValidationError(f"action {a} is not enumerated")
        return int(hits[0])

    def sign_indices(self) -> list[int]:
        return [i for i, a in enumerate(self.actions) if np.all(np.abs(a) == 1)]


def hypercube_features(actions: np.ndarray) -> np.ndarray:
    """[a / sqrt(2d), 1 / sqrt(2)] for each row a."""
    d = actions.shape[1]
    return np.hstack([actions / math.sqrt(2 * d), np.full((actions.shape[0], 1), 1 / math.sqrt(2))])


@dataclass(frozen=True, eq=False)
class LowerBoundInstance:
    d: int
    horizon: int
    n: int
    u: np.ndarray          # (H, d) signs
    gap_scale: float
    action_set: ActionSetCompact
    mdp: TabularLinearMdp

    @property
    def n_sub(self) -> int:
        return self.n // self.horizon

    def expected_action(self, policy) -> np.ndarray:
        """(H, d) array of E_{a ~ pi_h}[a]; ``policy`` is a Policy or an (H, A) probability array."""
        probs = _stage_probs(self, policy)
        return probs @ self.action_set.actions


def _stage_probs(inst: LowerBoundInstance, policy) -> np.ndarray:
    if isinstance(policy, Policy):
        return np.array([policy.probs(inst.mdp, h)[0] for h in range(inst.horizon)])
    p = np.asarray(policy, dtype=float)
    if p.shape != (inst.horizon, inst.action_set.actions.shape[0]):
        raise ValidationError("policy table must be (H, number of enumerated actions)")
    return p


def make_lower_bound_instance(d: int, H: int, n: int, u, rng_seed=None, probe_schedule: bool = True):
    """Build the instance for sign pattern ``u`` and its fixed-schedule dataset.

    Each stage receives n/H samples; the d+1 probe actions are played in
    round-robin order, so each is played n_sub/(d+1) times when that divides.
    """
    if d < 1 or H < 1:
        raise ValidationError("need d >= 1 and H >= 1")
    if n < 2 * d ** 3 * H ** 3:
        raise ValidationError(f"sample size must be at least 2 d^3 H^3 = {2 * d ** 3 * H ** 3}")
    if n % H:
        raise ValidationError("sample size must be divisible by H")
    u = np.asarray(u, dtype=float).reshape(H, d)
    if not np.all(np.abs(u) == 1):
        raise ValidationError("u must have entries in {-1, +1}")
    gap = d * math.sqrt(H) / math.sqrt(2 * n)
    if gap > 1 / (2 * math.sqrt(d) * H) + 1e-15:
        raise ValidationError("gap scale violates the weight-radius condition")
    aset = ActionSetCompact(d)
    A = aset.actions
    feats = hypercube_features(A)[None]
    mdp = TabularLinearMdp(
        features=tuple(feats.copy() for _ in range(H)),
        transitions=tuple(np.ones((1, A.shape[0], 1)) for _ in range(H - 1)),
        rewards=tuple((gap * (A @ u[h]) / math.sqrt(2 * d))[None] for h in range(H)),
        action_mask=tuple(np.ones((1, A.shape[0]), dtype=bool) for _ in range(H)),
        reward_noise="gaussian",
        metadata={"family": "hypercube", "d": d, "H": H, "n": n, "u": u.tolist(), "gap_scale": gap},
    )
    inst = LowerBoundInstance(d, H, n, u, gap, aset, mdp)
    n_sub = n // H
    probes = [(h, 0, aset.probe_indices[k % (d + 1)]) for h in range(H) for k in range(n_sub)]
    data = collect_dataset(mdp, GenerativePlan(probes, name="probe"), rng_seed)
    return inst, data


def value_gap(inst: LowerBoundInstance, policy) -> float:
    """(delta / sqrt(2d)) sum_h sum_i |u_hi - E_pi[a]_i|, which equals V* - V^pi exactly."""
    ea = inst.expected_action(policy)
    return inst.gap_scale / math.sqrt(2 * inst.d) * float(np.abs(inst.u - ea).sum())


def hamming_reduction(inst: LowerBoundInstance, policy) -> tuple[float, int]:
    """(delta / sqrt(2d)) * Hamming(u^pi, u) with sign(0) := +1; returns (bound, distance)."""
    ea = inst.expected_action(policy)
    u_pi = np.where(ea >= 0, 1.0, -1.0)
    dist = int((u_pi != inst.u).sum())
    return inst.gap_scale / math.sqrt(2 * inst.d) * dist, dist


def kl_closed_form(inst: LowerBoundInstance) -> float:
    """n_sub * delta^2 / d^2."""
    return inst.n_sub * inst.gap_scale ** 2 / inst.d ** 2


def kl_between_datasets(inst_u: LowerBoundInstance, inst_v: LowerBoundInstance, dataset: OfflineDataset) -> float:
    """KL between the reward-noise laws of two instances on a shared design, summed per sample.

    Rewards are unit-variance Gaussians, so each record contributes
    (mean_u - mean_v)^2 / 2.
    """
    if inst_u.mdp.horizon != inst_v.mdp.horizon:
        raise ValidationError("instances must share the horizon")
    total = 0.0
    for h, s, a in zip(dataset.h, dataset.s, dataset.a):
        diff = inst_u.mdp.rewards[h][s, a] - inst_v.mdp.rewards[h][s, a]
        total += 0.5 * diff * diff
    return float(total)


def random_stage_policies(inst: LowerBoundInstance, count: int, rng_seed=None) -> list[np.ndarray]:
    """Dirichlet-random (H, A) probability tables, concentration varied per draw."""
    rng = np.random.default_rng(rng_seed)
    A = inst.action_set.actions.shape[0]
    out = []
    for _ in range(count):
        alpha = 10 ** rng.uniform(-1.5, 1.0)
        out.append(rng.dirichlet(np.full(A, alpha), size=inst.horizon))
    return out


def sign_policies(inst: LowerBoundInstance) -> list[np.ndarray]:
    """Deterministic policies that play one sign vector at every stage."""
    A = inst.action_set.actions.shape[0]
    out = []
    for k in inst.action_set.sign_indices():
        p = np.zeros((inst.horizon, A))
        p[:, k] = 1.0
        out.append(p)
    return out


def hypercube_uncertainty(inst: LowerBoundInstance, covariances, policy_table, beta) -> float:
    feats = inst.mdp.features[0][0]
    total = 0.0
    for h in range(inst.horizon):
        phibar = policy_table[h] @ feats
        total += beta * covariances[h].inv_norm(phibar)
    return 2.0 * total


def uncertainty_upper_check(inst: LowerBoundInstance, dataset: OfflineDataset, policies: int = 1000,
                            rng_seed=None, c: float = 10.0, beta: float | None = None, lam: float = 1.0):
    """(max swept U(pi; sqrt d), c d H sqrt(d / n_sub)) over random and sign policies."""
    covs = build_covariances(dataset, inst.mdp, lam)
    beta = math.sqrt(inst.d) if beta is None else beta
    sweep = random_stage_policies(inst, policies, rng_seed) + sign_policies(inst)
    worst = max(hypercube_uncertainty(inst, covs, p, beta) for p in sweep)
    return worst, c * inst.d * inst.horizon * math.sqrt(inst.d / inst.n_sub)


# ---------------------------------------------------------------------------
# Chain MDPs


def make_chain_mdp(N: int, variant: str = "a") -> TabularLinearMdp:
    """Chain with horizon N + 1 and only the reachable states at each stage.

    Stage 0 holds the origin; stage h >= 1 holds states -h (index 0) and +h
    (index 1). Action index 0 moves left and index 1 moves right; away from
    the origin only the outward move is available. The last stage pays -1
    on the left end and +1 on the right end.
    """
    if N < 1:
        raise ValidationError("N must be at least 1")
    if variant not in ("a", "b"):
        raise ValidationError("variant must be 'a' or 'b'")
    H = N + 1
    feats, trans, rews, masks, labels = [], [], [], [], []
    for h in range(H):
        if h == 0:
            S, mask = 1, np.array([[True, True]])
            labels.append([0])
        else:
            S, mask = 2, np.array([[True, False], [False, True]])
            labels.append([-h, h])
        if h == 0 or variant == "a":
            f = np.zeros((S, 2, 1))
            f[..., 0] = np.where(mask, [-1.0, 1.0], 0.0)
        else:
            f = np.zeros((S, 2, 2))
            f[0, 0] = [0.0, 1.0]
            f[1, 1] = [1.0, 0.0]
        r = np.zeros((S, 2))
        if h == H - 1:
            if h == 0:
                r[0] = [-1.0, 1.0]
            else:
                r[0, 0], r[1, 1] = -1.0, 1.0
        if h < H - 1:
            P = np.zeros((S, 2, 2))
            if h == 0:
                P[0, 0, 0] = P[0, 1, 1] = 1.0
            else:
                P[0, 0, 0] = P[1, 1, 1] = 1.0
                P[0, 1, 0] = P[1, 0, 1] = 1.0  # unavailable actions; rows must still be distributions
            trans.append(P)
        feats.append(f)
        rews.append(r)
        masks.append(mask)
    return TabularLinearMdp(tuple(feats), tuple(trans), tuple(rews), tuple(masks), reward_noise="none",
                            metadata={"family": "chain", "N": N, "variant": variant, "state_labels": labels})


def chain_adversarial_probe(mdp: TabularLinearMdp):
    """The stage-0 probe with Q_1 = <phi, [1, 1]> that defeats feature map (b)."""
    from .analysis import Probe
    if mdp.horizon < 2 or mdp.dim(1) != 2:
        raise ValidationError("adversarial probe needs the two-dimensional chain features")
    return Probe(0, np.array([1.0, 1.0]), np.zeros(2))


# ---------------------------------------------------------------------------
# Desk-scale families


def random_tabular_mdp(rng, max_states: int = 4, max_actions: int = 3, max_horizon: int = 3,
                       dim: int | None = None, reward_scale: float = 0.3,
                       reward_noise: str = "gaussian") -> TabularLinearMdp:
    """Random MDP with features in the unit ball and some actions masked out."""
    H = int(rng.integers(1, max_horizon + 1))
    S = [int(rng.integers(1, max_states + 1)) for _ in range(H)]
    S[0] = max(S[0], 1)
    A = int(rng.integers(1, max_actions + 1))
    d = int(rng.integers(1, 4)) if dim is None else dim
    feats, trans, rews, masks = [], [], [], []
    for h in range(H):
        mask = rng.uniform(size=(S[h], A)) < 0.8
        mask[np.arange(S[h]), rng.integers(A, size=S[h])] = True
        f = rng.normal(size=(S[h], A, d))
        f /= np.maximum(np.linalg.norm(f, axis=-1, keepdims=True), 1.0) * rng.uniform(1.0, 2.0, size=(S[h], A, 1))
        feats.append(np.where(mask[..., None], f, 0.0))
        rews.append(np.where(mask, rng.uniform(-reward_scale, reward_scale, size=(S[h], A)), 0.0))
        masks.append(mask)
        if h < H - 1:
            trans.append(rng.dirichlet(np.ones(S[h + 1]), size=(S[h], A)))
    return TabularLinearMdp(tuple(feats), tuple(trans), tuple(rews), tuple(masks), reward_noise=reward_noise,
                            metadata={"family": "random"})


def linear_mdp(rng, n_states: int = 3, horizon: int = 2, reward_scale: float = 0.3,
               reward_noise: str = "gaussian", mixtures: int = 2) -> TabularLinearMdp:
    """Low-rank MDP with d = 2 simplex features, so Q^pi is linear for every policy.

    Each state offers the two vertex actions e1, e2 and ``mixtures`` random
    convex combinations; P(.|s,a) = phi_1 mu_1 + phi_2 mu_2 and
    r(s,a) = <phi(s,a), theta_h>.
    """
    A = 2 + mixtures
    feats, trans, rews, masks = [], [], [], []
    for h in range(horizon):
        S = 1 if h == 0 else n_states
        f = np.zeros((S, A, 2))
        f[:, 0] = [1.0, 0.0]
        f[:, 1] = [0.0, 1.0]
        for k in range(mixtures):
            p = rng.uniform(size=S)
            f[:, 2 + k, 0], f[:, 2 + k, 1] = p, 1 - p
        theta = rng.uniform(0, reward_scale, size=2)
        feats.append(f)
        rews.append(f @ theta)
        masks.append(np.ones((S, A), dtype=bool))
        if h < horizon - 1:
            mu = rng.dirichlet(np.ones(n_states), size=2)
            trans.append(np.einsum("sai,it->sat", f, mu))
    return TabularLinearMdp(tuple(feats), tuple(trans), tuple(rews), tuple(masks), reward_noise=reward_noise,
                            metadata={"family": "linear", "n_states": n_states, "horizon": horizon})


def coverage_gap_mdp(good_mean: float = -0.1, hidden_mean: float = -0.6, thin_mean: float = -0.5,
                     thin_actions: int = 2) -> TabularLinearMdp:
    """One-step problem with one-hot features.

    Action 0 is the best action, action 1 is never sampled (its ridge
    estimate of 0 looks better than action 0's true mean), and the thin
    actions are sampled once each, so their estimates can be inflated by
    reward noise.
    """
    A = 2 + thin_actions
    f = np.eye(A)[None]
    r = np.array([[good_mean, hidden_mean] + [thin_mean] * thin_actions])
    return TabularLinearMdp((f,), (), (r,), (np.ones((1, A), dtype=bool),), reward_noise="gaussian",
                            metadata={"family": "coverage-gap"})


def coverage_gap_dataset(mdp: TabularLinearMdp, good_samples: int = 50, rng_seed=None) -> OfflineDataset:
    A = mdp.n_actions(0)
    probes = [(0, 0, 0)] * good_samples + [(0, 0, a) for a in range(2, A)]
    return collect_dataset(mdp, GenerativePlan(probes, name="coverage-gap"), rng_seed)


def one_hot_mdp_sequence(rng, T: int, n_states: int = 2, n_actions: int = 4, horizon: int = 3,
                         reward_scale: float = 0.1) -> tuple[list[TabularLinearMdp], TabularLinearMdp]:
    """T MDPs sharing transitions and one-hot features, rewards perturbed per round.

    Returns (sequence, mean-reward MDP). With |r| <= reward_scale every Q
    table has norm at most sqrt(S A) H reward_scale.
    """
    S = [1] + [n_states] * (horizon - 1)
    d = [S[h] * n_actions for h in range(horizon)]
    feats = tuple(np.eye(d[h]).reshape(S[h], n_actions, d[h]) for h in range(horizon))
    trans = tuple(rng.dirichlet(np.ones(S[h + 1]), size=(S[h], n_actions)) for h in range(horizon - 1))
    masks = tuple(np.ones((S[h], n_actions), dtype=bool) for h in range(horizon))
    base = [rng.uniform(-reward_scale / 2, reward_scale / 2, size=(S[h], n_actions)) for h in range(horizon)]
    seq = []
    for _ in range(T):
        rw = tuple(np.clip(b + rng.uniform(-reward_scale / 2, reward_scale / 2, size=b.shape),
                           -reward_scale, reward_scale) for b in base)
        seq.append(TabularLinearMdp(feats, trans, rw, masks, reward_noise="none"))
    mean = TabularLinearMdp(feats, trans, tuple(np.mean([m.rewards[h] for m in seq], axis=0) for h in range(horizon)),
                            masks, reward_noise="none")
    return seq, mean


GENERATORS = ("hypercube", "chain", "linear", "coverage-gap", "random")
