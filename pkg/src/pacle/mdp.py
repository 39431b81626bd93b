"""Finite-horizon tabular MDPs with per-stage linear features.

Stages are zero-based throughout (``h = 0 .. H-1``). Every stage carries its
own state count, action count and feature dimension, so arrays are stored as
per-stage lists rather than one stacked tensor. The terminal value
``Q_{H+1}`` is identically zero.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MDP_FORMAT = "mdp_spec_v1"
NOISE_MODELS = ("gaussian", "none")


class ValidationError(ValueError):
    """Raised when an input violates a structural precondition."""


@dataclass(frozen=True, eq=False)
class TabularLinearMdp:
    """Enumerable finite-horizon MDP with linear features.

    ``features[h]`` has shape ``(S_h, A_h, d_h)``, ``transitions[h]`` has shape
    ``(S_h, A_h, S_{h+1})`` for ``h < H-1`` and ``rewards[h]`` has shape
    ``(S_h, A_h)``. ``action_mask[h][s, a]`` is False for actions that are not
    available in state ``s``; masked entries carry zero features and rewards.
    """

    features: tuple
    transitions: tuple
    rewards: tuple
    action_mask: tuple
    reward_noise: str = "gaussian"
    initial_state: int = 0
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        feats = tuple(np.asarray(f, dtype=float) for f in self.features)
        trans = tuple(np.asarray(p, dtype=float) for p in self.transitions)
        rews = tuple(np.asarray(r, dtype=float) for r in self.rewards)
        if self.action_mask is None:
            mask = tuple(np.ones(f.shape[:2], dtype=bool) for f in feats)
        else:
            mask = tuple(np.asarray(m, dtype=bool) for m in self.action_mask)
        for arr in feats + trans + rews + mask:
            arr.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "transitions", trans)
        object.__setattr__(self, "rewards", rews)
        object.__setattr__(self, "action_mask", mask)
        self._validate()

    def _validate(self):
        H = len(self.features)
        if H < 1:
            raise ValidationError("horizon must be positive")
        if len(self.rewards) != H or len(self.action_mask) != H:
            raise ValidationError("features, rewards and action_mask need one entry per stage")
        if len(self.transitions) != H - 1:
            raise ValidationError(f"expected {H - 1} transition tables, got {len(self.transitions)}")
        if self.reward_noise not in NOISE_MODELS:
            raise ValidationError(f"unknown reward noise model {self.reward_noise!r}")
        for h in range(H):
            f, r, m = self.features[h], self.rewards[h], self.action_mask[h]
            if f.ndim != 3:
                raise ValidationError(f"features[{h}] must be (S, A, d)")
            if r.shape != f.shape[:2] or m.shape != f.shape[:2]:
                raise ValidationError(f"stage {h}: rewards/mask shape mismatch with features")
            if not m.any(axis=1).all():
                raise ValidationError(f"stage {h}: every state needs at least one action")
            if np.linalg.norm(f, axis=-1).max() > 1 + 1e-12:
                raise ValidationError(f"stage {h}: feature norm exceeds 1")
            if np.abs(r).max() > 1 + 1e-12:
                raise ValidationError(f"stage {h}: |reward| exceeds 1")
            if h < H - 1:
                p = self.transitions[h]
                if p.shape != f.shape[:2] + (self.features[h + 1].shape[0],):
                    raise ValidationError(f"transitions[{h}] has shape {p.shape}")
                if (p < 0).any():
                    raise ValidationError(f"transitions[{h}] has negative entries")
                rows = p.sum(axis=-1)[m]
                if np.abs(rows - 1).max() > 1e-12:
                    raise ValidationError(f"transitions[{h}] rows do not sum to one")
        if not 0 <= self.initial_state < self.features[0].shape[0]:
            raise ValidationError("initial state out of range")

    @property
    def horizon(self) -> int:
        return len(self.features)

    def n_states(self, h: int) -> int:
        return self.features[h].shape[0]

    def n_actions(self, h: int) -> int:
        return self.features[h].shape[1]

    def dim(self, h: int) -> int:
        return self.features[h].shape[2]

    @property
    def dims(self) -> list[int]:
        return [self.dim(h) for h in range(self.horizon)]

    @property
    def max_actions(self) -> int:
        """Largest number of simultaneously available actions in any state."""
        return int(max(m.sum(axis=1).max() for m in self.action_mask))

    def to_dict(self) -> dict:
        return {
            "format": MDP_FORMAT,
            "horizon": self.horizon,
            "initial_state": int(self.initial_state),
            "reward_noise": self.reward_noise,
            "features": [f.tolist() for f in self.features],
            "transitions": [p.tolist() for p in self.transitions],
            "rewards": [r.tolist() for r in self.rewards],
            "action_mask": [m.astype(int).tolist() for m in self.action_mask],
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, spec: dict) -> "TabularLinearMdp":
        if spec.get("format") != MDP_FORMAT:
            raise ValidationError(f"expected format {MDP_FORMAT!r}, got {spec.get('format')!r}")
        mdp = cls(
            features=spec["features"],
            transitions=spec["transitions"],
            rewards=spec["rewards"],
            action_mask=spec.get("action_mask"),
            reward_noise=spec.get("reward_noise", "gaussian"),
            initial_state=int(spec.get("initial_state", 0)),
            metadata=dict(spec.get("metadata", {})),
        )
        if mdp.horizon != spec.get("horizon", mdp.horizon):
            raise ValidationError("horizon field disagrees with table lengths")
        return mdp

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "TabularLinearMdp":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# Policies


def softmax_masked(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the available actions, with max subtraction."""
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


class Policy:
    """Anything that yields per-stage action distributions on a tabular MDP."""

    def probs(self, mdp: TabularLinearMdp, h: int, states=None) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class TabularPolicy(Policy):
    """Explicit ``(S_h, A_h)`` probability tables; admits deterministic comparators."""

    tables: tuple

    def __post_init__(self):
        object.__setattr__(self, "tables", tuple(np.asarray(t, dtype=float) for t in self.tables))

    def probs(self, mdp, h, states=None):
        t = self.tables[h]
        return t if states is None else t[np.asarray(states)]

    @classmethod
    def deterministic(cls, mdp: TabularLinearMdp, actions: Sequence) -> "TabularPolicy":
        tables = []
        for h in range(mdp.horizon):
            t = np.zeros((mdp.n_states(h), mdp.n_actions(h)))
            t[np.arange(mdp.n_states(h)), np.asarray(actions[h], dtype=int)] = 1.0
            tables.append(t)
        return cls(tuple(tables))

    @classmethod
    def uniform(cls, mdp: TabularLinearMdp) -> "TabularPolicy":
        return cls(tuple(m / m.sum(axis=1, keepdims=True) for m in mdp.action_mask))


@dataclass(frozen=True, eq=False)
class SoftmaxPolicy(Policy):
    """pi_h(a|s) proportional to exp(<phi_h(s,a), theta_h>) over available actions."""

    thetas: tuple

    def __post_init__(self):
        object.__setattr__(self, "thetas", tuple(np.asarray(t, dtype=float) for t in self.thetas))

    @classmethod
    def zeros(cls, dims: Sequence[int]) -> "SoftmaxPolicy":
        return cls(tuple(np.zeros(d) for d in dims))

    def probs(self, mdp, h, states=None):
        feats, mask = mdp.features[h], mdp.action_mask[h]
        if states is not None:
            idx = np.asarray(states)
            feats, mask = feats[idx], mask[idx]
        return softmax_masked(feats @ self.thetas[h], mask)


@dataclass(frozen=True, eq=False)
class MixturePolicy(Policy):
    """Uniform mixture drawn once per episode.

    The value of the mixture is the mean of the member values; it is *not*
    the value of the stage-wise averaged policy, so DP helpers treat it
    specially. ``probs`` returns the member-averaged table, which is only
    meaningful for single-stage problems.
    """

    members: tuple

    def __post_init__(self):
        if len(self.members) == 0:
            raise ValidationError("mixture needs at least one member")
        object.__setattr__(self, "members", tuple(self.members))

    def probs(self, mdp, h, states=None):
        return np.mean([m.probs(mdp, h, states) for m in self.members], axis=0)


# ---------------------------------------------------------------------------
# Exact dynamic programming


def _check_next(mdp, h, q_next):
    if h == mdp.horizon - 1:
        return None
    q_next = np.asarray(q_next, dtype=float)
    want = (mdp.n_states(h + 1), mdp.n_actions(h + 1))
    if q_next.shape != want:
        raise ValidationError(f"Q_next has shape {q_next.shape}, expected {want}")
    return q_next


def bellman_apply(mdp: TabularLinearMdp, h: int, policy: Policy, q_next=None) -> np.ndarray:
    """(T^pi_h Q_next)(s,a) = r_h(s,a) + E_{s'} E_{a'~pi_{h+1}} Q_next(s',a')."""
    if not 0 <= h < mdp.horizon:
        raise ValidationError(f"stage {h} outside [0, {mdp.horizon})")
    q_next = _check_next(mdp, h, q_next)
    out = mdp.rewards[h].copy()
    if q_next is not None:
        v_next = (policy.probs(mdp, h + 1) * q_next).sum(axis=1)
        out = out + mdp.transitions[h] @ v_next
    return np.where(mdp.action_mask[h], out, 0.0)


@dataclass
class ValueTables:
    q: list
    v: list
    v1: float  # value at the initial state


def evaluate_policy_exact(mdp: TabularLinearMdp, policy: Policy) -> ValueTables:
    """Backward DP for Q^pi_h and V^pi_h; mixtures average member values."""
    if isinstance(policy, MixturePolicy):
        parts = [evaluate_policy_exact(mdp, m) for m in policy.members]
        return ValueTables(
            q=[np.mean([p.q[h] for p in parts], axis=0) for h in range(mdp.horizon)],
            v=[np.mean([p.v[h] for p in parts], axis=0) for h in range(mdp.horizon)],
            v1=float(np.mean([p.v1 for p in parts])),
        )
    H = mdp.horizon
    q, v = [None] * H, [None] * H
    q_next = None
    for h in range(H - 1, -1, -1):
        q[h] = bellman_apply(mdp, h, policy, q_next)
        v[h] = (policy.probs(mdp, h) * q[h]).sum(axis=1)
        q_next = q[h]
    return ValueTables(q=q, v=v, v1=float(v[0][mdp.initial_state]))


def optimal_values(mdp: TabularLinearMdp) -> tuple[ValueTables, TabularPolicy]:
    """Optimal Q*/V* by backward induction plus a greedy deterministic policy."""
    H = mdp.horizon
    q, v, acts = [None] * H, [None] * H, [None] * H
    v_next = None
    for h in range(H - 1, -1, -1):
        qh = mdp.rewards[h].copy()
        if v_next is not None:
            qh = qh + mdp.transitions[h] @ v_next
        qh = np.where(mdp.action_mask[h], qh, -np.inf)
        acts[h] = qh.argmax(axis=1)
        v[h] = qh.max(axis=1)
        q[h] = np.where(mdp.action_mask[h], qh, 0.0)
        v_next = v[h]
    return ValueTables(q=q, v=v, v1=float(v[0][mdp.initial_state])), TabularPolicy.deterministic(mdp, acts)


def state_occupancy(mdp: TabularLinearMdp, policy: Policy) -> list[np.ndarray]:
    """Exact stage-h state-action occupancy d^pi_h(s,a) from s_1 (forward DP)."""
    if isinstance(policy, MixturePolicy):
        parts = [state_occupancy(mdp, m) for m in policy.members]
        return [np.mean([p[h] for p in parts], axis=0) for h in range(mdp.horizon)]
    rho = np.zeros(mdp.n_states(0))
    rho[mdp.initial_state] = 1.0
    out = []
    for h in range(mdp.horizon):
        d = rho[:, None] * policy.probs(mdp, h)
        out.append(d)
        if h < mdp.horizon - 1:
            rho = np.einsum("sa,sat->t", d, mdp.transitions[h])
    return out


def occupancy_features(mdp: TabularLinearMdp, policy: Policy) -> list[np.ndarray]:
    """phi_bar_h = E_{(S_h, A_h) ~ pi}[phi_h(S_h, A_h)] for every stage."""
    return [np.einsum("sa,sad->d", d, f) for d, f in zip(state_occupancy(mdp, policy), mdp.features)]


def rollout(mdp: TabularLinearMdp, policy: Policy, rng_seed=None, rng=None) -> list[tuple]:
    """Sample one episode; returns ``(h, s, a, r, s_next)`` with ``s_next=-1`` at the end."""
    rng = np.random.default_rng(rng_seed) if rng is None else rng
    if isinstance(policy, MixturePolicy):
        policy = policy.members[rng.integers(len(policy.members))]
    s = mdp.initial_state
    traj = []
    for h in range(mdp.horizon):
        p = policy.probs(mdp, h, [s])[0]
        a = int(rng.choice(p.size, p=p))
        r = sample_reward(mdp, h, s, a, rng)
        if h < mdp.horizon - 1:
            sp = int(rng.choice(mdp.n_states(h + 1), p=mdp.transitions[h][s, a]))
        else:
            sp = -1
        traj.append((h, s, a, r, sp))
        s = sp
    return traj


def sample_reward(mdp: TabularLinearMdp, h: int, s: int, a: int, rng) -> float:
    mean = float(mdp.rewards[h][s, a])
    if mdp.reward_noise == "gaussian":
        return mean + float(rng.standard_normal())
    return mean


def lift_weights(mdp: TabularLinearMdp, weights: Sequence) -> list[np.ndarray]:
    """Q tables <phi_h(s,a), w_h> for a per-stage list of weight vectors."""
    return [np.where(m, f @ np.asarray(w, dtype=float), 0.0)
            for f, m, w in zip(mdp.features, mdp.action_mask, weights)]
