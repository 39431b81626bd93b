"""Offline datasets and per-stage cumulative covariances.

A dataset is an ordered list of ``(h, s, a, r, s')`` records. Each record's
state-action pair is produced from the prefix of earlier records only: the
collection plans below never see future draws, and adaptive plans receive
the prefix explicitly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .mdp import (MixturePolicy, Policy, TabularLinearMdp, ValidationError,
                  sample_reward)

DATASET_FORMAT = "pacle_ds_v1"


@dataclass(frozen=True, eq=False)
class OfflineDataset:
    """Column-oriented store of the ordered sample records."""

    horizon: int
    h: np.ndarray
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    sp: np.ndarray
    prov: tuple = ()

    def __post_init__(self):
        for name, dtype in (("h", int), ("s", int), ("a", int), ("r", float), ("sp", int)):
            arr = np.asarray(getattr(self, name), dtype=dtype).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n = self.h.size
        if not (self.s.size == self.a.size == self.r.size == self.sp.size == n):
            raise ValidationError("record columns have different lengths")
        prov = tuple(self.prov) if self.prov else ("",) * n
        if len(prov) != n:
            raise ValidationError("provenance column has the wrong length")
        object.__setattr__(self, "prov", prov)
        if n and (self.h.min() < 0 or self.h.max() >= self.horizon):
            raise ValidationError("record stage outside [0, H)")

    def __len__(self) -> int:
        return int(self.h.size)

    @property
    def n(self) -> int:
        return len(self)

    def stage_index(self, h: int) -> np.ndarray:
        """Sample indices I_h, in collection order."""
        return np.flatnonzero(self.h == h)

    @property
    def stage_counts(self) -> list[int]:
        return [int((self.h == h).sum()) for h in range(self.horizon)]

    def subset(self, idx) -> "OfflineDataset":
        idx = np.asarray(idx, dtype=int)
        return OfflineDataset(self.horizon, self.h[idx], self.s[idx], self.a[idx],
                              self.r[idx], self.sp[idx], tuple(self.prov[i] for i in idx))

    def records(self):
        for i in range(len(self)):
            yield {"i": i, "h": int(self.h[i]), "s": int(self.s[i]), "a": int(self.a[i]),
                   "r": float(self.r[i]), "sp": int(self.sp[i]), "prov": self.prov[i]}

    def to_jsonl(self, header_extra: dict | None = None) -> str:
        header = {"format": DATASET_FORMAT, "n": len(self), "H": self.horizon}
        header.update(header_extra or {})
        lines = [json.dumps(header, sort_keys=True)]
        lines.extend(json.dumps(rec) for rec in self.records())
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "OfflineDataset":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValidationError("empty dataset file")
        header = json.loads(lines[0])
        if header.get("format") != DATASET_FORMAT:
            raise ValidationError(f"expected format {DATASET_FORMAT!r}")
        recs = [json.loads(ln) for ln in lines[1:]]
        if len(recs) != header["n"]:
            raise ValidationError(f"header announces {header['n']} records, found {len(recs)}")
        if [rec["i"] for rec in recs] != list(range(len(recs))):
            raise ValidationError("records are not in index order")
        col = lambda k: [rec[k] for rec in recs]
        return cls(int(header["H"]), col("h"), col("s"), col("a"), col("r"), col("sp"),
                   tuple(col("prov")))

    def save(self, path, header_extra: dict | None = None) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl(header_extra))

    @classmethod
    def load(cls, path) -> "OfflineDataset":
        with open(path) as fh:
            return cls.from_jsonl(fh.read())


# ---------------------------------------------------------------------------
# Collection plans


@dataclass
class BehaviorPlan:
    """Full episodes from a fixed behavior policy (or a per-episode mixture)."""

    policy: Policy
    episodes: int
    name: str = "behavior"


@dataclass
class GenerativePlan:
    """Explicit list of ``(h, s, a)`` probes, executed in order."""

    probes: Sequence[tuple]
    name: str = "probe"


@dataclass
class AdaptivePlan:
    """Adversary callback mapping the record prefix to the next ``(h, s, a)``.

    The callback receives a read-only :class:`OfflineDataset` holding exactly
    the records collected so far.
    """

    callback: Callable[[OfflineDataset], tuple]
    n: int
    name: str = "adversary"


def _check_probe(mdp: TabularLinearMdp, h: int, s: int, a: int) -> None:
    if not 0 <= h < mdp.horizon:
        raise ValidationError(f"probe stage {h} does not exist")
    if not 0 <= s < mdp.n_states(h):
        raise ValidationError(f"probe state {s} does not exist at stage {h}")
    if not 0 <= a < mdp.n_actions(h) or not mdp.action_mask[h][s, a]:
        raise ValidationError(f"probe action {a} unavailable at stage {h}, state {s}")


def _step(mdp, h, s, a, rng):
    r = sample_reward(mdp, h, s, a, rng)
    if h < mdp.horizon - 1:
        sp = int(rng.choice(mdp.n_states(h + 1), p=mdp.transitions[h][s, a]))
    else:
        sp = -1
    return r, sp


def collect_dataset(mdp: TabularLinearMdp, plan, rng_seed=None) -> OfflineDataset:
    """Run a collection plan against the MDP and return the ordered records."""
    rng = np.random.default_rng(rng_seed)
    cols = {"h": [], "s": [], "a": [], "r": [], "sp": [], "prov": []}

    def push(h, s, a, r, sp, tag):
        for k, v in zip(("h", "s", "a", "r", "sp", "prov"), (h, s, a, r, sp, tag)):
            cols[k].append(v)

    if isinstance(plan, BehaviorPlan):
        members = plan.policy.members if isinstance(plan.policy, MixturePolicy) else (plan.policy,)
        for _ in range(plan.episodes):
            k = int(rng.integers(len(members))) if len(members) > 1 else 0
            pol = members[k]
            s = mdp.initial_state
            for h in range(mdp.horizon):
                p = pol.probs(mdp, h, [s])[0]
                a = int(rng.choice(p.size, p=p))
                r, sp = _step(mdp, h, s, a, rng)
                push(h, s, a, r, sp, f"{plan.name}:{k}")
                s = sp
    elif isinstance(plan, GenerativePlan):
        probes = [tuple(int(x) for x in p) for p in plan.probes]
        for h, s, a in probes:
            _check_probe(mdp, h, s, a)
        for h, s, a in probes:
            r, sp = _step(mdp, h, s, a, rng)
            push(h, s, a, r, sp, plan.name)
    elif isinstance(plan, AdaptivePlan):
        for step in range(plan.n):
            prefix = OfflineDataset(mdp.horizon, cols["h"], cols["s"], cols["a"], cols["r"],
                                    cols["sp"], tuple(cols["prov"]))
            h, s, a = (int(x) for x in plan.callback(prefix))
            _check_probe(mdp, h, s, a)
            r, sp = _step(mdp, h, s, a, rng)
            push(h, s, a, r, sp, f"{plan.name}:{step}")
    else:
        raise ValidationError(f"unknown collection plan {type(plan).__name__}")
    return OfflineDataset(mdp.horizon, cols["h"], cols["s"], cols["a"], cols["r"], cols["sp"],
                          tuple(cols["prov"]))


# ---------------------------------------------------------------------------
# Covariances


@dataclass(frozen=True, eq=False)
class CumulativeCovariance:
    """Sigma_h = lam * I + sum_{i in I_h} phi_i phi_i^T with a cached Cholesky factor."""

    matrix: np.ndarray
    lam: float
    _factor: tuple = field(repr=False, default=None)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        m = 0.5 * (m + m.T)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "_factor", cho_factor(m, lower=True))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def solve(self, v) -> np.ndarray:
        """Sigma^{-1} v (v may be a vector or a column stack)."""
        return cho_solve(self._factor, np.asarray(v, dtype=float))

    def norm(self, v) -> float:
        v = np.asarray(v, dtype=float)
        return float(np.sqrt(max(v @ self.matrix @ v, 0.0)))

    def inv_norm(self, v) -> float:
        v = np.asarray(v, dtype=float)
        return float(np.sqrt(max(v @ self.solve(v), 0.0)))

    def cholesky(self) -> np.ndarray:
        """Lower factor L with Sigma = L L^T."""
        return np.tril(self._factor[0])


def stage_features(mdp: TabularLinearMdp, dataset: OfflineDataset, h: int) -> np.ndarray:
    idx = dataset.stage_index(h)
    return mdp.features[h][dataset.s[idx], dataset.a[idx]]


def build_covariances(dataset: OfflineDataset, features, lam: float = 1.0) -> list[CumulativeCovariance]:
    """One covariance per stage. ``features`` is a TabularLinearMdp (feature lookup)."""
    if lam <= 0:
        raise ValidationError("regularizer lambda must be positive")
    if dataset.horizon != features.horizon:
        raise ValidationError("dataset and feature map disagree on the horizon")
    out = []
    for h in range(dataset.horizon):
        phi = stage_features(features, dataset, h)
        d = features.dim(h)
        if phi.shape[1] != d:
            raise ValidationError(f"stage {h}: feature dimension mismatch")
        out.append(CumulativeCovariance(lam * np.eye(d) + phi.T @ phi, lam))
    return out
