"""Non-pessimistic comparison methods."""
from __future__ import annotations

import numpy as np

from .data import OfflineDataset, build_covariances
from .mdp import TabularLinearMdp, TabularPolicy


def greedy_lsvi(dataset: OfflineDataset, mdp: TabularLinearMdp, lam: float = 1.0):
    """Backward ridge regression on max_a Q_{h+1}, then the per-stage argmax policy.

    No bonus, no clipping and no radius constraint: this is the estimator
    that trusts extrapolated values for directions the data never covered.
    Returns (policy, weights).
    """
    covs = build_covariances(dataset, mdp, lam)
    H = mdp.horizon
    ws = [None] * H
    acts = [None] * H
    q_next = None
    for h in range(H - 1, -1, -1):
        idx = dataset.stage_index(h)
        phi = mdp.features[h][dataset.s[idx], dataset.a[idx]]
        y = dataset.r[idx].astype(float)
        if h < H - 1 and idx.size:
            y = y + q_next.max(axis=1)[dataset.sp[idx]]
        ws[h] = covs[h].solve(phi.T @ y) if idx.size else np.zeros(mdp.dim(h))
        q = np.where(mdp.action_mask[h], mdp.features[h] @ ws[h], -np.inf)
        acts[h] = q.argmax(axis=1)
        q_next = q
    return TabularPolicy.deterministic(mdp, acts), ws
