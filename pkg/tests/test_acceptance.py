"""Acceptance criteria A1-A9, one pass/fail line each in the terminal summary."""
import itertools
import math
import time

import numpy as np

from pacle import analysis
from pacle.actor import (ActorConfig, mirror_descent_regret_check, optimization_error, run_pacle,
                         softmax_l1_distance)
from pacle.baselines import greedy_lsvi
from pacle.analysis import closedness_report
from pacle.benchmarks import (chain_adversarial_probe, coverage_gap_dataset, coverage_gap_mdp,
                              hamming_reduction, kl_between_datasets, kl_closed_form, linear_mdp,
                              make_chain_mdp, make_lower_bound_instance, one_hot_mdp_sequence,
                              random_stage_policies, random_tabular_mdp, uncertainty_upper_check, value_gap)
from pacle.critic import (CriticConfig, CriticInfeasible, RegressionData, initial_features, pessimism_vector,
                          run_critic)
from pacle.data import BehaviorPlan, build_covariances, collect_dataset
from pacle.mdp import SoftmaxPolicy, TabularPolicy, evaluate_policy_exact, optimal_values

from conftest import record_criterion


def test_a1_critic_exact_in_induced_mdp():
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    residuals, kkts, skipped = [], [], 0
    while len(residuals) < 50:
        m = random_tabular_mdp(rng)
        ds = collect_dataset(m, BehaviorPlan(TabularPolicy.uniform(m), int(rng.integers(0, 30))),
                             int(rng.integers(1 << 30)))
        pol = SoftmaxPolicy(tuple(rng.normal(size=d) * 2 for d in m.dims))
        beta = rng.uniform(0, 5, size=m.horizon)
        try:
            sol = run_critic(RegressionData(ds, m), pol, CriticConfig([1.0] * m.horizon, beta))
        except CriticInfeasible:
            skipped += 1
            continue
        residuals.append(analysis.exactness_residual(analysis.induced_mdp(m, pol, sol), pol))
        kkts.append(sol.report.kkt_residual)
    elapsed = time.perf_counter() - start
    worst = max(residuals)
    ok = worst <= 1e-6 and elapsed < 60
    record_criterion("A1", ok, f"max |Q_lower - Q_induced| = {worst:.2e} <= 1e-6 on 50 instances "
                     f"({skipped} infeasible draws skipped), {elapsed:.1f}s < 60s")
    assert ok


def test_a2_actor_regret():
    start = time.perf_counter()
    H, nA, T = 3, 4, 1000
    eta = math.sqrt(math.log(nA) / T)
    target = 2 * H * math.sqrt(math.log(nA) / T)
    regrets = []
    for k in range(20):
        seq, mean = one_hot_mdp_sequence(np.random.default_rng(200 + k), T, n_actions=nA, horizon=H)
        regrets.append(mirror_descent_regret_check(seq, optimal_values(mean)[1], eta).average_regret)
    elapsed = time.perf_counter() - start
    ok = max(regrets) <= target and elapsed < 120
    record_criterion("A2", ok, f"max average regret {max(regrets):.4f} <= {target:.4f} over 20 sequences, "
                     f"{elapsed:.1f}s < 120s")
    assert ok


def test_a3_suboptimality_bound():
    start = time.perf_counter()
    m = linear_mdp(np.random.default_rng(7))
    radii = [1.0] * m.horizon
    vstar, pstar = optimal_values(m)
    T = 200
    actor = ActorConfig.theorem_stepsize(T, m.max_actions)
    r_opt = optimization_error(m.horizon, m.max_actions, T)
    hits, worst_margin = 0, np.inf
    for seed in range(20):
        ds = collect_dataset(m, BehaviorPlan(TabularPolicy.uniform(m), 5000), seed)
        stats = analysis.ProbeStatistics(m, analysis.make_probes(m, radii, 10, seed), radii)
        beta = analysis.calibrated_beta(ds, stats, 1.0, 0.1, 200, seed)
        trace = run_pacle(ds, m, actor, CriticConfig(radii, beta))
        gap = vstar.v1 - evaluate_policy_exact(m, trace.mixture).v1
        bound = analysis.uncertainty(pstar, beta, build_covariances(ds, m), m) + r_opt + 0.02
        hits += gap <= bound
        worst_margin = min(worst_margin, bound - gap)
    elapsed = time.perf_counter() - start
    ok = hits >= 18 and elapsed < 600
    record_criterion("A3", ok, f"bound held in {hits}/20 seeds (need 18), n = {ds.n}, "
                     f"smallest margin {worst_margin:.3f}, {elapsed:.1f}s < 600s")
    assert ok


def test_a4_pessimism_beats_greedy():
    start = time.perf_counter()
    m = coverage_gap_mdp()
    vstar = optimal_values(m)[0].v1
    stats = analysis.ProbeStatistics(m, analysis.make_probes(m, [1.0], 0, 0), [1.0])
    T = 200
    actor = ActorConfig.theorem_stepsize(T, m.max_actions)
    pacle, greedy = [], []
    for seed in range(20):
        ds = coverage_gap_dataset(m, 400, seed)
        pol, _ = greedy_lsvi(ds, m)
        greedy.append(vstar - evaluate_policy_exact(m, pol).v1)
        beta = analysis.calibrated_beta(ds, stats, 1.0, 0.1, 200, seed)
        trace = run_pacle(ds, m, actor, CriticConfig([1.0], beta))
        pacle.append(vstar - evaluate_policy_exact(m, trace.mixture).v1)
    elapsed = time.perf_counter() - start
    ok = np.median(pacle) < np.median(greedy) and elapsed < 300
    record_criterion("A4", ok, f"median suboptimality PACLE {np.median(pacle):.3f} < greedy-LSVI "
                     f"{np.median(greedy):.3f} over 20 seeds, {elapsed:.1f}s < 300s")
    assert ok


def test_a5_good_event_frequency():
    start = time.perf_counter()
    m = linear_mdp(np.random.default_rng(123))
    stats = analysis.ProbeStatistics(m, analysis.make_probes(m, [1.0, 1.0], 10, 7), [1.0, 1.0])
    T = 100
    eta = math.sqrt(math.log(m.max_actions) / T)
    R = 500
    hit_formula, hit_cal = np.zeros(2), np.zeros(2)
    for k in range(R):
        ds = collect_dataset(m, BehaviorPlan(TabularPolicy.uniform(m), 500), 1000 + k)
        err = np.array(stats.errors(ds, 1.0))
        hit_formula += err <= np.array(pessimism_vector(0.1, m.dims, ds.stage_counts, T, eta))
        hit_cal += err <= np.array(analysis.calibrated_beta(ds, stats, 1.0, 0.1, 100, k))
    elapsed = time.perf_counter() - start
    f, c = hit_formula / R, hit_cal / R
    ok = f.min() >= 0.9 and c.min() >= 0.9 and elapsed < 600
    record_criterion("A5", ok, f"per-stage frequency formula {np.round(f, 3).tolist()}, calibrated "
                     f"{np.round(c, 3).tolist()} >= 0.9 over {R} resamples, {elapsed:.1f}s < 600s")
    assert ok


def _a6_kl():
    # adjacent u differ in one coordinate; every (stage, coordinate) flip is checked
    d, H, n = 2, 2, 132
    u = np.ones((H, d))
    worst = 0.0
    for h, i in itertools.product(range(H), range(d)):
        v = u.copy()
        v[h, i] = -1
        a, ds = make_lower_bound_instance(d, H, n, u, rng_seed=0)
        b, _ = make_lower_bound_instance(d, H, n, v, rng_seed=0)
        worst = max(worst, abs(kl_between_datasets(a, b, ds) - kl_closed_form(a)))
    return worst


def _a6_value_gap():
    worst = 0.0
    rng = np.random.default_rng(5)
    for d in (1, 2, 3):
        for H in (1, 2):
            u = rng.choice([-1.0, 1.0], size=(H, d))
            n = 2 * d ** 3 * H ** 3
            inst, _ = make_lower_bound_instance(d, H, n + (-n) % H, u, rng_seed=0)
            vstar = optimal_values(inst.mdp)[0].v1
            for table in random_stage_policies(inst, 25, d * 10 + H):
                dp = vstar - evaluate_policy_exact(inst.mdp, TabularPolicy(tuple(t[None] for t in table))).v1
                worst = max(worst, abs(value_gap(inst, table) - dp))
                assert value_gap(inst, table) >= hamming_reduction(inst, table)[0] - 1e-10
    return worst


def test_a6_lower_bound_identities():
    kl_err = _a6_kl()
    gap_err = _a6_value_gap()
    base = 512
    inst, ds = make_lower_bound_instance(2, 2, base, np.ones(4), rng_seed=0)
    inst2, ds2 = make_lower_bound_instance(2, 2, 2 * base, np.ones(4), rng_seed=0)
    u1, bound1 = uncertainty_upper_check(inst, ds, 1000, 0)
    u2, bound2 = uncertainty_upper_check(inst2, ds2, 1000, 0)
    ratio = u1 / u2
    checks = {"kl": kl_err <= 1e-10, "value_gap": gap_err <= 1e-10,
              "U<=bound": u1 <= bound1 and u2 <= bound2, "scaling": abs(ratio / math.sqrt(2) - 1) <= 0.1}
    ok = all(checks.values())
    record_criterion("A6", ok, f"|KL - closed form| = {kl_err:.3g} (<= 1e-10: {checks['kl']}); "
                     f"value_gap error {gap_err:.1e}; max U {u1:.3f} <= {bound1:.3f}; "
                     f"U(n)/U(2n) = {ratio:.3f} vs sqrt2 within 10%")
    assert ok


def test_a7_closedness_fixtures():
    ma = make_chain_mdp(3, "a")
    ra = closedness_report(ma, [1.0] * ma.horizon, 20, 0)
    mb = make_chain_mdp(3, "b")
    rb = closedness_report(mb, [1.0] * mb.horizon, 20, 0, extra=[chain_adversarial_probe(mb)])
    ok = max(ra.eps) <= 1e-7 and rb.eps[0] >= 1 - 1e-6
    record_criterion("A7", ok, f"chain (a) max eps {max(ra.eps):.1e} <= 1e-7; chain (b) eps_1 {rb.eps[0]:.6f} "
                     ">= 1 - 1e-6")
    assert ok


def _zoom_min(objective, feasible, dim, radius, rounds=12, points=41):
    """Grid search that re-centres on the best feasible point and shrinks the box."""
    center = np.zeros(dim)
    best = np.inf
    for _ in range(rounds):
        axis = np.linspace(-radius, radius, points)
        grid = center + np.stack(np.meshgrid(*[axis] * dim, indexing="ij"), -1).reshape(-1, dim)
        keep = feasible(grid)
        if keep.any():
            vals = objective(grid[keep])
            i = int(np.argmin(vals))
            if vals[i] < best:
                best, center = float(vals[i]), grid[keep][i]
        radius *= 0.3
    return best


def _critic_grid_oracle(m, ds, pol, beta, radius):
    """Minimum of the critic objective over a grid in xi-space (H = 1, or H = 2 with d = 1)."""
    reg = RegressionData(ds, m)
    maps = reg.affine_maps(pol)
    covs = reg.covariances
    phi1 = initial_features(m, pol)
    chol = [np.linalg.cholesky(c.matrix) for c in covs]
    H, dims = m.horizon, m.dims

    def unpack(u):
        # u lives in the product of unit balls; xi_h = beta_h L_h^{-T} u_h
        xs, off = [], 0
        for h in range(H):
            xs.append(beta[h] * np.linalg.solve(chol[h].T, u[:, off:off + dims[h]].T).T)
            off += dims[h]
        ws = [None] * H
        for h in range(H - 1, -1, -1):
            K, b = maps[h]
            ws[h] = xs[h] + b + (ws[h + 1] @ K.T if h < H - 1 else 0)
        return ws

    def feasible(u):
        ok = np.ones(len(u), bool)
        off = 0
        for h in range(H):
            ok &= np.linalg.norm(u[:, off:off + dims[h]], axis=1) <= 1
            off += dims[h]
        for w in unpack(u):
            ok &= np.linalg.norm(w, axis=1) <= radius
        return ok

    return _zoom_min(lambda u: unpack(u)[0] @ phi1, feasible, sum(dims), 1.0)


def test_a8_solver_soundness():
    rng = np.random.default_rng(808)
    kkt, gaps, cases = [], [], 0
    shapes = [(1, 1), (2, 1), (3, 1), (1, 2)]
    for d, H in shapes:
        done = 0
        while done < 5:
            m = random_tabular_mdp(rng, max_horizon=H, dim=d)
            if m.horizon != H:
                continue
            ds = collect_dataset(m, BehaviorPlan(TabularPolicy.uniform(m), int(rng.integers(1, 15))),
                                 int(rng.integers(1 << 30)))
            pol = SoftmaxPolicy(tuple(rng.normal(size=dd) for dd in m.dims))
            beta = rng.uniform(0.2, 3, size=H)
            try:
                sol = run_critic(RegressionData(ds, m), pol, CriticConfig([1.0] * H, beta))
            except CriticInfeasible:
                continue
            grid = _critic_grid_oracle(m, ds, pol, beta, 1.0)
            kkt.append(sol.report.kkt_residual)
            gaps.append(abs(sol.value - grid))
            done += 1
            cases += 1
    ok = max(kkt) <= 1e-6 and max(gaps) <= 1e-3
    record_criterion("A8", ok, f"max KKT residual {max(kkt):.1e} <= 1e-6, max |solver - grid| {max(gaps):.1e} "
                     f"<= 1e-3 on {cases} critic programs with d <= 3")
    assert ok


def test_a9_nearby_policies():
    rng = np.random.default_rng(909)
    worst = -np.inf
    for _ in range(1000):
        S, A, d = int(rng.integers(1, 6)), int(rng.integers(2, 7)), int(rng.integers(1, 6))
        f = rng.normal(size=(S, A, d))
        f /= np.maximum(np.linalg.norm(f, axis=-1, keepdims=True), 1.0)
        theta = rng.normal(size=d) * rng.uniform(0, 20)
        step = rng.normal(size=d)
        step *= rng.uniform(0, 0.5) / np.linalg.norm(step)
        worst = max(worst, softmax_l1_distance(f, theta, theta + step) / (8 * np.linalg.norm(step)))
    ok = worst <= 1
    record_criterion("A9", ok, f"max ||pi' - pi||_1 / (8 ||theta' - theta||) = {worst:.3f} <= 1 over 1000 draws")
    assert ok
